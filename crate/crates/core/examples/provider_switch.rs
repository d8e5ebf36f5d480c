//! Move a stream's payloads to a new store, then lose the old one.

use std::collections::BTreeSet;

use plurinet::aggregator::{FeedOptions, ForumConfig, SubscriptionSet};
use plurinet::node::{Node, NodeConfig};
use plurinet::storage::{Attribution, Backend, BlobStoreConfig};
use plurinet::{Keypair, PayloadKind, StreamKind};

fn store(id: &str) -> BlobStoreConfig {
    BlobStoreConfig { backend: Backend::Filesystem, location: format!("provider-{id}"), refusal: vec![], store_id: id.into() }
}

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let mut node = Node::open(NodeConfig::with_data_dir(dir.path())).unwrap();
    node.add_store(store("old")).unwrap();
    node.add_store(store("new")).unwrap();
    let author = Keypair::generate(Some(&[9; 32])).unwrap();
    let wall = node.create_stream_at(&author, "wall", StreamKind::Content, &[], None, 100).unwrap();
    for i in 1..=5u64 {
        let text = format!("post {i}");
        let (_, e) = node.stream(&wall).unwrap().append_at(&author, PayloadKind::Post, text.as_bytes(), None, 100 + i).unwrap();
        let old = node.stores().by_id("old").unwrap().clone();
        old.put_attributed(text.as_bytes(), &Attribution::new(wall, author.principal().id())).unwrap();
        node.submit_entry(e, None).unwrap();
    }
    node.add_forum(ForumConfig { content_streams: vec![wall], default_streams: vec![], forum_id: "f".into(), moderator_streams: vec![] })
        .unwrap();
    let feed = |node: &Node| node.forum_feed("f", &SubscriptionSet::default(), &BTreeSet::new(), FeedOptions::at(1)).unwrap();
    let before = feed(&node);

    let report = node.switch_provider(&wall, "old", "new", Some(&author)).unwrap();
    println!("issued {} hint(s), {} unresolved", report.hints_issued.len(), report.unresolved.len());
    node.take_offline("old").unwrap();
    std::fs::remove_dir_all(dir.path().join("provider-old")).unwrap();

    let after = feed(&node);
    println!("feed unchanged after losing the old store: {}", before.canonical_bytes_timeless() == after.canonical_bytes_timeless());
}
