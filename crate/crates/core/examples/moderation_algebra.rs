//! Two moderation streams, one including the other, combined two ways.

use plurinet::moderation::{apply_filter, combine, resolve, Combinator, FilterMode, ModAction, Target, DEFAULT_DEPTH_LIMIT};
use plurinet::node::{Node, NodeConfig};
use plurinet::{EntryRef, Keypair, PayloadKind, StreamKind};

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let mut node = Node::open(NodeConfig::with_data_dir(dir.path())).unwrap();
    let (author, strict, lenient) = (key(1), key(2), key(3));

    let wall = node.create_stream_at(&author, "wall", StreamKind::Content, &[], None, 100).unwrap();
    for i in 1..=4u64 {
        node.append_at(&author, &wall, PayloadKind::Post, format!("post {i}").as_bytes(), None, 100 + i).unwrap();
    }
    let s = node.create_stream_at(&strict, "strict", StreamKind::Moderation, &[], None, 100).unwrap();
    let l = node.create_stream_at(&lenient, "lenient", StreamKind::Moderation, &[], None, 100).unwrap();
    node.publish_mod_at(&strict, &s, &ModAction::deny(Target::Entry(EntryRef::new(wall, 2))), 200).unwrap();
    node.publish_mod_at(&lenient, &l, &ModAction::allow(Target::Entry(EntryRef::new(wall, 2))), 201).unwrap();
    node.publish_mod_at(&lenient, &l, &ModAction::deny(Target::Entry(EntryRef::new(wall, 4))), 202).unwrap();
    node.publish_mod_at(&lenient, &l, &ModAction::include(s), 203).unwrap();

    let index = node.index();
    let raw = node.stream(&wall).unwrap().entries().to_vec();
    let policies = [resolve(&s, index.as_ref(), DEFAULT_DEPTH_LIMIT), resolve(&l, index.as_ref(), DEFAULT_DEPTH_LIMIT)];
    for combinator in [Combinator::Union, Combinator::DenyOverrides] {
        let policy = combine(&policies, combinator);
        let (visible, diff) = apply_filter(&policy, &raw, FilterMode::DenyList);
        let seqs: Vec<u64> = visible.iter().map(|e| e.seq).collect();
        println!("{combinator:?}: visible seqs {seqs:?}");
        for h in &diff.hidden {
            println!("  hidden seq {} ({:?}) by {:?}", h.entry.seq, h.reason, h.sources);
        }
    }
}

fn key(i: u8) -> Keypair {
    Keypair::generate(Some(&[i; 32])).unwrap()
}
