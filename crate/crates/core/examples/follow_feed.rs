//! A personal timeline: each author publishes an allow list naming
//! themselves, and the reader follows those lists.

use std::collections::BTreeSet;

use plurinet::aggregator::{FeedOptions, SubscriptionSet};
use plurinet::moderation::{ModAction, Target};
use plurinet::node::{Node, NodeConfig};
use plurinet::{Keypair, PayloadKind, StreamKind};

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let mut node = Node::open(NodeConfig::with_data_dir(dir.path())).unwrap();
    let (mut walls, mut lists) = (vec![], vec![]);
    for (i, name) in ["ana", "bo", "cy"].iter().enumerate() {
        let k = Keypair::generate(Some(&[i as u8 + 1; 32])).unwrap();
        let wall = node.create_stream_at(&k, name, StreamKind::Content, &[], None, 100).unwrap();
        for n in 0..2u64 {
            node.append_at(&k, &wall, PayloadKind::Post, format!("{name} says {n}").as_bytes(), None, 100 + 10 * n + i as u64).unwrap();
        }
        let list = node.create_stream_at(&k, &format!("{name}-follow"), StreamKind::Moderation, &[], None, 100).unwrap();
        node.publish_mod_at(&k, &list, &ModAction::allow(Target::Principal(k.principal().id())), 150).unwrap();
        walls.push(wall);
        lists.push(list);
    }

    // follow ana and bo; mute bo's wall
    let subs = SubscriptionSet {
        follows: BTreeSet::from([lists[0], lists[1]]),
        muted: BTreeSet::from([walls[1]]),
        ..Default::default()
    };
    let feed = node.follow_feed(&subs, FeedOptions::at(500));
    for item in &feed.items {
        println!("{} #{} at {}", item.entry.stream_id, item.entry.seq, item.entry.timestamp);
    }
    for h in &feed.hidden {
        println!("hidden {} #{}: {:?}", h.entry.stream_id, h.entry.seq, h.reason);
    }
}
