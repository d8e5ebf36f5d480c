//! A forum whose operator locks one moderation stream and offers another
//! that readers may switch off.

use std::collections::BTreeSet;

use plurinet::aggregator::{AuthorityStream, FeedOptions, ForumConfig, PayloadView, SubscriptionSet};
use plurinet::moderation::{ModAction, Target};
use plurinet::node::{Node, NodeConfig};
use plurinet::{EntryRef, Keypair, PayloadKind, StreamKind};

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let mut node = Node::open(NodeConfig::with_data_dir(dir.path())).unwrap();
    let (poster, legal, style) = (key(1), key(2), key(3));

    let board = node.create_stream_at(&poster, "board", StreamKind::Content, &[], None, 100).unwrap();
    for text in ["welcome", "illegal material", "ALL CAPS RANT", "nice thread"] {
        node.append_at(&poster, &board, PayloadKind::Post, text.as_bytes(), None, 101).unwrap();
    }
    let legal_id = node.create_stream_at(&legal, "legal", StreamKind::Moderation, &[], None, 100).unwrap();
    let style_id = node.create_stream_at(&style, "style", StreamKind::Moderation, &[], None, 100).unwrap();
    node.publish_mod_at(&legal, &legal_id, &ModAction::deny(Target::Entry(EntryRef::new(board, 2))), 200).unwrap();
    node.publish_mod_at(&style, &style_id, &ModAction::deny(Target::Entry(EntryRef::new(board, 3))), 200).unwrap();
    node.add_forum(ForumConfig {
        content_streams: vec![board],
        default_streams: vec![
            AuthorityStream { locked: true, stream_id: legal_id },
            AuthorityStream { locked: false, stream_id: style_id },
        ],
        forum_id: "town".into(),
        moderator_streams: vec![],
    })
    .unwrap();

    let everyone = SubscriptionSet::default();
    let opted_out = SubscriptionSet { disabled_defaults: BTreeSet::from([legal_id, style_id]), ..Default::default() };
    for (who, subs) in [("default reader", &everyone), ("reader opting out of both", &opted_out)] {
        let feed = node.forum_feed("town", subs, &BTreeSet::new(), FeedOptions::at(300)).unwrap();
        let texts: Vec<String> = feed
            .items
            .iter()
            .map(|i| match &i.payload {
                PayloadView::Resolved { text: Some(t), .. } => t.clone(),
                _ => "<unresolved>".into(),
            })
            .collect();
        println!("{who}: {texts:?} ({} hidden)", feed.hidden.len());
    }

    let diff = node.forum_diff("town", &everyone, &BTreeSet::new(), FeedOptions::at(300)).unwrap();
    for h in diff.hidden {
        println!("seq {} hidden ({:?}) by {:?}", h.entry.seq, h.reason, h.sources);
    }
}

fn key(i: u8) -> Keypair {
    Keypair::generate(Some(&[i; 32])).unwrap()
}
