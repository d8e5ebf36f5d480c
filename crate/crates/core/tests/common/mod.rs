//! Shared builders for the integration suites.
#![allow(dead_code)]

pub mod criteria;
pub mod gen;
pub mod http;
pub mod oracle;

use std::collections::BTreeMap;
use std::path::Path;

use plurinet::aggregator::ContentIndex;
use plurinet::moderation::{self, ModAction};
use plurinet::node::{Node, NodeConfig};
use plurinet::{ContentEntry, Hash, Keypair, PayloadKind, StreamId, StreamKind, StreamState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn key(i: u32) -> Keypair {
    Keypair::from_seed(Hash::of(format!("test-key:{i}").as_bytes()).0)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Signed streams plus their payloads, built in memory.
#[derive(Default, Clone)]
pub struct World {
    pub streams: BTreeMap<StreamId, StreamState>,
    pub blobs: BTreeMap<Hash, Vec<u8>>,
}

impl World {
    pub fn new() -> World {
        World::default()
    }

    pub fn stream(&mut self, owner: &Keypair, name: &str, kind: StreamKind, scope: Option<StreamId>) -> StreamId {
        let s = StreamState::create_with(owner, name, kind, &[], scope, 1_000).unwrap();
        let id = s.stream_id();
        self.streams.insert(id, s);
        id
    }

    pub fn content(&mut self, owner: &Keypair, name: &str) -> StreamId {
        self.stream(owner, name, StreamKind::Content, None)
    }

    pub fn moderation(&mut self, owner: &Keypair, name: &str) -> StreamId {
        self.stream(owner, name, StreamKind::Moderation, None)
    }

    pub fn post(&mut self, id: &StreamId, author: &Keypair, text: &str, ts: u64) -> ContentEntry {
        let s = self.streams.get_mut(id).unwrap();
        let e = s.push(author, PayloadKind::Post, text.as_bytes(), None, ts).unwrap();
        self.blobs.insert(e.content_hash, text.as_bytes().to_vec());
        e
    }

    pub fn act(&mut self, id: &StreamId, author: &Keypair, action: &ModAction, ts: u64) -> ContentEntry {
        let s = self.streams.get_mut(id).unwrap();
        let (e, payload) = moderation::publish(s, author, action, ts).unwrap();
        self.blobs.insert(e.content_hash, payload);
        e
    }

    pub fn states(&self) -> Vec<StreamState> {
        self.streams.values().cloned().collect()
    }

    pub fn index(&self) -> ContentIndex {
        let mut index = ContentIndex::new();
        let blobs = |h: &Hash| self.blobs.get(h).cloned();
        let report = index.ingest(&self.states(), &blobs);
        assert!(report.rejected.is_empty(), "{:?}", report.rejected);
        index
    }
}

pub fn open_node(dir: &Path) -> Node {
    Node::open(NodeConfig::with_data_dir(dir)).unwrap()
}
