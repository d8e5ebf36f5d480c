//! A node: verified streams, blob stores and the derived index, persisted
//! under one data directory.
//!
//! ```text
//! <data_dir>/node_key.json      node signing key (hints, sync responses)
//! <data_dir>/streams/<id>.csl   one verified stream log each
//! <data_dir>/forks/<id>.json    fork evidence for flagged streams
//! <data_dir>/blobs/             the local filesystem store
//! <data_dir>/hints.jsonl        storage hints
//! <data_dir>/stores.json        stores added with `store add`
//! <data_dir>/forums.json        forums added with `forum add`
//! <data_dir>/subscriptions.json optional; travels with exports
//! ```
//!
//! Entries are appended to their `.csl` file one line at a time, so a crash
//! can leave at most one torn final line. Opening the node truncates such a
//! line; any other damage refuses startup.

use std::collections::BTreeSet;
use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::aggregator::{
    self, AuthorityStream, ContentIndex, Feed, FeedOptions, ForumConfig, ModeratorRanking, RankingWeights,
    SubscriptionSet,
};
use crate::canonical;
use crate::hash::Hash;
use crate::identity::{KeyFile, Keypair, Principal, PrincipalId};
use crate::migration::{self, Bundle, ExportSource, Manifest, MigrationError, MigrationReport, Selector};
use crate::moderation::{self, ContentionReport, ModAction, ModStreamFetcher, ModerationDiff, DEFAULT_DEPTH_LIMIT};
use crate::storage::{self, Attribution, BlobStore, BlobStoreConfig, FsStore, RefusalTarget, StorageHint, StoreError, StoreSet};
use crate::stream::{
    now_unix, parse_csl, verify_stream, ContentEntry, EntryRef, ForkEvidence, GenesisRecord, PayloadKind, Reason,
    StreamError, StreamId, StreamKind, StreamState, ValidationReport,
};
use crate::sync::{self, GossipReport, HttpPeer, Peer, PeerAddress, StreamMap, SyncError};

pub const DEFAULT_LISTEN_ADDR: &str = "127.0.0.1:7878";
pub const LOCAL_STORE_ID: &str = "local";

#[derive(Debug, thiserror::Error)]
pub enum NodeError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("rejected: {0}")]
    Validation(String),
    #[error("refused: {0}")]
    Refused(String),
    #[error("bad digest: {0}")]
    BadDigest(String),
    #[error("stream {0} is forked; appends are refused")]
    Forked(StreamId),
    #[error("unauthorized writer: {0}")]
    Unauthorized(String),
    #[error("config: {0}")]
    Config(String),
    #[error("corrupt data directory: {0}")]
    Corrupt(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("peer unreachable: {0}")]
    PeerUnreachable(String),
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

impl NodeError {
    pub fn code(&self) -> &'static str {
        match self {
            NodeError::NotFound(_) => "NOT_FOUND",
            NodeError::Validation(_) => "VALIDATION_REJECTED",
            NodeError::Refused(_) => "REFUSED",
            NodeError::BadDigest(_) => "BAD_DIGEST",
            NodeError::Forked(_) => "FORKED_STREAM",
            NodeError::Unauthorized(_) => "UNAUTHORIZED_WRITER",
            NodeError::Config(_) => "BAD_CONFIG",
            NodeError::Corrupt(_) => "CORRUPT_DATA",
            NodeError::Conflict(_) => "CONFLICT",
            NodeError::PeerUnreachable(_) => "PEER_UNREACHABLE",
            NodeError::Io(_) => "IO_ERROR",
        }
    }

    pub fn http_status(&self) -> u16 {
        match self {
            NodeError::NotFound(_) => 404,
            NodeError::Validation(_) | NodeError::BadDigest(_) | NodeError::Config(_) => 400,
            NodeError::Refused(_) | NodeError::Unauthorized(_) => 403,
            NodeError::Forked(_) | NodeError::Conflict(_) => 409,
            NodeError::PeerUnreachable(_) => 502,
            NodeError::Corrupt(_) | NodeError::Io(_) => 500,
        }
    }

    fn from_report(report: &ValidationReport) -> NodeError {
        if report.reasons.contains(&Reason::UnauthorizedWriter) {
            NodeError::Unauthorized(report.to_string())
        } else {
            NodeError::Validation(report.to_string())
        }
    }
}

impl From<StreamError> for NodeError {
    fn from(e: StreamError) -> Self {
        match e {
            StreamError::UnauthorizedWriter => NodeError::Unauthorized(e.to_string()),
            StreamError::Rejected(r) => NodeError::from_report(&r),
            other => NodeError::Validation(other.to_string()),
        }
    }
}

impl From<StoreError> for NodeError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::Refused(m) => NodeError::Refused(m),
            StoreError::Unreachable(m) => NodeError::PeerUnreachable(m),
            StoreError::Io(e) => NodeError::Io(e),
            other => NodeError::Validation(other.to_string()),
        }
    }
}

impl From<MigrationError> for NodeError {
    fn from(e: MigrationError) -> Self {
        match e {
            MigrationError::BadDigest(m) => NodeError::BadDigest(m),
            MigrationError::UnknownStream(id) => NodeError::NotFound(format!("stream {id}")),
            MigrationError::Io(e) => NodeError::Io(e),
            MigrationError::Malformed(m) => NodeError::Validation(m),
        }
    }
}

impl From<SyncError> for NodeError {
    fn from(e: SyncError) -> Self {
        match e {
            SyncError::PeerUnreachable(m) => NodeError::PeerUnreachable(m),
            SyncError::ValidationRejected(m) => NodeError::Validation(m),
        }
    }
}

fn default_data_dir() -> PathBuf {
    PathBuf::from("plurinet-data")
}

fn default_listen() -> String {
    DEFAULT_LISTEN_ADDR.to_string()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeConfig {
    #[serde(default = "default_data_dir")]
    pub data_dir: PathBuf,
    /// Authority streams applied to every forum this node serves.
    #[serde(default)]
    pub default_mod_streams: Vec<AuthorityStream>,
    #[serde(default)]
    pub forums: Vec<ForumConfig>,
    #[serde(default = "default_listen")]
    pub listen_addr: String,
    #[serde(default)]
    pub peers: Vec<PeerAddress>,
    #[serde(default)]
    pub stores: Vec<BlobStoreConfig>,
}

impl Default for NodeConfig {
    fn default() -> Self {
        NodeConfig {
            data_dir: default_data_dir(),
            default_mod_streams: vec![],
            forums: vec![],
            listen_addr: default_listen(),
            peers: vec![],
            stores: vec![],
        }
    }
}

impl NodeConfig {
    pub fn with_data_dir(data_dir: impl Into<PathBuf>) -> NodeConfig {
        NodeConfig { data_dir: data_dir.into(), ..NodeConfig::default() }
    }

    pub fn parse(text: &[u8]) -> Result<NodeConfig, NodeError> {
        let config: NodeConfig = serde_json::from_slice(text).map_err(|e| NodeError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<NodeConfig, NodeError> {
        let text = fs::read(path).map_err(|e| NodeError::Config(format!("{}: {e}", path.display())))?;
        NodeConfig::parse(&text).map_err(|e| NodeError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), NodeError> {
        let mut forum_ids = BTreeSet::new();
        for f in &self.forums {
            f.validate().map_err(NodeError::Config)?;
            if !forum_ids.insert(&f.forum_id) {
                return Err(NodeError::Config(format!("duplicate forum id `{}`", f.forum_id)));
            }
        }
        let mut store_ids = BTreeSet::from([LOCAL_STORE_ID]);
        for s in &self.stores {
            if !store_ids.insert(s.store_id.as_str()) {
                return Err(NodeError::Config(format!("duplicate or reserved store id `{}`", s.store_id)));
            }
        }
        for p in &self.peers {
            p.transport().map_err(NodeError::Config)?;
        }
        Ok(())
    }
}

/// Writes `bytes` to `path` through a temp file and rename.
fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, NodeError> {
    let Ok(bytes) = fs::read(path) else { return Ok(vec![]) };
    let ends_clean = bytes.ends_with(b"\n");
    let lines: Vec<&[u8]> = bytes.split(|b| *b == b'\n').filter(|l| !l.is_empty()).collect();
    let mut out = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        match serde_json::from_slice(line) {
            Ok(v) => out.push(v),
            // a torn final line from an interrupted append
            Err(_) if i + 1 == lines.len() && !ends_clean => {}
            Err(e) => return Err(NodeError::Corrupt(format!("{} line {}: {e}", path.display(), i + 1))),
        }
    }
    Ok(out)
}

fn read_json_or_default<T: for<'de> Deserialize<'de> + Default>(path: &Path) -> Result<T, NodeError> {
    match fs::read(path) {
        Ok(bytes) => serde_json::from_slice(&bytes).map_err(|e| NodeError::Corrupt(format!("{}: {e}", path.display()))),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(T::default()),
        Err(e) => Err(e.into()),
    }
}

pub struct Node {
    config: NodeConfig,
    data_dir: PathBuf,
    key: Keypair,
    streams: StreamMap,
    hints: Vec<StorageHint>,
    stores: StoreSet,
    added_stores: Vec<BlobStoreConfig>,
    added_forums: Vec<ForumConfig>,
    index: Arc<ContentIndex>,
    recovery_notes: Vec<String>,
}

impl std::fmt::Debug for Node {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Node")
            .field("data_dir", &self.data_dir)
            .field("principal", &self.key.principal().id())
            .field("streams", &self.streams.len())
            .finish()
    }
}

impl Node {
    /// Opens (or initializes) the data directory and rebuilds the index.
    pub fn open(config: NodeConfig) -> Result<Node, NodeError> {
        config.validate()?;
        let data_dir = config.data_dir.clone();
        for sub in ["streams", "forks", "blobs"] {
            fs::create_dir_all(data_dir.join(sub))?;
        }
        let key = Self::load_or_create_key(&data_dir)?;
        let mut recovery_notes = Vec::new();
        let streams = Self::load_streams(&data_dir, &mut recovery_notes)?;
        let hints: Vec<StorageHint> = read_jsonl(&data_dir.join("hints.jsonl"))?;
        let added_stores: Vec<BlobStoreConfig> = read_json_or_default(&data_dir.join("stores.json"))?;
        let added_forums: Vec<ForumConfig> = read_json_or_default(&data_dir.join("forums.json"))?;

        let local: Arc<dyn BlobStore> = Arc::new(FsStore::open(LOCAL_STORE_ID, data_dir.join("blobs"))?);
        let mut stores = StoreSet::new(vec![local]);
        for sc in config.stores.iter().chain(&added_stores) {
            if stores.by_id(&sc.store_id).is_some() {
                return Err(NodeError::Config(format!("duplicate store id `{}`", sc.store_id)));
            }
            stores.push(sc.open(&data_dir).map_err(|e| NodeError::Config(format!("store {}: {e}", sc.store_id)))?);
        }
        let mut node = Node {
            config,
            data_dir,
            key,
            streams,
            hints: hints.into_iter().filter(StorageHint::verify).collect(),
            stores,
            added_stores,
            added_forums,
            index: Arc::new(ContentIndex::new()),
            recovery_notes,
        };
        node.rebuild_index();
        Ok(node)
    }

    fn load_or_create_key(data_dir: &Path) -> Result<Keypair, NodeError> {
        let path = data_dir.join("node_key.json");
        match fs::read(&path) {
            Ok(bytes) => {
                let kf: KeyFile =
                    serde_json::from_slice(&bytes).map_err(|e| NodeError::Corrupt(format!("node_key.json: {e}")))?;
                kf.to_keypair().map_err(|e| NodeError::Corrupt(format!("node_key.json: {e}")))
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                let key = Keypair::generate(None).expect("random key");
                write_atomic(&path, &canonical::to_canonical_bytes(&KeyFile::from_keypair(&key)).expect("key"))?;
                restrict_permissions(&path);
                Ok(key)
            }
            Err(e) => Err(e.into()),
        }
    }

    fn load_streams(data_dir: &Path, notes: &mut Vec<String>) -> Result<StreamMap, NodeError> {
        let mut streams = StreamMap::new();
        let dir = data_dir.join("streams");
        let mut paths: Vec<PathBuf> = fs::read_dir(&dir)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?;
        paths.sort();
        for path in paths {
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
            if name.ends_with(".tmp") {
                fs::remove_file(&path)?;
                notes.push(format!("removed interrupted write {name}"));
                continue;
            }
            let Some(stem) = name.strip_suffix(".csl") else { continue };
            let corrupt = |m: String| NodeError::Corrupt(format!("streams/{name}: {m}"));
            let id: StreamId = stem.parse().map_err(|e| corrupt(format!("bad file name: {e}")))?;
            let bytes = fs::read(&path)?;
            let records = parse_csl(&bytes).map_err(|e| corrupt(e.to_string()))?;
            let mut state =
                StreamState::from_records(records.genesis, records.entries).map_err(|r| corrupt(r.to_string()))?;
            if state.stream_id() != id {
                return Err(corrupt("genesis belongs to a different stream".into()));
            }
            if records.torn_tail {
                write_atomic(&path, &state.to_csl())?;
                notes.push(format!("truncated torn final line of streams/{name}; head is seq {}", state.head_seq()));
            }
            let fork_path = data_dir.join("forks").join(format!("{id}.json"));
            if let Ok(ev_bytes) = fs::read(&fork_path) {
                let ev: ForkEvidence = serde_json::from_slice(&ev_bytes)
                    .map_err(|e| NodeError::Corrupt(format!("forks/{id}.json: {e}")))?;
                if !state.mark_forked(ev) {
                    return Err(NodeError::Corrupt(format!("forks/{id}.json is not valid evidence")));
                }
            }
            streams.insert(id, state);
        }
        Ok(streams)
    }

    fn resolver(&self) -> impl Fn(&Hash) -> Option<Vec<u8>> + '_ {
        let local = self.stores.by_id(LOCAL_STORE_ID).expect("local store").clone();
        move |h: &Hash| match local.get(h) {
            Ok(Some(b)) => Some(b.bytes),
            _ => storage::resolve(h, &self.hints, &self.stores).map(|b| b.bytes),
        }
    }

    pub fn rebuild_index(&mut self) {
        let mut index = ContentIndex::new();
        let states: Vec<StreamState> = self.streams.values().cloned().collect();
        index.ingest(&states, &self.resolver());
        self.index = Arc::new(index);
    }

    fn reindex(&mut self, ids: &BTreeSet<StreamId>) {
        if ids.is_empty() {
            return;
        }
        let states: Vec<StreamState> = ids.iter().filter_map(|id| self.streams.get(id).cloned()).collect();
        let mut index = (*self.index).clone();
        index.ingest(&states, &self.resolver());
        self.index = Arc::new(index);
    }

    pub fn config(&self) -> &NodeConfig {
        &self.config
    }

    pub fn data_dir(&self) -> &Path {
        &self.data_dir
    }

    pub fn key(&self) -> &Keypair {
        &self.key
    }

    pub fn principal(&self) -> Principal {
        self.key.principal()
    }

    pub fn streams(&self) -> &StreamMap {
        &self.streams
    }

    pub fn stream(&self, id: &StreamId) -> Result<&StreamState, NodeError> {
        self.streams.get(id).ok_or_else(|| NodeError::NotFound(format!("stream {id}")))
    }

    pub fn hints(&self) -> &[StorageHint] {
        &self.hints
    }

    pub fn stores(&self) -> &StoreSet {
        &self.stores
    }

    pub fn local_store(&self) -> Arc<dyn BlobStore> {
        self.stores.by_id(LOCAL_STORE_ID).expect("local store").clone()
    }

    /// Snapshot of the index; unaffected by later writes.
    pub fn index(&self) -> Arc<ContentIndex> {
        self.index.clone()
    }

    /// What opening the node had to repair.
    pub fn recovery_notes(&self) -> &[String] {
        &self.recovery_notes
    }

    fn stream_path(&self, id: &StreamId) -> PathBuf {
        self.data_dir.join("streams").join(format!("{id}.csl"))
    }

    fn persist_stream(&self, state: &StreamState) -> Result<(), NodeError> {
        let id = state.stream_id();
        write_atomic(&self.stream_path(&id), &state.to_csl())?;
        if let Some(ev) = state.fork_evidence() {
            let path = self.data_dir.join("forks").join(format!("{id}.json"));
            write_atomic(&path, &canonical::to_canonical_bytes(ev).expect("evidence"))?;
        }
        Ok(())
    }

    fn append_line(&self, id: &StreamId, entry: &ContentEntry) -> Result<(), NodeError> {
        let mut line = entry.canonical_bytes();
        line.push(b'\n');
        let mut f = OpenOptions::new().append(true).open(self.stream_path(id))?;
        f.write_all(&line)?;
        f.sync_data()?;
        Ok(())
    }

    /// Registers a stream from its signed genesis record.
    pub fn submit_genesis(&mut self, genesis: GenesisRecord) -> Result<StreamId, NodeError> {
        let report = verify_stream(&genesis, &[]);
        if !report.ok {
            return Err(NodeError::from_report(&report));
        }
        let id = genesis.stream_id;
        if let Some(existing) = self.streams.get(&id) {
            if *existing.genesis() == genesis {
                return Ok(id);
            }
            return Err(NodeError::Conflict(format!("stream {id} exists with a different genesis")));
        }
        let state = StreamState::from_records(genesis, vec![]).map_err(|r| NodeError::from_report(&r))?;
        self.persist_stream(&state)?;
        self.streams.insert(id, state);
        self.reindex(&BTreeSet::from([id]));
        Ok(id)
    }

    pub fn create_stream(
        &mut self,
        owner: &Keypair,
        name: &str,
        kind: StreamKind,
        writers: &[Principal],
        scope: Option<StreamId>,
    ) -> Result<StreamId, NodeError> {
        self.create_stream_at(owner, name, kind, writers, scope, now_unix())
    }

    pub fn create_stream_at(
        &mut self,
        owner: &Keypair,
        name: &str,
        kind: StreamKind,
        writers: &[Principal],
        scope: Option<StreamId>,
        created_at: u64,
    ) -> Result<StreamId, NodeError> {
        let id = StreamId::derive(&owner.principal(), name);
        if self.streams.contains_key(&id) {
            return Err(NodeError::Conflict(format!("stream {id} already exists")));
        }
        let state = StreamState::create_with(owner, name, kind, writers, scope, created_at)?;
        self.submit_genesis(state.genesis().clone())
    }

    /// Accepts an externally signed entry, storing its payload first if given.
    pub fn submit_entry(&mut self, entry: ContentEntry, payload: Option<&[u8]>) -> Result<ContentEntry, NodeError> {
        let id = entry.stream_id;
        let state = self.stream(&id)?;
        if state.is_forked() {
            return Err(NodeError::Forked(id));
        }
        let mut next = state.clone();
        next.accept(entry.clone()).map_err(|r| NodeError::from_report(&r))?;
        if let Some(bytes) = payload {
            if entry.payload_kind == PayloadKind::WriterUpdate {
                return Err(NodeError::Validation("WRITER_UPDATE carries its payload inline".into()));
            }
            if Hash::of(bytes) != entry.content_hash {
                return Err(NodeError::BadDigest("payload does not match content_hash".into()));
            }
            self.local_store().put_attributed(bytes, &Attribution::new(id, entry.author.id()))?;
        }
        self.append_line(&id, &entry)?;
        self.streams.insert(id, next);
        self.reindex(&BTreeSet::from([id]));
        Ok(entry)
    }

    /// Signs and appends on behalf of a key held by the caller.
    pub fn append(
        &mut self,
        author: &Keypair,
        stream: &StreamId,
        kind: PayloadKind,
        payload: &[u8],
        reply_to: Option<EntryRef>,
    ) -> Result<ContentEntry, NodeError> {
        self.append_at(author, stream, kind, payload, reply_to, now_unix())
    }

    pub fn append_at(
        &mut self,
        author: &Keypair,
        stream: &StreamId,
        kind: PayloadKind,
        payload: &[u8],
        reply_to: Option<EntryRef>,
        timestamp: u64,
    ) -> Result<ContentEntry, NodeError> {
        let state = self.stream(stream)?;
        if state.is_forked() {
            return Err(NodeError::Forked(*stream));
        }
        let (_, entry) = state.append_at(author, kind, payload, reply_to, timestamp)?;
        let blob = (kind != PayloadKind::WriterUpdate).then_some(payload);
        self.submit_entry(entry, blob)
    }

    pub fn publish_mod(&mut self, author: &Keypair, stream: &StreamId, action: &ModAction) -> Result<ContentEntry, NodeError> {
        self.publish_mod_at(author, stream, action, now_unix())
    }

    pub fn publish_mod_at(
        &mut self,
        author: &Keypair,
        stream: &StreamId,
        action: &ModAction,
        timestamp: u64,
    ) -> Result<ContentEntry, NodeError> {
        let mut state = self.stream(stream)?.clone();
        if state.is_forked() {
            return Err(NodeError::Forked(*stream));
        }
        let (entry, payload) = moderation::publish(&mut state, author, action, timestamp).map_err(|e| match e {
            moderation::PublishError::Stream(s) => NodeError::from(s),
            other => NodeError::Validation(other.to_string()),
        })?;
        self.submit_entry(entry, Some(&payload))
    }

    pub fn put_blob(&mut self, bytes: &[u8], attribution: &Attribution) -> Result<Hash, NodeError> {
        Ok(self.local_store().put_attributed(bytes, attribution)?)
    }

    pub fn get_blob(&self, hash: &Hash) -> Option<Vec<u8>> {
        self.resolver()(hash)
    }

    /// A payload this node holds itself (local or non-remote stores), as
    /// served on `GET /blobs/{hash}`. Never follows hints to other nodes.
    pub fn held_blob(&self, hash: &Hash) -> Result<Option<Vec<u8>>, NodeError> {
        let held = std::iter::once(LOCAL_STORE_ID).chain(
            self.config
                .stores
                .iter()
                .chain(&self.added_stores)
                .filter(|c| c.backend != storage::Backend::Remote)
                .map(|c| c.store_id.as_str()),
        );
        for id in held {
            if let Some(store) = self.stores.by_id(id) {
                if let Some(b) = store.get(hash)? {
                    return Ok(Some(b.bytes));
                }
            }
        }
        Ok(None)
    }

    pub fn add_hints(&mut self, new: &[StorageHint]) -> Result<usize, NodeError> {
        let mut lines = Vec::new();
        let mut added = 0;
        for h in new {
            if !h.verify() {
                return Err(NodeError::Validation(format!("hint for {} has a bad signature", h.content_hash)));
            }
            if !self.hints.contains(h) {
                lines.extend(canonical::to_canonical_bytes(h).expect("hint"));
                lines.push(b'\n');
                self.hints.push(h.clone());
                added += 1;
            }
        }
        if !lines.is_empty() {
            let mut f = OpenOptions::new().create(true).append(true).open(self.data_dir.join("hints.jsonl"))?;
            f.write_all(&lines)?;
            f.sync_data()?;
        }
        Ok(added)
    }

    /// Adds and persists a store.
    pub fn add_store(&mut self, config: BlobStoreConfig) -> Result<(), NodeError> {
        if self.stores.by_id(&config.store_id).is_some() {
            return Err(NodeError::Conflict(format!("store `{}` already configured", config.store_id)));
        }
        let store = config.open(&self.data_dir).map_err(|e| NodeError::Config(e.to_string()))?;
        self.added_stores.push(config);
        write_atomic(&self.data_dir.join("stores.json"), &canonical::to_canonical_bytes(&self.added_stores).expect("stores"))?;
        self.stores.push(store);
        Ok(())
    }

    /// Drops a store from the reachable set for this process (it went offline).
    pub fn take_offline(&mut self, store_id: &str) -> Result<(), NodeError> {
        if store_id == LOCAL_STORE_ID {
            return Err(NodeError::Validation("the local store cannot go offline".into()));
        }
        self.stores.remove(store_id).map(|_| ()).ok_or_else(|| NodeError::NotFound(format!("store `{store_id}`")))
    }

    fn store(&self, store_id: &str) -> Result<Arc<dyn BlobStore>, NodeError> {
        self.stores.by_id(store_id).cloned().ok_or_else(|| NodeError::NotFound(format!("store `{store_id}`")))
    }

    pub fn refuse(&mut self, store_id: &str, target: RefusalTarget) -> Result<(), NodeError> {
        self.store(store_id)?.refuse(target)?;
        self.rebuild_index();
        Ok(())
    }

    /// Deletes blobs in `store_id` that no known stream references.
    pub fn gc(&mut self, store_id: &str) -> Result<Vec<Hash>, NodeError> {
        let referenced: BTreeSet<Hash> = self.streams.values().flat_map(migration::referenced_blobs).collect();
        Ok(storage::gc_unreferenced(self.store(store_id)?.as_ref(), &referenced)?)
    }

    pub fn add_forum(&mut self, forum: ForumConfig) -> Result<(), NodeError> {
        forum.validate().map_err(NodeError::Config)?;
        if self.forums().iter().any(|f| f.forum_id == forum.forum_id) {
            return Err(NodeError::Conflict(format!("forum `{}` already exists", forum.forum_id)));
        }
        self.added_forums.push(forum);
        write_atomic(&self.data_dir.join("forums.json"), &canonical::to_canonical_bytes(&self.added_forums).expect("forums"))?;
        Ok(())
    }

    pub fn forums(&self) -> Vec<ForumConfig> {
        self.config.forums.iter().chain(&self.added_forums).cloned().collect()
    }

    /// The forum's config with the node's authority defaults merged in.
    pub fn forum(&self, forum_id: &str) -> Result<ForumConfig, NodeError> {
        let mut forum = self
            .forums()
            .into_iter()
            .find(|f| f.forum_id == forum_id)
            .ok_or_else(|| NodeError::NotFound(format!("forum `{forum_id}`")))?;
        for d in &self.config.default_mod_streams {
            if !forum.default_streams.iter().any(|x| x.stream_id == d.stream_id) {
                forum.default_streams.push(d.clone());
            }
        }
        Ok(forum)
    }

    /// Forum feed; `skip` removes moderator streams (not locked defaults) for this view.
    pub fn forum_feed(
        &self,
        forum_id: &str,
        subs: &SubscriptionSet,
        skip: &BTreeSet<StreamId>,
        opts: FeedOptions,
    ) -> Result<Feed, NodeError> {
        let mut forum = self.forum(forum_id)?;
        forum.moderator_streams.retain(|m| !skip.contains(m));
        Ok(aggregator::assemble_forum_feed(&forum, &self.index, subs, opts))
    }

    pub fn raw_forum_feed(&self, forum_id: &str, opts: FeedOptions) -> Result<Feed, NodeError> {
        let forum = self.forum(forum_id)?;
        Ok(aggregator::assemble_raw_feed(Some(&forum.content_streams), &self.index, opts))
    }

    pub fn forum_diff(
        &self,
        forum_id: &str,
        subs: &SubscriptionSet,
        skip: &BTreeSet<StreamId>,
        opts: FeedOptions,
    ) -> Result<ModerationDiff, NodeError> {
        let moderated = self.forum_feed(forum_id, subs, skip, opts)?;
        let raw = self.raw_forum_feed(forum_id, opts)?;
        aggregator::feed_diff(&moderated, &raw).map_err(|e| NodeError::Conflict(e.to_string()))
    }

    pub fn follow_feed(&self, subs: &SubscriptionSet, opts: FeedOptions) -> Feed {
        aggregator::assemble_follow_feed(subs, &self.index, opts)
    }

    /// Every moderation action `who` has published in indexed streams.
    pub fn history_of(&self, who: &PrincipalId) -> Vec<ModAction> {
        let mut out = Vec::new();
        for s in self.streams.values().filter(|s| s.kind() == StreamKind::Moderation) {
            if let Ok(view) = self.index.fetch(&s.stream_id()) {
                out.extend(view.actions.into_iter().filter(|a| a.author == *who).map(|a| a.action));
            }
        }
        out
    }

    /// Ranks `candidates` (all moderation streams if empty) for reader `who`.
    pub fn rank_moderators(&self, candidates: &[StreamId], who: Option<&PrincipalId>, now: u64) -> ModeratorRanking {
        let all: Vec<StreamId>;
        let candidates = if candidates.is_empty() {
            all = self.streams.values().filter(|s| s.kind() == StreamKind::Moderation).map(|s| s.stream_id()).collect();
            &all
        } else {
            candidates
        };
        let history = who.map(|w| self.history_of(w)).unwrap_or_default();
        aggregator::rank_moderators(candidates, &self.index, &history, now, RankingWeights::default())
    }

    /// Contention between two moderation streams over a forum's items (or everything).
    pub fn compare(&self, a: &StreamId, b: &StreamId, forum_id: Option<&str>) -> Result<ContentionReport, NodeError> {
        let streams = forum_id.map(|f| self.forum(f).map(|f| f.content_streams)).transpose()?;
        let raw: Vec<ContentEntry> = self.index.raw_items(streams.as_deref()).map(|ie| ie.entry.clone()).collect();
        Ok(moderation::compare_streams(a, b, self.index.as_ref(), &raw, DEFAULT_DEPTH_LIMIT))
    }

    /// Merges a pull made against an earlier snapshot. Streams written
    /// locally in the meantime are reconciled entry by entry.
    pub fn absorb_pull(&mut self, pull: Pull) -> Result<BTreeSet<StreamId>, NodeError> {
        let mut changed = BTreeSet::new();
        for (id, state) in &pull.pulled {
            let current = self.streams.get(id);
            let differs = current.is_none_or(|s| s.head_hash() != state.head_hash() || s.is_forked() != state.is_forked());
            if !differs {
                continue;
            }
            let mut one: StreamMap = current.map(|s| (*id, s.clone())).into_iter().collect();
            if let Err(e) = sync::sync_stream(&mut one, &pull.pulled, id) {
                pull_warning(&mut self.recovery_notes, format!("merge of {id} failed: {e}"));
                continue;
            }
            let merged = &one[id];
            if current.is_none_or(|s| s.head_hash() != merged.head_hash() || s.is_forked() != merged.is_forked()) {
                self.persist_stream(merged)?;
                self.streams.insert(*id, merged.clone());
                changed.insert(*id);
            }
        }
        self.reindex(&changed);
        Ok(changed)
    }

    /// Everything a pull needs, detached from the node so no lock is held
    /// while talking to peers.
    pub fn pull_job(&self, peers: &[PeerAddress], only: Option<BTreeSet<StreamId>>) -> Result<PullJob, NodeError> {
        let peers: Vec<PeerAddress> = if peers.is_empty() { self.config.peers.clone() } else { peers.to_vec() };
        if peers.is_empty() {
            return Err(NodeError::Config("no peers given or configured".into()));
        }
        for p in &peers {
            HttpPeer::from_address(p, None).map_err(NodeError::Config)?;
        }
        Ok(PullJob { snapshot: self.streams.clone(), peers, key: self.key.clone(), local: self.local_store(), only })
    }

    /// One anti-entropy round against `peers` (the configured peers if empty).
    pub fn sync_once(&mut self, peers: &[PeerAddress], only: Option<BTreeSet<StreamId>>) -> Result<SyncSummary, NodeError> {
        let pull = self.pull_job(peers, only)?.run();
        let mut summary = pull.summary();
        summary.streams_changed = self.absorb_pull(pull)?;
        Ok(summary)
    }

    /// Pulls from in-process peers (tests and embedding).
    pub fn sync_with(&mut self, peers: &[&dyn Peer]) -> Result<SyncSummary, NodeError> {
        let mut pulled = self.streams.clone();
        let report = sync::gossip_round(&mut pulled, peers, None);
        let pull = Pull { pulled, report, blobs_fetched: 0 };
        let mut summary = pull.summary();
        summary.streams_changed = self.absorb_pull(pull)?;
        Ok(summary)
    }

    pub fn export(
        &self,
        selector: &Selector,
        out: &Path,
        include_keys: &[Keypair],
        created_at: u64,
    ) -> Result<Manifest, NodeError> {
        let subs: Option<SubscriptionSet> = match fs::read(self.data_dir.join("subscriptions.json")) {
            Ok(b) => Some(serde_json::from_slice(&b).map_err(|e| NodeError::Corrupt(format!("subscriptions.json: {e}")))?),
            Err(_) => None,
        };
        let resolver = self.resolver();
        let source = ExportSource {
            streams: &self.streams,
            blobs: &resolver,
            hints: &self.hints,
            subscriptions: subs.as_ref(),
            keys: include_keys,
        };
        Ok(migration::export(&source, selector, created_at, out)?)
    }

    pub fn import(&mut self, dir: &Path) -> Result<MigrationReport, NodeError> {
        let bundle = migration::read_bundle(dir)?;
        self.import_bundle(&bundle)
    }

    pub fn import_bundle(&mut self, bundle: &Bundle) -> Result<MigrationReport, NodeError> {
        let mut streams = self.streams.clone();
        let mut hints = self.hints.clone();
        let local = self.local_store();
        let (mut report, changed) = migration::import(bundle, &mut streams, local.as_ref(), &mut hints);
        for id in &changed {
            self.persist_stream(&streams[id])?;
        }
        self.streams = streams;
        let new_hints: Vec<StorageHint> = hints.into_iter().filter(|h| !self.hints.contains(h)).collect();
        self.add_hints(&new_hints)?;
        if let Some(subs) = &bundle.subscriptions {
            let path = self.data_dir.join("subscriptions.json");
            if !path.exists() {
                write_atomic(&path, &canonical::to_canonical_bytes(subs).expect("subs"))?;
            }
        }
        if !bundle.keys.is_empty() {
            let dir = self.data_dir.join("keys");
            fs::create_dir_all(&dir)?;
            for kf in &bundle.keys {
                let path = dir.join(format!("{}.json", &kf.public_key[..16]));
                if !path.exists() {
                    write_atomic(&path, &canonical::to_canonical_bytes(kf).expect("key"))?;
                    restrict_permissions(&path);
                }
            }
            report.warnings.push(format!("{} key file(s) placed under keys/", bundle.keys.len()));
        }
        self.rebuild_index();
        Ok(report)
    }

    /// Moves `stream`'s payloads from `old` to `new` and records signed hints.
    pub fn switch_provider(
        &mut self,
        stream: &StreamId,
        old_store: &str,
        new_store: &str,
        issuer: Option<&Keypair>,
    ) -> Result<MigrationReport, NodeError> {
        let state = self.stream(stream)?.clone();
        let old = self.store(old_store)?;
        let new = self.store(new_store)?;
        let issuer = issuer.unwrap_or(&self.key).clone();
        let report = {
            let resolver = self.resolver();
            migration::switch_provider(&state, old.as_ref(), new.as_ref(), &resolver, &issuer, now_unix())
        };
        self.add_hints(&report.hints_issued)?;
        Ok(report)
    }
}

fn pull_warning(notes: &mut Vec<String>, note: String) {
    if !notes.contains(&note) {
        notes.push(note);
    }
}

pub struct PullJob {
    snapshot: StreamMap,
    peers: Vec<PeerAddress>,
    key: Keypair,
    local: Arc<dyn BlobStore>,
    only: Option<BTreeSet<StreamId>>,
}

pub struct Pull {
    pulled: StreamMap,
    report: GossipReport,
    blobs_fetched: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncSummary {
    pub blobs_fetched: usize,
    pub report: GossipReport,
    pub streams_changed: BTreeSet<StreamId>,
}

impl Pull {
    pub fn summary(&self) -> SyncSummary {
        SyncSummary { blobs_fetched: self.blobs_fetched, report: self.report.clone(), streams_changed: BTreeSet::new() }
    }
}

impl PullJob {
    /// Talks to the peers; also copies payloads of new entries into the
    /// local store from the peer that served them.
    pub fn run(self) -> Pull {
        let mut pulled = self.snapshot.clone();
        let mut report = GossipReport::default();
        let mut blobs_fetched = 0;
        for addr in &self.peers {
            let Ok(peer) = HttpPeer::from_address(addr, Some(self.key.clone())) else { continue };
            let before = pulled.clone();
            let r = sync::gossip_round(&mut pulled, &[&peer as &dyn Peer], self.only.as_ref());
            report.entries_transferred += r.entries_transferred;
            report.forks_detected.extend(r.forks_detected);
            report.peers_contacted += r.peers_contacted;
            report.peers_unreachable.extend(r.peers_unreachable);
            report.rejected.extend(r.rejected);
            let remote = storage::RemoteStore::new("peer", &peer.peer_name());
            for id in &r.streams_synced {
                let known = before.get(id).map_or(0, StreamState::head_seq);
                let state = &pulled[id];
                let fresh = state.entries().iter().filter(|e| e.seq > known);
                for e in fresh.filter(|e| e.payload_kind != PayloadKind::WriterUpdate) {
                    if self.local.contains(&e.content_hash).unwrap_or(true) {
                        continue;
                    }
                    let attribution = Attribution::new(e.stream_id, e.author.id());
                    if storage::replicate_attributed(&e.content_hash, &remote, self.local.as_ref(), &attribution).is_ok() {
                        blobs_fetched += 1;
                    }
                }
            }
            report.streams_synced.extend(r.streams_synced);
        }
        Pull { pulled, report, blobs_fetched }
    }
}

#[cfg(unix)]
fn restrict_permissions(path: &Path) {
    use std::os::unix::fs::PermissionsExt;
    let _ = fs::set_permissions(path, fs::Permissions::from_mode(0o600));
}

#[cfg(not(unix))]
fn restrict_permissions(_: &Path) {}
