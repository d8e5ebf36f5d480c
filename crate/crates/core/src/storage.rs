//! Content-addressed blob stores.
//!
//! Blobs live under their own SHA-256. Every read is hash-verified, so a
//! store can lose data but never substitute it. Locators ([`StorageHint`])
//! are signed, advisory, and replaceable; entries never point at a store.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::canonical;
use crate::hash::Hash;
use crate::identity::{Keypair, Principal, PrincipalId, Signature};
use crate::stream::StreamId;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("refused by store operator: {0}")]
    Refused(String),
    #[error("integrity failure: expected {expected}, backend returned bytes hashing to {actual}")]
    IntegrityFailure { expected: Hash, actual: Hash },
    #[error("store unreachable: {0}")]
    Unreachable(String),
    #[error("operation not supported by this backend: {0}")]
    Unsupported(&'static str),
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("bad refusal record: {0}")]
    BadRecord(String),
}

/// Who a blob is attributed to when it is stored, for stream/principal refusals.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Attribution {
    pub stream_id: Option<StreamId>,
    pub author: Option<PrincipalId>,
}

impl Attribution {
    pub fn new(stream_id: StreamId, author: PrincipalId) -> Attribution {
        Attribution { stream_id: Some(stream_id), author: Some(author) }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RefusalTarget {
    Hash(Hash),
    Stream(StreamId),
    Principal(PrincipalId),
}

impl std::fmt::Display for RefusalTarget {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RefusalTarget::Hash(h) => write!(f, "hash:{h}"),
            RefusalTarget::Stream(s) => write!(f, "stream:{s}"),
            RefusalTarget::Principal(p) => write!(f, "principal:{p}"),
        }
    }
}

impl std::str::FromStr for RefusalTarget {
    type Err = String;

    /// Accepts `hash:<hex>`, `stream:<hex>`, `principal:ed25519:<hex>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, value) = s.split_once(':').ok_or_else(|| format!("expected <kind>:<value>, got `{s}`"))?;
        match kind {
            "hash" => value.parse().map(RefusalTarget::Hash).map_err(|e| e.to_string()),
            "stream" => value.parse().map(RefusalTarget::Stream).map_err(|e| e.to_string()),
            "principal" => value.parse().map(RefusalTarget::Principal).map_err(|e| e.to_string()),
            other => Err(format!("unknown refusal kind `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RefusalSet {
    targets: BTreeSet<RefusalTarget>,
}

impl RefusalSet {
    pub fn insert(&mut self, target: RefusalTarget) -> bool {
        self.targets.insert(target)
    }

    pub fn contains(&self, target: &RefusalTarget) -> bool {
        self.targets.contains(target)
    }

    pub fn refuses_hash(&self, hash: &Hash) -> bool {
        self.targets.contains(&RefusalTarget::Hash(*hash))
    }

    /// Which refusal, if any, blocks storing this blob.
    pub fn blocking(&self, hash: &Hash, attribution: &Attribution) -> Option<RefusalTarget> {
        let candidates = [
            Some(RefusalTarget::Hash(*hash)),
            attribution.stream_id.map(RefusalTarget::Stream),
            attribution.author.map(RefusalTarget::Principal),
        ];
        candidates.into_iter().flatten().find(|t| self.targets.contains(t))
    }

    pub fn iter(&self) -> impl Iterator<Item = &RefusalTarget> {
        self.targets.iter()
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Bytes plus the hash they were verified against.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Blob {
    pub content_hash: Hash,
    pub bytes: Vec<u8>,
}

impl Blob {
    pub fn new(bytes: Vec<u8>) -> Blob {
        Blob { content_hash: Hash::of(&bytes), bytes }
    }

    fn verified(expected: &Hash, bytes: Vec<u8>) -> Result<Blob, StoreError> {
        let actual = Hash::of(&bytes);
        if actual != *expected {
            return Err(StoreError::IntegrityFailure { expected: *expected, actual });
        }
        Ok(Blob { content_hash: actual, bytes })
    }
}

pub trait BlobStore: Send + Sync + std::fmt::Debug {
    fn store_id(&self) -> &str;

    /// Token that hints use to name this store (`mem://…`, a path, or a URL).
    fn location(&self) -> &str;

    fn put_attributed(&self, bytes: &[u8], attribution: &Attribution) -> Result<Hash, StoreError>;

    fn put(&self, bytes: &[u8]) -> Result<Hash, StoreError> {
        self.put_attributed(bytes, &Attribution::default())
    }

    /// Hash-verified read. Refused hashes read as absent.
    fn get(&self, hash: &Hash) -> Result<Option<Blob>, StoreError>;

    fn contains(&self, hash: &Hash) -> Result<bool, StoreError> {
        Ok(self.get(hash)?.is_some())
    }

    /// Adds a refusal. A refused hash is also deleted from this store.
    fn refuse(&self, target: RefusalTarget) -> Result<(), StoreError>;

    fn refusals(&self) -> RefusalSet;

    fn list(&self) -> Result<Vec<Hash>, StoreError>;

    fn remove(&self, hash: &Hash) -> Result<bool, StoreError>;
}

#[derive(Debug)]
pub struct MemoryStore {
    store_id: String,
    location: String,
    blobs: RwLock<HashMap<Hash, Arc<Vec<u8>>>>,
    refusals: Mutex<RefusalSet>,
}

impl MemoryStore {
    pub fn new(store_id: &str) -> MemoryStore {
        MemoryStore {
            store_id: store_id.to_string(),
            location: format!("mem://{store_id}"),
            blobs: RwLock::new(HashMap::new()),
            refusals: Mutex::new(RefusalSet::default()),
        }
    }

    pub fn len(&self) -> usize {
        self.blobs.read().expect("blob lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl BlobStore for MemoryStore {
    fn store_id(&self) -> &str {
        &self.store_id
    }

    fn location(&self) -> &str {
        &self.location
    }

    fn put_attributed(&self, bytes: &[u8], attribution: &Attribution) -> Result<Hash, StoreError> {
        let hash = Hash::of(bytes);
        if let Some(t) = self.refusals.lock().expect("refusal lock").blocking(&hash, attribution) {
            return Err(StoreError::Refused(t.to_string()));
        }
        self.blobs
            .write()
            .expect("blob lock")
            .entry(hash)
            .or_insert_with(|| Arc::new(bytes.to_vec()));
        Ok(hash)
    }

    fn get(&self, hash: &Hash) -> Result<Option<Blob>, StoreError> {
        if self.refusals.lock().expect("refusal lock").refuses_hash(hash) {
            return Ok(None);
        }
        let bytes = self.blobs.read().expect("blob lock").get(hash).cloned();
        bytes.map(|b| Blob::verified(hash, b.as_ref().clone())).transpose()
    }

    fn refuse(&self, target: RefusalTarget) -> Result<(), StoreError> {
        let mut refusals = self.refusals.lock().expect("refusal lock");
        if let RefusalTarget::Hash(h) = &target {
            self.blobs.write().expect("blob lock").remove(h);
        }
        refusals.insert(target);
        Ok(())
    }

    fn refusals(&self) -> RefusalSet {
        self.refusals.lock().expect("refusal lock").clone()
    }

    fn list(&self) -> Result<Vec<Hash>, StoreError> {
        let mut out: Vec<Hash> = self.blobs.read().expect("blob lock").keys().copied().collect();
        out.sort();
        Ok(out)
    }

    fn remove(&self, hash: &Hash) -> Result<bool, StoreError> {
        Ok(self.blobs.write().expect("blob lock").remove(hash).is_some())
    }
}

pub const REFUSALS_FILE: &str = "refusals.jsonl";

/// Blobs at `<root>/<first two hex chars>/<remaining 62 hex chars>`.
#[derive(Debug)]
pub struct FsStore {
    store_id: String,
    location: String,
    root: PathBuf,
    refusals: Mutex<RefusalSet>,
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

impl FsStore {
    pub fn open(store_id: &str, root: impl Into<PathBuf>) -> Result<FsStore, StoreError> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        let mut refusals = RefusalSet::default();
        let path = root.join(REFUSALS_FILE);
        if path.exists() {
            for (i, line) in fs::read_to_string(&path)?.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let target: RefusalTarget = serde_json::from_str(line)
                    .map_err(|e| StoreError::BadRecord(format!("{}:{}: {e}", path.display(), i + 1)))?;
                refusals.insert(target);
            }
        }
        Ok(FsStore {
            store_id: store_id.to_string(),
            location: root.display().to_string(),
            root,
            refusals: Mutex::new(refusals),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn blob_path(&self, hash: &Hash) -> PathBuf {
        let hex = hash.to_hex();
        self.root.join(&hex[..2]).join(&hex[2..])
    }
}

impl BlobStore for FsStore {
    fn store_id(&self) -> &str {
        &self.store_id
    }

    fn location(&self) -> &str {
        &self.location
    }

    fn put_attributed(&self, bytes: &[u8], attribution: &Attribution) -> Result<Hash, StoreError> {
        let hash = Hash::of(bytes);
        if let Some(t) = self.refusals.lock().expect("refusal lock").blocking(&hash, attribution) {
            return Err(StoreError::Refused(t.to_string()));
        }
        let path = self.blob_path(&hash);
        if path.exists() {
            return Ok(hash);
        }
        let dir = path.parent().expect("sharded path has a parent");
        fs::create_dir_all(dir)?;
        // write-then-rename: concurrent puts of one hash converge on a single file
        let tmp = dir.join(format!(
            ".tmp-{}-{}",
            std::process::id(),
            TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, &path)?;
        Ok(hash)
    }

    fn get(&self, hash: &Hash) -> Result<Option<Blob>, StoreError> {
        if self.refusals.lock().expect("refusal lock").refuses_hash(hash) {
            return Ok(None);
        }
        match fs::read(self.blob_path(hash)) {
            Ok(bytes) => Blob::verified(hash, bytes).map(Some),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    fn contains(&self, hash: &Hash) -> Result<bool, StoreError> {
        if self.refusals.lock().expect("refusal lock").refuses_hash(hash) {
            return Ok(false);
        }
        Ok(self.blob_path(hash).exists())
    }

    fn refuse(&self, target: RefusalTarget) -> Result<(), StoreError> {
        let mut refusals = self.refusals.lock().expect("refusal lock");
        if refusals.contains(&target) {
            return Ok(());
        }
        let mut line = canonical::to_canonical_bytes(&target).map_err(|e| StoreError::BadRecord(e.to_string()))?;
        line.push(b'\n');
        let mut f = fs::OpenOptions::new().create(true).append(true).open(self.root.join(REFUSALS_FILE))?;
        f.write_all(&line)?;
        f.sync_all()?;
        if let RefusalTarget::Hash(h) = &target {
            match fs::remove_file(self.blob_path(h)) {
                Ok(()) => {}
                Err(e) if e.kind() == io::ErrorKind::NotFound => {}
                Err(e) => return Err(e.into()),
            }
        }
        refusals.insert(target);
        Ok(())
    }

    fn refusals(&self) -> RefusalSet {
        self.refusals.lock().expect("refusal lock").clone()
    }

    fn list(&self) -> Result<Vec<Hash>, StoreError> {
        let mut out = Vec::new();
        for shard in fs::read_dir(&self.root)? {
            let shard = shard?;
            let prefix = shard.file_name().to_string_lossy().into_owned();
            if prefix.len() != 2 || !shard.file_type()?.is_dir() {
                continue;
            }
            for file in fs::read_dir(shard.path())? {
                let name = file?.file_name().to_string_lossy().into_owned();
                if let Ok(h) = format!("{prefix}{name}").parse::<Hash>() {
                    out.push(h);
                }
            }
        }
        out.sort();
        Ok(out)
    }

    fn remove(&self, hash: &Hash) -> Result<bool, StoreError> {
        match fs::remove_file(self.blob_path(hash)) {
            Ok(()) => Ok(true),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(false),
            Err(e) => Err(e.into()),
        }
    }
}

/// A store served by another node's `/blobs/` endpoints.
#[derive(Debug)]
pub struct RemoteStore {
    store_id: String,
    base_url: String,
    agent: ureq::Agent,
}

impl RemoteStore {
    pub fn new(store_id: &str, base_url: &str) -> RemoteStore {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(10)))
            .http_status_as_error(false)
            .build()
            .into();
        RemoteStore {
            store_id: store_id.to_string(),
            base_url: base_url.trim_end_matches('/').to_string(),
            agent,
        }
    }

    fn unreachable(&self, e: impl std::fmt::Display) -> StoreError {
        StoreError::Unreachable(format!("{}: {e}", self.base_url))
    }
}

impl BlobStore for RemoteStore {
    fn store_id(&self) -> &str {
        &self.store_id
    }

    fn location(&self) -> &str {
        &self.base_url
    }

    fn put_attributed(&self, bytes: &[u8], attribution: &Attribution) -> Result<Hash, StoreError> {
        let mut req = self.agent.post(format!("{}/blobs", self.base_url));
        if let Some(s) = attribution.stream_id {
            req = req.query("stream", s.to_hex());
        }
        if let Some(p) = attribution.author {
            req = req.query("author", p.to_string());
        }
        let mut resp = req.send(bytes).map_err(|e| self.unreachable(e))?;
        let status = resp.status().as_u16();
        let body = resp.body_mut().read_to_string().map_err(|e| self.unreachable(e))?;
        match status {
            200..=299 => {
                let v: serde_json::Value =
                    serde_json::from_str(&body).map_err(|e| StoreError::BadRecord(e.to_string()))?;
                v.get("content_hash")
                    .and_then(|h| h.as_str())
                    .and_then(|h| h.parse().ok())
                    .ok_or_else(|| StoreError::BadRecord(body.clone()))
            }
            403 => Err(StoreError::Refused(body)),
            _ => Err(self.unreachable(format!("HTTP {status}: {body}"))),
        }
    }

    fn get(&self, hash: &Hash) -> Result<Option<Blob>, StoreError> {
        let mut resp = self
            .agent
            .get(format!("{}/blobs/{hash}", self.base_url))
            .call()
            .map_err(|e| self.unreachable(e))?;
        match resp.status().as_u16() {
            200 => {
                let mut bytes = Vec::new();
                resp.body_mut()
                    .as_reader()
                    .read_to_end(&mut bytes)
                    .map_err(|e| self.unreachable(e))?;
                Blob::verified(hash, bytes).map(Some)
            }
            404 => Ok(None),
            s => Err(self.unreachable(format!("HTTP {s}"))),
        }
    }

    fn refuse(&self, target: RefusalTarget) -> Result<(), StoreError> {
        let body = canonical::to_canonical_bytes(&serde_json::json!({ "target": target }))
            .map_err(|e| StoreError::BadRecord(e.to_string()))?;
        let resp = self
            .agent
            .post(format!("{}/admin/refuse", self.base_url))
            .header("content-type", "application/json")
            .send(&body[..])
            .map_err(|e| self.unreachable(e))?;
        if resp.status().is_success() {
            Ok(())
        } else {
            Err(self.unreachable(format!("HTTP {}", resp.status())))
        }
    }

    fn refusals(&self) -> RefusalSet {
        RefusalSet::default()
    }

    fn list(&self) -> Result<Vec<Hash>, StoreError> {
        Err(StoreError::Unsupported("list on a remote store"))
    }

    fn remove(&self, _hash: &Hash) -> Result<bool, StoreError> {
        Err(StoreError::Unsupported("remove on a remote store"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Backend {
    Memory,
    Filesystem,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobStoreConfig {
    pub backend: Backend,
    /// Directory (relative paths resolve against the node data dir) or base URL.
    pub location: String,
    #[serde(default)]
    pub refusal: Vec<RefusalTarget>,
    pub store_id: String,
}

impl BlobStoreConfig {
    pub fn open(&self, data_dir: &Path) -> Result<Arc<dyn BlobStore>, StoreError> {
        let store: Arc<dyn BlobStore> = match self.backend {
            Backend::Memory => Arc::new(MemoryStore::new(&self.store_id)),
            Backend::Filesystem => {
                let path = Path::new(&self.location);
                let path = if path.is_absolute() { path.to_path_buf() } else { data_dir.join(path) };
                Arc::new(FsStore::open(&self.store_id, path)?)
            }
            Backend::Remote => Arc::new(RemoteStore::new(&self.store_id, &self.location)),
        };
        for target in &self.refusal {
            if !store.refusals().contains(target) {
                store.refuse(target.clone())?;
            }
        }
        Ok(store)
    }
}

/// A signed, advisory mapping from a content hash to a store location.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StorageHint {
    pub content_hash: Hash,
    pub issued_at: u64,
    pub issued_by: Principal,
    pub signature: Signature,
    pub store_url: String,
}

impl StorageHint {
    pub fn issue(issuer: &Keypair, content_hash: Hash, store_url: &str, issued_at: u64) -> StorageHint {
        let mut hint = StorageHint {
            content_hash,
            issued_at,
            issued_by: issuer.principal(),
            signature: Signature([0u8; 64]),
            store_url: store_url.to_string(),
        };
        hint.signature = issuer.sign(&hint.signing_bytes());
        hint
    }

    pub fn signing_bytes(&self) -> Vec<u8> {
        canonical::to_canonical_bytes_without(self, "signature").expect("hint serializes")
    }

    pub fn verify(&self) -> bool {
        self.issued_by.verify(&self.signing_bytes(), &self.signature)
    }
}

/// The stores a node can currently reach, in fallback order.
#[derive(Debug, Clone, Default)]
pub struct StoreSet {
    stores: Vec<Arc<dyn BlobStore>>,
}

impl StoreSet {
    pub fn new(stores: Vec<Arc<dyn BlobStore>>) -> StoreSet {
        StoreSet { stores }
    }

    pub fn push(&mut self, store: Arc<dyn BlobStore>) {
        self.stores.push(store);
    }

    /// Drops a store from the reachable set (it went offline).
    pub fn remove(&mut self, store_id: &str) -> Option<Arc<dyn BlobStore>> {
        let pos = self.stores.iter().position(|s| s.store_id() == store_id)?;
        Some(self.stores.remove(pos))
    }

    pub fn by_id(&self, store_id: &str) -> Option<&Arc<dyn BlobStore>> {
        self.stores.iter().find(|s| s.store_id() == store_id)
    }

    pub fn by_location(&self, location: &str) -> Option<&Arc<dyn BlobStore>> {
        self.stores.iter().find(|s| s.location() == location)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Arc<dyn BlobStore>> {
        self.stores.iter()
    }

    pub fn len(&self) -> usize {
        self.stores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stores.is_empty()
    }
}

/// Finds a blob: hints newest-first, then every reachable store in order.
/// Dead hints, bad hint signatures and corrupt copies are resolution misses.
pub fn resolve(content_hash: &Hash, hints: &[StorageHint], stores: &StoreSet) -> Option<Blob> {
    let mut ordered: Vec<&StorageHint> =
        hints.iter().filter(|h| h.content_hash == *content_hash && h.verify()).collect();
    ordered.sort_by(|a, b| b.issued_at.cmp(&a.issued_at).then_with(|| a.store_url.cmp(&b.store_url)));
    let mut tried: BTreeSet<&str> = BTreeSet::new();
    for hint in ordered {
        let Some(store) = stores.by_location(&hint.store_url) else { continue };
        tried.insert(store.store_id());
        if let Ok(Some(blob)) = store.get(content_hash) {
            return Some(blob);
        }
    }
    stores
        .iter()
        .filter(|s| !tried.contains(s.store_id()))
        .find_map(|s| s.get(content_hash).ok().flatten())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Replicated {
    Copied,
    AlreadyPresent,
}

#[derive(Debug, thiserror::Error)]
pub enum ReplicateError {
    #[error("blob {0} not found at source")]
    NotFound(Hash),
    #[error(transparent)]
    Store(#[from] StoreError),
}

pub fn replicate(hash: &Hash, from: &dyn BlobStore, to: &dyn BlobStore) -> Result<Replicated, ReplicateError> {
    replicate_attributed(hash, from, to, &Attribution::default())
}

pub fn replicate_attributed(
    hash: &Hash,
    from: &dyn BlobStore,
    to: &dyn BlobStore,
    attribution: &Attribution,
) -> Result<Replicated, ReplicateError> {
    if to.contains(hash)? {
        return Ok(Replicated::AlreadyPresent);
    }
    let blob = from.get(hash)?.ok_or(ReplicateError::NotFound(*hash))?;
    to.put_attributed(&blob.bytes, attribution)?;
    Ok(Replicated::Copied)
}

/// Removes every blob not in `referenced`. Returns what was dropped.
pub fn gc_unreferenced(store: &dyn BlobStore, referenced: &BTreeSet<Hash>) -> Result<Vec<Hash>, StoreError> {
    let mut dropped = Vec::new();
    for hash in store.list()? {
        if !referenced.contains(&hash) && store.remove(&hash)? {
            dropped.push(hash);
        }
    }
    Ok(dropped)
}
