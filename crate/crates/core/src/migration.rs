//! Export bundles, import, and storage-provider switching.
//!
//! Bundle layout (a directory):
//!
//! ```text
//! manifest.json            canonical JSON, see [`Manifest`]
//! streams/<stream_id>.csl  one per exported stream
//! forks/<stream_id>.json   fork evidence, for forked streams only
//! blobs/<hh>/<hash>        payloads, content-addressed
//! hints.jsonl              storage hints, one canonical record per line
//! subscriptions.json       optional reader subscriptions
//! keys/<principal>.json    only with --include-keys
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::aggregator::{BlobResolver, SubscriptionSet};
use crate::canonical;
use crate::hash::Hash;
use crate::identity::{KeyFile, Keypair};
use crate::storage::{self, Attribution, BlobStore, ReplicateError, StorageHint, StoreError};
use crate::stream::{parse_csl, ForkEvidence, PayloadKind, StreamId, StreamState};
use crate::sync::StreamMap;

#[derive(Debug, thiserror::Error)]
pub enum MigrationError {
    #[error("bundle digest mismatch: {0}")]
    BadDigest(String),
    #[error("bundle is malformed: {0}")]
    Malformed(String),
    #[error("stream {0} is not on this node")]
    UnknownStream(StreamId),
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

impl MigrationError {
    pub fn code(&self) -> &'static str {
        match self {
            MigrationError::BadDigest(_) => "BAD_DIGEST",
            MigrationError::UnknownStream(_) => "NOT_FOUND",
            MigrationError::Malformed(_) | MigrationError::Io(_) => "VALIDATION_REJECTED",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestStream {
    pub file_sha256: Hash,
    pub forked: bool,
    pub head_hash: Hash,
    pub head_seq: u64,
    pub stream_id: StreamId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub blobs: Vec<Hash>,
    /// SHA-256 over the canonical manifest without this field.
    pub bundle_digest: Hash,
    pub created_at: u64,
    /// Per-file SHA-256 of every other file in the bundle, keyed by relative path.
    pub files: BTreeMap<String, Hash>,
    pub keys_included: bool,
    pub streams: Vec<ManifestStream>,
    pub version: u32,
    /// Blobs referenced by exported entries that could not be resolved.
    pub warnings: Vec<String>,
}

impl Manifest {
    pub fn compute_digest(&self) -> Hash {
        Hash::of(&canonical::to_canonical_bytes_without(self, "bundle_digest").expect("manifest serializes"))
    }
}

pub const BUNDLE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Selector {
    All,
    Streams(Vec<StreamId>),
}

/// Everything an export needs to read.
pub struct ExportSource<'a> {
    pub streams: &'a StreamMap,
    pub blobs: &'a dyn BlobResolver,
    pub hints: &'a [StorageHint],
    pub subscriptions: Option<&'a SubscriptionSet>,
    /// Secret keys to include; empty unless the operator asked for them.
    pub keys: &'a [Keypair],
}

/// Blob hashes a stream's entries commit to. WRITER_UPDATE lists live inline.
pub fn referenced_blobs(state: &StreamState) -> BTreeSet<Hash> {
    state
        .entries()
        .iter()
        .filter(|e| e.payload_kind != PayloadKind::WriterUpdate)
        .map(|e| e.content_hash)
        .collect()
}

pub fn blob_rel_path(hash: &Hash) -> String {
    let hex = hash.to_hex();
    format!("blobs/{}/{}", &hex[..2], hex)
}

fn write_file(root: &Path, rel: &str, bytes: &[u8], files: &mut BTreeMap<String, Hash>) -> io::Result<()> {
    let path = root.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, bytes)?;
    files.insert(rel.to_string(), Hash::of(bytes));
    Ok(())
}

fn jsonl<T: Serialize>(records: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    for r in records {
        out.extend(canonical::to_canonical_bytes(r).expect("record serializes"));
        out.push(b'\n');
    }
    out
}

/// Writes a bundle into `out` (created if needed, must be empty).
pub fn export(source: &ExportSource<'_>, selector: &Selector, created_at: u64, out: &Path) -> Result<Manifest, MigrationError> {
    fs::create_dir_all(out)?;
    if fs::read_dir(out)?.next().is_some() {
        return Err(MigrationError::Malformed(format!("{} is not empty", out.display())));
    }
    let ids: Vec<StreamId> = match selector {
        Selector::All => source.streams.keys().copied().collect(),
        Selector::Streams(ids) => {
            let mut ids = ids.clone();
            ids.sort();
            ids.dedup();
            ids
        }
    };
    let mut files = BTreeMap::new();
    let mut streams = Vec::new();
    let mut wanted = BTreeSet::new();
    let mut warnings = Vec::new();
    for id in ids {
        let state = source.streams.get(&id).ok_or(MigrationError::UnknownStream(id))?;
        let report = state.verify();
        if !report.ok {
            return Err(MigrationError::Malformed(format!("stream {id} does not verify: {report}")));
        }
        let csl = state.to_csl();
        write_file(out, &format!("streams/{id}.csl"), &csl, &mut files)?;
        if let Some(ev) = state.fork_evidence() {
            write_file(out, &format!("forks/{id}.json"), &canonical::to_canonical_bytes(ev).expect("evidence"), &mut files)?;
        }
        streams.push(ManifestStream {
            file_sha256: Hash::of(&csl),
            forked: state.is_forked(),
            head_hash: state.head_hash(),
            head_seq: state.head_seq(),
            stream_id: id,
        });
        wanted.extend(referenced_blobs(state));
    }
    let mut blobs = Vec::new();
    for hash in wanted {
        match source.blobs.resolve_blob(&hash) {
            Some(bytes) if Hash::of(&bytes) == hash => {
                let rel = blob_rel_path(&hash);
                write_file(out, &rel, &bytes, &mut BTreeMap::new())?;
                blobs.push(hash);
            }
            _ => warnings.push(format!("blob {hash} unresolvable; exported as metadata only")),
        }
    }
    let mut hints: Vec<StorageHint> = source.hints.iter().filter(|h| h.verify()).cloned().collect();
    hints.sort_by_key(|h| canonical::to_canonical_bytes(h).expect("hint"));
    hints.dedup();
    write_file(out, "hints.jsonl", &jsonl(&hints), &mut files)?;
    if let Some(subs) = source.subscriptions {
        write_file(out, "subscriptions.json", &canonical::to_canonical_bytes(subs).expect("subs"), &mut files)?;
    }
    for key in source.keys {
        let kf = KeyFile::from_keypair(key);
        write_file(out, &format!("keys/{}.json", key.principal().id().to_string().replace(':', "_")), &canonical::to_canonical_bytes(&kf).expect("key"), &mut files)?;
    }
    let mut manifest = Manifest {
        blobs,
        bundle_digest: Hash::ZERO,
        created_at,
        files,
        keys_included: !source.keys.is_empty(),
        streams,
        version: BUNDLE_VERSION,
        warnings,
    };
    manifest.bundle_digest = manifest.compute_digest();
    fs::write(out.join("manifest.json"), canonical::to_canonical_bytes(&manifest).expect("manifest"))?;
    Ok(manifest)
}

/// A bundle read back from disk with every digest checked.
#[derive(Debug, Clone)]
pub struct Bundle {
    pub manifest: Manifest,
    pub streams: Vec<StreamState>,
    pub blobs: BTreeMap<Hash, Vec<u8>>,
    pub hints: Vec<StorageHint>,
    pub subscriptions: Option<SubscriptionSet>,
    pub keys: Vec<KeyFile>,
}

fn read(root: &Path, rel: &str) -> Result<Vec<u8>, MigrationError> {
    fs::read(root.join(rel)).map_err(|e| MigrationError::Malformed(format!("{rel}: {e}")))
}

/// Reads and verifies a bundle. Any digest mismatch rejects the whole bundle.
pub fn read_bundle(root: &Path) -> Result<Bundle, MigrationError> {
    let manifest: Manifest = serde_json::from_slice(&read(root, "manifest.json")?)
        .map_err(|e| MigrationError::Malformed(format!("manifest.json: {e}")))?;
    if manifest.compute_digest() != manifest.bundle_digest {
        return Err(MigrationError::BadDigest("manifest".into()));
    }
    let mut contents: BTreeMap<&str, Vec<u8>> = BTreeMap::new();
    for (rel, expected) in &manifest.files {
        if rel.contains("..") || rel.starts_with('/') {
            return Err(MigrationError::Malformed(format!("unsafe path {rel}")));
        }
        let bytes = read(root, rel)?;
        if Hash::of(&bytes) != *expected {
            return Err(MigrationError::BadDigest(rel.clone()));
        }
        contents.insert(rel, bytes);
    }
    let mut blobs = BTreeMap::new();
    for hash in &manifest.blobs {
        let bytes = read(root, &blob_rel_path(hash))?;
        if Hash::of(&bytes) != *hash {
            return Err(MigrationError::BadDigest(blob_rel_path(hash)));
        }
        blobs.insert(*hash, bytes);
    }
    let mut streams = Vec::new();
    for ms in &manifest.streams {
        let rel = format!("streams/{}.csl", ms.stream_id);
        let bytes = contents.get(rel.as_str()).ok_or_else(|| MigrationError::Malformed(format!("{rel} not listed")))?;
        if Hash::of(bytes) != ms.file_sha256 {
            return Err(MigrationError::BadDigest(rel));
        }
        let records = parse_csl(bytes).map_err(|e| MigrationError::Malformed(format!("{rel}: {e}")))?;
        if records.torn_tail {
            return Err(MigrationError::Malformed(format!("{rel}: truncated")));
        }
        let mut state = StreamState::from_records(records.genesis, records.entries)
            .map_err(|r| MigrationError::Malformed(format!("{rel}: {r}")))?;
        if let Some(ev_bytes) = contents.get(format!("forks/{}.json", ms.stream_id).as_str()) {
            let ev: ForkEvidence =
                serde_json::from_slice(ev_bytes).map_err(|e| MigrationError::Malformed(format!("fork evidence: {e}")))?;
            state.mark_forked(ev);
        }
        if state.stream_id() != ms.stream_id || state.head_hash() != ms.head_hash || state.is_forked() != ms.forked {
            return Err(MigrationError::Malformed(format!("{rel} disagrees with manifest")));
        }
        streams.push(state);
    }
    let hints = match contents.get("hints.jsonl") {
        Some(bytes) => bytes
            .split(|b| *b == b'\n')
            .filter(|l| !l.is_empty())
            .map(|l| serde_json::from_slice(l).map_err(|e| MigrationError::Malformed(format!("hints.jsonl: {e}"))))
            .collect::<Result<_, _>>()?,
        None => vec![],
    };
    let subscriptions = contents
        .get("subscriptions.json")
        .map(|b| serde_json::from_slice(b).map_err(|e| MigrationError::Malformed(format!("subscriptions.json: {e}"))))
        .transpose()?;
    let keys = contents
        .iter()
        .filter(|(rel, _)| rel.starts_with("keys/"))
        .map(|(rel, b)| serde_json::from_slice(b).map_err(|e| MigrationError::Malformed(format!("{rel}: {e}"))))
        .collect::<Result<_, _>>()?;
    Ok(Bundle { manifest, streams, blobs, hints, subscriptions, keys })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conflict {
    pub detail: String,
    pub stream_id: StreamId,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MigrationReport {
    pub blobs_imported: usize,
    pub blobs_skipped: usize,
    pub conflicts: Vec<Conflict>,
    pub entries_imported: usize,
    pub hints_imported: usize,
    pub hints_issued: Vec<StorageHint>,
    pub streams_imported: usize,
    pub streams_skipped: usize,
    /// Content hashes that could not be placed or resolved.
    pub unresolved: Vec<Hash>,
    pub warnings: Vec<String>,
}

impl MigrationReport {
    pub fn is_noop(&self) -> bool {
        self.blobs_imported == 0
            && self.entries_imported == 0
            && self.streams_imported == 0
            && self.hints_imported == 0
            && self.hints_issued.is_empty()
            && self.conflicts.is_empty()
    }
}

/// Merges a verified bundle into local state without touching anything that
/// is already there. Returns the ids of streams that changed.
pub fn import(
    bundle: &Bundle,
    streams: &mut StreamMap,
    store: &dyn BlobStore,
    hints: &mut Vec<StorageHint>,
) -> (MigrationReport, BTreeSet<StreamId>) {
    let mut report = MigrationReport::default();
    let mut changed = BTreeSet::new();
    for incoming in &bundle.streams {
        let id = incoming.stream_id();
        let Some(local) = streams.get(&id) else {
            report.streams_imported += 1;
            report.entries_imported += incoming.entries().len();
            streams.insert(id, incoming.clone());
            changed.insert(id);
            continue;
        };
        let conflict = |detail: String| Conflict { detail, stream_id: id };
        if local.genesis() != incoming.genesis() {
            report.conflicts.push(conflict("genesis differs".into()));
            continue;
        }
        let shared = local.head_seq().min(incoming.head_seq());
        let agree = shared == 0 || local.entry(shared).map(|e| e.hash()) == incoming.entry(shared).map(|e| e.hash());
        if !agree {
            report.conflicts.push(conflict(format!("histories diverge at or before seq {shared}")));
            continue;
        }
        if local.is_forked() != incoming.is_forked() {
            report.conflicts.push(conflict("fork flag differs; local copy kept".into()));
        }
        if incoming.head_seq() <= local.head_seq() {
            report.streams_skipped += 1;
            continue;
        }
        if local.is_forked() {
            report.conflicts.push(conflict("local copy is forked; newer entries not appended".into()));
            continue;
        }
        let mut extended = local.clone();
        let mut added = 0;
        for e in incoming.range(local.head_seq() + 1, incoming.head_seq()) {
            if extended.accept(e.clone()).is_err() {
                break;
            }
            added += 1;
        }
        report.entries_imported += added;
        report.streams_imported += 1;
        streams.insert(id, extended);
        changed.insert(id);
    }
    for (hash, bytes) in &bundle.blobs {
        match store.contains(hash) {
            Ok(true) => report.blobs_skipped += 1,
            _ => match store.put(bytes) {
                Ok(_) => report.blobs_imported += 1,
                Err(e) => {
                    report.unresolved.push(*hash);
                    report.warnings.push(format!("blob {hash}: {e}"));
                }
            },
        }
    }
    for hint in &bundle.hints {
        if !hint.verify() {
            report.warnings.push(format!("hint for {} has a bad signature", hint.content_hash));
        } else if !hints.contains(hint) {
            hints.push(hint.clone());
            report.hints_imported += 1;
        }
    }
    report.warnings.extend(bundle.manifest.warnings.iter().cloned());
    (report, changed)
}

/// Copies every blob `stream` references from `old` (or `fallback`) into
/// `new`, then issues hints for the copies `new` verifiably holds. Signed
/// entries are never touched.
pub fn switch_provider(
    stream: &StreamState,
    old: &dyn BlobStore,
    new: &dyn BlobStore,
    fallback: &dyn BlobResolver,
    issuer: &Keypair,
    issued_at: u64,
) -> MigrationReport {
    let mut report = MigrationReport::default();
    if old.location() == new.location() {
        report.warnings.push("old and new store are the same; nothing to do".into());
        return report;
    }
    let authors: BTreeMap<Hash, Attribution> = stream
        .entries()
        .iter()
        .map(|e| (e.content_hash, Attribution::new(e.stream_id, e.author.id())))
        .collect();
    for hash in referenced_blobs(stream) {
        let attribution = &authors[&hash];
        let copied = match storage::replicate_attributed(&hash, old, new, attribution) {
            Ok(r) => Ok(r),
            Err(ReplicateError::NotFound(_)) | Err(ReplicateError::Store(StoreError::Unreachable(_))) => {
                match fallback.resolve_blob(&hash) {
                    Some(bytes) => new
                        .put_attributed(&bytes, attribution)
                        .map(|_| storage::Replicated::Copied)
                        .map_err(ReplicateError::Store),
                    None => Err(ReplicateError::NotFound(hash)),
                }
            }
            Err(e) => Err(e),
        };
        if let Err(e) = copied {
            report.unresolved.push(hash);
            report.warnings.push(format!("{hash}: {e}"));
            continue;
        }
        match new.get(&hash) {
            Ok(Some(_)) => {
                report.blobs_imported += 1;
                report.hints_issued.push(StorageHint::issue(issuer, hash, new.location(), issued_at));
            }
            _ => {
                report.unresolved.push(hash);
                report.warnings.push(format!("{hash}: copy not readable from new store"));
            }
        }
    }
    report
}

/// Files of a bundle, relative to its root, in sorted order.
pub fn bundle_files(root: &Path) -> io::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path.strip_prefix(root).expect("under root").to_path_buf());
            }
        }
    }
    out.sort();
    Ok(out)
}
