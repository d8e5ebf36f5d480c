//! Append-only, hash-chained, signed content streams.
//!
//! A stream is a genesis record followed by entries with `seq = 1, 2, ...`.
//! Each entry commits to the SHA-256 of its payload (never the payload
//! itself), to the hash of the previous record, and is signed by an
//! authorized writer. The on-disk form is a `.csl` file: one canonical JSON
//! record per line, genesis first.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::canonical::{self, CanonicalError};
use crate::hash::{hex_newtype, Hash};
use crate::identity::{Keypair, Principal, Signature};

pub const MAX_STREAM_NAME_BYTES: usize = 256;
const STREAM_ID_SEPARATOR: u8 = 0x1F;

hex_newtype!(
    /// `SHA-256(owner public key || 0x1F || stream name)`.
    StreamId,
    32
);

impl StreamId {
    pub fn derive(owner: &Principal, name: &str) -> StreamId {
        let mut input = Vec::with_capacity(33 + name.len());
        input.extend_from_slice(owner.public_key());
        input.push(STREAM_ID_SEPARATOR);
        input.extend_from_slice(name.as_bytes());
        StreamId(canonical::sha256(&input))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum StreamKind {
    Content,
    Moderation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PayloadKind {
    Post,
    Reply,
    Edit,
    Tombstone,
    ModAction,
    WriterUpdate,
}

impl PayloadKind {
    /// Kinds that carry user-visible content.
    pub fn is_content(self) -> bool {
        matches!(self, PayloadKind::Post | PayloadKind::Reply | PayloadKind::Edit)
    }
}

impl FromStr for PayloadKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        serde_json::from_value(serde_json::Value::String(s.to_ascii_uppercase()))
            .map_err(|_| format!("unknown payload kind `{s}`"))
    }
}

/// A pointer to one entry: `(stream, seq)`. Text form is `<stream hex>:<seq>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntryRef {
    pub seq: u64,
    pub stream_id: StreamId,
}

impl EntryRef {
    pub fn new(stream_id: StreamId, seq: u64) -> EntryRef {
        EntryRef { seq, stream_id }
    }
}

impl fmt::Display for EntryRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.stream_id, self.seq)
    }
}

impl FromStr for EntryRef {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (id, seq) = s.split_once(':').ok_or_else(|| format!("expected <stream>:<seq>, got `{s}`"))?;
        Ok(EntryRef {
            stream_id: id.parse().map_err(|e| format!("{e}"))?,
            seq: seq.parse().map_err(|e| format!("bad seq: {e}"))?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenesisRecord {
    pub created_at: u64,
    pub owner: Principal,
    pub prev_hash: Hash,
    /// Stream annotated by a moderation stream; absent means global.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scope: Option<StreamId>,
    pub seq: u64,
    pub signature: Signature,
    pub stream_id: StreamId,
    pub stream_kind: StreamKind,
    pub stream_name: String,
    pub writers: Vec<Principal>,
}

impl GenesisRecord {
    pub fn signing_bytes(&self) -> Vec<u8> {
        canonical::to_canonical_bytes_without(self, "signature").expect("genesis serializes")
    }

    pub fn canonical_bytes(&self) -> Vec<u8> {
        canonical::to_canonical_bytes(self).expect("genesis serializes")
    }

    pub fn hash(&self) -> Hash {
        Hash::of(&self.canonical_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContentEntry {
    pub author: Principal,
    pub content_hash: Hash,
    pub payload_kind: PayloadKind,
    pub prev_hash: Hash,
    /// Reply target, or the entry an EDIT / TOMBSTONE refers to. Unverified claim.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reply_to: Option<EntryRef>,
    pub seq: u64,
    pub signature: Signature,
    pub stream_id: StreamId,
    pub timestamp: u64,
    /// New writer set; present only on WRITER_UPDATE entries.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub writers: Option<Vec<Principal>>,
}

impl ContentEntry {
    /// Canonical bytes with the `signature` key absent.
    pub fn signing_bytes(&self) -> Vec<u8> {
        canonical::to_canonical_bytes_without(self, "signature").expect("entry serializes")
    }

    /// Canonical bytes of the full signed record (one `.csl` line).
    pub fn canonical_bytes(&self) -> Vec<u8> {
        canonical::to_canonical_bytes(self).expect("entry serializes")
    }

    pub fn hash(&self) -> Hash {
        Hash::of(&self.canonical_bytes())
    }

    pub fn entry_ref(&self) -> EntryRef {
        EntryRef::new(self.stream_id, self.seq)
    }

    pub fn signature_valid(&self) -> bool {
        self.author.verify(&self.signing_bytes(), &self.signature)
    }
}

/// Record types that may be passed to [`canonical_bytes`].
#[derive(Debug, Clone, Copy)]
pub enum Record<'a> {
    Genesis(&'a GenesisRecord),
    Entry(&'a ContentEntry),
}

/// Canonical signing input of a record (the record minus its signature).
pub fn canonical_bytes(record: Record<'_>) -> Vec<u8> {
    match record {
        Record::Genesis(g) => g.signing_bytes(),
        Record::Entry(e) => e.signing_bytes(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Reason {
    BadSignature,
    BadChain,
    BadSeq,
    UnauthorizedWriter,
    Fork,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_bad_seq: Option<u64>,
    pub reasons: Vec<Reason>,
}

impl ValidationReport {
    fn from_findings(first_bad_seq: Option<u64>, reasons: BTreeSet<Reason>) -> ValidationReport {
        ValidationReport { ok: reasons.is_empty(), first_bad_seq, reasons: reasons.into_iter().collect() }
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.ok {
            return f.write_str("ok");
        }
        let reasons: Vec<String> = self.reasons.iter().map(|r| format!("{r:?}")).collect();
        match self.first_bad_seq {
            Some(seq) => write!(f, "first_bad_seq={seq} reasons={}", reasons.join(",")),
            None => write!(f, "reasons={}", reasons.join(",")),
        }
    }
}

/// Two validly signed records at the same position of one stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForkEvidence {
    pub a: ContentEntry,
    pub b: ContentEntry,
}

impl ForkEvidence {
    pub fn is_valid(&self) -> bool {
        detect_fork(&self.a, &self.b).is_some()
    }

    pub fn stream_id(&self) -> StreamId {
        self.a.stream_id
    }
}

/// Evidence iff both entries share `(stream_id, seq)`, both signatures verify,
/// and their canonical hashes differ.
pub fn detect_fork(a: &ContentEntry, b: &ContentEntry) -> Option<ForkEvidence> {
    if a.stream_id != b.stream_id || a.seq != b.seq {
        return None;
    }
    if a.hash() == b.hash() {
        return None;
    }
    if !a.signature_valid() || !b.signature_valid() {
        return None;
    }
    // order the pair so evidence is the same no matter which side found it
    let (a, b) = if a.hash() < b.hash() { (a, b) } else { (b, a) };
    Some(ForkEvidence { a: a.clone(), b: b.clone() })
}

#[derive(Debug, thiserror::Error)]
pub enum StreamError {
    #[error("stream name is {0} bytes; limit is {MAX_STREAM_NAME_BYTES}")]
    NameTooLong(usize),
    #[error("author is not in the stream's writer set")]
    UnauthorizedWriter,
    #[error("stream is forked; appends are refused")]
    ForkedStream,
    #[error("invalid reference: {0}")]
    InvalidReference(String),
    #[error("invalid writer update: {0}")]
    InvalidWriterUpdate(String),
    #[error("entry rejected: {0}")]
    Rejected(ValidationReport),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Canonical(#[from] CanonicalError),
}

pub fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Hash committed to by a WRITER_UPDATE entry.
pub fn writer_set_hash(writers: &[Principal]) -> Hash {
    canonical::canonical_hash(writers).expect("principals serialize")
}

/// Incremental chain checker: the expected position, linkage and writer set
/// right after some verified prefix.
#[derive(Debug, Clone)]
struct ChainCursor {
    stream_id: StreamId,
    owner: Principal,
    next_seq: u64,
    prev_hash: Hash,
    writers: BTreeSet<Principal>,
}

impl ChainCursor {
    fn at_genesis(genesis: &GenesisRecord) -> ChainCursor {
        let mut writers: BTreeSet<Principal> = genesis.writers.iter().copied().collect();
        writers.insert(genesis.owner);
        ChainCursor {
            stream_id: genesis.stream_id,
            owner: genesis.owner,
            next_seq: 1,
            prev_hash: genesis.hash(),
            writers,
        }
    }

    /// Checks in order: seq continuity, prev_hash linkage, signature, writer authorization.
    fn check(&self, entry: &ContentEntry) -> BTreeSet<Reason> {
        let mut reasons = BTreeSet::new();
        if entry.seq != self.next_seq {
            reasons.insert(Reason::BadSeq);
        }
        if entry.prev_hash != self.prev_hash || entry.stream_id != self.stream_id {
            reasons.insert(Reason::BadChain);
        }
        if !entry.signature_valid() {
            reasons.insert(Reason::BadSignature);
        }
        if !self.writers.contains(&entry.author) || !self.writer_fields_valid(entry) {
            reasons.insert(Reason::UnauthorizedWriter);
        }
        reasons
    }

    // WRITER_UPDATE must be owner-signed and commit to its writer list;
    // `writers` may not ride along on any other kind.
    fn writer_fields_valid(&self, entry: &ContentEntry) -> bool {
        match (&entry.payload_kind, &entry.writers) {
            (PayloadKind::WriterUpdate, Some(writers)) => {
                entry.author == self.owner && entry.content_hash == writer_set_hash(writers)
            }
            (PayloadKind::WriterUpdate, None) => false,
            (_, Some(_)) => false,
            (_, None) => true,
        }
    }

    fn advance(&mut self, entry: &ContentEntry, apply_writers: bool) {
        self.next_seq = entry.seq.saturating_add(1);
        self.prev_hash = entry.hash();
        if apply_writers && entry.payload_kind == PayloadKind::WriterUpdate {
            if let Some(writers) = &entry.writers {
                self.writers = writers.iter().copied().collect();
                self.writers.insert(self.owner);
            }
        }
    }
}

fn check_genesis(genesis: &GenesisRecord) -> BTreeSet<Reason> {
    let mut reasons = BTreeSet::new();
    if genesis.seq != 0 {
        reasons.insert(Reason::BadSeq);
    }
    if genesis.prev_hash != Hash::ZERO
        || genesis.stream_id != StreamId::derive(&genesis.owner, &genesis.stream_name)
        || genesis.stream_name.len() > MAX_STREAM_NAME_BYTES
    {
        reasons.insert(Reason::BadChain);
    }
    if !genesis.owner.verify(&genesis.signing_bytes(), &genesis.signature) {
        reasons.insert(Reason::BadSignature);
    }
    if !genesis.writers.contains(&genesis.owner) {
        reasons.insert(Reason::UnauthorizedWriter);
    }
    reasons
}

/// Validates a genesis record and an ordered entry list.
///
/// Every entry is checked against its actual predecessor, so one bad entry
/// also shows up as a chain break on the entry after it. The report carries
/// the position (expected seq) of the first failing record and the distinct
/// reasons seen anywhere.
pub fn verify_stream(genesis: &GenesisRecord, entries: &[ContentEntry]) -> ValidationReport {
    let mut reasons = check_genesis(genesis);
    let mut first_bad = if reasons.is_empty() { None } else { Some(0) };
    let mut cursor = ChainCursor::at_genesis(genesis);
    let mut prev: Option<&ContentEntry> = None;
    for entry in entries {
        let mut found = cursor.check(entry);
        if let Some(prev) = prev {
            if prev.seq == entry.seq && detect_fork(prev, entry).is_some() {
                found.insert(Reason::Fork);
            }
        }
        let clean = found.is_empty();
        if !clean && first_bad.is_none() {
            first_bad = Some(cursor.next_seq);
        }
        reasons.extend(found);
        cursor.advance(entry, clean);
        prev = Some(entry);
    }
    ValidationReport::from_findings(first_bad, reasons)
}

/// A verified stream: genesis plus a gap-free entry list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StreamState {
    genesis: GenesisRecord,
    entries: Vec<ContentEntry>,
    head_seq: u64,
    forked: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    fork_evidence: Option<ForkEvidence>,
    #[serde(skip)]
    cursor_writers: BTreeSet<Principal>,
    #[serde(skip)]
    head_hash: Hash,
}

impl StreamState {
    pub fn create(
        owner: &Keypair,
        name: &str,
        kind: StreamKind,
        writers: &[Principal],
    ) -> Result<StreamState, StreamError> {
        StreamState::create_with(owner, name, kind, writers, None, now_unix())
    }

    pub fn create_with(
        owner: &Keypair,
        name: &str,
        kind: StreamKind,
        writers: &[Principal],
        scope: Option<StreamId>,
        created_at: u64,
    ) -> Result<StreamState, StreamError> {
        if name.len() > MAX_STREAM_NAME_BYTES {
            return Err(StreamError::NameTooLong(name.len()));
        }
        let principal = owner.principal();
        let mut writer_list: Vec<Principal> = Vec::with_capacity(writers.len() + 1);
        for w in std::iter::once(&principal).chain(writers) {
            if !writer_list.contains(w) {
                writer_list.push(*w);
            }
        }
        writer_list.sort();
        let mut genesis = GenesisRecord {
            created_at,
            owner: principal,
            prev_hash: Hash::ZERO,
            scope,
            seq: 0,
            signature: Signature([0u8; 64]),
            stream_id: StreamId::derive(&principal, name),
            stream_kind: kind,
            stream_name: name.to_string(),
            writers: writer_list,
        };
        genesis.signature = owner.sign(&genesis.signing_bytes());
        Ok(StreamState::from_genesis(genesis))
    }

    fn from_genesis(genesis: GenesisRecord) -> StreamState {
        let cursor = ChainCursor::at_genesis(&genesis);
        StreamState {
            head_hash: cursor.prev_hash,
            cursor_writers: cursor.writers,
            genesis,
            entries: Vec::new(),
            head_seq: 0,
            forked: false,
            fork_evidence: None,
        }
    }

    /// Builds a state from records, accepting them only if the whole list verifies.
    pub fn from_records(
        genesis: GenesisRecord,
        entries: Vec<ContentEntry>,
    ) -> Result<StreamState, ValidationReport> {
        let report = verify_stream(&genesis, &entries);
        if !report.ok {
            return Err(report);
        }
        let mut cursor = ChainCursor::at_genesis(&genesis);
        for e in &entries {
            cursor.advance(e, true);
        }
        Ok(StreamState {
            head_seq: entries.last().map(|e| e.seq).unwrap_or(0),
            head_hash: cursor.prev_hash,
            cursor_writers: cursor.writers,
            genesis,
            entries,
            forked: false,
            fork_evidence: None,
        })
    }

    /// Longest verified prefix of `entries`, plus the report for the rest.
    pub fn from_records_prefix(
        genesis: GenesisRecord,
        entries: Vec<ContentEntry>,
    ) -> Result<(StreamState, ValidationReport), ValidationReport> {
        let genesis_report = verify_stream(&genesis, &[]);
        if !genesis_report.ok {
            return Err(genesis_report);
        }
        let full = verify_stream(&genesis, &entries);
        let mut state = StreamState::from_genesis(genesis);
        for e in entries {
            if state.accept(e).is_err() {
                break;
            }
        }
        Ok((state, full))
    }

    pub fn genesis(&self) -> &GenesisRecord {
        &self.genesis
    }

    pub fn stream_id(&self) -> StreamId {
        self.genesis.stream_id
    }

    pub fn kind(&self) -> StreamKind {
        self.genesis.stream_kind
    }

    pub fn entries(&self) -> &[ContentEntry] {
        &self.entries
    }

    pub fn head_seq(&self) -> u64 {
        self.head_seq
    }

    /// Hash of the newest record (the genesis hash for an empty stream).
    pub fn head_hash(&self) -> Hash {
        self.head_hash
    }

    pub fn is_forked(&self) -> bool {
        self.forked
    }

    pub fn fork_evidence(&self) -> Option<&ForkEvidence> {
        self.fork_evidence.as_ref()
    }

    pub fn writers(&self) -> &BTreeSet<Principal> {
        &self.cursor_writers
    }

    pub fn entry(&self, seq: u64) -> Option<&ContentEntry> {
        if seq == 0 || seq > self.head_seq {
            return None;
        }
        self.entries.get((seq - 1) as usize)
    }

    /// Entries with `from <= seq <= to`.
    pub fn range(&self, from: u64, to: u64) -> &[ContentEntry] {
        let lo = from.max(1).min(self.head_seq + 1) as usize - 1;
        let hi = to.min(self.head_seq) as usize;
        if lo >= hi {
            return &[];
        }
        &self.entries[lo..hi]
    }

    /// Flags the stream as forked. Evidence is kept only if it verifies and
    /// belongs to this stream; the first evidence recorded wins.
    pub fn mark_forked(&mut self, evidence: ForkEvidence) -> bool {
        if evidence.stream_id() != self.stream_id() || !evidence.is_valid() {
            return false;
        }
        if !self.forked {
            self.forked = true;
            self.fork_evidence = Some(evidence);
        }
        true
    }

    fn cursor(&self) -> ChainCursor {
        ChainCursor {
            stream_id: self.genesis.stream_id,
            owner: self.genesis.owner,
            next_seq: self.head_seq + 1,
            prev_hash: self.head_hash,
            writers: self.cursor_writers.clone(),
        }
    }

    /// Appends an externally signed entry after checking it against the head.
    pub fn accept(&mut self, entry: ContentEntry) -> Result<(), ValidationReport> {
        let reasons = self.cursor().check(&entry);
        if !reasons.is_empty() {
            return Err(ValidationReport::from_findings(Some(entry.seq), reasons));
        }
        self.head_hash = entry.hash();
        if entry.payload_kind == PayloadKind::WriterUpdate {
            if let Some(writers) = &entry.writers {
                self.cursor_writers = writers.iter().copied().collect();
                self.cursor_writers.insert(self.genesis.owner);
            }
        }
        self.head_seq = entry.seq;
        self.entries.push(entry);
        Ok(())
    }

    /// Signs and appends a new entry in place.
    pub fn push(
        &mut self,
        author: &Keypair,
        payload_kind: PayloadKind,
        payload: &[u8],
        reply_to: Option<EntryRef>,
        timestamp: u64,
    ) -> Result<ContentEntry, StreamError> {
        if self.forked {
            return Err(StreamError::ForkedStream);
        }
        let principal = author.principal();
        if !self.cursor_writers.contains(&principal) {
            return Err(StreamError::UnauthorizedWriter);
        }
        let seq = self.head_seq + 1;
        let mut writers = None;
        let mut content_hash = Hash::of(payload);
        match payload_kind {
            PayloadKind::Tombstone | PayloadKind::Edit => {
                let target = reply_to.ok_or_else(|| {
                    StreamError::InvalidReference(format!("{payload_kind:?} needs a target entry"))
                })?;
                if target.stream_id != self.stream_id() || target.seq == 0 || target.seq >= seq {
                    return Err(StreamError::InvalidReference(format!(
                        "{payload_kind:?} must reference an earlier entry of this stream"
                    )));
                }
            }
            PayloadKind::Reply if reply_to.is_none() => {
                return Err(StreamError::InvalidReference("REPLY needs reply_to".into()));
            }
            PayloadKind::WriterUpdate => {
                if principal != self.genesis.owner {
                    return Err(StreamError::UnauthorizedWriter);
                }
                let mut list: Vec<Principal> = serde_json::from_slice(payload)
                    .map_err(|e| StreamError::InvalidWriterUpdate(e.to_string()))?;
                if !list.contains(&principal) {
                    list.push(principal);
                }
                list.sort();
                list.dedup();
                content_hash = writer_set_hash(&list);
                writers = Some(list);
            }
            _ => {}
        }
        let mut entry = ContentEntry {
            author: principal,
            content_hash,
            payload_kind,
            prev_hash: self.head_hash,
            reply_to,
            seq,
            signature: Signature([0u8; 64]),
            stream_id: self.stream_id(),
            timestamp,
            writers,
        };
        entry.signature = author.sign(&entry.signing_bytes());
        self.accept(entry.clone()).map_err(StreamError::Rejected)?;
        Ok(entry)
    }

    /// Value-style append: returns the new state and the new entry.
    pub fn append(
        &self,
        author: &Keypair,
        payload_kind: PayloadKind,
        payload: &[u8],
        reply_to: Option<EntryRef>,
    ) -> Result<(StreamState, ContentEntry), StreamError> {
        self.append_at(author, payload_kind, payload, reply_to, now_unix())
    }

    pub fn append_at(
        &self,
        author: &Keypair,
        payload_kind: PayloadKind,
        payload: &[u8],
        reply_to: Option<EntryRef>,
        timestamp: u64,
    ) -> Result<(StreamState, ContentEntry), StreamError> {
        let mut next = self.clone();
        let entry = next.push(author, payload_kind, payload, reply_to, timestamp)?;
        Ok((next, entry))
    }

    /// Replaces the writer set. Owner only.
    pub fn update_writers(
        &mut self,
        owner: &Keypair,
        writers: &[Principal],
        timestamp: u64,
    ) -> Result<ContentEntry, StreamError> {
        let payload = canonical::to_canonical_bytes(writers)?;
        self.push(owner, PayloadKind::WriterUpdate, &payload, None, timestamp)
    }

    pub fn verify(&self) -> ValidationReport {
        verify_stream(&self.genesis, &self.entries)
    }

    /// `.csl` encoding: genesis line then one line per entry.
    pub fn to_csl(&self) -> Vec<u8> {
        let mut out = self.genesis.canonical_bytes();
        out.push(b'\n');
        for e in &self.entries {
            out.extend_from_slice(&e.canonical_bytes());
            out.push(b'\n');
        }
        out
    }
}

/// Records parsed from a `.csl` file. `torn_tail` is set when the final line
/// lacked its newline and failed to parse (an interrupted write).
#[derive(Debug, Clone)]
pub struct CslRecords {
    pub genesis: GenesisRecord,
    pub entries: Vec<ContentEntry>,
    pub torn_tail: bool,
}

pub fn parse_csl(bytes: &[u8]) -> Result<CslRecords, StreamError> {
    let text = std::str::from_utf8(bytes)
        .map_err(|e| StreamError::Parse { line: 0, message: format!("not UTF-8: {e}") })?;
    let ends_clean = text.is_empty() || text.ends_with('\n');
    let lines: Vec<&str> = text.lines().collect();
    let mut iter = lines.iter().enumerate().filter(|(_, l)| !l.is_empty());
    let (_, first) =
        iter.next().ok_or(StreamError::Parse { line: 1, message: "missing genesis".into() })?;
    let genesis: GenesisRecord = serde_json::from_str(first)
        .map_err(|e| StreamError::Parse { line: 1, message: e.to_string() })?;
    let mut entries = Vec::new();
    let mut torn_tail = false;
    for (i, line) in iter {
        match serde_json::from_str::<ContentEntry>(line) {
            Ok(e) => entries.push(e),
            Err(_) if !ends_clean && i + 1 == lines.len() => torn_tail = true,
            Err(e) => return Err(StreamError::Parse { line: i + 1, message: e.to_string() }),
        }
    }
    Ok(CslRecords { genesis, entries, torn_tail })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn alice() -> Keypair {
        Keypair::from_seed([1u8; 32])
    }

    fn bob() -> Keypair {
        Keypair::from_seed([2u8; 32])
    }

    fn wall() -> StreamState {
        StreamState::create_with(&alice(), "wall", StreamKind::Content, &[], None, 1_000).unwrap()
    }

    #[test]
    fn stream_id_definition() {
        let s = wall();
        let mut input = alice().public_key().to_vec();
        input.push(0x1F);
        input.extend_from_slice(b"wall");
        assert_eq!(s.stream_id().0, crate::canonical::sha256(&input));
        assert_eq!(s.head_seq(), 0);
        assert_eq!(wall().stream_id(), s.stream_id());
        assert!(s.verify().ok);
    }

    #[test]
    fn forum_writers() {
        let s = StreamState::create_with(
            &alice(),
            "forum",
            StreamKind::Content,
            &[bob().principal()],
            None,
            0,
        )
        .unwrap();
        let set: BTreeSet<_> = s.genesis().writers.iter().copied().collect();
        assert_eq!(set, BTreeSet::from([alice().principal(), bob().principal()]));
    }

    #[test]
    fn oversize_name() {
        let name = "x".repeat(257);
        assert!(matches!(
            StreamState::create(&alice(), &name, StreamKind::Content, &[]),
            Err(StreamError::NameTooLong(257))
        ));
    }

    #[test]
    fn first_append_links_to_genesis() {
        let s = wall();
        let (s2, e) = s.append_at(&alice(), PayloadKind::Post, b"hi", None, 5).unwrap();
        assert_eq!(e.seq, 1);
        assert_eq!(e.prev_hash, s.genesis().hash());
        assert_eq!(e.content_hash, Hash::of(b"hi"));
        assert_eq!(s2.head_seq(), 1);
        assert_eq!(s.head_seq(), 0, "original state untouched");
    }

    #[test]
    fn unauthorized_writer() {
        let s = wall();
        assert!(matches!(
            s.append(&bob(), PayloadKind::Post, b"hey", None),
            Err(StreamError::UnauthorizedWriter)
        ));
    }

    #[test]
    fn writer_update_grants_and_revokes() {
        let mut s = wall();
        s.update_writers(&alice(), &[bob().principal()], 1).unwrap();
        s.push(&bob(), PayloadKind::Post, b"b", None, 2).unwrap();
        s.update_writers(&alice(), &[], 3).unwrap();
        assert!(matches!(
            s.push(&bob(), PayloadKind::Post, b"b2", None, 4),
            Err(StreamError::UnauthorizedWriter)
        ));
        assert!(s.verify().ok);
    }

    #[test]
    fn non_owner_cannot_update_writers() {
        let mut s = StreamState::create_with(
            &alice(),
            "f",
            StreamKind::Content,
            &[bob().principal()],
            None,
            0,
        )
        .unwrap();
        assert!(matches!(
            s.update_writers(&bob(), &[], 1),
            Err(StreamError::UnauthorizedWriter)
        ));
    }

    #[test]
    fn tombstone_must_point_backwards_in_stream() {
        let mut s = wall();
        s.push(&alice(), PayloadKind::Post, b"a", None, 1).unwrap();
        let id = s.stream_id();
        assert!(s.push(&alice(), PayloadKind::Tombstone, b"", Some(EntryRef::new(id, 1)), 2).is_ok());
        assert!(s.push(&alice(), PayloadKind::Tombstone, b"", Some(EntryRef::new(id, 9)), 3).is_err());
        assert!(s.push(&alice(), PayloadKind::Tombstone, b"", None, 3).is_err());
        assert_eq!(s.entries().len(), 2, "tombstones add entries, never remove");
    }

    #[test]
    fn removing_an_entry_is_a_gap() {
        let mut s = wall();
        for i in 0..5u8 {
            s.push(&alice(), PayloadKind::Post, &[i], None, i as u64).unwrap();
        }
        let mut entries = s.entries().to_vec();
        entries.remove(2);
        let report = verify_stream(s.genesis(), &entries);
        assert!(!report.ok);
        // the verified prefix ends at seq 2
        assert_eq!(report.first_bad_seq, Some(3));
        assert!(report.reasons.contains(&Reason::BadSeq) || report.reasons.contains(&Reason::BadChain));
    }

    #[test]
    fn fork_detection_cases() {
        let mut a = wall();
        let mut b = wall();
        for i in 0..4u8 {
            a.push(&alice(), PayloadKind::Post, &[i], None, 10).unwrap();
            b.push(&alice(), PayloadKind::Post, &[i], None, 10).unwrap();
        }
        let ea = a.push(&alice(), PayloadKind::Post, b"left", None, 11).unwrap();
        let eb = b.push(&alice(), PayloadKind::Post, b"right", None, 11).unwrap();
        assert!(detect_fork(&ea, &ea).is_none());
        let ev = detect_fork(&ea, &eb).expect("equivocation");
        assert_eq!(detect_fork(&eb, &ea), Some(ev.clone()));
        assert!(ev.is_valid());

        let other = StreamState::create_with(&alice(), "other", StreamKind::Content, &[], None, 0)
            .unwrap()
            .append_at(&alice(), PayloadKind::Post, b"x", None, 0)
            .unwrap()
            .1;
        assert!(detect_fork(&a.entries()[0], &other).is_none());

        let mut forked = a.clone();
        assert!(forked.mark_forked(ev));
        assert!(matches!(
            forked.push(&alice(), PayloadKind::Post, b"z", None, 12),
            Err(StreamError::ForkedStream)
        ));
    }

    #[test]
    fn adjacent_equivocation_is_reported_as_fork() {
        let mut a = wall();
        let mut b = wall();
        let ea = a.push(&alice(), PayloadKind::Post, b"1", None, 1).unwrap();
        let eb = b.push(&alice(), PayloadKind::Post, b"2", None, 1).unwrap();
        let report = verify_stream(a.genesis(), &[ea, eb]);
        assert_eq!(report.first_bad_seq, Some(2));
        assert!(report.reasons.contains(&Reason::Fork));
    }

    #[test]
    fn csl_roundtrip_and_torn_tail() {
        let mut s = wall();
        for i in 0..3u8 {
            s.push(&alice(), PayloadKind::Post, &[i], None, 7).unwrap();
        }
        let csl = s.to_csl();
        let parsed = parse_csl(&csl).unwrap();
        assert!(!parsed.torn_tail);
        let rebuilt = StreamState::from_records(parsed.genesis, parsed.entries).unwrap();
        assert_eq!(rebuilt.to_csl(), csl);

        let mut torn = csl.clone();
        torn.extend_from_slice(br#"{"author":"ab"#);
        let parsed = parse_csl(&torn).unwrap();
        assert!(parsed.torn_tail);
        assert_eq!(parsed.entries.len(), 3);
    }

    #[test]
    fn payload_kind_parses_case_insensitively() {
        assert_eq!("post".parse::<PayloadKind>().unwrap(), PayloadKind::Post);
        assert_eq!("MOD_ACTION".parse::<PayloadKind>().unwrap(), PayloadKind::ModAction);
        assert!("nope".parse::<PayloadKind>().is_err());
    }

    #[test]
    fn range_clamps() {
        let mut s = wall();
        for i in 0..5u8 {
            s.push(&alice(), PayloadKind::Post, &[i], None, 0).unwrap();
        }
        assert_eq!(s.range(2, 3).len(), 2);
        assert_eq!(s.range(0, 100).len(), 5);
        assert_eq!(s.range(6, 9).len(), 0);
        assert_eq!(s.range(4, 2).len(), 0);
    }
}
