//! Pull-based stream synchronization.
//!
//! A node asks a peer for its head, fetches the entries it lacks starting at
//! the last entry both should share, and accepts them only through
//! [`StreamState::accept`]. If the shared entry differs, it pulls the peer's
//! whole chain, verifies it, and records fork evidence. A forked stream keeps
//! its first-accepted branch and accepts no further entries.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::canonical;
use crate::hash::Hash;
use crate::identity::{Keypair, Principal, Signature};
use crate::stream::{detect_fork, ContentEntry, ForkEvidence, GenesisRecord, StreamId, StreamState};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SyncError {
    #[error("peer unreachable: {0}")]
    PeerUnreachable(String),
    #[error("peer data rejected: {0}")]
    ValidationRejected(String),
}

impl SyncError {
    pub fn code(&self) -> &'static str {
        match self {
            SyncError::PeerUnreachable(_) => "PEER_UNREACHABLE",
            SyncError::ValidationRejected(_) => "VALIDATION_REJECTED",
        }
    }
}

/// What a peer advertises about one stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadInfo {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fork_evidence: Option<ForkEvidence>,
    pub genesis: GenesisRecord,
    pub head_hash: Hash,
    pub head_seq: u64,
    pub stream_id: StreamId,
}

impl HeadInfo {
    pub fn of(state: &StreamState) -> HeadInfo {
        HeadInfo {
            fork_evidence: state.fork_evidence().cloned(),
            genesis: state.genesis().clone(),
            head_hash: state.head_hash(),
            head_seq: state.head_seq(),
            stream_id: state.stream_id(),
        }
    }

    /// Whether pulling from this peer could change `local`.
    pub fn differs_from(&self, local: Option<&StreamState>) -> bool {
        match local {
            None => true,
            Some(s) => {
                let new_evidence = self.fork_evidence.is_some() && !s.is_forked();
                let prefix_of_local = self.head_seq < s.head_seq()
                    && s.entry(self.head_seq).map_or(self.head_seq == 0, |e| e.hash() == self.head_hash);
                new_evidence || (s.head_hash() != self.head_hash && !prefix_of_local)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SyncKind {
    HeadRequest,
    HeadResponse,
    EntriesRequest,
    EntriesResponse,
    Announce,
}

/// Wire message for the `/sync/` endpoints, optionally signed by the sender.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyncMessage {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entries: Option<Vec<ContentEntry>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub from_seq: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head: Option<HeadInfo>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heads: Option<Vec<HeadInfo>>,
    pub kind: SyncKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sender: Option<Principal>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signature: Option<Signature>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stream_id: Option<StreamId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub to_seq: Option<u64>,
}

impl SyncMessage {
    pub fn new(kind: SyncKind) -> SyncMessage {
        SyncMessage {
            entries: None,
            from_seq: None,
            head: None,
            heads: None,
            kind,
            sender: None,
            signature: None,
            stream_id: None,
            to_seq: None,
        }
    }

    pub fn entries_request(stream_id: StreamId, from_seq: u64, to_seq: u64) -> SyncMessage {
        SyncMessage { stream_id: Some(stream_id), from_seq: Some(from_seq), to_seq: Some(to_seq), ..Self::new(SyncKind::EntriesRequest) }
    }

    fn signing_bytes(&self) -> Vec<u8> {
        canonical::to_canonical_bytes_without(self, "signature").expect("message serializes")
    }

    pub fn signed(mut self, key: &Keypair) -> SyncMessage {
        self.sender = Some(key.principal());
        self.signature = None;
        self.signature = Some(key.sign(&self.signing_bytes()));
        self
    }

    /// True when unsigned, or signed by `sender` with a valid signature.
    pub fn signature_ok(&self) -> bool {
        match (&self.sender, &self.signature) {
            (None, None) => true,
            (Some(p), Some(sig)) => p.verify(&self.signing_bytes(), sig),
            _ => false,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        canonical::to_canonical_bytes(self).expect("message serializes")
    }
}

/// Something that serves streams: another node over HTTP, or an in-memory map.
pub trait Peer {
    fn peer_name(&self) -> String;
    fn head(&self, id: &StreamId) -> Result<Option<HeadInfo>, SyncError>;
    fn heads(&self) -> Result<Vec<HeadInfo>, SyncError>;
    /// Entries with `from <= seq <= to`.
    fn entries(&self, id: &StreamId, from: u64, to: u64) -> Result<Vec<ContentEntry>, SyncError>;
}

pub type StreamMap = BTreeMap<StreamId, StreamState>;

impl Peer for StreamMap {
    fn peer_name(&self) -> String {
        "local".to_string()
    }

    fn head(&self, id: &StreamId) -> Result<Option<HeadInfo>, SyncError> {
        Ok(self.get(id).map(HeadInfo::of))
    }

    fn heads(&self) -> Result<Vec<HeadInfo>, SyncError> {
        Ok(self.values().map(HeadInfo::of).collect())
    }

    fn entries(&self, id: &StreamId, from: u64, to: u64) -> Result<Vec<ContentEntry>, SyncError> {
        Ok(self.get(id).map(|s| s.range(from, to).to_vec()).unwrap_or_default())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncResult {
    pub new_entries: usize,
    /// The local copy is flagged forked after this sync.
    pub fork_detected: bool,
    /// Fork flag was set by this sync.
    pub newly_forked: bool,
}

/// Outcome of offering peer data for one stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Integration {
    Applied(SyncResult),
    /// The overlap entry did not match; retry with the full chain from seq 1.
    NeedFullChain,
}

fn rejected(what: impl std::fmt::Display) -> SyncError {
    SyncError::ValidationRejected(what.to_string())
}

/// Applies `entries` (a contiguous run ending at `head.head_seq`) to the
/// local copy. The local map is untouched on error.
pub fn integrate(local: &mut StreamMap, head: &HeadInfo, entries: &[ContentEntry]) -> Result<Integration, SyncError> {
    let id = head.stream_id;
    if head.genesis.stream_id != id {
        return Err(rejected("genesis does not belong to the advertised stream"));
    }
    for (i, pair) in entries.windows(2).enumerate() {
        if pair[1].seq != pair[0].seq + 1 {
            return Err(rejected(format!("entries not contiguous at position {}", i + 1)));
        }
    }
    if entries.iter().any(|e| e.stream_id != id) {
        return Err(rejected("entry from a different stream"));
    }
    let evidence = head
        .fork_evidence
        .clone()
        .filter(|ev| ev.stream_id() == id && ev.is_valid());

    let Some(current) = local.get(&id) else {
        if entries.first().is_some_and(|e| e.seq != 1) {
            return Ok(Integration::NeedFullChain);
        }
        let mut state =
            StreamState::from_records(head.genesis.clone(), entries.to_vec()).map_err(rejected)?;
        let mut newly_forked = false;
        if let Some(ev) = evidence {
            newly_forked = state.mark_forked(ev);
        }
        let result = SyncResult { new_entries: entries.len(), fork_detected: state.is_forked(), newly_forked };
        local.insert(id, state);
        return Ok(Integration::Applied(result));
    };

    if current.genesis().hash() != head.genesis.hash() {
        return Err(rejected("genesis differs from the local copy"));
    }
    let mut state = current.clone();
    let was_forked = state.is_forked();
    if let Some(ev) = evidence {
        state.mark_forked(ev);
    }
    let mut new_entries = 0;
    if let (Some(first), Some(last)) = (entries.first(), entries.last()) {
        let local_seq = state.head_seq();
        if first.seq > local_seq.max(1) {
            return Ok(Integration::NeedFullChain);
        }
        // hashes cover prev_hash, so one matching entry vouches for the prefix
        let shared = local_seq.min(last.seq);
        let agrees = shared < first.seq
            || state.entry(shared).map(ContentEntry::hash) == Some(entries[(shared - first.seq) as usize].hash());
        if agrees {
            if !state.is_forked() {
                for e in entries.iter().filter(|e| e.seq > local_seq) {
                    state.accept(e.clone()).map_err(rejected)?;
                    new_entries += 1;
                }
            }
        } else if first.seq == 1 {
            let theirs = StreamState::from_records(head.genesis.clone(), entries.to_vec()).map_err(rejected)?;
            let split = (1..=shared)
                .find(|&s| state.entry(s).map(ContentEntry::hash) != theirs.entry(s).map(ContentEntry::hash))
                .expect("chains disagree at or before the shared head");
            let ev = detect_fork(state.entry(split).expect("local seq"), theirs.entry(split).expect("peer seq"))
                .ok_or_else(|| rejected("divergent entry is not valid fork evidence"))?;
            state.mark_forked(ev);
        } else {
            return Ok(Integration::NeedFullChain);
        }
    }
    let result = SyncResult {
        new_entries,
        fork_detected: state.is_forked(),
        newly_forked: state.is_forked() && !was_forked,
    };
    local.insert(id, state);
    Ok(Integration::Applied(result))
}

/// First seq to request so the response overlaps the local head.
pub fn overlap_start(local: Option<&StreamState>, peer_head_seq: u64) -> u64 {
    local.map(|s| s.head_seq().min(peer_head_seq).max(1)).unwrap_or(1)
}

/// Pulls one stream from `peer` into `local`.
pub fn sync_stream(local: &mut StreamMap, peer: &dyn Peer, id: &StreamId) -> Result<SyncResult, SyncError> {
    let Some(head) = peer.head(id)? else {
        return Ok(SyncResult {
            fork_detected: local.get(id).is_some_and(StreamState::is_forked),
            ..SyncResult::default()
        });
    };
    if head.stream_id != *id {
        return Err(rejected("peer answered for a different stream"));
    }
    let from = overlap_start(local.get(id), head.head_seq);
    let entries = if head.head_seq == 0 { vec![] } else { peer.entries(id, from, head.head_seq)? };
    check_range(&entries, from, head.head_seq)?;
    match integrate(local, &head, &entries)? {
        Integration::Applied(r) => Ok(r),
        Integration::NeedFullChain => {
            let entries = peer.entries(id, 1, head.head_seq)?;
            check_range(&entries, 1, head.head_seq)?;
            match integrate(local, &head, &entries)? {
                Integration::Applied(r) => Ok(r),
                Integration::NeedFullChain => Err(rejected("peer chain does not connect")),
            }
        }
    }
}

fn check_range(entries: &[ContentEntry], from: u64, to: u64) -> Result<(), SyncError> {
    let expected = if to == 0 { 0 } else { (to - from + 1) as usize };
    if entries.len() != expected || entries.first().is_some_and(|e| e.seq != from) {
        return Err(rejected(format!("asked for seq {from}..={to}, got {} entries", entries.len())));
    }
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GossipReport {
    pub entries_transferred: usize,
    pub forks_detected: BTreeSet<StreamId>,
    pub peers_contacted: usize,
    pub peers_unreachable: Vec<String>,
    pub rejected: Vec<String>,
    pub streams_synced: BTreeSet<StreamId>,
}

/// One anti-entropy pass: compare heads with every peer and pull any gaps.
/// With `only` set, streams outside it are ignored.
pub fn gossip_round(local: &mut StreamMap, peers: &[&dyn Peer], only: Option<&BTreeSet<StreamId>>) -> GossipReport {
    let mut report = GossipReport::default();
    for peer in peers {
        let heads = match peer.heads() {
            Ok(h) => h,
            Err(e) => {
                report.peers_unreachable.push(format!("{}: {e}", peer.peer_name()));
                continue;
            }
        };
        report.peers_contacted += 1;
        for head in heads {
            let id = head.stream_id;
            if only.is_some_and(|o| !o.contains(&id)) || !head.differs_from(local.get(&id)) {
                continue;
            }
            match sync_stream(local, *peer, &id) {
                Ok(r) => {
                    report.entries_transferred += r.new_entries;
                    if r.new_entries > 0 || r.newly_forked {
                        report.streams_synced.insert(id);
                    }
                    if r.fork_detected {
                        report.forks_detected.insert(id);
                    }
                }
                Err(e) => report.rejected.push(format!("{}: {id}: {e}", peer.peer_name())),
            }
        }
    }
    report
}

/// Where a peer lives and, optionally, which key it must answer with.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeerAddress {
    pub endpoint: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node_id: Option<Principal>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Transport {
    Http(String),
    /// `sim://<node index>`
    Sim(usize),
}

impl PeerAddress {
    pub fn transport(&self) -> Result<Transport, String> {
        if let Some(n) = self.endpoint.strip_prefix("sim://") {
            return n.parse().map(Transport::Sim).map_err(|_| format!("bad simulator token `{}`", self.endpoint));
        }
        if self.endpoint.starts_with("http://") || self.endpoint.starts_with("https://") {
            return Ok(Transport::Http(self.endpoint.trim_end_matches('/').to_string()));
        }
        Err(format!("unsupported peer endpoint `{}`", self.endpoint))
    }
}

/// A peer reached through another node's `/sync/` endpoints.
pub struct HttpPeer {
    base_url: String,
    expect: Option<Principal>,
    key: Option<Keypair>,
    agent: ureq::Agent,
}

impl HttpPeer {
    pub fn new(base_url: &str, expect: Option<Principal>, key: Option<Keypair>) -> HttpPeer {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(30)))
            .http_status_as_error(false)
            .build()
            .into();
        HttpPeer { base_url: base_url.trim_end_matches('/').to_string(), expect, key, agent }
    }

    pub fn from_address(addr: &PeerAddress, key: Option<Keypair>) -> Result<HttpPeer, String> {
        match addr.transport()? {
            Transport::Http(url) => Ok(HttpPeer::new(&url, addr.node_id, key)),
            Transport::Sim(_) => Err("simulator peers exist only inside `simulate`".into()),
        }
    }

    fn unreachable(&self, e: impl std::fmt::Display) -> SyncError {
        SyncError::PeerUnreachable(format!("{}: {e}", self.base_url))
    }

    fn read(&self, resp: Result<ureq::http::Response<ureq::Body>, ureq::Error>) -> Result<Option<SyncMessage>, SyncError> {
        let mut resp = resp.map_err(|e| self.unreachable(e))?;
        let status = resp.status().as_u16();
        let body = resp.body_mut().read_to_vec().map_err(|e| self.unreachable(e))?;
        match status {
            200 => {}
            404 => return Ok(None),
            s => return Err(self.unreachable(format!("HTTP {s}: {}", String::from_utf8_lossy(&body)))),
        }
        let msg: SyncMessage = serde_json::from_slice(&body).map_err(rejected)?;
        if !msg.signature_ok() {
            return Err(rejected("response signature does not verify"));
        }
        if let Some(expect) = &self.expect {
            if msg.sender.as_ref() != Some(expect) {
                return Err(rejected("response not signed by the configured node key"));
            }
        }
        Ok(Some(msg))
    }
}

impl Peer for HttpPeer {
    fn peer_name(&self) -> String {
        self.base_url.clone()
    }

    fn head(&self, id: &StreamId) -> Result<Option<HeadInfo>, SyncError> {
        let resp = self.agent.get(format!("{}/sync/head/{id}", self.base_url)).call();
        Ok(self.read(resp)?.and_then(|m| m.head))
    }

    fn heads(&self) -> Result<Vec<HeadInfo>, SyncError> {
        let resp = self.agent.get(format!("{}/sync/heads", self.base_url)).call();
        Ok(self.read(resp)?.and_then(|m| m.heads).unwrap_or_default())
    }

    fn entries(&self, id: &StreamId, from: u64, to: u64) -> Result<Vec<ContentEntry>, SyncError> {
        let mut req = SyncMessage::entries_request(*id, from, to);
        if let Some(k) = &self.key {
            req = req.signed(k);
        }
        let resp = self
            .agent
            .post(format!("{}/sync/entries", self.base_url))
            .header("content-type", "application/json")
            .send(&req.to_bytes()[..]);
        Ok(self.read(resp)?.and_then(|m| m.entries).unwrap_or_default())
    }
}
