//! Aggregation: cache and index verified streams, then assemble moderated
//! feeds from them.
//!
//! Two assembly modes mirror familiar platforms. A forum feed is a deny-list
//! view over a fixed set of content streams, moderated by the union of the
//! forum's moderator streams plus any authority defaults. A follow feed is an
//! allow-list view over everything indexed, shown only where a followed
//! moderation stream allows it.

use std::collections::{BTreeMap, BTreeSet};

use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::canonical;
use crate::hash::Hash;
use crate::identity::PrincipalId;
use crate::moderation::{
    self, combine, judge, Combinator, EffectivePolicy, FetchError, FilterMode, HiddenItem, HiddenReason,
    LabelMark, ModAction, ModStreamFetcher, ModStreamView, ModVerb, ModerationDiff, PolicyWarning,
    ScoreMark, Target, Verdict, DEFAULT_DEPTH_LIMIT,
};
use crate::storage::{self, StorageHint, StoreSet};
use crate::stream::{ContentEntry, EntryRef, PayloadKind, StreamId, StreamKind, StreamState};

/// Width of one bucket in the recency index.
pub const RECENCY_BUCKET_SECS: u64 = 3600;

#[derive(Debug, thiserror::Error)]
pub enum AggregatorError {
    #[error("feeds come from different index snapshots ({0} vs {1})")]
    SnapshotMismatch(Hash, Hash),
}

/// Fetches payload bytes by content hash for ingestion.
pub trait BlobResolver {
    fn resolve_blob(&self, hash: &Hash) -> Option<Vec<u8>>;
}

impl<F: Fn(&Hash) -> Option<Vec<u8>>> BlobResolver for F {
    fn resolve_blob(&self, hash: &Hash) -> Option<Vec<u8>> {
        self(hash)
    }
}

/// Resolves through signed hints and then the reachable stores.
pub struct HintResolver<'a> {
    pub hints: &'a [StorageHint],
    pub stores: &'a StoreSet,
}

impl BlobResolver for HintResolver<'_> {
    fn resolve_blob(&self, hash: &Hash) -> Option<Vec<u8>> {
        storage::resolve(hash, self.hints, self.stores).map(|b| b.bytes)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Payload {
    Resolved(Vec<u8>),
    Unresolved,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexedEntry {
    pub entry: ContentEntry,
    pub payload: Payload,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct IngestReport {
    pub streams_ingested: usize,
    pub streams_unchanged: usize,
    pub entries_indexed: usize,
    pub unresolved_payloads: usize,
    pub rejected: Vec<(StreamId, String)>,
}

/// Verified entries plus lookup maps. Rebuilding from the same streams
/// yields an equal index.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ContentIndex {
    streams: BTreeMap<StreamId, StreamState>,
    entries: BTreeMap<EntryRef, IndexedEntry>,
    by_author: BTreeMap<PrincipalId, BTreeSet<EntryRef>>,
    by_stream: BTreeMap<StreamId, (u64, u64)>,
    by_hash: BTreeMap<Hash, BTreeSet<EntryRef>>,
    by_time: BTreeMap<u64, BTreeSet<EntryRef>>,
    tombstoned: BTreeMap<EntryRef, EntryRef>,
    mod_views: BTreeMap<StreamId, ModStreamView>,
}

impl ContentIndex {
    pub fn new() -> ContentIndex {
        ContentIndex::default()
    }

    /// Idempotent. Streams failing verification are skipped and reported;
    /// payload misses are indexed as [`Payload::Unresolved`].
    pub fn ingest(&mut self, streams: &[StreamState], blobs: &dyn BlobResolver) -> IngestReport {
        let mut report = IngestReport::default();
        for state in streams {
            let id = state.stream_id();
            if let Some(existing) = self.streams.get(&id) {
                let unresolved_left = self.unresolved_in(id) > 0;
                if existing.head_hash() == state.head_hash()
                    && existing.is_forked() == state.is_forked()
                    && !unresolved_left
                {
                    report.streams_unchanged += 1;
                    continue;
                }
            }
            let verdict = state.verify();
            if !verdict.ok {
                report.rejected.push((id, verdict.to_string()));
                continue;
            }
            self.remove_stream(id);
            self.insert_stream(state.clone(), blobs, &mut report);
            report.streams_ingested += 1;
        }
        report
    }

    fn unresolved_in(&self, id: StreamId) -> usize {
        self.entries
            .range(EntryRef::new(id, 0)..=EntryRef::new(id, u64::MAX))
            .filter(|(_, e)| e.payload == Payload::Unresolved)
            .count()
    }

    fn remove_stream(&mut self, id: StreamId) {
        let Some(state) = self.streams.remove(&id) else { return };
        for e in state.entries() {
            let r = e.entry_ref();
            self.entries.remove(&r);
            remove_from(&mut self.by_author, &e.author.id(), &r);
            remove_from(&mut self.by_hash, &e.content_hash, &r);
            remove_from(&mut self.by_time, &(e.timestamp / RECENCY_BUCKET_SECS), &r);
            if e.payload_kind == PayloadKind::Tombstone {
                if let Some(target) = e.reply_to {
                    self.tombstoned.remove(&target);
                }
            }
        }
        self.by_stream.remove(&id);
        self.mod_views.remove(&id);
    }

    fn insert_stream(&mut self, state: StreamState, blobs: &dyn BlobResolver, report: &mut IngestReport) {
        let id = state.stream_id();
        for e in state.entries() {
            let r = e.entry_ref();
            let payload = match e.payload_kind {
                // writer updates carry their payload inline
                PayloadKind::WriterUpdate | PayloadKind::Tombstone => Payload::Unresolved,
                _ => match blobs.resolve_blob(&e.content_hash) {
                    Some(bytes) if Hash::of(&bytes) == e.content_hash => Payload::Resolved(bytes),
                    _ => {
                        report.unresolved_payloads += 1;
                        Payload::Unresolved
                    }
                },
            };
            self.by_author.entry(e.author.id()).or_default().insert(r);
            self.by_hash.entry(e.content_hash).or_default().insert(r);
            self.by_time.entry(e.timestamp / RECENCY_BUCKET_SECS).or_default().insert(r);
            if e.payload_kind == PayloadKind::Tombstone {
                if let Some(target) = e.reply_to {
                    self.tombstoned.insert(target, r);
                }
            }
            self.entries.insert(r, IndexedEntry { entry: e.clone(), payload });
            report.entries_indexed += 1;
        }
        if state.head_seq() > 0 {
            self.by_stream.insert(id, (1, state.head_seq()));
        }
        if state.kind() == StreamKind::Moderation {
            let entries = &self.entries;
            let view = ModStreamView::from_state(&state, |h| {
                state
                    .entries()
                    .iter()
                    .find(|e| e.content_hash == *h)
                    .and_then(|e| match &entries[&e.entry_ref()].payload {
                        Payload::Resolved(b) => Some(b.clone()),
                        Payload::Unresolved => None,
                    })
            });
            self.mod_views.insert(id, view);
        }
        self.streams.insert(id, state);
    }

    pub fn stream(&self, id: &StreamId) -> Option<&StreamState> {
        self.streams.get(id)
    }

    pub fn streams(&self) -> impl Iterator<Item = &StreamState> {
        self.streams.values()
    }

    pub fn get(&self, r: &EntryRef) -> Option<&IndexedEntry> {
        self.entries.get(r)
    }

    pub fn by_author(&self, author: &PrincipalId) -> impl Iterator<Item = &EntryRef> {
        self.by_author.get(author).into_iter().flatten()
    }

    pub fn by_hash(&self, hash: &Hash) -> impl Iterator<Item = &EntryRef> {
        self.by_hash.get(hash).into_iter().flatten()
    }

    pub fn seq_range(&self, stream: &StreamId) -> Option<(u64, u64)> {
        self.by_stream.get(stream).copied()
    }

    /// Entries with timestamps in `[from, to)`, by bucket.
    pub fn recent(&self, from: u64, to: u64) -> Vec<EntryRef> {
        self.by_time
            .range(from / RECENCY_BUCKET_SECS..=to / RECENCY_BUCKET_SECS)
            .flat_map(|(_, refs)| refs.iter())
            .filter(|r| self.entries[r].entry.timestamp >= from && self.entries[r].entry.timestamp < to)
            .copied()
            .collect()
    }

    pub fn tombstone_for(&self, r: &EntryRef) -> Option<&EntryRef> {
        self.tombstoned.get(r)
    }

    pub fn author_count(&self) -> usize {
        self.by_author.values().map(BTreeSet::len).sum()
    }

    pub fn entry_count(&self) -> usize {
        self.entries.len()
    }

    /// Identifies the set of stream heads this index was built from.
    pub fn snapshot(&self) -> Hash {
        let heads: Vec<(StreamId, Hash, bool)> =
            self.streams.values().map(|s| (s.stream_id(), s.head_hash(), s.is_forked())).collect();
        canonical::canonical_hash(&heads).expect("heads serialize")
    }

    /// Content-bearing entries (POST/REPLY/EDIT) of content streams.
    pub fn raw_items<'a>(&'a self, streams: Option<&'a [StreamId]>) -> impl Iterator<Item = &'a IndexedEntry> + 'a {
        let wanted: Option<BTreeSet<StreamId>> = streams.map(|s| s.iter().copied().collect());
        self.entries.values().filter(move |ie| {
            let kind = self.streams.get(&ie.entry.stream_id).map(StreamState::kind);
            kind == Some(StreamKind::Content)
                && ie.entry.payload_kind.is_content()
                && wanted.as_ref().is_none_or(|w| w.contains(&ie.entry.stream_id))
        })
    }

    pub fn mod_view(&self, id: &StreamId) -> Option<&ModStreamView> {
        self.mod_views.get(id)
    }
}

fn remove_from<K: Ord>(map: &mut BTreeMap<K, BTreeSet<EntryRef>>, key: &K, r: &EntryRef) {
    if let Some(set) = map.get_mut(key) {
        set.remove(r);
        if set.is_empty() {
            map.remove(key);
        }
    }
}

impl ModStreamFetcher for ContentIndex {
    fn fetch(&self, id: &StreamId) -> Result<ModStreamView, FetchError> {
        if let Some(v) = self.mod_views.get(id) {
            return Ok(v.clone());
        }
        match self.streams.get(id) {
            Some(s) => Ok(ModStreamView {
                stream_id: *id,
                kind: s.kind(),
                scope: s.genesis().scope,
                actions: vec![],
                warnings: vec![],
            }),
            None => Err(FetchError(format!("stream {id} not in index"))),
        }
    }
}

/// A moderation stream an aggregator applies by default.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuthorityStream {
    /// Locked streams ignore reader opt-outs.
    pub locked: bool,
    pub stream_id: StreamId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForumConfig {
    pub content_streams: Vec<StreamId>,
    #[serde(default)]
    pub default_streams: Vec<AuthorityStream>,
    pub forum_id: String,
    #[serde(default)]
    pub moderator_streams: Vec<StreamId>,
}

impl ForumConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.content_streams.is_empty() {
            return Err(format!("forum `{}` needs at least one content stream", self.forum_id));
        }
        Ok(())
    }

    /// Moderation streams in effect for a reader who disabled `disabled`.
    pub fn effective_moderation(&self, disabled: &BTreeSet<StreamId>) -> Vec<StreamId> {
        let mut out: BTreeSet<StreamId> = self.moderator_streams.iter().copied().collect();
        for d in &self.default_streams {
            if d.locked || !disabled.contains(&d.stream_id) {
                out.insert(d.stream_id);
            }
        }
        out.into_iter().collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubscriptionSet {
    #[serde(default)]
    pub disabled_defaults: BTreeSet<StreamId>,
    #[serde(default)]
    pub follows: BTreeSet<StreamId>,
    #[serde(default)]
    pub muted: BTreeSet<StreamId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user: Option<PrincipalId>,
}

impl SubscriptionSet {
    pub fn validate(&self) -> Result<(), String> {
        if let Some(both) = self.follows.intersection(&self.muted).next() {
            return Err(format!("stream {both} is both followed and muted"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PayloadView {
    Resolved {
        base64: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        text: Option<String>,
    },
    Unresolved,
}

impl PayloadView {
    fn of(payload: &Payload) -> PayloadView {
        match payload {
            Payload::Resolved(bytes) => PayloadView::Resolved {
                base64: base64::engine::general_purpose::STANDARD.encode(bytes),
                text: String::from_utf8(bytes.clone()).ok(),
            },
            Payload::Unresolved => PayloadView::Unresolved,
        }
    }

    pub fn is_unresolved(&self) -> bool {
        matches!(self, PayloadView::Unresolved)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub allowed_by: BTreeSet<StreamId>,
    pub denied_by: BTreeSet<StreamId>,
    pub labeled_by: BTreeSet<StreamId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedItem {
    pub entry: ContentEntry,
    pub labels: Vec<LabelMark>,
    pub payload: PayloadView,
    pub provenance: Provenance,
    pub scores: Vec<ScoreMark>,
    /// A later TOMBSTONE asks presentation layers to hide this item.
    pub tombstoned: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SortMode {
    /// Newest first, then stream id, then seq.
    #[default]
    Chronological,
    /// Highest summed SCORE first, then chronological.
    ScoreWeighted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeedOptions {
    pub generated_at: u64,
    pub sort: SortMode,
    pub depth_limit: usize,
}

impl Default for FeedOptions {
    fn default() -> Self {
        FeedOptions { generated_at: 0, sort: SortMode::Chronological, depth_limit: DEFAULT_DEPTH_LIMIT }
    }
}

impl FeedOptions {
    pub fn at(generated_at: u64) -> FeedOptions {
        FeedOptions { generated_at, ..FeedOptions::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Feed {
    pub generated_at: u64,
    pub hidden: Vec<HiddenItem>,
    pub items: Vec<FeedItem>,
    pub label_summary: BTreeMap<String, usize>,
    pub missing_streams: Vec<StreamId>,
    pub mode: FilterMode,
    pub policy_digest: Hash,
    pub policy_warnings: BTreeSet<PolicyWarning>,
    pub snapshot: Hash,
    /// Moderation streams whose policies were combined into this feed.
    pub sources: BTreeSet<StreamId>,
}

impl Feed {
    pub fn refs(&self) -> Vec<EntryRef> {
        self.items.iter().map(|i| i.entry.entry_ref()).collect()
    }

    pub fn canonical_bytes(&self) -> Vec<u8> {
        canonical::to_canonical_bytes(self).expect("feed serializes")
    }

    /// Canonical bytes with `generated_at` removed, for comparing feeds built at different times.
    pub fn canonical_bytes_timeless(&self) -> Vec<u8> {
        canonical::to_canonical_bytes_without(self, "generated_at").expect("feed serializes")
    }
}

fn sort_key(e: &ContentEntry) -> (std::cmp::Reverse<u64>, StreamId, u64) {
    (std::cmp::Reverse(e.timestamp), e.stream_id, e.seq)
}

fn assemble(
    index: &ContentIndex,
    raw: Vec<&IndexedEntry>,
    policy: &EffectivePolicy,
    mode: FilterMode,
    muted: &BTreeSet<StreamId>,
    missing_streams: Vec<StreamId>,
    opts: FeedOptions,
) -> Feed {
    let mut raw = raw;
    raw.sort_by_key(|ie| sort_key(&ie.entry));
    let mut items = Vec::new();
    let mut hidden = Vec::new();
    let mut label_summary: BTreeMap<String, usize> = BTreeMap::new();
    for ie in raw {
        let entry = &ie.entry;
        let labels = policy.labels_for(entry);
        for l in labels.iter().map(|m| m.label.clone()).collect::<BTreeSet<_>>() {
            *label_summary.entry(l).or_default() += 1;
        }
        if muted.contains(&entry.stream_id) {
            hidden.push(HiddenItem {
                entry: entry.entry_ref(),
                reason: HiddenReason::Muted,
                sources: BTreeSet::from([entry.stream_id]),
            });
            continue;
        }
        match judge(policy, entry, mode) {
            Verdict::Hidden(item) => hidden.push(item),
            Verdict::Visible { .. } => items.push(FeedItem {
                entry: entry.clone(),
                provenance: Provenance {
                    allowed_by: policy.allow_sources(entry),
                    denied_by: policy.deny_sources(entry),
                    labeled_by: labels.iter().map(|m| m.stream).collect(),
                },
                labels: labels.into_iter().collect(),
                scores: policy.scores_for(entry).into_iter().collect(),
                payload: PayloadView::of(&ie.payload),
                tombstoned: index.tombstone_for(&entry.entry_ref()).is_some(),
            }),
        }
    }
    if opts.sort == SortMode::ScoreWeighted {
        // stable: equal scores keep chronological order
        items.sort_by_key(|i| std::cmp::Reverse(i.scores.iter().map(|s| s.score).sum::<i64>()));
    }
    Feed {
        generated_at: opts.generated_at,
        hidden,
        items,
        label_summary,
        missing_streams,
        mode,
        policy_digest: policy.digest(),
        policy_warnings: policy.warnings.clone(),
        snapshot: index.snapshot(),
        sources: policy.sources.clone(),
    }
}

/// Forum (deny-list) feed.
///
/// Policy: DENY_OVERRIDES over the union of every moderator stream, every
/// locked default, and every unlocked default the reader has not disabled.
pub fn assemble_forum_feed(
    config: &ForumConfig,
    index: &ContentIndex,
    subs: &SubscriptionSet,
    opts: FeedOptions,
) -> Feed {
    let policies: Vec<EffectivePolicy> = config
        .effective_moderation(&subs.disabled_defaults)
        .iter()
        .map(|m| moderation::resolve(m, index, opts.depth_limit))
        .collect();
    let policy = combine(&policies, Combinator::DenyOverrides);
    let missing: Vec<StreamId> =
        config.content_streams.iter().filter(|s| index.stream(s).is_none()).copied().collect();
    let raw: Vec<&IndexedEntry> = index.raw_items(Some(&config.content_streams)).collect();
    assemble(index, raw, &policy, FilterMode::DenyList, &subs.muted, missing, opts)
}

/// Follow (allow-list) feed over every indexed content stream.
pub fn assemble_follow_feed(subs: &SubscriptionSet, index: &ContentIndex, opts: FeedOptions) -> Feed {
    let policies: Vec<EffectivePolicy> = subs
        .follows
        .iter()
        .filter(|f| !subs.muted.contains(f))
        .map(|f| moderation::resolve(f, index, opts.depth_limit))
        .collect();
    let policy = combine(&policies, Combinator::Union);
    let raw: Vec<&IndexedEntry> = index.raw_items(None).collect();
    assemble(index, raw, &policy, FilterMode::AllowList, &subs.muted, vec![], opts)
}

/// Unmoderated feed over `streams` (or everything).
pub fn assemble_raw_feed(streams: Option<&[StreamId]>, index: &ContentIndex, opts: FeedOptions) -> Feed {
    let missing = streams
        .map(|s| s.iter().filter(|id| index.stream(id).is_none()).copied().collect())
        .unwrap_or_default();
    let raw: Vec<&IndexedEntry> = index.raw_items(streams).collect();
    assemble(index, raw, &EffectivePolicy::default(), FilterMode::DenyList, &BTreeSet::new(), missing, opts)
}

/// Items present in `raw_feed` and absent from `feed_with`, each with the
/// sources the moderated feed recorded for hiding it.
pub fn feed_diff(feed_with: &Feed, raw_feed: &Feed) -> Result<ModerationDiff, AggregatorError> {
    if feed_with.snapshot != raw_feed.snapshot {
        return Err(AggregatorError::SnapshotMismatch(feed_with.snapshot, raw_feed.snapshot));
    }
    let mut shown: BTreeMap<EntryRef, usize> = BTreeMap::new();
    for r in feed_with.refs() {
        *shown.entry(r).or_default() += 1;
    }
    let recorded: BTreeMap<EntryRef, &HiddenItem> = feed_with.hidden.iter().map(|h| (h.entry, h)).collect();
    let mut diff = ModerationDiff { label_summary: feed_with.label_summary.clone(), ..Default::default() };
    for r in raw_feed.refs() {
        match shown.get_mut(&r) {
            Some(n) if *n > 0 => *n -= 1,
            _ => diff.hidden.push(match recorded.get(&r) {
                Some(h) => (*h).clone(),
                None => HiddenItem { entry: r, reason: HiddenReason::Unexplained, sources: BTreeSet::new() },
            }),
        }
    }
    for item in &feed_with.items {
        if !item.provenance.allowed_by.is_empty() {
            diff.revealed_only_by.insert(item.entry.entry_ref(), item.provenance.allowed_by.clone());
        }
    }
    Ok(diff)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankingWeights {
    pub agreement: f64,
    pub coverage: f64,
    pub recency: f64,
    /// Decay constant of the recency score, in days.
    pub recency_days: f64,
}

impl Default for RankingWeights {
    fn default() -> Self {
        RankingWeights { agreement: 0.5, coverage: 0.3, recency: 0.2, recency_days: 30.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeratorScore {
    pub agreement: f64,
    pub composite: f64,
    pub coverage: f64,
    pub rank: usize,
    /// Seconds since the stream's newest action; absent when it has none.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recency_secs: Option<u64>,
    pub recency_score: f64,
    pub stream_id: StreamId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeratorRanking {
    pub moderators: Vec<ModeratorScore>,
}

/// Agreement used when the reader has no moderation history.
pub const AGREEMENT_PRIOR: f64 = 0.5;

fn matches_history(policy: &EffectivePolicy, action: &ModAction) -> bool {
    let t = &action.target;
    match action.verb {
        ModVerb::Allow => policy.allow.contains_key(t),
        ModVerb::Deny => policy.deny.contains_key(t),
        ModVerb::Label => policy
            .labels
            .get(t)
            .is_some_and(|marks| marks.iter().any(|m| Some(&m.label) == action.label.as_ref())),
        ModVerb::Score => policy
            .scores
            .get(t)
            .is_some_and(|marks| marks.iter().any(|m| Some(m.score) == action.score)),
        ModVerb::IncludeStream | ModVerb::ExcludeStream => {
            let included = matches!(t, Target::Stream(s) if policy.sources.contains(s));
            included == (action.verb == ModVerb::IncludeStream)
        }
    }
}

/// Ranks candidate moderation streams for one reader.
///
/// - coverage: share of indexed raw items the candidate's policy acts on;
/// - agreement: share of the reader's own actions the policy reproduces
///   ([`AGREEMENT_PRIOR`] with no history);
/// - recency: `exp(-age_days / recency_days)` of the newest action, 0 if none.
///
/// Composite is the weighted sum; ties go to the lower stream id.
pub fn rank_moderators(
    candidates: &[StreamId],
    index: &ContentIndex,
    user_history: &[ModAction],
    now: u64,
    weights: RankingWeights,
) -> ModeratorRanking {
    let raw: Vec<&IndexedEntry> = index.raw_items(None).collect();
    let mut scores: Vec<ModeratorScore> = candidates
        .iter()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .map(|id| {
            let policy = moderation::resolve(id, index, DEFAULT_DEPTH_LIMIT);
            let acted = raw.iter().filter(|ie| policy.acts_on(&ie.entry)).count();
            let coverage = if raw.is_empty() { 0.0 } else { acted as f64 / raw.len() as f64 };
            let agreement = if user_history.is_empty() {
                AGREEMENT_PRIOR
            } else {
                user_history.iter().filter(|a| matches_history(&policy, a)).count() as f64
                    / user_history.len() as f64
            };
            let newest = index.mod_view(id).and_then(|v| v.actions.iter().map(|a| a.timestamp).max());
            let recency_secs = newest.map(|t| now.saturating_sub(t));
            let recency_score = recency_secs
                .map(|s| (-(s as f64 / 86_400.0) / weights.recency_days).exp())
                .unwrap_or(0.0);
            let composite =
                weights.agreement * agreement + weights.coverage * coverage + weights.recency * recency_score;
            ModeratorScore { agreement, composite, coverage, rank: 0, recency_secs, recency_score, stream_id: *id }
        })
        .collect();
    scores.sort_by(|a, b| b.composite.total_cmp(&a.composite).then_with(|| a.stream_id.cmp(&b.stream_id)));
    for (i, s) in scores.iter_mut().enumerate() {
        s.rank = i + 1;
    }
    ModeratorRanking { moderators: scores }
}
