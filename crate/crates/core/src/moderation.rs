//! Moderation streams and their composition.
//!
//! A moderation stream is an ordinary signed stream whose payloads are
//! canonical [`ModAction`] records. [`resolve`] flattens a stream together
//! with everything it (transitively) includes into an [`EffectivePolicy`];
//! [`combine`] merges policies from several moderators; [`apply_filter`]
//! turns a policy into a moderated view plus a diff that accounts for every
//! removed item.
//!
//! Conflict rules:
//! - within one stream the later entry wins per (verb class, target), where
//!   the classes are access (ALLOW/DENY), LABEL, SCORE and inclusion
//!   (INCLUDE_STREAM/EXCLUDE_STREAM);
//! - across streams the caller picks a [`Combinator`];
//! - in deny-list mode an ALLOW matching any key of an entry exempts it.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::canonical::{self, CanonicalError};
use crate::hash::Hash;
use crate::identity::{Keypair, PrincipalId};
use crate::stream::{ContentEntry, EntryRef, PayloadKind, StreamError, StreamId, StreamKind, StreamState};

pub const DEFAULT_DEPTH_LIMIT: usize = 16;
pub const MAX_LABEL_BYTES: usize = 64;
pub const MAX_REASON_BYTES: usize = 1024;
pub const SCORE_RANGE: std::ops::RangeInclusive<i64> = -100..=100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ModVerb {
    Allow,
    Deny,
    Label,
    Score,
    IncludeStream,
    ExcludeStream,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
enum VerbClass {
    Access,
    Label,
    Score,
    Inclusion,
}

impl ModVerb {
    fn class(self) -> VerbClass {
        match self {
            ModVerb::Allow | ModVerb::Deny => VerbClass::Access,
            ModVerb::Label => VerbClass::Label,
            ModVerb::Score => VerbClass::Score,
            ModVerb::IncludeStream | ModVerb::ExcludeStream => VerbClass::Inclusion,
        }
    }
}

/// What a moderation action points at.
///
/// Text forms: `entry:<stream>:<seq>`, `hash:<hex>`, `principal:ed25519:<hex>`,
/// `stream:<hex>`, and `scoped:<stream>/<inner>` for hash or principal
/// targets published by a stream that annotates one content stream.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Target {
    Entry(EntryRef),
    Hash(Hash),
    Principal(PrincipalId),
    Stream(StreamId),
    Scoped { stream: StreamId, inner: Box<Target> },
}

impl Target {
    /// Every target an entry can be matched by.
    pub fn keys_of(entry: &ContentEntry) -> [Target; 5] {
        let hash = Target::Hash(entry.content_hash);
        let author = Target::Principal(entry.author.id());
        [
            Target::Entry(entry.entry_ref()),
            Target::Scoped { stream: entry.stream_id, inner: Box::new(hash.clone()) },
            Target::Scoped { stream: entry.stream_id, inner: Box::new(author.clone()) },
            hash,
            author,
        ]
    }

    pub fn matches(&self, entry: &ContentEntry) -> bool {
        match self {
            Target::Entry(r) => *r == entry.entry_ref(),
            Target::Hash(h) => *h == entry.content_hash,
            Target::Principal(p) => *p == entry.author.id(),
            Target::Stream(_) => false,
            Target::Scoped { stream, inner } => *stream == entry.stream_id && inner.matches(entry),
        }
    }

    fn scoped_to(self, scope: Option<StreamId>) -> Target {
        match (scope, self) {
            (Some(stream), t @ (Target::Hash(_) | Target::Principal(_))) => {
                Target::Scoped { stream, inner: Box::new(t) }
            }
            (_, t) => t,
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Target::Entry(r) => write!(f, "entry:{r}"),
            Target::Hash(h) => write!(f, "hash:{h}"),
            Target::Principal(p) => write!(f, "principal:{p}"),
            Target::Stream(s) => write!(f, "stream:{s}"),
            Target::Scoped { stream, inner } => write!(f, "scoped:{stream}/{inner}"),
        }
    }
}

impl FromStr for Target {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, rest) = s.split_once(':').ok_or_else(|| format!("expected <kind>:<value>, got `{s}`"))?;
        let err = |e: &dyn fmt::Display| format!("bad {kind} target `{rest}`: {e}");
        match kind {
            "entry" => rest.parse().map(Target::Entry).map_err(|e| err(&e)),
            "hash" => rest.parse().map(Target::Hash).map_err(|e| err(&e)),
            "principal" => rest.parse().map(Target::Principal).map_err(|e| err(&e)),
            "stream" => rest.parse().map(Target::Stream).map_err(|e| err(&e)),
            "scoped" => {
                let (stream, inner) = rest.split_once('/').ok_or_else(|| err(&"missing `/`"))?;
                Ok(Target::Scoped {
                    stream: stream.parse().map_err(|e| err(&e))?,
                    inner: Box::new(inner.parse()?),
                })
            }
            other => Err(format!("unknown target kind `{other}`")),
        }
    }
}

impl Serialize for Target {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Target {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = <std::borrow::Cow<'de, str>>::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ActionError {
    #[error("{verb:?} requires a {field}")]
    Missing { verb: ModVerb, field: &'static str },
    #[error("{verb:?} must not carry a {field}")]
    Unexpected { verb: ModVerb, field: &'static str },
    #[error("{verb:?} cannot target `{target}`")]
    BadTarget { verb: ModVerb, target: String },
    #[error("label exceeds {MAX_LABEL_BYTES} bytes")]
    LabelTooLong,
    #[error("reason exceeds {MAX_REASON_BYTES} bytes")]
    ReasonTooLong,
    #[error("score {0} outside [-100, 100]")]
    ScoreOutOfRange(i64),
    #[error("payload is not a moderation action: {0}")]
    Decode(String),
}

/// One signed moderation annotation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModAction {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<i64>,
    pub target: Target,
    pub verb: ModVerb,
}

impl ModAction {
    fn bare(verb: ModVerb, target: Target) -> ModAction {
        ModAction { label: None, reason: None, score: None, target, verb }
    }

    pub fn allow(target: Target) -> ModAction {
        ModAction::bare(ModVerb::Allow, target)
    }

    pub fn deny(target: Target) -> ModAction {
        ModAction::bare(ModVerb::Deny, target)
    }

    pub fn label(target: Target, label: &str) -> ModAction {
        ModAction { label: Some(label.to_string()), ..ModAction::bare(ModVerb::Label, target) }
    }

    pub fn score(target: Target, score: i64) -> ModAction {
        ModAction { score: Some(score), ..ModAction::bare(ModVerb::Score, target) }
    }

    pub fn include(stream: StreamId) -> ModAction {
        ModAction::bare(ModVerb::IncludeStream, Target::Stream(stream))
    }

    pub fn exclude(stream: StreamId) -> ModAction {
        ModAction::bare(ModVerb::ExcludeStream, Target::Stream(stream))
    }

    pub fn with_reason(mut self, reason: &str) -> ModAction {
        self.reason = Some(reason.to_string());
        self
    }

    /// Exactly the fields the verb needs, within their limits.
    pub fn validate(&self) -> Result<(), ActionError> {
        let verb = self.verb;
        let stream_target = matches!(self.target, Target::Stream(_));
        let wants_stream = matches!(verb, ModVerb::IncludeStream | ModVerb::ExcludeStream);
        if stream_target != wants_stream || matches!(self.target, Target::Scoped { .. }) {
            return Err(ActionError::BadTarget { verb, target: self.target.to_string() });
        }
        match (verb, &self.label) {
            (ModVerb::Label, None) => return Err(ActionError::Missing { verb, field: "label" }),
            (ModVerb::Label, Some(l)) if l.len() > MAX_LABEL_BYTES => return Err(ActionError::LabelTooLong),
            (ModVerb::Label, Some(_)) | (_, None) => {}
            (_, Some(_)) => return Err(ActionError::Unexpected { verb, field: "label" }),
        }
        match (verb, self.score) {
            (ModVerb::Score, None) => return Err(ActionError::Missing { verb, field: "score" }),
            (ModVerb::Score, Some(s)) if !SCORE_RANGE.contains(&s) => {
                return Err(ActionError::ScoreOutOfRange(s))
            }
            (ModVerb::Score, Some(_)) | (_, None) => {}
            (_, Some(_)) => return Err(ActionError::Unexpected { verb, field: "score" }),
        }
        if self.reason.as_ref().is_some_and(|r| r.len() > MAX_REASON_BYTES) {
            return Err(ActionError::ReasonTooLong);
        }
        Ok(())
    }

    pub fn to_payload(&self) -> Result<Vec<u8>, CanonicalError> {
        canonical::to_canonical_bytes(self)
    }

    pub fn from_payload(bytes: &[u8]) -> Result<ModAction, ActionError> {
        let action: ModAction =
            serde_json::from_slice(bytes).map_err(|e| ActionError::Decode(e.to_string()))?;
        action.validate()?;
        Ok(action)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PublishError {
    #[error(transparent)]
    Action(#[from] ActionError),
    #[error(transparent)]
    Stream(#[from] StreamError),
    #[error(transparent)]
    Canonical(#[from] CanonicalError),
    #[error("stream is not a moderation stream")]
    NotModerationStream,
}

/// Appends an action to a moderation stream. Returns the entry and the
/// payload bytes the caller must store.
pub fn publish(
    stream: &mut StreamState,
    author: &Keypair,
    action: &ModAction,
    timestamp: u64,
) -> Result<(ContentEntry, Vec<u8>), PublishError> {
    if stream.kind() != StreamKind::Moderation {
        return Err(PublishError::NotModerationStream);
    }
    action.validate()?;
    let payload = action.to_payload()?;
    let entry = stream.push(author, PayloadKind::ModAction, &payload, None, timestamp)?;
    Ok((entry, payload))
}

/// A moderation action together with where it came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignedAction {
    pub action: ModAction,
    pub author: PrincipalId,
    pub seq: u64,
    pub timestamp: u64,
}

/// A decoded moderation stream, as handed to [`resolve`] by a fetcher.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModStreamView {
    pub stream_id: StreamId,
    pub kind: StreamKind,
    pub scope: Option<StreamId>,
    pub actions: Vec<SignedAction>,
    /// Decode problems found while building the view.
    pub warnings: Vec<PolicyWarning>,
}

impl ModStreamView {
    /// Decodes MOD_ACTION entries, looking payloads up by content hash.
    /// Missing or malformed payloads become warnings.
    pub fn from_state(state: &StreamState, payload: impl Fn(&Hash) -> Option<Vec<u8>>) -> ModStreamView {
        let stream_id = state.stream_id();
        let mut actions = Vec::new();
        let mut warnings = Vec::new();
        for e in state.entries().iter().filter(|e| e.payload_kind == PayloadKind::ModAction) {
            let Some(bytes) = payload(&e.content_hash) else {
                warnings.push(PolicyWarning::UnresolvedAction { stream: stream_id, seq: e.seq });
                continue;
            };
            match ModAction::from_payload(&bytes) {
                Ok(action) => actions.push(SignedAction {
                    action,
                    author: e.author.id(),
                    seq: e.seq,
                    timestamp: e.timestamp,
                }),
                Err(err) => warnings.push(PolicyWarning::InvalidAction {
                    stream: stream_id,
                    seq: e.seq,
                    reason: err.to_string(),
                }),
            }
        }
        ModStreamView { stream_id, kind: state.kind(), scope: state.genesis().scope, actions, warnings }
    }

    /// Latest action per (verb class, target), in seq order.
    pub fn effective_actions(&self) -> Vec<&SignedAction> {
        let mut last: BTreeMap<(VerbClass, &Target), &SignedAction> = BTreeMap::new();
        for a in &self.actions {
            last.insert((a.action.verb.class(), &a.action.target), a);
        }
        let mut out: Vec<&SignedAction> = last.into_values().collect();
        out.sort_by_key(|a| a.seq);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{0}")]
pub struct FetchError(pub String);

/// Source of moderation streams for [`resolve`].
pub trait ModStreamFetcher {
    fn fetch(&self, id: &StreamId) -> Result<ModStreamView, FetchError>;
}

impl ModStreamFetcher for BTreeMap<StreamId, ModStreamView> {
    fn fetch(&self, id: &StreamId) -> Result<ModStreamView, FetchError> {
        self.get(id).cloned().ok_or_else(|| FetchError(format!("unknown stream {id}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PolicyWarning {
    /// Entry point of an include cycle: a stream on the cycle that is the
    /// root or is included from a stream outside the cycle.
    Cycle { stream: StreamId },
    DepthTruncated { stream: StreamId },
    FetchFailed { stream: StreamId, reason: String },
    NotModerationStream { stream: StreamId },
    InvalidAction { stream: StreamId, seq: u64, reason: String },
    UnresolvedAction { stream: StreamId, seq: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LabelMark {
    pub label: String,
    pub source: PrincipalId,
    pub stream: StreamId,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ScoreMark {
    pub score: i64,
    pub source: PrincipalId,
    pub stream: StreamId,
}

type Sources = BTreeSet<StreamId>;

/// The flattened result of resolving one or more moderation streams.
/// `allow` and `deny` map each target to the streams that asserted it.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EffectivePolicy {
    pub allow: BTreeMap<Target, Sources>,
    pub deny: BTreeMap<Target, Sources>,
    pub labels: BTreeMap<Target, BTreeSet<LabelMark>>,
    pub scores: BTreeMap<Target, BTreeSet<ScoreMark>>,
    pub sources: Sources,
    pub warnings: BTreeSet<PolicyWarning>,
}

impl EffectivePolicy {
    pub fn is_empty(&self) -> bool {
        self.allow.is_empty() && self.deny.is_empty() && self.labels.is_empty() && self.scores.is_empty()
    }

    /// SHA-256 of the canonical encoding; identifies the exact policy a feed used.
    pub fn digest(&self) -> Hash {
        canonical::canonical_hash(self).expect("policy serializes")
    }

    fn collect<'a, V>(map: &'a BTreeMap<Target, V>, entry: &ContentEntry) -> Vec<&'a V> {
        Target::keys_of(entry).iter().filter_map(|k| map.get(k)).collect()
    }

    /// Streams whose ALLOW matches the entry.
    pub fn allow_sources(&self, entry: &ContentEntry) -> Sources {
        Self::collect(&self.allow, entry).into_iter().flatten().copied().collect()
    }

    /// Streams whose DENY matches the entry.
    pub fn deny_sources(&self, entry: &ContentEntry) -> Sources {
        Self::collect(&self.deny, entry).into_iter().flatten().copied().collect()
    }

    pub fn labels_for(&self, entry: &ContentEntry) -> BTreeSet<LabelMark> {
        Self::collect(&self.labels, entry).into_iter().flatten().cloned().collect()
    }

    pub fn scores_for(&self, entry: &ContentEntry) -> BTreeSet<ScoreMark> {
        Self::collect(&self.scores, entry).into_iter().flatten().cloned().collect()
    }

    /// True if any allow/deny/label/score matches the entry.
    pub fn acts_on(&self, entry: &ContentEntry) -> bool {
        Target::keys_of(entry).iter().any(|k| {
            self.allow.contains_key(k)
                || self.deny.contains_key(k)
                || self.labels.contains_key(k)
                || self.scores.contains_key(k)
        })
    }

    fn absorb(&mut self, other: &EffectivePolicy) {
        merge_union(&mut self.allow, &other.allow);
        merge_union(&mut self.deny, &other.deny);
        merge_union(&mut self.labels, &other.labels);
        merge_union(&mut self.scores, &other.scores);
        self.sources.extend(other.sources.iter().copied());
        self.warnings.extend(other.warnings.iter().cloned());
    }
}

fn merge_union<V: Ord + Clone>(into: &mut BTreeMap<Target, BTreeSet<V>>, from: &BTreeMap<Target, BTreeSet<V>>) {
    for (k, v) in from {
        into.entry(k.clone()).or_default().extend(v.iter().cloned());
    }
}

struct Resolver<'a> {
    fetch: &'a dyn ModStreamFetcher,
    depth_limit: usize,
    on_path: BTreeSet<StreamId>,
    /// Shallowest depth each (stream, exclusions in force) was expanded at.
    expanded: BTreeMap<(StreamId, BTreeSet<StreamId>), usize>,
    /// Views fetched so far; a failed fetch is remembered as `None`.
    views: BTreeMap<StreamId, Option<ModStreamView>>,
    /// Include edges followed, including those back onto the path.
    edges: BTreeSet<(StreamId, StreamId)>,
    policy: EffectivePolicy,
}

impl Resolver<'_> {
    fn view(&mut self, id: StreamId) -> Option<ModStreamView> {
        if let Some(v) = self.views.get(&id) {
            return v.clone();
        }
        let view = match self.fetch.fetch(&id) {
            Ok(v) if v.kind == StreamKind::Moderation => Some(v),
            Ok(_) => {
                self.policy.warnings.insert(PolicyWarning::NotModerationStream { stream: id });
                None
            }
            Err(e) => {
                self.policy.warnings.insert(PolicyWarning::FetchFailed { stream: id, reason: e.0 });
                None
            }
        };
        self.views.insert(id, view.clone());
        view
    }

    fn visit(&mut self, id: StreamId, parent: Option<StreamId>, depth: usize, excluded: &BTreeSet<StreamId>) {
        let on_path = self.on_path.contains(&id);
        if !on_path && depth > self.depth_limit {
            self.policy.warnings.insert(PolicyWarning::DepthTruncated { stream: id });
            return;
        }
        if let Some(parent) = parent {
            self.edges.insert((parent, id));
        }
        if on_path {
            return;
        }
        let key = (id, excluded.clone());
        if self.expanded.get(&key).is_some_and(|&d| d <= depth) {
            return;
        }
        self.expanded.insert(key, depth);
        let Some(view) = self.view(id) else { return };
        self.policy.warnings.extend(view.warnings.iter().cloned());
        self.policy.sources.insert(id);
        self.on_path.insert(id);

        let mut includes = Vec::new();
        let mut excluded = excluded.clone();
        for signed in view.effective_actions() {
            let action = &signed.action;
            let target = action.target.clone().scoped_to(view.scope);
            match action.verb {
                ModVerb::Allow => {
                    self.policy.allow.entry(target).or_default().insert(id);
                }
                ModVerb::Deny => {
                    self.policy.deny.entry(target).or_default().insert(id);
                }
                ModVerb::Label => {
                    let label = action.label.clone().unwrap_or_default();
                    let mark = LabelMark { label, source: signed.author, stream: id };
                    self.policy.labels.entry(target).or_default().insert(mark);
                }
                ModVerb::Score => {
                    let mark = ScoreMark { score: action.score.unwrap_or(0), source: signed.author, stream: id };
                    self.policy.scores.entry(target).or_default().insert(mark);
                }
                ModVerb::IncludeStream => {
                    if let Target::Stream(s) = action.target {
                        includes.push(s);
                    }
                }
                ModVerb::ExcludeStream => {
                    if let Target::Stream(s) = action.target {
                        excluded.insert(s);
                    }
                }
            }
        }
        includes.sort();
        for child in includes {
            if !excluded.contains(&child) {
                self.visit(child, Some(id), depth + 1, &excluded);
            }
        }
        self.on_path.remove(&id);
    }
}

/// Flattens `root` and every stream it includes, depth-first.
///
/// INCLUDE_STREAM unions the included stream's policy into this one;
/// EXCLUDE_STREAM keeps a stream out of this subtree wherever it appears.
/// A stream contributes if some include path from `root` reaches it within
/// `depth_limit` levels without passing an exclusion of it. Include cycles
/// are cut where they close and reported once per entry point (see
/// [`PolicyWarning::Cycle`]); deeper expansion is truncated with a warning;
/// fetch failures become warnings. Each stream is re-expanded only when
/// reached under different exclusions or at a shallower depth.
pub fn resolve(root: &StreamId, fetch: &dyn ModStreamFetcher, depth_limit: usize) -> EffectivePolicy {
    let mut r = Resolver {
        fetch,
        depth_limit: depth_limit.max(1),
        on_path: BTreeSet::new(),
        expanded: BTreeMap::new(),
        views: BTreeMap::new(),
        edges: BTreeSet::new(),
        policy: EffectivePolicy::default(),
    };
    r.visit(*root, None, 1, &BTreeSet::new());
    for stream in cycle_entry_points(root, &r.edges) {
        r.policy.warnings.insert(PolicyWarning::Cycle { stream });
    }
    r.policy
}

/// Streams on a cycle of `edges` that are `root` or have an incoming edge
/// from outside their strongly connected component (Kosaraju).
fn cycle_entry_points(root: &StreamId, edges: &BTreeSet<(StreamId, StreamId)>) -> BTreeSet<StreamId> {
    let mut fwd: BTreeMap<StreamId, Vec<StreamId>> = BTreeMap::new();
    let mut rev: BTreeMap<StreamId, Vec<StreamId>> = BTreeMap::new();
    for &(a, b) in edges {
        fwd.entry(a).or_default().push(b);
        rev.entry(b).or_default().push(a);
    }
    let nodes: BTreeSet<StreamId> = edges.iter().flat_map(|&(a, b)| [a, b]).collect();

    let mut seen = BTreeSet::new();
    let mut order = Vec::with_capacity(nodes.len());
    for &start in &nodes {
        if !seen.insert(start) {
            continue;
        }
        let mut stack = vec![(start, 0usize)];
        while let Some((n, i)) = stack.pop() {
            let next = fwd.get(&n).and_then(|v| v.get(i)).copied();
            match next {
                Some(m) => {
                    stack.push((n, i + 1));
                    if seen.insert(m) {
                        stack.push((m, 0));
                    }
                }
                None => order.push(n),
            }
        }
    }

    let mut component: BTreeMap<StreamId, usize> = BTreeMap::new();
    let mut members: Vec<Vec<StreamId>> = Vec::new();
    for &start in order.iter().rev() {
        if component.contains_key(&start) {
            continue;
        }
        let c = members.len();
        let mut group = vec![];
        let mut stack = vec![start];
        component.insert(start, c);
        while let Some(n) = stack.pop() {
            group.push(n);
            for &m in rev.get(&n).into_iter().flatten() {
                if !component.contains_key(&m) {
                    component.insert(m, c);
                    stack.push(m);
                }
            }
        }
        members.push(group);
    }

    let mut out = BTreeSet::new();
    for group in &members {
        let c = component[&group[0]];
        let cyclic = group.len() > 1 || edges.contains(&(group[0], group[0]));
        if !cyclic {
            continue;
        }
        for &n in group {
            let entered = rev.get(&n).into_iter().flatten().any(|p| component[p] != c);
            if n == *root || entered {
                out.insert(n);
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Combinator {
    Union,
    Intersection,
    DenyOverrides,
}

/// Merges policies from several moderators.
///
/// - `Union`: setwise union of every map, sources and warnings.
/// - `Intersection`: keeps a target only if every input has it in the
///   corresponding map; the kept value is the union of the inputs' values.
/// - `DenyOverrides`: union, then drop from `allow` every target in `deny`.
pub fn combine(policies: &[EffectivePolicy], combinator: Combinator) -> EffectivePolicy {
    match combinator {
        Combinator::Union => {
            let mut out = EffectivePolicy::default();
            for p in policies {
                out.absorb(p);
            }
            out
        }
        Combinator::DenyOverrides => {
            let mut out = combine(policies, Combinator::Union);
            let deny = &out.deny;
            out.allow.retain(|t, _| !deny.contains_key(t));
            out
        }
        Combinator::Intersection => {
            let mut out = combine(policies, Combinator::Union);
            if policies.is_empty() {
                return out;
            }
            out.allow.retain(|t, _| policies.iter().all(|p| p.allow.contains_key(t)));
            out.deny.retain(|t, _| policies.iter().all(|p| p.deny.contains_key(t)));
            out.labels.retain(|t, _| policies.iter().all(|p| p.labels.contains_key(t)));
            out.scores.retain(|t, _| policies.iter().all(|p| p.scores.contains_key(t)));
            out
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FilterMode {
    /// Visible unless denied (an ALLOW exempts).
    DenyList,
    /// Hidden unless allowed and not denied.
    AllowList,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum HiddenReason {
    Denied,
    /// Allow-list mode and no stream allowed it.
    NotAllowed,
    /// The reader muted the content stream.
    Muted,
    /// Missing from a moderated feed without a recorded cause.
    Unexplained,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HiddenItem {
    pub entry: EntryRef,
    pub reason: HiddenReason,
    pub sources: BTreeSet<StreamId>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModerationDiff {
    pub hidden: Vec<HiddenItem>,
    /// Visible items that are visible only because of an ALLOW, with its sources.
    pub revealed_only_by: BTreeMap<EntryRef, BTreeSet<StreamId>>,
    /// Label → number of raw items carrying it.
    pub label_summary: BTreeMap<String, usize>,
}

impl ModerationDiff {
    pub fn hidden_refs(&self) -> BTreeSet<EntryRef> {
        self.hidden.iter().map(|h| h.entry).collect()
    }
}

/// Per-entry outcome of filtering.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Visible { revealed_by: BTreeSet<StreamId> },
    Hidden(HiddenItem),
}

impl Verdict {
    pub fn is_visible(&self) -> bool {
        matches!(self, Verdict::Visible { .. })
    }
}

pub fn judge(policy: &EffectivePolicy, entry: &ContentEntry, mode: FilterMode) -> Verdict {
    let deny = policy.deny_sources(entry);
    let allow = policy.allow_sources(entry);
    let hidden = |reason, sources| Verdict::Hidden(HiddenItem { entry: entry.entry_ref(), reason, sources });
    match mode {
        FilterMode::DenyList if !deny.is_empty() && allow.is_empty() => hidden(HiddenReason::Denied, deny),
        FilterMode::DenyList if !deny.is_empty() => Verdict::Visible { revealed_by: allow },
        FilterMode::DenyList => Verdict::Visible { revealed_by: BTreeSet::new() },
        FilterMode::AllowList if !deny.is_empty() => hidden(HiddenReason::Denied, deny),
        FilterMode::AllowList if allow.is_empty() => hidden(HiddenReason::NotAllowed, policy.sources.clone()),
        FilterMode::AllowList => Verdict::Visible { revealed_by: allow },
    }
}

/// Splits `raw` into the visible list (order preserved) and a diff that
/// names every hidden item with the streams responsible for hiding it.
/// Inputs are never modified.
pub fn apply_filter(
    policy: &EffectivePolicy,
    raw: &[ContentEntry],
    mode: FilterMode,
) -> (Vec<ContentEntry>, ModerationDiff) {
    let mut visible = Vec::with_capacity(raw.len());
    let mut diff = ModerationDiff::default();
    for entry in raw {
        for mark in policy.labels_for(entry).into_iter().map(|m| m.label).collect::<BTreeSet<_>>() {
            *diff.label_summary.entry(mark).or_default() += 1;
        }
        match judge(policy, entry, mode) {
            Verdict::Visible { revealed_by } => {
                if !revealed_by.is_empty() {
                    diff.revealed_only_by.insert(entry.entry_ref(), revealed_by);
                }
                visible.push(entry.clone());
            }
            Verdict::Hidden(item) => diff.hidden.push(item),
        }
    }
    (visible, diff)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Stance {
    Allow,
    Deny,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Side {
    A,
    B,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetContention {
    pub a: Stance,
    pub b: Stance,
    pub target: Target,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemContention {
    pub entry: EntryRef,
    pub hidden_by: Side,
}

/// Where two moderation streams disagree, over their targets and over a raw view.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContentionReport {
    pub a: StreamId,
    pub b: StreamId,
    /// One side denies a target the other allows or leaves alone.
    pub contended_targets: Vec<TargetContention>,
    /// Both sides take the same (non-`NONE`) access stance.
    pub agreed_targets: Vec<TargetContention>,
    /// Targets only one side acts on at all (any verb).
    pub a_only: Vec<Target>,
    pub b_only: Vec<Target>,
    /// Raw items hidden by exactly one side (deny-list mode).
    pub contended_items: Vec<ItemContention>,
    pub agreed_hidden: Vec<EntryRef>,
}

impl ContentionReport {
    pub fn contention_count(&self) -> usize {
        self.contended_targets.len() + self.contended_items.len()
    }
}

fn stance(policy: &EffectivePolicy, target: &Target) -> Stance {
    if policy.deny.contains_key(target) {
        Stance::Deny
    } else if policy.allow.contains_key(target) {
        Stance::Allow
    } else {
        Stance::None
    }
}

fn acted_targets(p: &EffectivePolicy) -> BTreeSet<&Target> {
    p.allow.keys().chain(p.deny.keys()).chain(p.labels.keys()).chain(p.scores.keys()).collect()
}

/// Compares two resolved policies over `raw`.
pub fn compare_policies(
    a_id: StreamId,
    a: &EffectivePolicy,
    b_id: StreamId,
    b: &EffectivePolicy,
    raw: &[ContentEntry],
) -> ContentionReport {
    let mut contended_targets = Vec::new();
    let mut agreed_targets = Vec::new();
    let access: BTreeSet<&Target> = a.allow.keys().chain(a.deny.keys()).chain(b.allow.keys()).chain(b.deny.keys()).collect();
    for target in access {
        let (sa, sb) = (stance(a, target), stance(b, target));
        let row = TargetContention { a: sa, b: sb, target: target.clone() };
        if sa == sb {
            agreed_targets.push(row);
        } else if sa == Stance::Deny || sb == Stance::Deny {
            contended_targets.push(row);
        }
    }
    let (ta, tb) = (acted_targets(a), acted_targets(b));
    let a_only = ta.difference(&tb).map(|t| (*t).clone()).collect();
    let b_only = tb.difference(&ta).map(|t| (*t).clone()).collect();

    let mut contended_items = Vec::new();
    let mut agreed_hidden = Vec::new();
    for entry in raw {
        let ha = !judge(a, entry, FilterMode::DenyList).is_visible();
        let hb = !judge(b, entry, FilterMode::DenyList).is_visible();
        match (ha, hb) {
            (true, true) => agreed_hidden.push(entry.entry_ref()),
            (true, false) => contended_items.push(ItemContention { entry: entry.entry_ref(), hidden_by: Side::A }),
            (false, true) => contended_items.push(ItemContention { entry: entry.entry_ref(), hidden_by: Side::B }),
            (false, false) => {}
        }
    }
    ContentionReport { a: a_id, b: b_id, contended_targets, agreed_targets, a_only, b_only, contended_items, agreed_hidden }
}

/// Resolves both streams and reports their points of contention over `raw`.
pub fn compare_streams(
    a: &StreamId,
    b: &StreamId,
    fetch: &dyn ModStreamFetcher,
    raw: &[ContentEntry],
    depth_limit: usize,
) -> ContentionReport {
    let pa = resolve(a, fetch, depth_limit);
    let pb = resolve(b, fetch, depth_limit);
    compare_policies(*a, &pa, *b, &pb, raw)
}
