//! Brute-force reference implementations. Nothing here calls into the
//! resolver, combinator or filter under test.

use std::collections::{BTreeMap, BTreeSet};

use plurinet::moderation::{
    Combinator, EffectivePolicy, FilterMode, HiddenReason, LabelMark, ModStreamView, ModVerb, PolicyWarning,
    ScoreMark, SignedAction, Target,
};
use plurinet::{ContentEntry, EntryRef, StreamId, StreamKind};

pub fn matches(t: &Target, e: &ContentEntry) -> bool {
    match t {
        Target::Entry(r) => r.stream_id == e.stream_id && r.seq == e.seq,
        Target::Hash(h) => *h == e.content_hash,
        Target::Principal(p) => *p == e.author.id(),
        Target::Stream(_) => false,
        Target::Scoped { stream, inner } => *stream == e.stream_id && matches(inner, e),
    }
}

fn class(v: ModVerb) -> u8 {
    match v {
        ModVerb::Allow | ModVerb::Deny => 0,
        ModVerb::Label => 1,
        ModVerb::Score => 2,
        ModVerb::IncludeStream | ModVerb::ExcludeStream => 3,
    }
}

/// Last action per (class, target), found by scanning backwards.
pub fn effective(view: &ModStreamView) -> Vec<&SignedAction> {
    let mut seen: Vec<(u8, &Target)> = Vec::new();
    let mut out = Vec::new();
    for a in view.actions.iter().rev() {
        let key = (class(a.action.verb), &a.action.target);
        if !seen.contains(&key) {
            seen.push(key);
            out.push(a);
        }
    }
    out
}

fn scoped(t: &Target, scope: Option<StreamId>) -> Target {
    match (scope, t) {
        (Some(stream), Target::Hash(_) | Target::Principal(_)) => {
            Target::Scoped { stream, inner: Box::new(t.clone()) }
        }
        _ => t.clone(),
    }
}

/// Everything learned by enumerating every simple include path from a root.
#[derive(Debug, Default)]
pub struct Flat {
    pub reach: BTreeSet<StreamId>,
    pub edges: BTreeSet<(StreamId, StreamId)>,
    pub failed: BTreeSet<StreamId>,
    pub not_mod: BTreeSet<StreamId>,
}

pub fn flatten(root: StreamId, views: &BTreeMap<StreamId, ModStreamView>, depth_limit: usize) -> Flat {
    let mut flat = Flat::default();
    walk(root, None, 1, &mut vec![], &BTreeSet::new(), views, depth_limit, &mut flat);
    flat
}

#[allow(clippy::too_many_arguments)]
fn walk(
    v: StreamId,
    parent: Option<StreamId>,
    depth: usize,
    path: &mut Vec<StreamId>,
    excluded: &BTreeSet<StreamId>,
    views: &BTreeMap<StreamId, ModStreamView>,
    limit: usize,
    flat: &mut Flat,
) {
    if path.contains(&v) {
        flat.edges.insert((parent.unwrap(), v));
        return;
    }
    if depth > limit {
        return;
    }
    if let Some(p) = parent {
        flat.edges.insert((p, v));
    }
    let Some(view) = views.get(&v) else {
        flat.failed.insert(v);
        return;
    };
    if view.kind != StreamKind::Moderation {
        flat.not_mod.insert(v);
        return;
    }
    flat.reach.insert(v);
    let eff = effective(view);
    let mut ex = excluded.clone();
    for a in &eff {
        if let (ModVerb::ExcludeStream, Target::Stream(s)) = (a.action.verb, &a.action.target) {
            ex.insert(*s);
        }
    }
    path.push(v);
    for a in &eff {
        if let (ModVerb::IncludeStream, Target::Stream(s)) = (a.action.verb, &a.action.target) {
            if !ex.contains(s) {
                walk(*s, Some(v), depth + 1, path, &ex, views, limit, flat);
            }
        }
    }
    path.pop();
}

/// Include edges of an exclusion-free graph whose size is below the depth
/// limit: every edge leaving a stream reachable from the root.
pub fn reachable_edges(root: StreamId, edges: &[(StreamId, StreamId)]) -> BTreeSet<(StreamId, StreamId)> {
    let mut seen = BTreeSet::from([root]);
    let mut queue = vec![root];
    while let Some(v) = queue.pop() {
        for (_, b) in edges.iter().filter(|(a, _)| *a == v) {
            if seen.insert(*b) {
                queue.push(*b);
            }
        }
    }
    edges.iter().filter(|(a, _)| seen.contains(a)).copied().collect()
}

/// Streams on a cycle that are the root or entered from outside their
/// strongly connected component, via a transitive-closure matrix.
pub fn cycle_entries(root: StreamId, edges: &BTreeSet<(StreamId, StreamId)>) -> BTreeSet<StreamId> {
    let nodes: Vec<StreamId> =
        edges.iter().flat_map(|&(a, b)| [a, b]).chain([root]).collect::<BTreeSet<_>>().into_iter().collect();
    let n = nodes.len();
    let ix = |s: &StreamId| nodes.iter().position(|x| x == s).unwrap();
    let mut reach = vec![vec![false; n]; n];
    for (a, b) in edges {
        reach[ix(a)][ix(b)] = true;
    }
    for k in 0..n {
        for i in 0..n {
            if reach[i][k] {
                for j in 0..n {
                    if reach[k][j] {
                        reach[i][j] = true;
                    }
                }
            }
        }
    }
    let same = |i: usize, j: usize| i == j || (reach[i][j] && reach[j][i]);
    let mut out = BTreeSet::new();
    for (v, id) in nodes.iter().enumerate() {
        if !reach[v][v] {
            continue;
        }
        let entered = edges.iter().any(|(a, b)| b == id && !same(ix(a), v));
        if *id == root || entered {
            out.insert(*id);
        }
    }
    out
}

/// Expected result of resolving `root` with `views` as the fetcher.
pub fn expected_policy(root: StreamId, views: &BTreeMap<StreamId, ModStreamView>, depth_limit: usize) -> EffectivePolicy {
    let flat = flatten(root, views, depth_limit);
    let mut p = EffectivePolicy::default();
    for s in &flat.reach {
        let view = &views[s];
        for a in effective(view) {
            let t = scoped(&a.action.target, view.scope);
            match a.action.verb {
                ModVerb::Allow => {
                    p.allow.entry(t).or_default().insert(*s);
                }
                ModVerb::Deny => {
                    p.deny.entry(t).or_default().insert(*s);
                }
                ModVerb::Label => {
                    let label = a.action.label.clone().unwrap_or_default();
                    p.labels.entry(t).or_default().insert(LabelMark { label, source: a.author, stream: *s });
                }
                ModVerb::Score => {
                    let score = a.action.score.unwrap_or(0);
                    p.scores.entry(t).or_default().insert(ScoreMark { score, source: a.author, stream: *s });
                }
                ModVerb::IncludeStream | ModVerb::ExcludeStream => {}
            }
        }
        p.warnings.extend(view.warnings.iter().cloned());
    }
    p.sources = flat.reach.clone();
    for s in cycle_entries(root, &flat.edges) {
        p.warnings.insert(PolicyWarning::Cycle { stream: s });
    }
    for s in &flat.failed {
        p.warnings.insert(PolicyWarning::FetchFailed { stream: *s, reason: format!("unknown stream {s}") });
    }
    for s in &flat.not_mod {
        p.warnings.insert(PolicyWarning::NotModerationStream { stream: *s });
    }
    p
}

fn union_into<V: Ord + Clone>(into: &mut BTreeMap<Target, BTreeSet<V>>, from: &BTreeMap<Target, BTreeSet<V>>) {
    for (t, vs) in from {
        into.entry(t.clone()).or_default().extend(vs.iter().cloned());
    }
}

pub fn expected_combine(policies: &[EffectivePolicy], combinator: Combinator) -> EffectivePolicy {
    let mut out = EffectivePolicy::default();
    for p in policies {
        union_into(&mut out.allow, &p.allow);
        union_into(&mut out.deny, &p.deny);
        union_into(&mut out.labels, &p.labels);
        union_into(&mut out.scores, &p.scores);
        out.sources.extend(p.sources.iter().copied());
        out.warnings.extend(p.warnings.iter().cloned());
    }
    match combinator {
        Combinator::Union => {}
        Combinator::DenyOverrides => {
            let denied: Vec<Target> = out.deny.keys().cloned().collect();
            for t in denied {
                out.allow.remove(&t);
            }
        }
        Combinator::Intersection => panic!("not modelled"),
    }
    out
}

#[derive(Debug, PartialEq, Eq)]
pub struct FilterOutcome {
    pub visible: Vec<EntryRef>,
    pub hidden: Vec<(EntryRef, HiddenReason, BTreeSet<StreamId>)>,
    pub revealed: BTreeMap<EntryRef, BTreeSet<StreamId>>,
    pub labels: BTreeMap<String, usize>,
}

fn sources_matching(map: &BTreeMap<Target, BTreeSet<StreamId>>, e: &ContentEntry) -> BTreeSet<StreamId> {
    map.iter().filter(|(t, _)| matches(t, e)).flat_map(|(_, s)| s.iter().copied()).collect()
}

/// Scans every target of the policy against every entry.
pub fn expected_filter(p: &EffectivePolicy, raw: &[ContentEntry], mode: FilterMode) -> FilterOutcome {
    let mut out = FilterOutcome { visible: vec![], hidden: vec![], revealed: BTreeMap::new(), labels: BTreeMap::new() };
    for e in raw {
        let r = e.entry_ref();
        let deny = sources_matching(&p.deny, e);
        let allow = sources_matching(&p.allow, e);
        let labels: BTreeSet<&String> =
            p.labels.iter().filter(|(t, _)| matches(t, e)).flat_map(|(_, m)| m.iter().map(|m| &m.label)).collect();
        for l in labels {
            *out.labels.entry(l.clone()).or_default() += 1;
        }
        let hidden = match mode {
            FilterMode::DenyList => (!deny.is_empty() && allow.is_empty()).then(|| (HiddenReason::Denied, deny.clone())),
            FilterMode::AllowList if !deny.is_empty() => Some((HiddenReason::Denied, deny.clone())),
            FilterMode::AllowList if allow.is_empty() => Some((HiddenReason::NotAllowed, p.sources.clone())),
            FilterMode::AllowList => None,
        };
        match hidden {
            Some((reason, sources)) => out.hidden.push((r, reason, sources)),
            None => {
                // in deny-list mode an allow only matters if something denied
                let needed = mode == FilterMode::AllowList || !deny.is_empty();
                if needed && !allow.is_empty() {
                    out.revealed.insert(r, allow);
                }
                out.visible.push(r);
            }
        }
    }
    out
}
