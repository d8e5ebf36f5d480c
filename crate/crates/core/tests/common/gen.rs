//! Random instance generators, all driven by a seeded ChaCha stream.

use std::collections::{BTreeMap, BTreeSet};

use plurinet::identity::PrincipalId;
use plurinet::moderation::{
    Combinator, EffectivePolicy, FilterMode, LabelMark, ModAction, ModStreamView, ScoreMark, SignedAction, Target,
};
use plurinet::{ContentEntry, EntryRef, Hash, PayloadKind, Principal, StreamId, StreamKind, StreamState};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::key;

pub const WORDS: [&str; 8] = ["alpha", "beta", "gamma", "delta", "eps", "zeta", "eta", "theta"];
pub const LABELS: [&str; 3] = ["spam", "nsfw", "offtopic"];

pub struct FilterInstance {
    pub views: BTreeMap<StreamId, ModStreamView>,
    pub mod_ids: Vec<StreamId>,
    pub roots: Vec<StreamId>,
    pub combinator: Combinator,
    pub mode: FilterMode,
    pub raw: Vec<ContentEntry>,
}

pub fn mod_id(i: usize) -> StreamId {
    StreamId::derive(&key(500 + i as u32).principal(), "mods")
}

/// Up to 50 posts over 1-3 multi-writer content streams.
pub fn raw_posts(rng: &mut ChaCha8Rng, authors: &[Principal], max: usize) -> (Vec<StreamId>, Vec<ContentEntry>) {
    let mut streams: Vec<StreamState> = (0..rng.gen_range(1..=3u32))
        .map(|i| StreamState::create_with(&key(10 + i), "board", StreamKind::Content, authors, None, 0).unwrap())
        .collect();
    let ids = streams.iter().map(|s| s.stream_id()).collect();
    let mut raw = vec![];
    for _ in 0..rng.gen_range(0..=max) {
        let s = rng.gen_range(0..streams.len());
        let a = rng.gen_range(0..authors.len()) as u32;
        let word = WORDS[rng.gen_range(0..WORDS.len())];
        let ts = rng.gen_range(0..100);
        raw.push(streams[s].push(&key(a), PayloadKind::Post, word.as_bytes(), None, ts).unwrap());
    }
    (ids, raw)
}

fn content_target(rng: &mut ChaCha8Rng, raw: &[ContentEntry], content: &[StreamId], authors: &[Principal]) -> Target {
    match rng.gen_range(0..3) {
        0 if !raw.is_empty() => Target::Entry(raw[rng.gen_range(0..raw.len())].entry_ref()),
        0 => Target::Entry(EntryRef::new(content[0], 99)),
        1 => Target::Hash(Hash::of(WORDS[rng.gen_range(0..WORDS.len())].as_bytes())),
        _ => Target::Principal(authors[rng.gen_range(0..authors.len())].id()),
    }
}

/// Up to 5 moderation streams with layered includes (depth at most 3), or
/// arbitrary includes when `cyclic`.
pub fn filter_instance(rng: &mut ChaCha8Rng, cyclic: bool) -> FilterInstance {
    let authors: Vec<Principal> = (0..6).map(|i| key(i).principal()).collect();
    let (content, raw) = raw_posts(rng, &authors, 50);
    let m = rng.gen_range(1..=5usize);
    let mod_ids: Vec<StreamId> = (0..m).map(mod_id).collect();
    let level: Vec<u8> = (0..m).map(|_| rng.gen_range(0..=3)).collect();
    let mut views = BTreeMap::new();
    for i in 0..m {
        let scope = rng.gen_bool(0.2).then(|| content[rng.gen_range(0..content.len())]);
        let kind = if rng.gen_bool(0.05) { StreamKind::Content } else { StreamKind::Moderation };
        let owner = key(500 + i as u32).principal().id();
        let mut actions = vec![];
        for k in 0..rng.gen_range(0..=12u64) {
            let t = content_target(rng, &raw, &content, &authors);
            let action = match rng.gen_range(0..10) {
                0..=2 => ModAction::deny(t),
                3..=4 => ModAction::allow(t),
                5 => ModAction::label(t, LABELS[rng.gen_range(0..LABELS.len())]),
                6 => ModAction::score(t, rng.gen_range(-100..=100)),
                7..=8 => {
                    let deeper: Vec<usize> = (0..m).filter(|&j| j != i && (cyclic || level[j] > level[i])).collect();
                    match deeper.choose(rng) {
                        Some(&j) if !rng.gen_bool(0.1) => ModAction::include(mod_ids[j]),
                        _ => ModAction::include(mod_id(90)),
                    }
                }
                _ => ModAction::exclude(mod_ids[rng.gen_range(0..m)]),
            };
            actions.push(SignedAction { action, author: owner, seq: k + 1, timestamp: k });
        }
        views.insert(mod_ids[i], ModStreamView { stream_id: mod_ids[i], kind, scope, actions, warnings: vec![] });
    }
    let mut roots = mod_ids.clone();
    roots.shuffle(rng);
    roots.truncate(rng.gen_range(1..=m.min(3)));
    let combinator = if rng.gen_bool(0.5) { Combinator::Union } else { Combinator::DenyOverrides };
    let mode = if rng.gen_bool(0.5) { FilterMode::DenyList } else { FilterMode::AllowList };
    FilterInstance { views, mod_ids, roots, combinator, mode, raw }
}

/// A normalized policy over a small target universe (every value set non-empty).
pub fn random_policy(rng: &mut ChaCha8Rng) -> EffectivePolicy {
    let targets: Vec<Target> = (0..6u32)
        .map(|i| Target::Principal(PrincipalId([i as u8; 32])))
        .chain((0..4u8).map(|i| Target::Hash(Hash([i; 32]))))
        .collect();
    let streams: Vec<StreamId> = (0..4u8).map(|i| StreamId([i; 32])).collect();
    let pick_sources = |rng: &mut ChaCha8Rng| -> BTreeSet<StreamId> {
        let n = rng.gen_range(1..=2);
        streams.choose_multiple(rng, n).copied().collect()
    };
    let mut p = EffectivePolicy::default();
    for t in &targets {
        if rng.gen_bool(0.3) {
            p.allow.insert(t.clone(), pick_sources(rng));
        }
        if rng.gen_bool(0.3) {
            p.deny.insert(t.clone(), pick_sources(rng));
        }
        if rng.gen_bool(0.2) {
            let stream = *streams.choose(rng).unwrap();
            let mark = LabelMark { label: LABELS[rng.gen_range(0..3)].into(), source: PrincipalId([9; 32]), stream };
            p.labels.insert(t.clone(), BTreeSet::from([mark]));
        }
        if rng.gen_bool(0.2) {
            let stream = *streams.choose(rng).unwrap();
            let mark = ScoreMark { score: rng.gen_range(-100..=100), source: PrincipalId([9; 32]), stream };
            p.scores.insert(t.clone(), BTreeSet::from([mark]));
        }
    }
    for s in &streams {
        if rng.gen_bool(0.5) {
            p.sources.insert(*s);
        }
    }
    p
}
