//! One check per acceptance criterion. Each returns a one-line summary on
//! success and the first counterexample on failure.

use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use plurinet::aggregator::{
    assemble_follow_feed, assemble_forum_feed, AuthorityStream, ContentIndex, FeedOptions, ForumConfig,
    SubscriptionSet,
};
use plurinet::identity::Signature;
use plurinet::migration::Selector;
use plurinet::moderation::{
    apply_filter, combine, resolve, Combinator, ModAction, ModStreamView, SignedAction, Target, DEFAULT_DEPTH_LIMIT,
};
use plurinet::sim::{run_simulation, sim_stream_id, topology, ScriptStep, SimAction, SimNetConfig};
use plurinet::storage::{Attribution, Backend, BlobStoreConfig};
use plurinet::stream::{detect_fork, verify_stream};
use plurinet::sync::{gossip_round, Peer, StreamMap};
use plurinet::{ContentEntry, GenesisRecord, Hash, PayloadKind, StreamId, StreamKind, StreamState};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::gen::{filter_instance, random_policy, WORDS};
use super::{key, open_node, oracle, rng, World};

pub type Outcome = Result<String, String>;

/// Resolves, combines and filters one instance both ways; `Err` describes the first difference.
pub fn check_filter_instance(inst: &super::gen::FilterInstance) -> Result<(), String> {
    let mut policies = vec![];
    for root in &inst.roots {
        let got = resolve(root, &inst.views, DEFAULT_DEPTH_LIMIT);
        let want = oracle::expected_policy(*root, &inst.views, DEFAULT_DEPTH_LIMIT);
        if got != want {
            return Err(format!("resolve({root}) differs:\n got {got:?}\nwant {want:?}"));
        }
        policies.push(got);
    }
    let combined = combine(&policies, inst.combinator);
    let want = oracle::expected_combine(&policies, inst.combinator);
    if combined != want {
        return Err(format!("combine {:?} differs", inst.combinator));
    }
    let before = inst.raw.clone();
    let (visible, diff) = apply_filter(&combined, &inst.raw, inst.mode);
    let got = oracle::FilterOutcome {
        visible: visible.iter().map(|e| e.entry_ref()).collect(),
        hidden: diff.hidden.iter().map(|h| (h.entry, h.reason, h.sources.clone())).collect(),
        revealed: diff.revealed_only_by.clone(),
        labels: diff.label_summary.clone(),
    };
    let want = oracle::expected_filter(&want, &inst.raw, inst.mode);
    if got != want {
        return Err(format!("filter {:?} differs:\n got {got:?}\nwant {want:?}", inst.mode));
    }
    if before != inst.raw {
        return Err("input mutated".into());
    }
    Ok(())
}

pub fn filter_oracle(instances: u64) -> Outcome {
    let mut modes = BTreeMap::new();
    for i in 0..instances {
        let inst = filter_instance(&mut rng(0xF17E_0000 + i), false);
        check_filter_instance(&inst).map_err(|e| format!("instance {i}: {e}"))?;
        *modes.entry(format!("{:?}", inst.mode)).or_insert(0) += 1;
    }
    Ok(format!("{instances} instances, 0 mismatches, modes {modes:?}"))
}

// ---------------------------------------------------------------- tamper

/// A 100-entry stream with two writers and every content payload kind.
pub fn tamper_base(b: u32) -> StreamState {
    let owner = key(700 + b);
    let guest = key(800 + b);
    let mut s =
        StreamState::create_with(&owner, &format!("t{b}"), StreamKind::Content, &[guest.principal()], None, 1_000)
            .unwrap();
    let id = s.stream_id();
    for i in 1..=100u64 {
        let author = if i % 3 == 0 { &guest } else { &owner };
        let payload = format!("b{b} e{i}");
        let (kind, reply) = match i % 10 {
            4 => (PayloadKind::Reply, Some(plurinet::EntryRef::new(id, i - 1))),
            7 if i % 3 != 0 => (PayloadKind::Edit, Some(plurinet::EntryRef::new(id, i - 2))),
            9 if i % 3 != 0 => (PayloadKind::Tombstone, Some(plurinet::EntryRef::new(id, i - 3))),
            _ => (PayloadKind::Post, None),
        };
        s.push(author, kind, payload.as_bytes(), reply, 1_000 + i).unwrap();
    }
    s
}

fn flip(bytes: &mut [u8], rng: &mut ChaCha8Rng) {
    let i = rng.gen_range(0..bytes.len());
    bytes[i] ^= 1 << rng.gen_range(0..8);
}

const KINDS: [PayloadKind; 6] = [
    PayloadKind::Post,
    PayloadKind::Reply,
    PayloadKind::Edit,
    PayloadKind::Tombstone,
    PayloadKind::ModAction,
    PayloadKind::WriterUpdate,
];

fn nonzero_delta(rng: &mut ChaCha8Rng) -> i64 {
    let d = rng.gen_range(1..=1_000i64);
    if rng.gen_bool(0.5) { d } else { -d }
}

/// Changes exactly one field of `e` to a different value; returns its name.
pub fn mutate_entry(e: &mut ContentEntry, rng: &mut ChaCha8Rng) -> &'static str {
    match rng.gen_range(0..10) {
        0 => {
            let other = loop {
                let p = key(rng.gen_range(0..1_000)).principal();
                if p != e.author {
                    break p;
                }
            };
            e.author = other;
            "author"
        }
        1 => {
            flip(&mut e.content_hash.0, rng);
            "content_hash"
        }
        2 => {
            let other = *KINDS.iter().filter(|k| **k != e.payload_kind).collect::<Vec<_>>().choose(rng).unwrap();
            e.payload_kind = *other;
            "payload_kind"
        }
        3 => {
            flip(&mut e.prev_hash.0, rng);
            "prev_hash"
        }
        4 => {
            e.reply_to = match e.reply_to {
                Some(_) if rng.gen_bool(0.5) => None,
                Some(r) => Some(plurinet::EntryRef::new(r.stream_id, r.seq + 1)),
                None => Some(plurinet::EntryRef::new(e.stream_id, rng.gen_range(0..200))),
            };
            "reply_to"
        }
        5 => {
            e.seq = e.seq.checked_add_signed(nonzero_delta(rng)).unwrap_or(e.seq + 1);
            "seq"
        }
        6 => {
            flip(&mut e.signature.0, rng);
            "signature"
        }
        7 => {
            flip(&mut e.stream_id.0, rng);
            "stream_id"
        }
        8 => {
            e.timestamp = e.timestamp.checked_add_signed(nonzero_delta(rng)).unwrap_or(e.timestamp + 1);
            "timestamp"
        }
        _ => {
            e.writers = match e.writers.take() {
                Some(_) => None,
                None => Some(vec![key(rng.gen_range(0..1_000)).principal()]),
            };
            "writers"
        }
    }
}

pub fn mutate_genesis(g: &mut GenesisRecord, rng: &mut ChaCha8Rng) -> &'static str {
    match rng.gen_range(0..10) {
        0 => {
            g.created_at = g.created_at.checked_add_signed(nonzero_delta(rng)).unwrap_or(g.created_at + 1);
            "created_at"
        }
        1 => {
            g.owner = key(rng.gen_range(1_000..2_000)).principal();
            "owner"
        }
        2 => {
            flip(&mut g.prev_hash.0, rng);
            "prev_hash"
        }
        3 => {
            g.scope = match g.scope {
                Some(_) => None,
                None => Some(StreamId(rng.gen())),
            };
            "scope"
        }
        4 => {
            g.seq = rng.gen_range(1..1_000);
            "seq"
        }
        5 => {
            flip(&mut g.signature.0, rng);
            "signature"
        }
        6 => {
            flip(&mut g.stream_id.0, rng);
            "stream_id"
        }
        7 => {
            g.stream_kind = match g.stream_kind {
                StreamKind::Content => StreamKind::Moderation,
                StreamKind::Moderation => StreamKind::Content,
            };
            "stream_kind"
        }
        8 => {
            g.stream_name.push('x');
            "stream_name"
        }
        _ => {
            g.writers.push(key(rng.gen_range(2_000..3_000)).principal());
            g.writers.sort();
            "writers"
        }
    }
}

pub const TAMPER_BUDGET: Duration = Duration::from_secs(30);

/// `mutations` single-field mutations at uniformly random positions (genesis included).
pub fn tamper_evidence(mutations: usize) -> Outcome {
    let start = Instant::now();
    let bases: Vec<StreamState> = (0..10).map(tamper_base).collect();
    for b in &bases {
        if !b.verify().ok {
            return Err("base stream does not verify".into());
        }
    }
    let mut r = rng(0x7A4E_0001);
    let mut per_field: BTreeMap<&str, usize> = BTreeMap::new();
    for n in 0..mutations {
        let base = &bases[n % bases.len()];
        let k = r.gen_range(0..=100u64);
        let mut g = base.genesis().clone();
        let mut entries = base.entries().to_vec();
        let field =
            if k == 0 { mutate_genesis(&mut g, &mut r) } else { mutate_entry(&mut entries[k as usize - 1], &mut r) };
        let report = verify_stream(&g, &entries);
        if report.ok || report.first_bad_seq != Some(k) {
            return Err(format!("mutation {n}: {field} at seq {k} gave {report}"));
        }
        *per_field.entry(field).or_default() += 1;
    }
    let elapsed = start.elapsed();
    if elapsed > TAMPER_BUDGET {
        return Err(format!("{mutations} mutations took {elapsed:?} (budget {TAMPER_BUDGET:?})"));
    }
    Ok(format!("{mutations}/{mutations} flagged at the right seq in {elapsed:.2?}; {} distinct fields", per_field.len()))
}

// ---------------------------------------------------------------- platforms

fn chronological(mut entries: Vec<ContentEntry>) -> Vec<plurinet::EntryRef> {
    entries.sort_by_key(|e| (std::cmp::Reverse(e.timestamp), e.stream_id, e.seq));
    entries.iter().map(ContentEntry::entry_ref).collect()
}

/// Author streams with posts drawn from a small vocabulary (so hashes repeat).
fn author_world(rng: &mut ChaCha8Rng, authors: u32) -> (World, Vec<StreamId>, Vec<ContentEntry>) {
    let mut w = World::new();
    let mut ids = vec![];
    let mut raw = vec![];
    for a in 0..authors {
        let id = w.content(&key(a), "posts");
        ids.push(id);
        for _ in 0..rng.gen_range(0..=10) {
            let text = WORDS[rng.gen_range(0..WORDS.len())];
            raw.push(w.post(&id, &key(a), text, rng.gen_range(0..1_000)));
        }
    }
    (w, ids, raw)
}

/// Reddit-style forum: moderators publish deny lists that are unioned.
pub fn forum_instance(seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    let authors = r.gen_range(2..=6);
    let (mut w, content, raw) = author_world(&mut r, authors);
    let mut mods = vec![];
    let mut denied: Vec<(Target, StreamId)> = vec![];
    for m in 0..r.gen_range(1..=4u32) {
        let id = w.moderation(&key(300 + m), "removals");
        mods.push(id);
        for t in 0..r.gen_range(0..=8u64) {
            let target = match r.gen_range(0..3) {
                0 if !raw.is_empty() => Target::Entry(raw[r.gen_range(0..raw.len())].entry_ref()),
                0 | 1 => Target::Hash(Hash::of(WORDS[r.gen_range(0..WORDS.len())].as_bytes())),
                _ => Target::Principal(key(r.gen_range(0..authors)).principal().id()),
            };
            w.act(&id, &key(300 + m), &ModAction::deny(target.clone()), t);
            if r.gen_bool(0.3) {
                w.act(&id, &key(300 + m), &ModAction::label(target.clone(), "removed"), t);
            }
            denied.push((target, id));
        }
    }
    let forum = ForumConfig { content_streams: content, default_streams: vec![], forum_id: "f".into(), moderator_streams: mods };
    let feed = assemble_forum_feed(&forum, &w.index(), &SubscriptionSet::default(), FeedOptions::at(0));

    let keep: Vec<ContentEntry> =
        raw.iter().filter(|e| !denied.iter().any(|(t, _)| oracle::matches(t, e))).cloned().collect();
    if feed.refs() != chronological(keep) {
        return Err(format!("seed {seed}: forum feed is not raw minus the union of deny sets"));
    }
    for h in &feed.hidden {
        let e = raw.iter().find(|e| e.entry_ref() == h.entry).unwrap();
        let want: BTreeSet<StreamId> = denied.iter().filter(|(t, _)| oracle::matches(t, e)).map(|(_, s)| *s).collect();
        if h.sources != want {
            return Err(format!("seed {seed}: hidden {} credited to {:?}, want {:?}", h.entry, h.sources, want));
        }
    }
    if feed.items.len() + feed.hidden.len() != raw.len() {
        return Err(format!("seed {seed}: items and hidden do not partition raw"));
    }
    Ok(())
}

/// Twitter-style follow: each subscription is an allow list of authors.
pub fn follow_instance(seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    let authors = r.gen_range(2..=8);
    let (mut w, _, raw) = author_world(&mut r, authors);
    let mut follows = BTreeSet::new();
    let mut allowed = BTreeSet::new();
    for l in 0..r.gen_range(1..=3u32) {
        let id = w.moderation(&key(400 + l), "following");
        follows.insert(id);
        for t in 0..r.gen_range(0..=5u64) {
            let who = key(r.gen_range(0..authors)).principal();
            w.act(&id, &key(400 + l), &ModAction::allow(Target::Principal(who.id())), t);
            allowed.insert(who);
        }
    }
    let subs = SubscriptionSet { follows, ..SubscriptionSet::default() };
    let feed = assemble_follow_feed(&subs, &w.index(), FeedOptions::at(0));
    let keep: Vec<ContentEntry> = raw.iter().filter(|e| allowed.contains(&e.author)).cloned().collect();
    if feed.refs() != chronological(keep) {
        return Err(format!("seed {seed}: follow feed is not the union of allowed authors"));
    }
    Ok(())
}

pub fn platform_emulation(instances: u64) -> Outcome {
    for i in 0..instances {
        forum_instance(0xF0_0000 + i)?;
        follow_instance(0xF1_0000 + i)?;
    }
    Ok(format!("{instances} forum and {instances} follow instances match their oracles"))
}

// ---------------------------------------------------------------- laws

pub fn union_laws(a: &plurinet::moderation::EffectivePolicy, b: &plurinet::moderation::EffectivePolicy, c: &plurinet::moderation::EffectivePolicy) -> Result<(), String> {
    let u = |ps: &[plurinet::moderation::EffectivePolicy]| combine(ps, Combinator::Union);
    if u(&[a.clone(), b.clone()]) != u(&[b.clone(), a.clone()]) {
        return Err("UNION is not commutative".into());
    }
    let left = u(&[u(&[a.clone(), b.clone()]), c.clone()]);
    let right = u(&[a.clone(), u(&[b.clone(), c.clone()])]);
    if left != right || left != u(&[a.clone(), b.clone(), c.clone()]) {
        return Err("UNION is not associative".into());
    }
    if u(&[a.clone(), a.clone()]) != *a || u(&[a.clone()]) != *a {
        return Err("UNION is not idempotent".into());
    }
    Ok(())
}

pub fn deny_overrides_containment(a: &plurinet::moderation::EffectivePolicy, b: &plurinet::moderation::EffectivePolicy) -> Result<(), String> {
    let ps = [a.clone(), b.clone()];
    let d = combine(&ps, Combinator::DenyOverrides);
    let u = combine(&ps, Combinator::Union);
    if d.deny != u.deny {
        return Err("DENY_OVERRIDES changed the deny set".into());
    }
    if d.allow.keys().any(|t| d.deny.contains_key(t)) {
        return Err("DENY_OVERRIDES left a target both allowed and denied".into());
    }
    for (t, srcs) in &u.allow {
        let expect = (!u.deny.contains_key(t)).then_some(srcs);
        if d.allow.get(t) != expect {
            return Err(format!("DENY_OVERRIDES mishandled allow of {t}"));
        }
    }
    if d.labels != u.labels || d.scores != u.scores || d.sources != u.sources {
        return Err("DENY_OVERRIDES changed labels, scores or sources".into());
    }
    Ok(())
}

fn graph_views(n: usize, edges: &[(usize, usize)]) -> (Vec<StreamId>, BTreeMap<StreamId, ModStreamView>) {
    let ids: Vec<StreamId> = (0..n).map(|i| StreamId::derive(&key(5_000 + i as u32).principal(), "g")).collect();
    let mut views = BTreeMap::new();
    for (i, id) in ids.iter().enumerate() {
        let actions = edges
            .iter()
            .filter(|(a, _)| *a == i)
            .enumerate()
            .map(|(k, (_, b))| SignedAction {
                action: ModAction::include(ids[*b]),
                author: key(5_000 + i as u32).principal().id(),
                seq: k as u64 + 1,
                timestamp: 0,
            })
            .collect();
        views.insert(*id, ModStreamView { stream_id: *id, kind: StreamKind::Moderation, scope: None, actions, warnings: vec![] });
    }
    (ids, views)
}

pub const CYCLE_DEPTH: usize = 64;

/// Cycle warnings on a graph, checked against a count and against the oracle.
pub fn cycle_warnings(n: usize, edges: &[(usize, usize)]) -> (usize, usize) {
    let (ids, views) = graph_views(n, edges);
    let p = resolve(&ids[0], &views, CYCLE_DEPTH);
    let got = p.warnings.iter().filter(|w| matches!(w, plurinet::moderation::PolicyWarning::Cycle { .. })).count();
    assert!(n < CYCLE_DEPTH);
    let id_edges: Vec<(StreamId, StreamId)> = edges.iter().map(|&(a, b)| (ids[a], ids[b])).collect();
    (got, oracle::cycle_entries(ids[0], &oracle::reachable_edges(ids[0], &id_edges)).len())
}

pub fn ring_edges(n: usize) -> Vec<(usize, usize)> {
    (0..n).map(|i| (i, (i + 1) % n)).collect()
}

pub fn complete_edges(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).collect()
}

/// Root 0 includes the first member of each of ten rings over streams 1..50.
pub fn ten_ring_edges() -> Vec<(usize, usize)> {
    let mut edges = vec![];
    let mut next = 1;
    for r in 0..10 {
        let len = if r < 9 { 5 } else { 4 };
        let members: Vec<usize> = (next..next + len).collect();
        next += len;
        edges.push((0, members[0]));
        for k in 0..len {
            edges.push((members[k], members[(k + 1) % len]));
        }
    }
    edges
}

pub fn composition_laws(pairs: u64) -> Outcome {
    let mut r = rng(0x1A55_0001);
    for i in 0..pairs {
        let (a, b, c) = (random_policy(&mut r), random_policy(&mut r), random_policy(&mut r));
        union_laws(&a, &b, &c).map_err(|e| format!("triple {i}: {e}"))?;
        deny_overrides_containment(&a, &b).map_err(|e| format!("pair {i}: {e}"))?;
    }
    let start = Instant::now();
    let fixed = [("ring50", ring_edges(50), 1), ("K50", complete_edges(50), 1), ("ten rings", ten_ring_edges(), 10)];
    let mut counts = vec![];
    for (name, edges, want) in &fixed {
        let (got, oracle_count) = cycle_warnings(50, edges);
        if got != *want || oracle_count != *want {
            return Err(format!("{name}: {got} cycle warnings, oracle {oracle_count}, want {want}"));
        }
        counts.push(format!("{name}={got}"));
    }
    for seed in 0..20u64 {
        let mut g = rng(0xC7C1_0000 + seed);
        let edges: Vec<(usize, usize)> =
            (0..150).map(|_| (g.gen_range(0..50), g.gen_range(0..50))).collect();
        let (got, want) = cycle_warnings(50, &edges);
        if got != want {
            return Err(format!("random graph {seed}: {got} cycle warnings, oracle {want}"));
        }
    }
    Ok(format!(
        "{pairs} triples/pairs hold; cycles {} and 20 random 50-stream graphs match oracle in {:.2?}",
        counts.join(" "),
        start.elapsed()
    ))
}

// ---------------------------------------------------------------- convergence

fn sim_script(n: usize) -> Vec<ScriptStep> {
    let mut script = vec![];
    for s in 0..5u32 {
        let node = (s as usize * 3) % n;
        let action = SimAction::CreateStream { author: s, name: "wall".into(), stream_kind: StreamKind::Content };
        script.push(ScriptStep { action, node, tick: 0 });
        for i in 0..8u64 {
            let action = SimAction::Append { author: s, name: "wall".into(), text: format!("s{s} post {i}") };
            script.push(ScriptStep { action, node, tick: 1 + i * 2 });
        }
    }
    script
}

/// Returns the worst rounds-to-converge over the five streams.
pub fn converge(adj: Vec<Vec<usize>>, seed: u64) -> Result<(u64, u64), String> {
    let diameter = topology::diameter(&adj).ok_or("disconnected topology")? as u64;
    let n = adj.len();
    let config = SimNetConfig::new(adj, 2, 0.01, seed, 2_000);
    let script = sim_script(n);
    let result = run_simulation(&config, &script).map_err(|e| e.to_string())?;
    let mut worst = 0;
    for s in 0..5u32 {
        let id = sim_stream_id(s, "wall");
        let rounds = result.rounds_to_converge(&id).ok_or(format!("seed {seed}: stream {s} never converged"))?;
        let heads: BTreeSet<_> = result.final_heads.iter().map(|h| h.get(&id).map(|x| x.head_hash)).collect();
        if heads.len() != 1 || rounds > 3 * diameter {
            return Err(format!("seed {seed}: stream {s} took {rounds} rounds (bound {}), {} distinct heads", 3 * diameter, heads.len()));
        }
        worst = worst.max(rounds);
    }
    let again = run_simulation(&config, &script).map_err(|e| e.to_string())?;
    if again.trace_bytes() != result.trace_bytes() {
        return Err(format!("seed {seed}: trace differs between runs"));
    }
    Ok((worst, 3 * diameter))
}

pub fn convergence() -> Outcome {
    let (ring, bound) = converge(topology::ring(10), 42)?;
    let mut random = vec![];
    for seed in 0..5 {
        let (w, b) = converge(topology::random_connected(10, 5, seed), 100 + seed)?;
        random.push(format!("{w}/{b}"));
    }
    Ok(format!("ring10 {ring}/{bound} rounds; random graphs {}; traces byte-identical", random.join(" ")))
}

// ---------------------------------------------------------------- impermanence

fn fs_store(id: &str) -> BlobStoreConfig {
    BlobStoreConfig { backend: Backend::Filesystem, location: format!("provider-{id}"), refusal: vec![], store_id: id.into() }
}

/// A node whose forum content lives only in store `old`.
pub fn provider_node(dir: &std::path::Path) -> (plurinet::node::Node, StreamId) {
    let mut node = open_node(dir);
    node.add_store(fs_store("old")).unwrap();
    node.add_store(fs_store("new")).unwrap();
    let author = key(900);
    let id = node.create_stream_at(&author, "wall", StreamKind::Content, &[], None, 1_000).unwrap();
    for i in 1..=20u64 {
        let text = format!("post {i}");
        let (_, e) = node.stream(&id).unwrap().append_at(&author, PayloadKind::Post, text.as_bytes(), None, 1_000 + i).unwrap();
        let old = node.stores().by_id("old").unwrap().clone();
        old.put_attributed(text.as_bytes(), &Attribution::new(id, author.principal().id())).unwrap();
        node.submit_entry(e, None).unwrap();
    }
    let mods = node.create_stream_at(&key(901), "mods", StreamKind::Moderation, &[], None, 1_000).unwrap();
    let spam = plurinet::EntryRef::new(id, 3);
    node.publish_mod_at(&key(901), &mods, &ModAction::deny(Target::Entry(spam)), 2_000).unwrap();
    let forum = ForumConfig { content_streams: vec![id], default_streams: vec![], forum_id: "f".into(), moderator_streams: vec![mods] };
    node.add_forum(forum).unwrap();
    (node, id)
}

pub fn forum_bytes(node: &plurinet::node::Node, at: u64) -> (Vec<u8>, usize, usize) {
    let feed = node.forum_feed("f", &SubscriptionSet::default(), &BTreeSet::new(), FeedOptions::at(at)).unwrap();
    let unresolved = feed.items.iter().filter(|i| i.payload.is_unresolved()).count();
    (feed.canonical_bytes_timeless(), feed.items.len(), unresolved)
}

fn stream_files(dir: &std::path::Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir.join("streams"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "csl"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect()
}

pub fn impermanence() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = tmp.path().join("node");
    let (mut node, id) = provider_node(&dir);
    let (before, items, unresolved) = forum_bytes(&node, 1);
    if items != 19 || unresolved != 0 {
        return Err(format!("setup: {items} items, {unresolved} unresolved"));
    }

    // control: without the switch, losing the old store breaks the feed
    let ctl_dir = tmp.path().join("control");
    let (mut ctl, _) = provider_node(&ctl_dir);
    ctl.take_offline("old").unwrap();
    ctl.rebuild_index();
    if forum_bytes(&ctl, 1).2 == 0 {
        return Err("control: feed survived losing its only store".into());
    }

    let report = node.switch_provider(&id, "old", "new", None).map_err(|e| e.to_string())?;
    if !report.unresolved.is_empty() || report.hints_issued.len() != 20 {
        return Err(format!("switch: {} unresolved, {} hints", report.unresolved.len(), report.hints_issued.len()));
    }
    node.take_offline("old").unwrap();
    std::fs::remove_dir_all(dir.join("provider-old")).map_err(|e| e.to_string())?;
    node.rebuild_index();
    let (after, _, _) = forum_bytes(&node, 2);
    if after != before {
        return Err("feed changed after the old store went away".into());
    }
    drop(node);
    let reopened = open_node(&dir);
    if forum_bytes(&reopened, 3).0 != before {
        return Err("feed changed after restart without the old store".into());
    }

    let out = tmp.path().join("bundle");
    reopened.export(&Selector::All, &out, &[], 5_000).map_err(|e| e.to_string())?;
    let fresh_dir = tmp.path().join("fresh");
    let mut fresh = open_node(&fresh_dir);
    fresh.import(&out).map_err(|e| e.to_string())?;
    let (a, b) = (stream_files(&dir), stream_files(&fresh_dir));
    if a.is_empty() || a != b {
        return Err(format!("export/import: {} stream files vs {}, contents differ", a.len(), b.len()));
    }
    Ok(format!("{items} items identical after switch, shutdown and restart; {} stream files byte-identical after export/import", a.len()))
}

// ---------------------------------------------------------------- equivocation

/// Two validly signed branches of one stream that split at `split`.
pub struct ForkFixture {
    pub name: &'static str,
    pub a: StreamState,
    pub b: StreamState,
    pub split: u64,
}

pub fn fork_fixtures() -> Vec<ForkFixture> {
    let mut out = vec![];
    let cases: [(&str, u64, u64, u64, bool); 6] = [
        // (name, common prefix, extra on a, extra on b, second writer equivocates)
        ("at seq 1", 0, 1, 1, false),
        ("mid-stream", 49, 51, 10, false),
        ("at head", 99, 1, 1, false),
        ("uneven branch lengths", 10, 1, 30, false),
        ("writer equivocates", 20, 5, 5, true),
        ("same payload, new timestamp", 5, 1, 1, false),
    ];
    for (i, (name, common, extra_a, extra_b, guest)) in cases.into_iter().enumerate() {
        let owner = key(1_100 + i as u32);
        let writer = key(1_200 + i as u32);
        let mut s = StreamState::create_with(&owner, "f", StreamKind::Content, &[writer.principal()], None, 0).unwrap();
        for k in 1..=common {
            s.push(&owner, PayloadKind::Post, format!("c{k}").as_bytes(), None, k).unwrap();
        }
        let author = if guest { &writer } else { &owner };
        let (mut a, mut b) = (s.clone(), s);
        for k in 0..extra_a {
            a.push(author, PayloadKind::Post, format!("a{k}").as_bytes(), None, 1_000 + k).unwrap();
        }
        for k in 0..extra_b {
            let text = if name.starts_with("same payload") { format!("a{k}") } else { format!("b{k}") };
            b.push(author, PayloadKind::Post, text.as_bytes(), None, 2_000 + k).unwrap();
        }
        out.push(ForkFixture { name, a, b, split: common + 1 });
    }
    out
}

/// Five replicas in a line; the branches start at the two ends.
pub fn propagate(f: &ForkFixture) -> Result<usize, String> {
    let id = f.a.stream_id();
    let prefix = {
        StreamState::from_records(f.a.genesis().clone(), f.a.entries()[..(f.split - 1) as usize].to_vec())
            .map_err(|r| r.to_string())?
    };
    let mut nodes: Vec<StreamMap> = (0..5).map(|_| StreamMap::from([(id, prefix.clone())])).collect();
    nodes[0].insert(id, f.a.clone());
    nodes[4].insert(id, f.b.clone());
    for round in 1..=10 {
        for i in 0..5usize {
            let neighbours: Vec<StreamMap> =
                [i.checked_sub(1), (i + 1 < 5).then_some(i + 1)].into_iter().flatten().map(|j| nodes[j].clone()).collect();
            let peers: Vec<&dyn Peer> = neighbours.iter().map(|m| m as &dyn Peer).collect();
            gossip_round(&mut nodes[i], &peers, None);
        }
        if nodes.iter().all(|m| m[&id].is_forked()) {
            for m in &nodes {
                let ev = m[&id].fork_evidence().unwrap();
                if !ev.is_valid() || ev.a.seq != f.split {
                    return Err(format!("{}: evidence at seq {} not {}", f.name, ev.a.seq, f.split));
                }
                if m[&id].clone().push(&key(0), PayloadKind::Post, b"x", None, 0).is_ok() {
                    return Err(format!("{}: forked replica still accepts appends", f.name));
                }
            }
            return Ok(round);
        }
    }
    Err(format!("{}: fork did not reach every replica", f.name))
}

pub fn equivocation() -> Outcome {
    let fixtures = fork_fixtures();
    let mut rounds = vec![];
    for f in &fixtures {
        let (ea, eb) = (f.a.entry(f.split).unwrap(), f.b.entry(f.split).unwrap());
        if detect_fork(ea, eb).is_none() || detect_fork(eb, ea).is_none() {
            return Err(format!("{}: detect_fork missed it", f.name));
        }
        rounds.push(propagate(f)?);
    }
    // non-forks must not be flagged
    let f = &fixtures[1];
    let e = f.a.entry(f.split).unwrap();
    let mut forged = f.b.entry(f.split).unwrap().clone();
    forged.signature = Signature([7; 64]);
    if detect_fork(e, e).is_some() || detect_fork(e, f.a.entry(f.split + 1).unwrap()).is_some() || detect_fork(e, &forged).is_some() {
        return Err("a non-fork was reported as a fork".into());
    }
    let sim = {
        use plurinet::sim::TraceKind;
        let config = SimNetConfig::new(topology::ring(6), 1, 0.0, 5, 300);
        let mut script = vec![ScriptStep {
            action: SimAction::CreateStream { author: 1, name: "s".into(), stream_kind: StreamKind::Content },
            node: 0,
            tick: 0,
        }];
        for (node, text) in [(0, "left"), (3, "right")] {
            script.push(ScriptStep { action: SimAction::Append { author: 1, name: "s".into(), text: text.into() }, node, tick: 40 });
        }
        let result = run_simulation(&config, &script).map_err(|e| e.to_string())?;
        let id = sim_stream_id(1, "s");
        if !result.final_heads.iter().all(|h| h[&id].forked) {
            return Err("simulated ring: some node missed the fork".into());
        }
        result.count(TraceKind::Fork)
    };
    Ok(format!(
        "{}/{} fixtures detected and reached 5/5 replicas (rounds {:?}); simulated ring flagged on 6/6 nodes ({sim} fork events)",
        fixtures.len(),
        fixtures.len(),
        rounds
    ))
}

// ---------------------------------------------------------------- performance

pub const FEED_BUDGET: Duration = Duration::from_secs(1);
pub const INGEST_BUDGET: Duration = Duration::from_secs(30);

/// 100 authors x 100 posts and 10 moderation streams written straight into a data dir.
pub fn perf_data_dir(dir: &std::path::Path) -> (Vec<StreamId>, Vec<StreamId>) {
    let mut r = rng(0x9E4F);
    let mut w = World::new();
    let mut content = vec![];
    for a in 0..100u32 {
        let id = w.content(&key(10_000 + a), "posts");
        for i in 0..100u64 {
            w.post(&id, &key(10_000 + a), &format!("author {a} post {i}"), 1_000 + i * 100 + a as u64);
        }
        content.push(id);
    }
    let all: Vec<ContentEntry> = w.streams.values().flat_map(|s| s.entries().to_vec()).collect();
    let mut mods = vec![];
    for m in 0..10u32 {
        let owner = key(20_000 + m);
        let id = w.moderation(&owner, "mods");
        for t in 0..200u64 {
            let e = &all[r.gen_range(0..all.len())];
            let action = match r.gen_range(0..4) {
                0 => ModAction::deny(Target::Entry(e.entry_ref())),
                1 => ModAction::label(Target::Hash(e.content_hash), "flagged"),
                2 => ModAction::score(Target::Entry(e.entry_ref()), r.gen_range(-100..=100)),
                _ => ModAction::deny(Target::Principal(key(10_000 + r.gen_range(0..100)).principal().id())),
            };
            w.act(&id, &owner, &action, 5_000 + t);
        }
        if m > 0 {
            w.act(&id, &owner, &ModAction::include(mods[m as usize - 1]), 9_000);
        }
        mods.push(id);
    }
    std::fs::create_dir_all(dir.join("streams")).unwrap();
    for (id, s) in &w.streams {
        std::fs::write(dir.join("streams").join(format!("{id}.csl")), s.to_csl()).unwrap();
    }
    let blobs = plurinet::storage::FsStore::open("local", dir.join("blobs")).unwrap();
    for bytes in w.blobs.values() {
        plurinet::storage::BlobStore::put(&blobs, bytes).unwrap();
    }
    (content, mods)
}

pub fn performance() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (content, mods) = perf_data_dir(tmp.path());
    let start = Instant::now();
    let mut node = open_node(tmp.path());
    let ingest = start.elapsed();
    let posts = node.index().raw_items(None).count();
    if posts != 10_000 {
        return Err(format!("indexed {posts} posts"));
    }
    node.add_forum(ForumConfig { content_streams: content, default_streams: vec![], forum_id: "big".into(), moderator_streams: mods })
        .unwrap();
    let start = Instant::now();
    let feed = node.forum_feed("big", &SubscriptionSet::default(), &BTreeSet::new(), FeedOptions::at(1)).unwrap();
    let assemble = start.elapsed();
    if feed.items.len() + feed.hidden.len() != 10_000 || feed.sources.len() != 10 {
        return Err(format!("feed has {} items, {} hidden, {} sources", feed.items.len(), feed.hidden.len(), feed.sources.len()));
    }
    if ingest > INGEST_BUDGET || assemble > FEED_BUDGET {
        return Err(format!("cold ingest {ingest:.2?} (budget {INGEST_BUDGET:?}), feed {assemble:.2?} (budget {FEED_BUDGET:?})"));
    }
    Ok(format!("cold ingest of 110 streams {ingest:.2?} (< 30 s); forum feed over 10000 posts x 10 mod streams {assemble:.2?} (< 1 s)"))
}

// ---------------------------------------------------------------- authority

pub struct AuthorityCase {
    pub locked: bool,
    pub disabled: bool,
    pub applied: bool,
}

/// Runs the locked x disabled truth table against one authority stream.
pub fn authority_cases() -> Result<Vec<AuthorityCase>, String> {
    let mut w = World::new();
    let (bad, good) = (key(1), key(2));
    let bad_wall = w.content(&bad, "wall");
    let good_wall = w.content(&good, "wall");
    for i in 0..3 {
        w.post(&bad_wall, &bad, &format!("illegal {i}"), 10 + i);
        w.post(&good_wall, &good, &format!("fine {i}"), 20 + i);
    }
    let watchdog = w.moderation(&key(3), "watchdog");
    w.act(&watchdog, &key(3), &ModAction::deny(Target::Principal(bad.principal().id())), 30);
    let index: ContentIndex = w.index();
    let mut out = vec![];
    for locked in [false, true] {
        for disabled in [false, true] {
            let forum = ForumConfig {
                content_streams: vec![bad_wall, good_wall],
                default_streams: vec![AuthorityStream { locked, stream_id: watchdog }],
                forum_id: "f".into(),
                moderator_streams: vec![],
            };
            let subs = SubscriptionSet {
                disabled_defaults: if disabled { BTreeSet::from([watchdog]) } else { BTreeSet::new() },
                ..SubscriptionSet::default()
            };
            let feed = assemble_forum_feed(&forum, &index, &subs, FeedOptions::at(0));
            let bad_visible = feed.items.iter().filter(|i| i.entry.author == bad.principal()).count();
            let applied = feed.sources.contains(&watchdog);
            let consistent = if applied { bad_visible == 0 && feed.hidden.len() == 3 } else { bad_visible == 3 && feed.hidden.is_empty() };
            if !consistent || feed.items.len() + feed.hidden.len() != 6 {
                return Err(format!("locked={locked} disabled={disabled}: sources and visibility disagree"));
            }
            out.push(AuthorityCase { locked, disabled, applied });
        }
    }
    Ok(out)
}

pub fn authority_matrix() -> Outcome {
    let cases = authority_cases()?;
    let mut rows = vec![];
    for c in &cases {
        let want = c.locked || !c.disabled;
        if c.applied != want {
            return Err(format!("locked={} disabled={}: applied={} want {}", c.locked, c.disabled, c.applied, want));
        }
        rows.push(format!("{}{}->{}", u8::from(c.locked), u8::from(c.disabled), if c.applied { "on" } else { "off" }));
    }
    Ok(format!("4/4 cases (locked,disabled->authority): {}", rows.join(" ")))
}
