//! Deterministic network simulator for the sync protocol.
//!
//! Single-threaded and tick-based. Each node holds its own [`StreamMap`].
//! Nodes announce fresh entries to their neighbours and run a pull-based
//! anti-entropy round every `gossip_interval` ticks. Message loss draws from a
//! seeded ChaCha8 stream, so a given config and script always produce the same
//! trace bytes.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::canonical;
use crate::hash::Hash;
use crate::identity::Keypair;
use crate::stream::{ContentEntry, PayloadKind, StreamId, StreamKind, StreamState};
use crate::sync::{integrate, overlap_start, HeadInfo, Integration, StreamMap, SyncKind};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SimError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("malformed script step {step}: {reason}")]
    Script { step: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSpec {
    pub a: usize,
    pub b: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
}

/// Links in `cut` drop every message sent during `from_tick..to_tick`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Partition {
    pub cut: Vec<[usize; 2]>,
    pub from_tick: u64,
    pub to_tick: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimNetConfig {
    /// Ticks between anti-entropy rounds; 0 picks `4 * max latency + 1`.
    #[serde(default)]
    pub gossip_interval: u64,
    /// Default per-link latency in ticks.
    pub latency: u64,
    #[serde(default)]
    pub links: Vec<LinkSpec>,
    /// Default per-link loss probability.
    #[serde(default)]
    pub loss: f64,
    pub max_ticks: u64,
    #[serde(default)]
    pub partitions: Vec<Partition>,
    pub rng_seed: u64,
    /// Adjacency list; must be symmetric.
    pub topology: Vec<Vec<usize>>,
}

impl SimNetConfig {
    pub fn new(topology: Vec<Vec<usize>>, latency: u64, loss: f64, rng_seed: u64, max_ticks: u64) -> SimNetConfig {
        SimNetConfig { gossip_interval: 0, latency, links: vec![], loss, max_ticks, partitions: vec![], rng_seed, topology }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let n = self.topology.len();
        let bad = |m: String| Err(SimError::Config(m));
        if n == 0 {
            return bad("topology has no nodes".into());
        }
        for (a, ns) in self.topology.iter().enumerate() {
            for &b in ns {
                if b >= n || b == a {
                    return bad(format!("node {a} lists invalid neighbour {b}"));
                }
                if !self.topology[b].contains(&a) {
                    return bad(format!("link {a}-{b} is not symmetric"));
                }
            }
        }
        let probs = std::iter::once(self.loss).chain(self.links.iter().filter_map(|l| l.loss));
        for p in probs {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("loss {p} outside [0, 1]"));
            }
        }
        for l in &self.links {
            if !self.topology.get(l.a).is_some_and(|ns| ns.contains(&l.b)) {
                return bad(format!("link override {}-{} is not in the topology", l.a, l.b));
            }
        }
        Ok(())
    }

    fn link(&self, a: usize, b: usize) -> Option<&LinkSpec> {
        self.links.iter().find(|l| (l.a, l.b) == (a, b) || (l.a, l.b) == (b, a))
    }

    pub fn latency_of(&self, a: usize, b: usize) -> u64 {
        self.link(a, b).and_then(|l| l.latency).unwrap_or(self.latency)
    }

    pub fn loss_of(&self, a: usize, b: usize) -> f64 {
        self.link(a, b).and_then(|l| l.loss).unwrap_or(self.loss)
    }

    pub fn effective_interval(&self) -> u64 {
        if self.gossip_interval > 0 {
            return self.gossip_interval;
        }
        let max_latency = self.links.iter().filter_map(|l| l.latency).fold(self.latency, u64::max);
        4 * max_latency + 1
    }

    fn cut_at(&self, tick: u64, a: usize, b: usize) -> bool {
        self.partitions.iter().any(|p| {
            (p.from_tick..p.to_tick).contains(&tick) && p.cut.iter().any(|&[x, y]| (x, y) == (a, b) || (x, y) == (b, a))
        })
    }
}

/// Topology builders and measures.
pub mod topology {
    use super::*;

    pub fn ring(n: usize) -> Vec<Vec<usize>> {
        (0..n)
            .map(|i| {
                let mut ns: Vec<usize> = [(i + n - 1) % n, (i + 1) % n].into_iter().filter(|&j| j != i).collect();
                ns.dedup();
                ns
            })
            .collect()
    }

    pub fn star(n: usize) -> Vec<Vec<usize>> {
        let mut adj = vec![vec![]; n];
        for leaf in 1..n {
            adj[0].push(leaf);
            adj[leaf].push(0);
        }
        adj
    }

    /// A random spanning tree plus `extra` random chords.
    pub fn random_connected(n: usize, extra: usize, seed: u64) -> Vec<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut edges = BTreeSet::new();
        for i in 1..n {
            let j = rng.gen_range(0..i);
            edges.insert((j, i));
        }
        let mut attempts = 0;
        while edges.len() < n - 1 + extra && attempts < extra * 20 {
            attempts += 1;
            let (a, b) = (rng.gen_range(0..n), rng.gen_range(0..n));
            if a != b {
                edges.insert((a.min(b), a.max(b)));
            }
        }
        let mut adj = vec![vec![]; n];
        for (a, b) in edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        for ns in &mut adj {
            ns.sort_unstable();
        }
        adj
    }

    /// Longest shortest path in hops; `None` if disconnected.
    pub fn diameter(adj: &[Vec<usize>]) -> Option<usize> {
        let mut best = 0;
        for start in 0..adj.len() {
            let mut dist = vec![usize::MAX; adj.len()];
            dist[start] = 0;
            let mut queue = VecDeque::from([start]);
            while let Some(u) = queue.pop_front() {
                for &v in &adj[u] {
                    if dist[v] == usize::MAX {
                        dist[v] = dist[u] + 1;
                        queue.push_back(v);
                    }
                }
            }
            best = best.max(dist.iter().copied().max()?);
            if best == usize::MAX {
                return None;
            }
        }
        Some(best)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE", deny_unknown_fields)]
pub enum SimAction {
    /// Simulated author `author` creates stream `name` on this node.
    CreateStream {
        author: u32,
        name: String,
        #[serde(default = "content_kind")]
        stream_kind: StreamKind,
    },
    /// The author appends a POST to their copy on this node. Running this on
    /// two nodes holding the same head produces an equivocation.
    Append { author: u32, name: String, text: String },
}

fn content_kind() -> StreamKind {
    StreamKind::Content
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptStep {
    pub action: SimAction,
    pub node: usize,
    pub tick: u64,
}

/// Scenario file contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimScenario {
    pub config: SimNetConfig,
    #[serde(default)]
    pub script: Vec<ScriptStep>,
}

/// Deterministic signing key for simulated author `n`.
pub fn author_key(n: u32) -> Keypair {
    Keypair::from_seed(Hash::of(format!("plurinet-sim-author:{n}").as_bytes()).0)
}

pub fn sim_stream_id(author: u32, name: &str) -> StreamId {
    StreamId::derive(&author_key(author).principal(), name)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TraceKind {
    Script,
    ScriptError,
    Send,
    Deliver,
    Drop,
    Accept,
    Fork,
    Reject,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
    pub event: TraceKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_hash: Option<Hash>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_seq: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub msg: Option<SyncKind>,
    pub node: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub peer: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stream_id: Option<StreamId>,
    pub tick: u64,
}

impl TraceEvent {
    fn new(tick: u64, event: TraceKind, node: usize) -> TraceEvent {
        TraceEvent {
            count: None,
            detail: None,
            event,
            head_hash: None,
            head_seq: None,
            msg: None,
            node,
            peer: None,
            stream_id: None,
            tick,
        }
    }

    fn with_head(mut self, state: &StreamState) -> TraceEvent {
        self.stream_id = Some(state.stream_id());
        self.head_seq = Some(state.head_seq());
        self.head_hash = Some(state.head_hash());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeHead {
    pub forked: bool,
    pub head_hash: Hash,
    pub head_seq: u64,
}

#[derive(Debug, Clone)]
pub struct SimResult {
    pub trace: Vec<TraceEvent>,
    pub final_heads: Vec<BTreeMap<StreamId, NodeHead>>,
    /// Tick from which every node has held the same head, if they do at the end.
    pub converged_at: BTreeMap<StreamId, Option<u64>>,
    /// Tick of the last script step that touched each stream.
    pub last_change: BTreeMap<StreamId, u64>,
    pub gossip_interval: u64,
    pub final_states: Vec<StreamMap>,
}

impl SimResult {
    /// One canonical JSON object per line.
    pub fn trace_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for e in &self.trace {
            out.extend(canonical::to_canonical_bytes(e).expect("trace serializes"));
            out.push(b'\n');
        }
        out
    }

    pub fn converged(&self, id: &StreamId) -> bool {
        self.converged_at.get(id).is_some_and(Option::is_some)
    }

    pub fn all_converged(&self) -> bool {
        self.converged_at.values().all(Option::is_some)
    }

    /// Gossip rounds between the last change to `id` and convergence.
    pub fn rounds_to_converge(&self, id: &StreamId) -> Option<u64> {
        let at = (*self.converged_at.get(id)?)?;
        let since = at.saturating_sub(*self.last_change.get(id)?);
        Some(since.div_ceil(self.gossip_interval))
    }

    /// Per-node head hashes as of the end of `tick`, rebuilt from the trace.
    pub fn heads_at(&self, tick: u64) -> Vec<BTreeMap<StreamId, Hash>> {
        let mut heads = vec![BTreeMap::new(); self.final_heads.len()];
        for e in self.trace.iter().take_while(|e| e.tick <= tick) {
            if matches!(e.event, TraceKind::Script | TraceKind::Accept | TraceKind::Fork) {
                if let (Some(s), Some(h)) = (e.stream_id, e.head_hash) {
                    heads[e.node].insert(s, h);
                }
            }
        }
        heads
    }

    pub fn count(&self, kind: TraceKind) -> usize {
        self.trace.iter().filter(|e| e.event == kind).count()
    }
}

#[derive(Debug, Clone)]
enum Msg {
    HeadsRequest,
    HeadsResponse(Vec<HeadInfo>),
    EntriesRequest { stream_id: StreamId, from: u64, to: u64 },
    EntriesResponse { head: HeadInfo, entries: Vec<ContentEntry> },
    Announce { head: HeadInfo, entries: Vec<ContentEntry> },
}

impl Msg {
    fn kind(&self) -> SyncKind {
        match self {
            Msg::HeadsRequest => SyncKind::HeadRequest,
            Msg::HeadsResponse(_) => SyncKind::HeadResponse,
            Msg::EntriesRequest { .. } => SyncKind::EntriesRequest,
            Msg::EntriesResponse { .. } => SyncKind::EntriesResponse,
            Msg::Announce { .. } => SyncKind::Announce,
        }
    }

    fn stream(&self) -> Option<StreamId> {
        match self {
            Msg::HeadsRequest | Msg::HeadsResponse(_) => None,
            Msg::EntriesRequest { stream_id, .. } => Some(*stream_id),
            Msg::EntriesResponse { head, .. } | Msg::Announce { head, .. } => Some(head.stream_id),
        }
    }
}

#[derive(Debug)]
enum Event {
    Script(usize),
    Gossip(usize),
    Deliver { from: usize, to: usize, msg: Msg },
}

struct Scheduled {
    tick: u64,
    order: u64,
    event: Event,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.tick, self.order) == (other.tick, other.order)
    }
}

impl Eq for Scheduled {}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scheduled {
    // reversed: BinaryHeap is a max-heap
    fn cmp(&self, other: &Self) -> Ordering {
        (other.tick, other.order).cmp(&(self.tick, self.order))
    }
}

struct Sim<'a> {
    config: &'a SimNetConfig,
    script: &'a [ScriptStep],
    nodes: Vec<StreamMap>,
    queue: BinaryHeap<Scheduled>,
    order: u64,
    rng: ChaCha8Rng,
    trace: Vec<TraceEvent>,
    converged_at: BTreeMap<StreamId, Option<u64>>,
    last_change: BTreeMap<StreamId, u64>,
    interval: u64,
}

impl Sim<'_> {
    fn schedule(&mut self, tick: u64, event: Event) {
        self.order += 1;
        self.queue.push(Scheduled { tick, order: self.order, event });
    }

    fn send(&mut self, tick: u64, from: usize, to: usize, msg: Msg) {
        let mut ev = TraceEvent::new(tick, TraceKind::Send, from);
        ev.peer = Some(to);
        ev.msg = Some(msg.kind());
        ev.stream_id = msg.stream();
        if let Msg::EntriesRequest { from, to, .. } = &msg {
            ev.detail = Some(format!("{from}..={to}"));
        }
        self.trace.push(ev.clone());
        let loss = self.config.loss_of(from, to);
        let dropped = if self.config.cut_at(tick, from, to) {
            Some("PARTITION")
        } else if loss > 0.0 && self.rng.gen::<f64>() < loss {
            Some("LOSS")
        } else {
            None
        };
        if let Some(reason) = dropped {
            ev.event = TraceKind::Drop;
            ev.detail = Some(reason.to_string());
            self.trace.push(ev);
            return;
        }
        let at = tick + self.config.latency_of(from, to);
        self.schedule(at, Event::Deliver { from, to, msg });
    }

    fn broadcast(&mut self, tick: u64, node: usize, except: Option<usize>, msg: Msg) {
        for peer in self.config.topology[node].clone() {
            if Some(peer) != except {
                self.send(tick, node, peer, msg.clone());
            }
        }
    }

    fn note_change(&mut self, tick: u64, id: StreamId) {
        let head = self.nodes[0].get(&id).map(StreamState::head_hash);
        let same = head.is_some() && self.nodes.iter().all(|n| n.get(&id).map(StreamState::head_hash) == head);
        let entry = self.converged_at.entry(id).or_insert(None);
        match (same, *entry) {
            (true, None) => *entry = Some(tick),
            (false, Some(_)) => *entry = None,
            _ => {}
        }
    }

    fn run_script(&mut self, tick: u64, idx: usize) {
        let step = &self.script[idx];
        let node = step.node;
        let mut ev = TraceEvent::new(tick, TraceKind::Script, node);
        ev.detail = Some(match &step.action {
            SimAction::CreateStream { name, .. } => format!("CREATE_STREAM {name}"),
            SimAction::Append { name, text, .. } => format!("APPEND {name} {text}"),
        });
        let outcome: Result<(StreamId, Vec<ContentEntry>), String> = match &step.action {
            SimAction::CreateStream { author, name, stream_kind } => {
                let id = sim_stream_id(*author, name);
                if self.nodes[node].contains_key(&id) {
                    Err(format!("stream {name} already exists on node {node}"))
                } else {
                    StreamState::create_with(&author_key(*author), name, *stream_kind, &[], None, tick)
                        .map(|s| {
                            self.nodes[node].insert(id, s);
                            (id, vec![])
                        })
                        .map_err(|e| e.to_string())
                }
            }
            SimAction::Append { author, name, text } => {
                let id = sim_stream_id(*author, name);
                match self.nodes[node].get_mut(&id) {
                    None => Err(format!("stream {name} not on node {node}")),
                    Some(s) => s
                        .push(&author_key(*author), PayloadKind::Post, text.as_bytes(), None, tick)
                        .map(|e| (id, vec![e]))
                        .map_err(|e| e.to_string()),
                }
            }
        };
        match outcome {
            Ok((id, entries)) => {
                let state = &self.nodes[node][&id];
                let head = HeadInfo::of(state);
                self.trace.push(ev.with_head(state));
                self.last_change.insert(id, tick);
                self.note_change(tick, id);
                self.broadcast(tick, node, None, Msg::Announce { head, entries });
            }
            Err(reason) => {
                ev.event = TraceKind::ScriptError;
                ev.detail = Some(format!("{}: {reason}", ev.detail.unwrap_or_default()));
                self.trace.push(ev);
            }
        }
    }

    fn request(&mut self, tick: u64, node: usize, peer: usize, head: &HeadInfo, full: bool) {
        let from = if full { 1 } else { overlap_start(self.nodes[node].get(&head.stream_id), head.head_seq) };
        let msg = Msg::EntriesRequest { stream_id: head.stream_id, from, to: head.head_seq };
        self.send(tick, node, peer, msg);
    }

    fn offer(&mut self, tick: u64, node: usize, peer: usize, head: HeadInfo, entries: Vec<ContentEntry>, was_request: bool) {
        let id = head.stream_id;
        let existed = self.nodes[node].contains_key(&id);
        match integrate(&mut self.nodes[node], &head, &entries) {
            Ok(Integration::Applied(r)) => {
                let state = &self.nodes[node][&id];
                if r.new_entries > 0 || !existed {
                    let mut ev = TraceEvent::new(tick, TraceKind::Accept, node).with_head(state);
                    ev.peer = Some(peer);
                    ev.count = Some(r.new_entries);
                    self.trace.push(ev);
                }
                if r.newly_forked {
                    let mut ev = TraceEvent::new(tick, TraceKind::Fork, node).with_head(state);
                    ev.peer = Some(peer);
                    self.trace.push(ev);
                }
                if r.new_entries > 0 || r.newly_forked || !existed {
                    let fresh: Vec<ContentEntry> = state.entries()[state.entries().len() - r.new_entries..].to_vec();
                    let head = HeadInfo::of(state);
                    self.note_change(tick, id);
                    self.broadcast(tick, node, Some(peer), Msg::Announce { head, entries: fresh });
                }
            }
            Ok(Integration::NeedFullChain) => {
                let full = was_request;
                self.request(tick, node, peer, &head, full);
            }
            Err(e) => {
                let mut ev = TraceEvent::new(tick, TraceKind::Reject, node);
                ev.peer = Some(peer);
                ev.stream_id = Some(id);
                ev.detail = Some(e.to_string());
                self.trace.push(ev);
            }
        }
    }

    fn deliver(&mut self, tick: u64, from: usize, to: usize, msg: Msg) {
        let mut ev = TraceEvent::new(tick, TraceKind::Deliver, to);
        ev.peer = Some(from);
        ev.msg = Some(msg.kind());
        ev.stream_id = msg.stream();
        self.trace.push(ev);
        match msg {
            Msg::HeadsRequest => {
                let heads = self.nodes[to].values().map(HeadInfo::of).collect();
                self.send(tick, to, from, Msg::HeadsResponse(heads));
            }
            Msg::HeadsResponse(heads) => {
                for head in heads {
                    let local = self.nodes[to].get(&head.stream_id);
                    if !head.differs_from(local) {
                        continue;
                    }
                    if local.is_some_and(|l| l.head_hash() == head.head_hash) {
                        // only the fork flag differs
                        self.offer(tick, to, from, head, vec![], false);
                    } else {
                        self.request(tick, to, from, &head, false);
                    }
                }
            }
            Msg::EntriesRequest { stream_id, from: lo, to: _ } => {
                if let Some(state) = self.nodes[to].get(&stream_id) {
                    let head = HeadInfo::of(state);
                    let entries = state.range(lo, state.head_seq()).to_vec();
                    self.send(tick, to, from, Msg::EntriesResponse { head, entries });
                }
            }
            Msg::EntriesResponse { head, entries } => self.offer(tick, to, from, head, entries, true),
            Msg::Announce { head, entries } => self.offer(tick, to, from, head, entries, false),
        }
    }

    fn gossip(&mut self, tick: u64, node: usize) {
        for peer in self.config.topology[node].clone() {
            self.send(tick, node, peer, Msg::HeadsRequest);
        }
        let next = tick + self.interval;
        if next <= self.config.max_ticks {
            self.schedule(next, Event::Gossip(node));
        }
    }
}

/// Runs `script` on the network described by `config`.
pub fn run_simulation(config: &SimNetConfig, script: &[ScriptStep]) -> Result<SimResult, SimError> {
    config.validate()?;
    let n = config.topology.len();
    for (i, step) in script.iter().enumerate() {
        if step.node >= n {
            return Err(SimError::Script { step: i, reason: format!("node {} does not exist", step.node) });
        }
        if step.tick > config.max_ticks {
            return Err(SimError::Script { step: i, reason: format!("tick {} is after max_ticks", step.tick) });
        }
    }
    let interval = config.effective_interval();
    let mut sim = Sim {
        config,
        script,
        nodes: vec![StreamMap::new(); n],
        queue: BinaryHeap::new(),
        order: 0,
        rng: ChaCha8Rng::seed_from_u64(config.rng_seed),
        trace: vec![],
        converged_at: BTreeMap::new(),
        last_change: BTreeMap::new(),
        interval,
    };
    let mut steps: Vec<usize> = (0..script.len()).collect();
    steps.sort_by_key(|&i| (script[i].tick, i));
    for i in steps {
        sim.schedule(script[i].tick, Event::Script(i));
    }
    if interval <= config.max_ticks {
        for node in 0..n {
            sim.schedule(interval, Event::Gossip(node));
        }
    }
    while let Some(Scheduled { tick, event, .. }) = sim.queue.pop() {
        if tick > config.max_ticks {
            break;
        }
        match event {
            Event::Script(i) => sim.run_script(tick, i),
            Event::Gossip(node) => sim.gossip(tick, node),
            Event::Deliver { from, to, msg } => sim.deliver(tick, from, to, msg),
        }
    }
    let final_heads = sim
        .nodes
        .iter()
        .map(|m| {
            m.iter()
                .map(|(id, s)| (*id, NodeHead { forked: s.is_forked(), head_hash: s.head_hash(), head_seq: s.head_seq() }))
                .collect()
        })
        .collect();
    Ok(SimResult {
        trace: sim.trace,
        final_heads,
        converged_at: sim.converged_at,
        last_change: sim.last_change,
        gossip_interval: interval,
        final_states: sim.nodes,
    })
}
