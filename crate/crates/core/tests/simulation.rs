use plurinet::sim::{run_simulation, sim_stream_id, topology, Partition, ScriptStep, SimAction, SimNetConfig, TraceKind};
use plurinet::StreamKind;

fn create(tick: u64, node: usize, author: u32, name: &str) -> ScriptStep {
    ScriptStep { action: SimAction::CreateStream { author, name: name.into(), stream_kind: StreamKind::Content }, node, tick }
}

fn append(tick: u64, node: usize, author: u32, name: &str, text: &str) -> ScriptStep {
    ScriptStep { action: SimAction::Append { author, name: name.into(), text: text.into() }, node, tick }
}

/// Five streams created on different nodes, each with a burst of appends.
fn five_stream_script(n: usize) -> Vec<ScriptStep> {
    let mut script = vec![];
    for s in 0..5u32 {
        let node = (s as usize * 3) % n;
        script.push(create(0, node, s, "wall"));
        for i in 0..8u64 {
            script.push(append(1 + i * 2, node, s, "wall", &format!("s{s} post {i}")));
        }
    }
    script
}

fn assert_converges_within_bound(adj: Vec<Vec<usize>>, seed: u64) {
    let diameter = topology::diameter(&adj).unwrap() as u64;
    let n = adj.len();
    let config = SimNetConfig::new(adj, 2, 0.01, seed, 2_000);
    let script = five_stream_script(n);
    let result = run_simulation(&config, &script).unwrap();
    for s in 0..5u32 {
        let id = sim_stream_id(s, "wall");
        let rounds = result.rounds_to_converge(&id).unwrap_or_else(|| panic!("stream {s} never converged"));
        assert!(rounds <= 3 * diameter, "stream {s}: {rounds} rounds > 3 x {diameter}");
        let heads: Vec<_> = result.final_heads.iter().map(|h| h[&id].head_hash).collect();
        assert!(heads.windows(2).all(|w| w[0] == w[1]));
        assert!(result.final_heads.iter().all(|h| h[&id].head_seq == 8));
    }
    let again = run_simulation(&config, &script).unwrap();
    assert_eq!(result.trace_bytes(), again.trace_bytes());
}

#[test]
fn ring_of_ten_converges_with_loss() {
    assert_converges_within_bound(topology::ring(10), 42);
}

#[test]
fn random_graphs_converge_with_loss() {
    for seed in 0..5 {
        assert_converges_within_bound(topology::random_connected(10, 5, seed), 100 + seed);
    }
}

#[test]
fn ring_single_source_within_diameter_rounds_without_loss() {
    let config = SimNetConfig::new(topology::ring(10), 2, 0.0, 7, 500);
    let result = run_simulation(&config, &[create(0, 0, 1, "s"), append(0, 0, 1, "s", "x")]).unwrap();
    let rounds = result.rounds_to_converge(&sim_stream_id(1, "s")).unwrap();
    assert!(rounds <= 10, "{rounds}");
}

#[test]
fn different_seeds_change_the_trace() {
    let script = five_stream_script(10);
    let a = run_simulation(&SimNetConfig::new(topology::ring(10), 2, 0.05, 1, 600), &script).unwrap();
    let b = run_simulation(&SimNetConfig::new(topology::ring(10), 2, 0.05, 2, 600), &script).unwrap();
    assert_ne!(a.trace_bytes(), b.trace_bytes());
}

#[test]
fn partition_then_heal() {
    // 0-1-2-3 line cut in the middle until tick 50
    let adj = vec![vec![1], vec![0, 2], vec![1, 3], vec![2]];
    let mut config = SimNetConfig::new(adj, 1, 0.0, 3, 200);
    config.partitions.push(Partition { cut: vec![[1, 2]], from_tick: 0, to_tick: 50 });
    let mut script = vec![create(0, 0, 1, "s")];
    for i in 0..5 {
        script.push(append(10 + i, 0, 1, "s", &format!("{i}")));
    }
    let result = run_simulation(&config, &script).unwrap();
    let id = sim_stream_id(1, "s");

    let during = result.heads_at(49);
    assert_eq!(during[0].get(&id), during[1].get(&id));
    assert!(during[3].get(&id).is_none());
    assert!(result.trace.iter().any(|e| e.event == TraceKind::Drop && e.detail.as_deref() == Some("PARTITION")));

    let end = result.heads_at(200);
    assert!(end.iter().all(|h| h.get(&id) == end[0].get(&id)));
    assert!(result.converged_at[&id].unwrap() >= 50);
}

#[test]
fn equivocation_is_flagged_everywhere() {
    let config = SimNetConfig::new(topology::ring(6), 1, 0.0, 5, 300);
    let mut script = vec![create(0, 0, 1, "s")];
    for i in 0..7 {
        script.push(append(1 + i, 0, 1, "s", &format!("{i}")));
    }
    // the owner signs two different seq-8 entries on opposite sides of the ring
    script.push(append(60, 0, 1, "s", "left"));
    script.push(append(60, 3, 1, "s", "right"));
    let result = run_simulation(&config, &script).unwrap();
    let id = sim_stream_id(1, "s");
    assert!(result.final_heads.iter().all(|h| h[&id].forked), "{:?}", result.final_heads);
    let evidence: Vec<_> = result.final_states.iter().map(|m| m[&id].fork_evidence().cloned()).collect();
    assert!(evidence.windows(2).all(|w| w[0] == w[1]));
    assert!(result.count(TraceKind::Fork) >= 5);
}
