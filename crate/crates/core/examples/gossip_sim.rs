//! Deterministic gossip over a ten-node ring with a little message loss.

use plurinet::sim::{run_simulation, sim_stream_id, topology, ScriptStep, SimAction, SimNetConfig};
use plurinet::StreamKind;

fn main() {
    let adj = topology::ring(10);
    let diameter = topology::diameter(&adj).unwrap();
    let config = SimNetConfig::new(adj, 2, 0.01, 42, 2_000);
    let mut script = vec![ScriptStep {
        action: SimAction::CreateStream { author: 0, name: "wall".into(), stream_kind: StreamKind::Content },
        node: 0,
        tick: 0,
    }];
    for i in 0..5u64 {
        let action = SimAction::Append { author: 0, name: "wall".into(), text: format!("post {i}") };
        script.push(ScriptStep { action, node: 0, tick: 1 + i });
    }
    let result = run_simulation(&config, &script).unwrap();
    let id = sim_stream_id(0, "wall");
    match result.rounds_to_converge(&id) {
        Some(r) => println!("converged in {r} rounds (diameter {diameter})"),
        None => println!("did not converge"),
    }
    let again = run_simulation(&config, &script).unwrap();
    println!("replay identical: {}", again.trace_bytes() == result.trace_bytes());
}
