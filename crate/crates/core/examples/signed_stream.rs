//! Create a signed stream, append to it, verify it, then tamper with one entry.

use plurinet::stream::verify_stream;
use plurinet::{Keypair, PayloadKind, StreamKind, StreamState};

fn main() {
    let alice = Keypair::generate(Some(&[7; 32])).expect("seeded key");
    let mut wall = StreamState::create_with(&alice, "wall", StreamKind::Content, &[], None, 1_000).unwrap();
    for i in 1..=5u64 {
        let text = format!("hello #{i}");
        wall.push(&alice, PayloadKind::Post, text.as_bytes(), None, 1_000 + i).unwrap();
    }
    println!("stream {} owned by {}", wall.stream_id(), alice.principal().id());

    let report = verify_stream(wall.genesis(), wall.entries());
    println!("intact: {report}");

    let mut forged = wall.entries().to_vec();
    forged[2].timestamp += 60;
    let report = verify_stream(wall.genesis(), &forged);
    println!("tampered: ok={} first_bad_seq={:?}", report.ok, report.first_bad_seq);
}
