//! Run the HTTP daemon on an ephemeral port and talk to it.

use plurinet::daemon;
use plurinet::node::{Node, NodeConfig};
use plurinet::{Keypair, PayloadKind, StreamKind};

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let mut node = Node::open(NodeConfig::with_data_dir(dir.path())).unwrap();
    let author = Keypair::generate(Some(&[4; 32])).unwrap();
    let wall = node.create_stream_at(&author, "wall", StreamKind::Content, &[], None, 100).unwrap();
    node.append_at(&author, &wall, PayloadKind::Post, b"served over http", None, 101).unwrap();

    let server = daemon::spawn(node, "127.0.0.1:0").unwrap();
    println!("listening on {}", server.url());
    for path in ["/health".to_string(), format!("/sync/head/{wall}"), format!("/streams/{wall}/entries")] {
        let mut reply = ureq::get(&format!("{}{path}", server.url())).call().unwrap();
        println!("GET {path} -> {}", reply.body_mut().read_to_string().unwrap());
    }
    server.stop();
}
