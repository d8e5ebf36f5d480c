//! Content-addressed blobs, signed storage hints and refusal.

use std::sync::Arc;

use plurinet::storage::{self, BlobStore, MemoryStore, RefusalTarget, StorageHint, StoreSet};
use plurinet::{Hash, Keypair};

fn main() {
    let publisher = Keypair::generate(Some(&[1; 32])).unwrap();
    let primary = Arc::new(MemoryStore::new("primary"));
    let mirror = Arc::new(MemoryStore::new("mirror"));

    let bytes = b"a picture of a cat".to_vec();
    let hash = primary.put(&bytes).unwrap();
    assert_eq!(hash, Hash::of(&bytes));
    storage::replicate(&hash, primary.as_ref(), mirror.as_ref()).unwrap();
    println!("stored {hash} in primary and mirror");

    let hints = vec![
        StorageHint::issue(&publisher, hash, "mem://primary", 10),
        StorageHint::issue(&publisher, hash, "mem://mirror", 11),
    ];
    println!("hints verify: {}", hints.iter().all(|h| h.verify()));

    primary.refuse(RefusalTarget::Hash(hash)).unwrap();
    let set = StoreSet::new(vec![primary.clone() as Arc<dyn BlobStore>, mirror.clone()]);
    let blob = storage::resolve(&hash, &hints, &set).expect("mirror still serves it");
    println!("primary refused it; resolved {} bytes through the mirror", blob.bytes.len());
}
