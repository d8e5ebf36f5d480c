//! Pluralist discourse node: signed content streams, content-addressed
//! storage, user-published moderation streams and feed aggregation.

pub mod aggregator;
pub mod canonical;
pub mod cli;
pub mod daemon;
pub mod hash;
pub mod identity;
pub mod migration;
pub mod moderation;
pub mod node;
pub mod sim;
pub mod storage;
pub mod sync;
pub mod stream;

pub use hash::Hash;
pub use identity::{Keypair, Principal, PrincipalId, Signature};
pub use stream::{ContentEntry, EntryRef, GenesisRecord, PayloadKind, StreamId, StreamKind, StreamState};
