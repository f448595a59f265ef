//! A small stateful serverless runtime.
//!
//! Functions are WebAssembly modules run in Faaslets: sandboxes whose linear
//! memory can map shared state regions directly. State lives in a two-tier
//! store, Faaslets start from snapshots taken after initialisation, and a
//! per-node scheduler places calls on nodes that already hold warm instances.

pub mod error;
pub mod host;
pub mod node;
pub mod sandbox;
pub mod scheduler;
pub mod shm;
pub mod snapshot;
pub mod state;

pub use error::{Error, Result};
