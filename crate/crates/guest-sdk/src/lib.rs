//! Guest-side SDK for faaslite functions.
//!
//! Functions are compiled to `wasm32` and link against the `faasm` and
//! `wasi_snapshot_preview1` host namespaces. On the wasm target this crate
//! exposes typed wrappers over those imports ([`call`], [`state`], [`fs`],
//! [`net`], [`mem`], [`time`]) and the distributed data objects in [`ddo`].
//!
//! The [`layout`] and [`codec`] modules are target independent: the host-side
//! harness uses them to seed the global tier with matrices and vectors in the
//! exact format the guest DDOs read.

pub mod codec;
pub mod errno;
pub mod layout;
pub mod sgd;

#[cfg(target_arch = "wasm32")]
pub mod abi;
#[cfg(target_arch = "wasm32")]
pub mod call;
#[cfg(target_arch = "wasm32")]
pub mod ddo;
#[cfg(target_arch = "wasm32")]
pub mod fs;
#[cfg(target_arch = "wasm32")]
pub mod mem;
#[cfg(target_arch = "wasm32")]
pub mod net;
#[cfg(target_arch = "wasm32")]
pub mod state;
#[cfg(target_arch = "wasm32")]
pub mod time;

pub use errno::Errno;

/// Flags accepted by `get_state` / `get_state_offset`.
pub mod flags {
    /// Create a zero-filled local value when the key is absent everywhere.
    pub const CREATE_EMPTY: i32 = 1;
    /// Map the replica without pulling missing chunks.
    pub const NO_PULL: i32 = 2;
}
