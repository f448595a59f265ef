//! Two-tier state: per-node replicas backed by an authoritative global tier.
//!
//! Values are split into fixed-size chunks that replicate independently, so
//! reading a range only transfers the chunks that cover it. Keys whose name
//! starts with `__` belong to the runtime itself (snapshots, warm sets, call
//! results) and are accounted separately from user state.

mod counting;
mod global;
mod local;
mod remote;
mod value;
pub mod wire;

use std::fmt;

pub use counting::{CountingGlobalTier, Traffic, TrafficSnapshot};
pub use global::{GlobalTier, InMemoryGlobalTier, LockMode, LockToken};
pub use local::{LocalTier, LocalTierConfig};
pub use remote::{GlobalTierServer, RemoteGlobalTier, WireStats};
pub use value::{Held, StateValue};

use crate::error::{Error, Result};

pub use faaslite_guest::flags::{CREATE_EMPTY, NO_PULL};
pub use faaslite_guest::layout::DEFAULT_CHUNK_SIZE;

/// A user-scoped state key.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StateKey {
    pub user: String,
    pub key: String,
}

impl StateKey {
    pub fn new(user: &str, key: &str) -> Result<Self> {
        if user.is_empty() || key.is_empty() {
            return Err(Error::Invalid("state keys and users must be non-empty".into()));
        }
        if user.contains('/') || user.starts_with("__") {
            return Err(Error::Invalid(format!("bad user name {user:?}")));
        }
        Ok(StateKey {
            user: user.to_string(),
            key: key.to_string(),
        })
    }

    /// The key under which the value is stored in the global tier.
    pub fn global(&self) -> String {
        format!("{}/{}", self.user, self.key)
    }
}

impl fmt::Display for StateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.user, self.key)
    }
}

/// Whether a global-tier key belongs to the runtime rather than a user.
pub fn is_system_key(key: &str) -> bool {
    key.starts_with("__")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keys_are_namespaced_per_user() {
        let a = StateKey::new("alice", "w").unwrap();
        let b = StateKey::new("bob", "w").unwrap();
        assert_ne!(a.global(), b.global());
        assert!(StateKey::new("", "w").is_err());
        assert!(StateKey::new("a", "").is_err());
        assert!(StateKey::new("__sched", "x").is_err());
        assert!(StateKey::new("a/b", "x").is_err());
        assert!(!is_system_key(&a.global()));
        assert!(is_system_key("__calls/1"));
    }
}
