use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::Duration;

use super::NodeId;
use crate::error::{Error, Result};
use crate::sandbox::FunctionId;
use crate::state::{GlobalTier, LockMode};

const LEASE: Duration = Duration::from_secs(5);
const TIMEOUT: Duration = Duration::from_secs(5);

pub fn warm_key(id: &FunctionId) -> String {
    format!("__sched/{}/{}", id.user, id.name)
}

/// Warm sets stored as JSON arrays in the global tier. Updates are
/// read-modify-write under the key's global write lock.
pub struct WarmSets {
    global: Arc<dyn GlobalTier>,
}

impl WarmSets {
    pub fn new(global: Arc<dyn GlobalTier>) -> Self {
        WarmSets { global }
    }

    pub fn read(&self, id: &FunctionId) -> Result<BTreeSet<NodeId>> {
        let key = warm_key(id);
        match self.global.read_all(&key) {
            Ok(b) if b.is_empty() => Ok(BTreeSet::new()),
            Ok(b) => serde_json::from_slice(&b).map_err(|e| Error::Format(format!("{key}: {e}"))),
            Err(Error::NotFound(_)) => Ok(BTreeSet::new()),
            Err(e) => Err(e),
        }
    }

    fn update(&self, id: &FunctionId, f: impl FnOnce(&mut BTreeSet<NodeId>) -> bool) -> Result<BTreeSet<NodeId>> {
        let key = warm_key(id);
        let token = self.global.lock(&key, LockMode::Write, LEASE, TIMEOUT)?;
        let result = (|| {
            let mut set = self.read(id)?;
            if f(&mut set) {
                self.global
                    .put(&key, &serde_json::to_vec(&set).expect("set serialises"))?;
            }
            Ok(set)
        })();
        self.global.unlock(&key, token)?;
        result
    }

    pub fn add(&self, id: &FunctionId, node: &str) -> Result<BTreeSet<NodeId>> {
        self.update(id, |s| s.insert(node.to_string()))
    }

    pub fn remove(&self, id: &FunctionId, node: &str) -> Result<BTreeSet<NodeId>> {
        self.update(id, |s| s.remove(node))
    }
}
