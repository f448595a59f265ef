use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::host::{EgressLimit, NetPolicy};
use crate::scheduler::DEFAULT_CAPACITY;

pub const ENV_PREFIX: &str = "FAASLITE_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeerConfig {
    pub node_id: String,
    pub bus_addr: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NodeConfig {
    pub node_id: String,
    pub http_addr: String,
    pub bus_addr: String,
    /// Address of a global tier server; `None` keeps the tier in process.
    pub global_tier: Option<String>,
    pub object_store: PathBuf,
    /// Concurrent Faaslets per function.
    pub capacity: usize,
    pub memory_limit_pages: usize,
    pub chunk_size: usize,
    pub egress: EgressLimit,
    pub net: NetPolicy,
    pub lock_lease_ms: u64,
    pub lock_timeout_ms: u64,
    pub warm_ttl_ms: u64,
    pub heartbeat_ms: u64,
    pub invoke_timeout_ms: u64,
    pub result_ttl_ms: u64,
    pub sharing_queue: usize,
    /// Gives every call a private tier with one chunk per value, so each
    /// state access moves the whole value.
    pub data_shipping: bool,
    pub peers: Vec<PeerConfig>,
}

impl Default for NodeConfig {
    fn default() -> Self {
        NodeConfig {
            node_id: "node-0".into(),
            http_addr: "127.0.0.1:0".into(),
            bus_addr: "127.0.0.1:0".into(),
            global_tier: None,
            object_store: std::env::temp_dir().join("faaslite-objects"),
            capacity: DEFAULT_CAPACITY,
            memory_limit_pages: 16384,
            chunk_size: crate::state::DEFAULT_CHUNK_SIZE,
            egress: EgressLimit::default(),
            net: NetPolicy::default(),
            lock_lease_ms: 2_000,
            lock_timeout_ms: 10_000,
            warm_ttl_ms: 30_000,
            heartbeat_ms: 1_000,
            invoke_timeout_ms: 30_000,
            result_ttl_ms: 300_000,
            sharing_queue: 1024,
            data_shipping: false,
            peers: Vec::new(),
        }
    }
}

fn ms(v: u64) -> Duration {
    Duration::from_millis(v)
}

impl NodeConfig {
    pub fn warm_ttl(&self) -> Duration {
        ms(self.warm_ttl_ms)
    }

    pub fn heartbeat(&self) -> Duration {
        ms(self.heartbeat_ms)
    }

    pub fn invoke_timeout(&self) -> Duration {
        ms(self.invoke_timeout_ms)
    }

    pub fn result_ttl(&self) -> Duration {
        ms(self.result_ttl_ms)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_table(
            text.parse().map_err(|e| Error::Invalid(format!("config: {e}")))?,
            std::iter::empty(),
        )
    }

    /// Reads a TOML file (if given) and applies `FAASLITE_*` overrides.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let table = match path {
            Some(p) => std::fs::read_to_string(p)?
                .parse()
                .map_err(|e| Error::Invalid(format!("{}: {e}", p.display())))?,
            None => toml::Table::new(),
        };
        Self::from_table(table, std::env::vars())
    }

    /// Overrides are top-level keys: `FAASLITE_HEARTBEAT_MS=500` sets
    /// `heartbeat_ms`. Values parse as TOML, falling back to a string.
    pub fn from_table(mut table: toml::Table, env: impl Iterator<Item = (String, String)>) -> Result<Self> {
        for (k, v) in env {
            let Some(field) = k.strip_prefix(ENV_PREFIX) else {
                continue;
            };
            let parsed = format!("x = {v}")
                .parse::<toml::Table>()
                .ok()
                .and_then(|mut t| t.remove("x"))
                .unwrap_or(toml::Value::String(v));
            table.insert(field.to_ascii_lowercase(), parsed);
        }
        toml::Value::Table(table)
            .try_into()
            .map_err(|e| Error::Invalid(format!("config: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_file_values() {
        let c = NodeConfig::from_toml("node_id = \"a\"\ncapacity = 3\n[[peers]]\nnode_id = \"b\"\nbus_addr = \"x:1\"")
            .unwrap();
        assert_eq!(c.node_id, "a");
        assert_eq!(c.capacity, 3);
        assert_eq!(c.heartbeat(), Duration::from_secs(1));
        assert_eq!(c.warm_ttl(), Duration::from_secs(30));
        assert_eq!(c.sharing_queue, 1024);
        assert_eq!(c.peers[0].node_id, "b");
    }

    #[test]
    fn env_overrides() {
        let env = vec![
            ("FAASLITE_CAPACITY".to_string(), "7".to_string()),
            ("FAASLITE_NODE_ID".to_string(), "n9".to_string()),
            ("FAASLITE_DATA_SHIPPING".to_string(), "true".to_string()),
            ("OTHER".to_string(), "1".to_string()),
        ];
        let c = NodeConfig::from_table(toml::Table::new(), env.into_iter()).unwrap();
        assert_eq!((c.capacity, c.node_id.as_str(), c.data_shipping), (7, "n9", true));
    }

    #[test]
    fn bad_values_are_rejected() {
        assert!(NodeConfig::from_toml("capacity = \"many\"").is_err());
    }
}
