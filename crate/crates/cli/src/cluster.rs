//! Localhost clusters of node processes sharing one global tier process.

use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use faaslite_core::node::{NodeConfig, PeerConfig};

use crate::client::Client;

const STARTUP: Duration = Duration::from_secs(20);

/// Addresses of one node process.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeAddrs {
    pub node_id: String,
    pub http: SocketAddr,
    pub bus: SocketAddr,
}

/// Child processes, killed on drop.
pub struct Cluster {
    pub global: SocketAddr,
    pub nodes: Vec<NodeAddrs>,
    children: Vec<Child>,
    dir: tempfile::TempDir,
}

/// A port that was free when probed.
fn free_addr() -> Result<SocketAddr> {
    Ok(TcpListener::bind("127.0.0.1:0")?.local_addr()?)
}

fn wait_for(what: &str, child: &mut Child, mut ready: impl FnMut() -> bool) -> Result<()> {
    let deadline = Instant::now() + STARTUP;
    while !ready() {
        if let Some(status) = child.try_wait()? {
            bail!("{what} exited during startup: {status}");
        }
        if Instant::now() > deadline {
            bail!("{what} did not start within {STARTUP:?}");
        }
        std::thread::sleep(Duration::from_millis(20));
    }
    Ok(())
}

impl Cluster {
    /// Starts a global tier and `n` nodes by re-running `exe`. `tweak`
    /// adjusts each node's configuration before it is written.
    pub fn up(exe: &Path, n: usize, tweak: impl Fn(&mut NodeConfig)) -> Result<Cluster> {
        if n == 0 {
            bail!("a cluster needs at least one node");
        }
        let dir = tempfile::tempdir()?;
        let mut cluster = Cluster {
            global: free_addr()?,
            nodes: Vec::new(),
            children: Vec::new(),
            dir,
        };
        let global = cluster.global;
        let mut child = Command::new(exe)
            .args(["global-tier", "serve", "--bind", &global.to_string()])
            .stdout(Stdio::null())
            .spawn()
            .with_context(|| format!("spawning {}", exe.display()))?;
        let res = wait_for("global tier", &mut child, || TcpStream::connect(global).is_ok());
        cluster.children.push(child);
        res?;

        let nodes: Vec<NodeAddrs> = (0..n)
            .map(|i| {
                Ok(NodeAddrs {
                    node_id: format!("node-{i}"),
                    http: free_addr()?,
                    bus: free_addr()?,
                })
            })
            .collect::<Result<_>>()?;
        let store = cluster.dir.path().join("objects");
        for me in &nodes {
            let mut cfg = NodeConfig {
                node_id: me.node_id.clone(),
                http_addr: me.http.to_string(),
                bus_addr: me.bus.to_string(),
                global_tier: Some(global.to_string()),
                object_store: store.clone(),
                peers: nodes
                    .iter()
                    .filter(|p| p.node_id != me.node_id)
                    .map(|p| PeerConfig {
                        node_id: p.node_id.clone(),
                        bus_addr: p.bus.to_string(),
                    })
                    .collect(),
                ..NodeConfig::default()
            };
            tweak(&mut cfg);
            let path = cluster.config_path(&me.node_id);
            std::fs::write(&path, toml::to_string(&cfg)?)?;
            let mut child = Command::new(exe)
                .args(["node", "serve", "--config"])
                .arg(&path)
                .stdout(Stdio::null())
                .spawn()
                .with_context(|| format!("spawning {}", exe.display()))?;
            let client = Client::with_timeout(&me.http.to_string(), Duration::from_secs(1));
            let res = wait_for(&me.node_id, &mut child, || client.health());
            cluster.children.push(child);
            res?;
        }
        cluster.nodes = nodes;
        Ok(cluster)
    }

    pub fn config_path(&self, node_id: &str) -> PathBuf {
        self.dir.path().join(format!("{node_id}.toml"))
    }

    pub fn urls(&self) -> Vec<String> {
        self.nodes.iter().map(|n| format!("http://{}", n.http)).collect()
    }

    /// Child processes still running.
    pub fn running(&mut self) -> usize {
        self.children
            .iter_mut()
            .filter_map(|c| c.try_wait().ok())
            .filter(Option::is_none)
            .count()
    }

    /// Kills every process and waits for them to exit.
    pub fn down(&mut self) {
        for c in self.children.iter_mut().rev() {
            let _ = c.kill();
        }
        for c in self.children.iter_mut() {
            let _ = c.wait();
        }
        self.children.clear();
    }
}

impl Drop for Cluster {
    fn drop(&mut self) {
        self.down();
    }
}
