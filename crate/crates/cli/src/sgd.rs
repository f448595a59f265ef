//! Synthetic logistic-regression data, a serial reference trainer and the
//! harness that runs the SGD guests on a node.

use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use faaslite_core::node::{Node, NodeConfig};
use faaslite_core::state::{GlobalTier, GlobalTierServer, InMemoryGlobalTier, RemoteGlobalTier};
use faaslite_guest::codec::{bytes_to_f64s, f64s_to_bytes};
use faaslite_guest::layout::{self, DenseLayout, SparseLayout, DEFAULT_CHUNK_SIZE};
use faaslite_guest::sgd::{sigmoid, SgdArgs, FEATURES_KEY, LABELS_KEY, UPDATE_FN, WEIGHTS_KEY};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::client::Client;

pub const USER: &str = "sgd";
pub const MAIN_FN: &str = "sgd_main";

/// A sparse, linearly separable training set.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: usize,
    /// One column of `(feature, value)` pairs per example, rows ascending.
    pub columns: Vec<Vec<(u32, f64)>>,
    /// 0 or 1 per example.
    pub labels: Vec<f64>,
}

impl Dataset {
    /// Labels come from a hidden `±1` weight vector, so the data are
    /// separable by construction.
    pub fn generate(seed: u64, features: usize, examples: usize, nnz: usize) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hidden: Vec<f64> = (0..features)
            .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
            .collect();
        let nnz = nnz.min(features).max(1);
        let mut columns = Vec::with_capacity(examples);
        let mut labels = Vec::with_capacity(examples);
        for _ in 0..examples {
            let mut rows: Vec<usize> = sample(&mut rng, features, nnz).into_vec();
            rows.sort_unstable();
            let col: Vec<(u32, f64)> = rows
                .into_iter()
                .map(|r| (r as u32, rng.random_range(0.1..1.0)))
                .collect();
            let score: f64 = col.iter().map(|&(r, v)| hidden[r as usize] * v).sum();
            labels.push(if score > 0.0 { 1.0 } else { 0.0 });
            columns.push(col);
        }
        Dataset {
            features,
            columns,
            labels,
        }
    }

    pub fn examples(&self) -> usize {
        self.columns.len()
    }

    /// Mean logistic loss of `weights`.
    pub fn loss(&self, weights: &[f64]) -> f64 {
        const EPS: f64 = 1e-12;
        let total: f64 = self
            .columns
            .iter()
            .zip(&self.labels)
            .map(|(col, &y)| {
                let p = sigmoid(col.iter().map(|&(r, v)| weights[r as usize] * v).sum());
                -(y * p.max(EPS).ln() + (1.0 - y) * (1.0 - p).max(EPS).ln())
            })
            .sum();
        total / self.examples().max(1) as f64
    }

    /// Fraction of examples classified correctly.
    pub fn accuracy(&self, weights: &[f64]) -> f64 {
        let right = self
            .columns
            .iter()
            .zip(&self.labels)
            .filter(|(col, &y)| {
                let dot: f64 = col.iter().map(|&(r, v)| weights[r as usize] * v).sum();
                (dot > 0.0) == (y > 0.5)
            })
            .count();
        right as f64 / self.examples().max(1) as f64
    }

    /// Writes the training set and zeroed weights under `user`'s keys.
    pub fn seed(&self, global: &dyn GlobalTier, user: &str, chunk_size: usize) -> Result<()> {
        let key = |k: &str| format!("{user}/{k}");
        let sparse = SparseLayout::encode(self.features, &self.columns, chunk_size);
        global.put(&key(&layout::meta_key(FEATURES_KEY)), &sparse.meta)?;
        global.put(&key(&layout::colptr_key(FEATURES_KEY)), &sparse.colptr)?;
        global.put(&key(&layout::entries_key(FEATURES_KEY)), &sparse.entries)?;
        let label_cols: Vec<Vec<f64>> = self.labels.iter().map(|&y| vec![y]).collect();
        let (dense, bytes) = DenseLayout::encode(&label_cols);
        global.put(&key(&layout::meta_key(LABELS_KEY)), &dense.encode_meta())?;
        global.put(&key(LABELS_KEY), &bytes)?;
        global.put(&key(WEIGHTS_KEY), &f64s_to_bytes(&vec![0.0; self.features]))?;
        Ok(())
    }
}

/// Single-threaded SGD with the guest's update rule and summation order.
pub fn serial_reference(ds: &Dataset, epochs: u32, learning_rate: f64) -> Vec<f64> {
    let mut w = vec![0.0; ds.features];
    for _ in 0..epochs {
        for (col, &label) in ds.columns.iter().zip(&ds.labels) {
            let dot: f64 = col.iter().map(|&(r, v)| w[r as usize] * v).sum();
            let adj = learning_rate * (label - sigmoid(dot));
            for &(r, v) in col {
                w[r as usize] += v * adj;
            }
        }
    }
    w
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    TwoTier,
    DataShipping,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::TwoTier => "two-tier",
            Mode::DataShipping => "data-shipping",
        }
    }

    pub fn parse(s: &str) -> Option<Mode> {
        match s {
            "two-tier" => Some(Mode::TwoTier),
            "data-shipping" => Some(Mode::DataShipping),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgdParams {
    pub seed: u64,
    pub features: usize,
    pub examples: usize,
    pub nnz: usize,
    pub workers: u32,
    pub epochs: u32,
    pub push_every: u32,
    pub learning_rate: f64,
    pub chunk_size: usize,
}

impl Default for SgdParams {
    fn default() -> Self {
        SgdParams {
            seed: 1,
            features: 512,
            examples: 4000,
            nnz: 16,
            workers: 4,
            epochs: 3,
            push_every: 10,
            learning_rate: 0.5,
            chunk_size: DEFAULT_CHUNK_SIZE,
        }
    }
}

/// Measurements of one SGD run. Byte counts cover the training call only,
/// not seeding or upload.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdRun {
    pub mode: Mode,
    pub wall: Duration,
    pub state_in: u64,
    pub state_out: u64,
    pub system_bytes: u64,
    /// Data payload bytes seen on the node's global-tier connection.
    pub wire_bytes: u64,
    pub billable_gb_s: f64,
    pub loss: f64,
    pub accuracy: f64,
    pub weights: Vec<f64>,
}

impl SgdRun {
    pub fn state_bytes(&self) -> u64 {
        self.state_in + self.state_out
    }

    /// Whether the counted bytes agree with the bytes on the wire.
    pub fn counters_match_wire(&self) -> bool {
        self.state_bytes() + self.system_bytes == self.wire_bytes
    }
}

/// Runs the SGD guests on one node backed by a global tier server, driving
/// the node over HTTP.
pub fn run(params: &SgdParams, ds: &Dataset, mode: Mode) -> Result<SgdRun> {
    let mut server = GlobalTierServer::bind("127.0.0.1:0", Arc::new(InMemoryGlobalTier::new()))?;
    let addr = server.local_addr();
    let seeder = RemoteGlobalTier::connect(addr)?;
    ds.seed(&seeder, USER, params.chunk_size)?;

    let store = tempfile::tempdir()?;
    let remote = Arc::new(RemoteGlobalTier::connect(addr)?);
    let wire = remote.stats();
    let cfg = NodeConfig {
        node_id: format!("sgd-{}", mode.name()),
        object_store: store.path().to_path_buf(),
        capacity: params.workers as usize + 2,
        chunk_size: params.chunk_size,
        data_shipping: mode == Mode::DataShipping,
        // Background traffic would blur the byte cross-check.
        heartbeat_ms: 600_000,
        invoke_timeout_ms: 600_000,
        ..NodeConfig::default()
    };
    let mut node = Node::start_with_global(cfg, remote)?;
    let client = Client::new(&node.http_addr().to_string());
    client.upload(USER, MAIN_FN, faaslite_fixtures::SGD_MAIN)?;
    client.upload(USER, UPDATE_FN, faaslite_fixtures::WEIGHT_UPDATE)?;

    let args = SgdArgs {
        n_workers: params.workers,
        n_epochs: params.epochs,
        n_examples: ds.examples() as u32,
        push_every: params.push_every,
        learning_rate: params.learning_rate,
    };
    let traffic0 = node.traffic().snapshot();
    let wire0 = wire.data_total();
    let billed0 = node.meter().gb_seconds();
    let t0 = Instant::now();
    let out = client.invoke(USER, MAIN_FN, &args.encode())?;
    let wall = t0.elapsed();
    if !out.ok() {
        bail!(
            "{MAIN_FN} failed: {} code {:?} {}",
            out.http_status,
            out.return_code,
            String::from_utf8_lossy(&out.body).trim()
        );
    }
    let traffic = node.traffic().snapshot().since(&traffic0);
    let wire_bytes = wire.data_total() - wire0;
    let billable_gb_s = node.meter().gb_seconds() - billed0;
    node.shutdown();
    let weights = bytes_to_f64s(
        &seeder
            .read_all(&format!("{USER}/{WEIGHTS_KEY}"))
            .context("reading trained weights")?,
    );
    server.shutdown();
    Ok(SgdRun {
        mode,
        wall,
        state_in: traffic.state_in,
        state_out: traffic.state_out,
        system_bytes: traffic.system_in + traffic.system_out,
        wire_bytes,
        billable_gb_s,
        loss: ds.loss(&weights),
        accuracy: ds.accuracy(&weights),
        weights,
    })
}

/// Loss of the all-zero starting weights.
pub const INITIAL_LOSS: f64 = std::f64::consts::LN_2;

/// A run converged when its loss is at most half the starting loss.
pub const CONVERGED_FRACTION: f64 = 0.5;

pub fn converged(loss: f64) -> bool {
    loss <= INITIAL_LOSS * CONVERGED_FRACTION
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_is_deterministic_and_well_formed() {
        let a = Dataset::generate(7, 50, 200, 5);
        assert_eq!(a, Dataset::generate(7, 50, 200, 5));
        assert_ne!(a, Dataset::generate(8, 50, 200, 5));
        for col in &a.columns {
            assert_eq!(col.len(), 5);
            assert!(col.windows(2).all(|p| p[0].0 < p[1].0));
            assert!(col.iter().all(|&(r, _)| (r as usize) < 50));
        }
        let ones = a.labels.iter().filter(|&&y| y == 1.0).count();
        // Classes follow a random hidden model, so only ask for both.
        assert!(ones > 20 && ones < 180, "{ones}");
    }

    #[test]
    fn reference_learns() {
        let ds = Dataset::generate(3, 100, 2000, 10);
        let zero = ds.loss(&vec![0.0; 100]);
        assert!((zero - INITIAL_LOSS).abs() < 1e-12);
        let w = serial_reference(&ds, 5, 0.5);
        assert!(converged(ds.loss(&w)), "{}", ds.loss(&w));
        assert!(ds.accuracy(&w) > 0.9);
    }

    #[test]
    fn modes_parse() {
        for m in [Mode::TwoTier, Mode::DataShipping] {
            assert_eq!(Mode::parse(m.name()), Some(m));
        }
        assert_eq!(Mode::parse("x"), None);
    }
}
