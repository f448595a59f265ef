//! Shared definitions for the distributed logistic-regression SGD guests.
//!
//! The training set is stored as two read-only matrices: a sparse
//! features-by-examples matrix (one column per example) and a dense
//! 1-by-examples label matrix. Workers update one shared weights vector.

use crate::codec::{Reader, Writer};

pub const FEATURES_KEY: &str = "training_a";
pub const LABELS_KEY: &str = "training_b";
pub const WEIGHTS_KEY: &str = "weights";
pub const UPDATE_FN: &str = "weight_update";
pub const DEFAULT_PUSH_EVERY: u32 = 10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdArgs {
    pub n_workers: u32,
    pub n_epochs: u32,
    pub n_examples: u32,
    pub push_every: u32,
    pub learning_rate: f64,
}

impl SgdArgs {
    pub fn encode(&self) -> Vec<u8> {
        Writer::new()
            .u32(self.n_workers)
            .u32(self.n_epochs)
            .u32(self.n_examples)
            .u32(self.push_every)
            .f64(self.learning_rate)
            .finish()
    }

    pub fn decode(buf: &[u8]) -> Option<Self> {
        let mut r = Reader::new(buf);
        Some(SgdArgs {
            n_workers: r.u32()?,
            n_epochs: r.u32()?,
            n_examples: r.u32()?,
            push_every: r.u32()?,
            learning_rate: r.f64()?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateArgs {
    pub col_start: u32,
    pub col_end: u32,
    pub push_every: u32,
    pub learning_rate: f64,
}

impl UpdateArgs {
    pub fn encode(&self) -> Vec<u8> {
        Writer::new()
            .u32(self.col_start)
            .u32(self.col_end)
            .u32(self.push_every)
            .f64(self.learning_rate)
            .finish()
    }

    pub fn decode(buf: &[u8]) -> Option<Self> {
        let mut r = Reader::new(buf);
        Some(UpdateArgs {
            col_start: r.u32()?,
            col_end: r.u32()?,
            push_every: r.u32()?,
            learning_rate: r.f64()?,
        })
    }
}

/// Splits `[0, n)` into `workers` contiguous ranges whose sizes differ by at
/// most one.
pub fn divide_problem(n: u32, workers: u32) -> Vec<(u32, u32)> {
    let workers = workers.max(1);
    let base = n / workers;
    let extra = n % workers;
    let mut out = Vec::with_capacity(workers as usize);
    let mut start = 0;
    for w in 0..workers {
        let len = base + u32::from(w < extra);
        out.push((start, start + len));
        start += len;
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-x))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_covers_range() {
        for n in [0u32, 1, 7, 1000] {
            for w in 1u32..9 {
                let parts = divide_problem(n, w);
                assert_eq!(parts.len(), w as usize);
                assert_eq!(parts[0].0, 0);
                assert_eq!(parts.last().unwrap().1, n);
                for pair in parts.windows(2) {
                    assert_eq!(pair[0].1, pair[1].0);
                }
                let sizes: Vec<u32> = parts.iter().map(|(a, b)| b - a).collect();
                assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            }
        }
    }

    #[test]
    fn args_round_trip() {
        let a = SgdArgs {
            n_workers: 4,
            n_epochs: 5,
            n_examples: 1000,
            push_every: 10,
            learning_rate: 0.25,
        };
        assert_eq!(SgdArgs::decode(&a.encode()), Some(a));
        let u = UpdateArgs {
            col_start: 3,
            col_end: 9,
            push_every: 1,
            learning_rate: 0.5,
        };
        assert_eq!(UpdateArgs::decode(&u.encode()), Some(u));
        assert_eq!(UpdateArgs::decode(&[1, 2]), None);
    }

    #[test]
    fn sigmoid_basics() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(40.0) > 0.999_999);
        assert!(sigmoid(-40.0) < 1e-6);
    }
}
