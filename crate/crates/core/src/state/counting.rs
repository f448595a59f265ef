use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use super::global::{GlobalTier, LockMode, LockToken};
use super::is_system_key;
use crate::error::Result;

/// Byte counters split by direction and by key class.
#[derive(Default, Debug)]
pub struct Traffic {
    state_in: AtomicU64,
    state_out: AtomicU64,
    system_in: AtomicU64,
    system_out: AtomicU64,
    reads: AtomicU64,
    writes: AtomicU64,
}

/// `in` is global tier to node, `out` is node to global tier.
#[derive(Default, Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrafficSnapshot {
    pub state_in: u64,
    pub state_out: u64,
    pub system_in: u64,
    pub system_out: u64,
    pub reads: u64,
    pub writes: u64,
}

impl TrafficSnapshot {
    pub fn state_total(&self) -> u64 {
        self.state_in + self.state_out
    }

    pub fn total(&self) -> u64 {
        self.state_total() + self.system_in + self.system_out
    }

    pub fn since(&self, earlier: &TrafficSnapshot) -> TrafficSnapshot {
        TrafficSnapshot {
            state_in: self.state_in - earlier.state_in,
            state_out: self.state_out - earlier.state_out,
            system_in: self.system_in - earlier.system_in,
            system_out: self.system_out - earlier.system_out,
            reads: self.reads - earlier.reads,
            writes: self.writes - earlier.writes,
        }
    }
}

impl Traffic {
    fn record_in(&self, key: &str, n: usize) {
        let c = if is_system_key(key) {
            &self.system_in
        } else {
            &self.state_in
        };
        c.fetch_add(n as u64, Ordering::Relaxed);
        self.reads.fetch_add(1, Ordering::Relaxed);
    }

    fn record_out(&self, key: &str, n: usize) {
        let c = if is_system_key(key) {
            &self.system_out
        } else {
            &self.state_out
        };
        c.fetch_add(n as u64, Ordering::Relaxed);
        self.writes.fetch_add(1, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> TrafficSnapshot {
        TrafficSnapshot {
            state_in: self.state_in.load(Ordering::Relaxed),
            state_out: self.state_out.load(Ordering::Relaxed),
            system_in: self.system_in.load(Ordering::Relaxed),
            system_out: self.system_out.load(Ordering::Relaxed),
            reads: self.reads.load(Ordering::Relaxed),
            writes: self.writes.load(Ordering::Relaxed),
        }
    }
}

/// Wraps a global tier and counts the value bytes each operation moves.
///
/// Appended segments count with their 4-byte length prefix, matching their
/// size on the wire.
pub struct CountingGlobalTier {
    inner: Arc<dyn GlobalTier>,
    traffic: Arc<Traffic>,
}

impl CountingGlobalTier {
    pub fn new(inner: Arc<dyn GlobalTier>) -> Self {
        CountingGlobalTier {
            inner,
            traffic: Arc::new(Traffic::default()),
        }
    }

    pub fn traffic(&self) -> Arc<Traffic> {
        self.traffic.clone()
    }

    pub fn stats(&self) -> TrafficSnapshot {
        self.traffic.snapshot()
    }
}

impl GlobalTier for CountingGlobalTier {
    fn read(&self, key: &str, off: u64, len: u64) -> Result<Vec<u8>> {
        let v = self.inner.read(key, off, len)?;
        self.traffic.record_in(key, v.len());
        Ok(v)
    }

    fn write(&self, key: &str, off: u64, data: &[u8]) -> Result<()> {
        self.inner.write(key, off, data)?;
        self.traffic.record_out(key, data.len());
        Ok(())
    }

    fn put(&self, key: &str, data: &[u8]) -> Result<()> {
        self.inner.put(key, data)?;
        self.traffic.record_out(key, data.len());
        Ok(())
    }

    fn delete(&self, key: &str) -> Result<()> {
        self.inner.delete(key)
    }

    fn append(&self, key: &str, data: &[u8]) -> Result<()> {
        self.inner.append(key, data)?;
        self.traffic.record_out(key, data.len());
        Ok(())
    }

    fn read_appended(&self, key: &str) -> Result<Vec<Vec<u8>>> {
        let segs = self.inner.read_appended(key)?;
        self.traffic.record_in(key, segs.iter().map(|s| s.len() + 4).sum());
        Ok(segs)
    }

    fn size(&self, key: &str) -> Result<Option<u64>> {
        self.inner.size(key)
    }

    fn lock(&self, key: &str, mode: LockMode, lease: Duration, timeout: Duration) -> Result<LockToken> {
        self.inner.lock(key, mode, lease, timeout)
    }

    fn unlock(&self, key: &str, token: LockToken) -> Result<()> {
        self.inner.unlock(key, token)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state::InMemoryGlobalTier;

    #[test]
    fn counts_by_class_and_direction() {
        let g = CountingGlobalTier::new(Arc::new(InMemoryGlobalTier::new()));
        g.write("u/k", 0, &[0; 100]).unwrap();
        g.read("u/k", 10, 20).unwrap();
        g.put("__calls/1", b"abc").unwrap();
        g.append("u/log", b"xy").unwrap();
        g.read_appended("u/log").unwrap();
        let s = g.stats();
        assert_eq!(s.state_out, 102);
        assert_eq!(s.state_in, 20 + 6);
        assert_eq!(s.system_out, 3);
        assert_eq!(s.system_in, 0);
        assert!(g.read("u/k", 99, 5).is_err());
        assert_eq!(g.stats().state_in, 26);
    }
}
