use std::collections::{HashMap, HashSet};
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LockMode {
    Read,
    Write,
}

pub type LockToken = u64;

/// The authoritative store behind every node's local tier.
///
/// A key holds either a linear byte value or a list of appended segments;
/// using one kind of operation on the other kind of key is a mode error.
pub trait GlobalTier: Send + Sync {
    /// Reads `len` bytes at `off`. Fails with a range error past the end.
    fn read(&self, key: &str, off: u64, len: u64) -> Result<Vec<u8>>;
    /// Writes at `off`, zero-extending the value (or creating it) as needed.
    fn write(&self, key: &str, off: u64, data: &[u8]) -> Result<()>;
    /// Replaces the whole value.
    fn put(&self, key: &str, data: &[u8]) -> Result<()>;
    fn delete(&self, key: &str) -> Result<()>;
    fn append(&self, key: &str, data: &[u8]) -> Result<()>;
    fn read_appended(&self, key: &str) -> Result<Vec<Vec<u8>>>;
    /// Length of a linear value, `None` when absent.
    fn size(&self, key: &str) -> Result<Option<u64>>;
    /// Blocks up to `timeout` for the lock; the grant expires after `lease`.
    fn lock(&self, key: &str, mode: LockMode, lease: Duration, timeout: Duration) -> Result<LockToken>;
    fn unlock(&self, key: &str, token: LockToken) -> Result<()>;

    fn read_all(&self, key: &str) -> Result<Vec<u8>> {
        match self.size(key)? {
            Some(n) => self.read(key, 0, n),
            None => Err(Error::NotFound(key.to_string())),
        }
    }
}

enum Entry {
    Linear(Vec<u8>),
    Appended(Vec<Vec<u8>>),
}

#[derive(Default)]
struct LockEntry {
    writer: Option<(LockToken, Instant)>,
    readers: HashMap<LockToken, Instant>,
}

impl LockEntry {
    fn purge(&mut self, now: Instant, expired: &mut HashSet<LockToken>) {
        if let Some((t, exp)) = self.writer {
            if exp <= now {
                expired.insert(t);
                self.writer = None;
            }
        }
        self.readers.retain(|t, exp| {
            if *exp <= now {
                expired.insert(*t);
                false
            } else {
                true
            }
        });
    }

    fn next_expiry(&self) -> Option<Instant> {
        self.writer
            .map(|(_, e)| e)
            .into_iter()
            .chain(self.readers.values().copied())
            .min()
    }

    fn is_free(&self) -> bool {
        self.writer.is_none() && self.readers.is_empty()
    }
}

#[derive(Default)]
struct Inner {
    entries: HashMap<String, Entry>,
    locks: HashMap<String, LockEntry>,
    expired: HashSet<LockToken>,
    next_token: LockToken,
}

/// In-process global tier with the same semantics as the remote server.
#[derive(Default)]
pub struct InMemoryGlobalTier {
    inner: Mutex<Inner>,
    released: Condvar,
}

impl InMemoryGlobalTier {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of stored keys (both kinds).
    pub fn key_count(&self) -> usize {
        self.inner.lock().entries.len()
    }

    pub fn keys(&self) -> Vec<String> {
        let mut k: Vec<String> = self.inner.lock().entries.keys().cloned().collect();
        k.sort();
        k
    }
}

fn mode_err(key: &str) -> Error {
    Error::Mode(format!("{key} mixes linear and append access"))
}

impl GlobalTier for InMemoryGlobalTier {
    fn read(&self, key: &str, off: u64, len: u64) -> Result<Vec<u8>> {
        let inner = self.inner.lock();
        match inner.entries.get(key) {
            None => Err(Error::NotFound(key.to_string())),
            Some(Entry::Appended(_)) => Err(mode_err(key)),
            Some(Entry::Linear(v)) => {
                let end = off.checked_add(len).filter(|e| *e <= v.len() as u64);
                match end {
                    Some(end) => Ok(v[off as usize..end as usize].to_vec()),
                    None => Err(Error::Range(format!("{key}: [{off}, +{len}) beyond {}", v.len()))),
                }
            }
        }
    }

    fn write(&self, key: &str, off: u64, data: &[u8]) -> Result<()> {
        let mut inner = self.inner.lock();
        let entry = inner
            .entries
            .entry(key.to_string())
            .or_insert_with(|| Entry::Linear(Vec::new()));
        match entry {
            Entry::Appended(_) => Err(mode_err(key)),
            Entry::Linear(v) => {
                let end = off as usize + data.len();
                if v.len() < end {
                    v.resize(end, 0);
                }
                v[off as usize..end].copy_from_slice(data);
                Ok(())
            }
        }
    }

    fn put(&self, key: &str, data: &[u8]) -> Result<()> {
        let mut inner = self.inner.lock();
        if let Some(Entry::Appended(_)) = inner.entries.get(key) {
            return Err(mode_err(key));
        }
        inner.entries.insert(key.to_string(), Entry::Linear(data.to_vec()));
        Ok(())
    }

    fn delete(&self, key: &str) -> Result<()> {
        self.inner.lock().entries.remove(key);
        Ok(())
    }

    fn append(&self, key: &str, data: &[u8]) -> Result<()> {
        if data.is_empty() {
            return Err(Error::Invalid("empty append".into()));
        }
        let mut inner = self.inner.lock();
        let entry = inner
            .entries
            .entry(key.to_string())
            .or_insert_with(|| Entry::Appended(Vec::new()));
        match entry {
            Entry::Linear(_) => Err(mode_err(key)),
            Entry::Appended(segs) => {
                segs.push(data.to_vec());
                Ok(())
            }
        }
    }

    fn read_appended(&self, key: &str) -> Result<Vec<Vec<u8>>> {
        match self.inner.lock().entries.get(key) {
            None => Err(Error::NotFound(key.to_string())),
            Some(Entry::Linear(_)) => Err(mode_err(key)),
            Some(Entry::Appended(segs)) => Ok(segs.clone()),
        }
    }

    fn size(&self, key: &str) -> Result<Option<u64>> {
        match self.inner.lock().entries.get(key) {
            None => Ok(None),
            Some(Entry::Linear(v)) => Ok(Some(v.len() as u64)),
            Some(Entry::Appended(_)) => Err(mode_err(key)),
        }
    }

    fn lock(&self, key: &str, mode: LockMode, lease: Duration, timeout: Duration) -> Result<LockToken> {
        let deadline = Instant::now() + timeout;
        let mut guard = self.inner.lock();
        loop {
            let now = Instant::now();
            let inner = &mut *guard;
            let entry = inner.locks.entry(key.to_string()).or_default();
            entry.purge(now, &mut inner.expired);
            let grantable = match mode {
                LockMode::Read => entry.writer.is_none(),
                LockMode::Write => entry.is_free(),
            };
            if grantable {
                inner.next_token += 1;
                let token = inner.next_token;
                match mode {
                    LockMode::Read => {
                        entry.readers.insert(token, now + lease);
                    }
                    LockMode::Write => entry.writer = Some((token, now + lease)),
                }
                return Ok(token);
            }
            if now >= deadline {
                return Err(Error::Busy(format!("timed out locking {key}")));
            }
            let wake = entry.next_expiry().map_or(deadline, |e| e.min(deadline));
            self.released.wait_until(&mut guard, wake);
        }
    }

    fn unlock(&self, key: &str, token: LockToken) -> Result<()> {
        let mut guard = self.inner.lock();
        let now = Instant::now();
        let inner = &mut *guard;
        let entry = inner.locks.entry(key.to_string()).or_default();
        entry.purge(now, &mut inner.expired);
        let released = if entry.writer.is_some_and(|(t, _)| t == token) {
            entry.writer = None;
            true
        } else {
            entry.readers.remove(&token).is_some()
        };
        if entry.is_free() {
            inner.locks.remove(key);
        }
        if released {
            self.released.notify_all();
            Ok(())
        } else if inner.expired.remove(&token) {
            Err(Error::LeaseExpired(format!("lock on {key}")))
        } else {
            Err(Error::NotHeld(format!("lock on {key}")))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    const LEASE: Duration = Duration::from_secs(2);

    #[test]
    fn linear_values_extend_on_write() {
        let g = InMemoryGlobalTier::new();
        assert_eq!(g.size("k").unwrap(), None);
        g.write("k", 3, b"ab").unwrap();
        assert_eq!(g.read_all("k").unwrap(), b"\0\0\0ab");
        assert!(matches!(g.read("k", 4, 2), Err(Error::Range(_))));
        assert!(matches!(g.read("nope", 0, 1), Err(Error::NotFound(_))));
        g.put("k", b"x").unwrap();
        assert_eq!(g.size("k").unwrap(), Some(1));
    }

    #[test]
    fn append_mode_is_separate() {
        let g = InMemoryGlobalTier::new();
        for s in ["a", "b", "c"] {
            g.append("log", s.as_bytes()).unwrap();
        }
        assert_eq!(
            g.read_appended("log").unwrap(),
            vec![b"a".to_vec(), b"b".to_vec(), b"c".to_vec()]
        );
        assert!(matches!(g.append("log", b""), Err(Error::Invalid(_))));
        assert!(matches!(g.write("log", 0, b"x"), Err(Error::Mode(_))));
        g.put("lin", b"x").unwrap();
        assert!(matches!(g.append("lin", b"x"), Err(Error::Mode(_))));
        assert!(matches!(g.read_appended("lin"), Err(Error::Mode(_))));
    }

    #[test]
    fn readers_share_writers_exclude() {
        let g = InMemoryGlobalTier::new();
        let short = Duration::from_millis(50);
        let r1 = g.lock("k", LockMode::Read, LEASE, short).unwrap();
        let r2 = g.lock("k", LockMode::Read, LEASE, short).unwrap();
        assert!(matches!(
            g.lock("k", LockMode::Write, LEASE, short),
            Err(Error::Busy(_))
        ));
        g.unlock("k", r1).unwrap();
        g.unlock("k", r2).unwrap();
        let w = g.lock("k", LockMode::Write, LEASE, short).unwrap();
        assert!(matches!(g.lock("k", LockMode::Read, LEASE, short), Err(Error::Busy(_))));
        g.unlock("k", w).unwrap();
        assert!(matches!(g.unlock("k", w), Err(Error::NotHeld(_))));
    }

    #[test]
    fn expired_lease_frees_lock_and_rejects_unlock() {
        let g = InMemoryGlobalTier::new();
        let lease = Duration::from_millis(100);
        let t = g.lock("k", LockMode::Write, lease, lease).unwrap();
        let start = Instant::now();
        let t2 = g.lock("k", LockMode::Write, LEASE, Duration::from_secs(5)).unwrap();
        assert!(start.elapsed() < 2 * lease, "{:?}", start.elapsed());
        assert!(matches!(g.unlock("k", t), Err(Error::LeaseExpired(_))));
        g.unlock("k", t2).unwrap();
        // Expiry with no contender is detected at unlock time.
        let t3 = g.lock("k", LockMode::Write, lease, lease).unwrap();
        std::thread::sleep(lease + Duration::from_millis(20));
        assert!(matches!(g.unlock("k", t3), Err(Error::LeaseExpired(_))));
    }

    #[test]
    fn blocked_writer_wakes_on_release() {
        let g = Arc::new(InMemoryGlobalTier::new());
        let t = g.lock("k", LockMode::Write, LEASE, LEASE).unwrap();
        let g2 = g.clone();
        let h = std::thread::spawn(move || g2.lock("k", LockMode::Write, LEASE, Duration::from_secs(5)));
        std::thread::sleep(Duration::from_millis(50));
        g.unlock("k", t).unwrap();
        let t2 = h.join().unwrap().unwrap();
        g.unlock("k", t2).unwrap();
    }
}
