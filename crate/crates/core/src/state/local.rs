use std::collections::{HashMap, HashSet};
use std::ops::Range;
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;

use super::global::{GlobalTier, LockMode, LockToken};
use super::value::{Held, Implicit, StateValue};
use super::{StateKey, CREATE_EMPTY, DEFAULT_CHUNK_SIZE, NO_PULL};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct LocalTierConfig {
    pub chunk_size: usize,
    pub lock_lease: Duration,
    pub lock_timeout: Duration,
}

impl Default for LocalTierConfig {
    fn default() -> Self {
        LocalTierConfig {
            chunk_size: DEFAULT_CHUNK_SIZE,
            lock_lease: Duration::from_secs(2),
            lock_timeout: Duration::from_secs(10),
        }
    }
}

/// The replicas held by one node, shared by all of its Faaslets.
pub struct LocalTier {
    global: Arc<dyn GlobalTier>,
    cfg: LocalTierConfig,
    values: Mutex<HashMap<StateKey, Arc<StateValue>>>,
    append_keys: Mutex<HashSet<StateKey>>,
}

/// Groups sorted chunk indices into runs of consecutive indices.
fn runs(chunks: &[usize]) -> Vec<Range<usize>> {
    let mut out: Vec<Range<usize>> = Vec::new();
    for &c in chunks {
        match out.last_mut() {
            Some(r) if r.end == c => r.end = c + 1,
            _ => out.push(c..c + 1),
        }
    }
    out
}

impl std::fmt::Debug for LocalTier {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LocalTier")
            .field("values", &self.len())
            .field("chunk_size", &self.cfg.chunk_size)
            .finish()
    }
}

impl LocalTier {
    pub fn new(global: Arc<dyn GlobalTier>, cfg: LocalTierConfig) -> Self {
        LocalTier {
            global,
            cfg,
            values: Mutex::new(HashMap::new()),
            append_keys: Mutex::new(HashSet::new()),
        }
    }

    pub fn global(&self) -> &Arc<dyn GlobalTier> {
        &self.global
    }

    pub fn config(&self) -> &LocalTierConfig {
        &self.cfg
    }

    pub fn lookup(&self, key: &StateKey) -> Option<Arc<StateValue>> {
        self.values.lock().get(key).cloned()
    }

    pub fn len(&self) -> usize {
        self.values.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Finds or creates the replica for `key` without pulling any chunks.
    ///
    /// A new replica takes the global value's length. With `CREATE_EMPTY`, a
    /// key absent from both tiers becomes a zero-filled local value of `len`
    /// bytes that reaches the global tier on its first push.
    pub fn replica(&self, key: &StateKey, len: usize, flags: i32) -> Result<Arc<StateValue>> {
        if let Some(v) = self.lookup(key) {
            if len > v.len() {
                return Err(Error::Range(format!(
                    "{key}: {len} bytes requested, value has {}",
                    v.len()
                )));
            }
            return Ok(v);
        }
        if self.append_keys.lock().contains(key) {
            return Err(Error::Mode(format!("{key} is an append-mode key")));
        }
        let value = match self.global.size(&key.global())? {
            Some(size) => {
                if len > size as usize {
                    return Err(Error::Range(format!("{key}: {len} bytes requested, value has {size}")));
                }
                StateValue::new(key.clone(), size as usize, self.cfg.chunk_size, false)?
            }
            None if flags & CREATE_EMPTY != 0 => {
                if len == 0 {
                    return Err(Error::Invalid(format!("{key}: cannot create an empty value")));
                }
                StateValue::new(key.clone(), len, self.cfg.chunk_size, true)?
            }
            None => return Err(Error::NotFound(key.to_string())),
        };
        let mut values = self.values.lock();
        Ok(values.entry(key.clone()).or_insert_with(|| Arc::new(value)).clone())
    }

    /// `get_state` / `get_state_offset`: the replica with the chunks covering
    /// `[off, off + len)` present (unless `NO_PULL`).
    pub fn get(&self, key: &StateKey, off: usize, len: usize, flags: i32, held: Held) -> Result<Arc<StateValue>> {
        if len == 0 {
            return Err(Error::Invalid(format!("{key}: zero-length access")));
        }
        let end = off
            .checked_add(len)
            .ok_or_else(|| Error::Range(format!("{key}: offset overflow")))?;
        let v = self.replica(key, end, flags)?;
        if flags & NO_PULL == 0 {
            self.ensure(&v, off, len, held)?;
        }
        Ok(v)
    }

    fn fetch(&self, v: &StateValue, chunks: &[usize]) -> Result<()> {
        for run in runs(chunks) {
            let start = v.chunk_bytes(run.start).start;
            let end = v.chunk_bytes(run.end - 1).end;
            let data = self.global.read(v.global_key(), start as u64, (end - start) as u64)?;
            v.write_bytes(start, &data);
            let mut m = v.meta();
            m.clean[start..end].copy_from_slice(&data);
            for i in run {
                m.present[i] = true;
                m.dirty[i] = false;
            }
        }
        Ok(())
    }

    /// Pulls the chunks covering the range that are not yet present.
    pub fn ensure(&self, v: &StateValue, off: usize, len: usize, held: Held) -> Result<()> {
        let span = v.span(off, len)?;
        let missing = |v: &StateValue| -> Vec<usize> {
            let m = v.meta();
            span.clone().filter(|&i| !m.present[i]).collect()
        };
        if missing(v).is_empty() {
            return Ok(());
        }
        // Local lock before the transfer lock, everywhere: a caller may
        // already hold the local lock when it gets here.
        let _g = Implicit::write(v, held);
        let _t = v.transfer.lock();
        let missing = missing(v);
        if missing.is_empty() {
            return Ok(());
        }
        self.fetch(v, &missing)
    }

    /// Forced refresh of the chunks covering the range, overwriting local bytes.
    pub fn pull(&self, v: &StateValue, off: usize, len: usize, held: Held) -> Result<()> {
        let span = v.span(off, len)?;
        let _g = Implicit::write(v, held);
        let _t = v.transfer.lock();
        let chunks: Vec<usize> = span.collect();
        self.fetch(v, &chunks)?;
        v.meta().local_only = false;
        Ok(())
    }

    pub fn pull_all(&self, v: &StateValue, held: Held) -> Result<()> {
        self.pull(v, 0, v.len(), held)
    }

    /// Writes modified chunks covering the range to the global tier. A chunk
    /// counts as modified if a state call dirtied it or its bytes differ from
    /// the last synchronised copy. Returns the bytes sent.
    pub fn push(&self, v: &StateValue, off: usize, len: usize, held: Held) -> Result<usize> {
        let span = v.span(off, len)?;
        let _g = Implicit::read(v, held);
        let _t = v.transfer.lock();
        let todo: Vec<(usize, Vec<u8>)> = {
            let m = v.meta();
            span.filter(|&i| m.present[i])
                .filter_map(|i| {
                    let r = v.chunk_bytes(i);
                    let now = v.read_bytes(r.start, r.len());
                    (m.dirty[i] || now[..] != m.clean[r.clone()]).then_some((i, now))
                })
                .collect()
        };
        let mut sent = 0;
        let mut at = 0;
        let indices: Vec<usize> = todo.iter().map(|(i, _)| *i).collect();
        for run in runs(&indices) {
            let start = v.chunk_bytes(run.start).start;
            let mut data = Vec::new();
            for _ in run.clone() {
                data.extend_from_slice(&todo[at].1);
                at += 1;
            }
            self.global.write(v.global_key(), start as u64, &data)?;
            let mut m = v.meta();
            m.clean[start..start + data.len()].copy_from_slice(&data);
            for i in run {
                m.dirty[i] = false;
            }
            m.local_only = false;
            sent += data.len();
        }
        Ok(sent)
    }

    pub fn push_all(&self, v: &StateValue, held: Held) -> Result<usize> {
        self.push(v, 0, v.len(), held)
    }

    /// Local write; marks the covered chunks dirty. Chunks that are only
    /// partly overwritten are pulled first so a later push cannot clobber the
    /// rest of the chunk with stale bytes.
    pub fn set(&self, v: &StateValue, off: usize, data: &[u8], held: Held) -> Result<()> {
        let span = v.span(off, data.len())?;
        if data.is_empty() {
            return Ok(());
        }
        let partial: Vec<usize> = {
            let m = v.meta();
            span.clone()
                .filter(|&i| !m.present[i])
                .filter(|&i| {
                    let r = v.chunk_bytes(i);
                    off > r.start || off + data.len() < r.end
                })
                .collect()
        };
        if !partial.is_empty() {
            let _g = Implicit::write(v, held);
            let _t = v.transfer.lock();
            self.fetch(v, &partial)?;
        }
        let _g = Implicit::write(v, held);
        v.write_bytes(off, data);
        let mut m = v.meta();
        for i in span {
            m.present[i] = true;
            m.dirty[i] = true;
        }
        Ok(())
    }

    /// Host-side read through the replica, pulling missing chunks.
    pub fn read(&self, v: &StateValue, off: usize, len: usize, held: Held) -> Result<Vec<u8>> {
        self.ensure(v, off, len, held)?;
        let _g = Implicit::read(v, held);
        Ok(v.read_bytes(off, len))
    }

    pub fn append(&self, key: &StateKey, data: &[u8]) -> Result<()> {
        if data.is_empty() {
            return Err(Error::Invalid(format!("{key}: empty append")));
        }
        if self.lookup(key).is_some() {
            return Err(Error::Mode(format!("{key} is a linear value")));
        }
        self.global.append(&key.global(), data)?;
        self.append_keys.lock().insert(key.clone());
        Ok(())
    }

    pub fn read_appended(&self, key: &StateKey) -> Result<Vec<Vec<u8>>> {
        if self.lookup(key).is_some() {
            return Err(Error::Mode(format!("{key} is a linear value")));
        }
        self.global.read_appended(&key.global())
    }

    pub fn lock_global(&self, key: &StateKey, mode: LockMode) -> Result<LockToken> {
        self.global
            .lock(&key.global(), mode, self.cfg.lock_lease, self.cfg.lock_timeout)
    }

    pub fn unlock_global(&self, key: &StateKey, token: LockToken) -> Result<()> {
        self.global.unlock(&key.global(), token)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state::{CountingGlobalTier, InMemoryGlobalTier};

    fn tier(chunk: usize) -> (Arc<CountingGlobalTier>, LocalTier) {
        let g = Arc::new(CountingGlobalTier::new(Arc::new(InMemoryGlobalTier::new())));
        let cfg = LocalTierConfig {
            chunk_size: chunk,
            ..Default::default()
        };
        (g.clone(), LocalTier::new(g, cfg))
    }

    fn key(k: &str) -> StateKey {
        StateKey::new("u", k).unwrap()
    }

    #[test]
    fn run_grouping() {
        assert_eq!(runs(&[]), Vec::<Range<usize>>::new());
        assert_eq!(runs(&[1, 2, 3, 7, 9, 10]), vec![1..4, 7..8, 9..11]);
    }

    #[test]
    fn get_pulls_once() {
        let (g, t) = tier(4096);
        g.put("u/k", b"hello").unwrap();
        let v = t.get(&key("k"), 0, 5, 0, Held::None).unwrap();
        assert_eq!(v.read_bytes(0, 5), b"hello");
        assert_eq!(g.stats().state_in, 5);
        t.get(&key("k"), 0, 5, 0, Held::None).unwrap();
        assert_eq!(g.stats().state_in, 5);
    }

    #[test]
    fn missing_key_needs_create_flag() {
        let (g, t) = tier(4096);
        assert!(matches!(t.get(&key("k"), 0, 8, 0, Held::None), Err(Error::NotFound(_))));
        let v = t.get(&key("k"), 0, 8, CREATE_EMPTY, Held::None).unwrap();
        assert_eq!(v.len(), 8);
        t.set(&v, 0, b"abc", Held::None).unwrap();
        assert_eq!(g.stats().total(), 0);
        assert_eq!(g.size("u/k").unwrap(), None);
        assert_eq!(t.push_all(&v, Held::None).unwrap(), 8);
        assert_eq!(g.read_all("u/k").unwrap(), b"abc\0\0\0\0\0");
    }

    #[test]
    fn offset_boundary_write_dirties_both_chunks() {
        let (g, t) = tier(256);
        g.put("u/k", &[0u8; 1024]).unwrap();
        let v = t.get(&key("k"), 0, 1024, 0, Held::None).unwrap();
        t.set(&v, 250, &[1; 10], Held::None).unwrap();
        assert_eq!(v.dirty_chunks(), vec![0, 1]);
        let before = g.stats();
        assert_eq!(t.push_all(&v, Held::None).unwrap(), 512);
        assert_eq!(g.stats().since(&before).state_out, 512);
        assert!(v.dirty_chunks().is_empty());
        assert_eq!(t.push_all(&v, Held::None).unwrap(), 0);
    }

    #[test]
    fn pointer_writes_are_detected_on_push() {
        let (g, t) = tier(256);
        g.put("u/k", &[0u8; 1024]).unwrap();
        let v = t.get(&key("k"), 0, 1024, 0, Held::None).unwrap();
        v.buffer().write(600, b"z");
        assert!(v.dirty_chunks().is_empty());
        assert_eq!(t.push_all(&v, Held::None).unwrap(), 256);
        assert_eq!(g.read("u/k", 600, 1).unwrap(), b"z");
    }

    #[test]
    fn offset_reads_pull_covering_chunks_only() {
        let (g, t) = tier(4096);
        g.put("u/big", &vec![7u8; 1 << 20]).unwrap();
        let v = t.get(&key("big"), 4096, 4096, 0, Held::None).unwrap();
        assert_eq!(g.stats().state_in, 4096);
        assert_eq!(v.present_chunks(), vec![1]);
        t.get(&key("big"), 4096, 4096, 0, Held::None).unwrap();
        assert_eq!(g.stats().state_in, 4096);
        t.get(&key("big"), 8000, 200, 0, Held::None).unwrap();
        assert_eq!(g.stats().state_in, 8192);
    }

    #[test]
    fn partial_set_on_absent_chunk_keeps_remote_bytes() {
        let (g, t) = tier(4);
        g.put("u/k", b"abcdefgh").unwrap();
        let v = t.replica(&key("k"), 8, 0).unwrap();
        t.set(&v, 5, b"X", Held::None).unwrap();
        t.push_all(&v, Held::None).unwrap();
        assert_eq!(g.read_all("u/k").unwrap(), b"abcdeXgh");
    }

    #[test]
    fn pull_is_forced_refresh() {
        let (g, a) = tier(4);
        let b = LocalTier::new(g.clone(), a.config().clone());
        g.put("u/k", b"aaaabbbb").unwrap();
        let va = a.get(&key("k"), 0, 8, 0, Held::None).unwrap();
        let vb = b.get(&key("k"), 0, 8, 0, Held::None).unwrap();
        b.set(&vb, 0, b"CCCCDDDD", Held::None).unwrap();
        b.push_all(&vb, Held::None).unwrap();
        // Present but stale on a; get does not refresh, pull does.
        a.get(&key("k"), 0, 8, 0, Held::None).unwrap();
        assert_eq!(va.read_bytes(0, 8), b"aaaabbbb");
        a.pull_all(&va, Held::None).unwrap();
        assert_eq!(va.read_bytes(0, 8), b"CCCCDDDD");
    }

    #[test]
    fn failed_push_keeps_dirty_bits() {
        struct Down;
        impl GlobalTier for Down {
            fn read(&self, _: &str, _: u64, _: u64) -> Result<Vec<u8>> {
                Err(Error::Transport("down".into()))
            }
            fn write(&self, _: &str, _: u64, _: &[u8]) -> Result<()> {
                Err(Error::Transport("down".into()))
            }
            fn put(&self, _: &str, _: &[u8]) -> Result<()> {
                Err(Error::Transport("down".into()))
            }
            fn delete(&self, _: &str) -> Result<()> {
                Ok(())
            }
            fn append(&self, _: &str, _: &[u8]) -> Result<()> {
                Err(Error::Transport("down".into()))
            }
            fn read_appended(&self, _: &str) -> Result<Vec<Vec<u8>>> {
                Err(Error::Transport("down".into()))
            }
            fn size(&self, _: &str) -> Result<Option<u64>> {
                Ok(None)
            }
            fn lock(&self, _: &str, _: LockMode, _: Duration, _: Duration) -> Result<LockToken> {
                Err(Error::Transport("down".into()))
            }
            fn unlock(&self, _: &str, _: LockToken) -> Result<()> {
                Err(Error::Transport("down".into()))
            }
        }
        let t = LocalTier::new(Arc::new(Down), LocalTierConfig::default());
        let v = t.get(&key("k"), 0, 10, CREATE_EMPTY, Held::None).unwrap();
        t.set(&v, 0, b"x", Held::None).unwrap();
        assert!(matches!(t.push_all(&v, Held::None), Err(Error::Transport(_))));
        assert_eq!(v.dirty_chunks(), vec![0]);
    }

    #[test]
    fn append_and_linear_do_not_mix() {
        let (_g, t) = tier(4096);
        t.append(&key("log"), b"a").unwrap();
        t.append(&key("log"), b"b").unwrap();
        assert_eq!(
            t.read_appended(&key("log")).unwrap(),
            vec![b"a".to_vec(), b"b".to_vec()]
        );
        assert!(matches!(t.append(&key("log"), b""), Err(Error::Invalid(_))));
        assert!(matches!(
            t.get(&key("log"), 0, 1, CREATE_EMPTY, Held::None),
            Err(Error::Mode(_))
        ));
        let v = t.get(&key("lin"), 0, 4, CREATE_EMPTY, Held::None).unwrap();
        drop(v);
        assert!(matches!(t.append(&key("lin"), b"x"), Err(Error::Mode(_))));
    }

    #[test]
    fn range_errors() {
        let (g, t) = tier(4096);
        g.put("u/k", b"12345").unwrap();
        assert!(matches!(t.get(&key("k"), 0, 6, 0, Held::None), Err(Error::Range(_))));
        let v = t.get(&key("k"), 0, 5, 0, Held::None).unwrap();
        assert!(matches!(t.set(&v, 4, b"ab", Held::None), Err(Error::Range(_))));
        assert!(matches!(
            t.get(&key("k"), usize::MAX, 2, 0, Held::None),
            Err(Error::Range(_))
        ));
    }
}
