use std::ops::Range;

use faaslite_guest::layout::{chunk_count, chunk_len, chunk_span};
use parking_lot::lock_api::RawRwLock as _;
use parking_lot::{Mutex, MutexGuard, RawRwLock};

use super::StateKey;
use crate::error::{Error, Result};
use crate::shm::{round_to_pages, SharedBuffer};

pub(super) struct Chunks {
    pub present: Vec<bool>,
    pub dirty: Vec<bool>,
    /// Bytes of each present chunk as of its last pull or push. Pushes diff
    /// against this so writes made directly through a mapped pointer are
    /// picked up without the guest marking them.
    pub clean: Vec<u8>,
    /// Created locally and never read from the global tier.
    pub local_only: bool,
}

/// One node-local replica.
///
/// The bytes live in a memory file so the same physical pages can be mapped
/// into any number of guest address spaces. The buffer never moves or
/// changes size while the value exists.
pub struct StateValue {
    key: StateKey,
    global_key: String,
    len: usize,
    chunk_size: usize,
    buf: SharedBuffer,
    pub(super) chunks: Mutex<Chunks>,
    /// Serialises transfers of this value to and from the global tier.
    pub(super) transfer: Mutex<()>,
    lock: RawRwLock,
}

impl std::fmt::Debug for StateValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StateValue")
            .field("key", &self.key)
            .field("len", &self.len)
            .field("chunk_size", &self.chunk_size)
            .finish()
    }
}

impl StateValue {
    pub(super) fn new(key: StateKey, len: usize, chunk_size: usize, local_only: bool) -> Result<Self> {
        if len == 0 {
            return Err(Error::Range(format!("{key}: zero-length value")));
        }
        let n = chunk_count(len, chunk_size);
        Ok(StateValue {
            global_key: key.global(),
            key,
            len,
            chunk_size,
            buf: SharedBuffer::new(round_to_pages(len))?,
            chunks: Mutex::new(Chunks {
                present: vec![local_only; n],
                dirty: vec![local_only; n],
                clean: vec![0; len],
                local_only,
            }),
            transfer: Mutex::new(()),
            lock: RawRwLock::INIT,
        })
    }

    pub fn key(&self) -> &StateKey {
        &self.key
    }

    pub fn global_key(&self) -> &str {
        &self.global_key
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn chunk_size(&self) -> usize {
        self.chunk_size
    }

    pub fn chunk_count(&self) -> usize {
        chunk_count(self.len, self.chunk_size)
    }

    /// The replica buffer; its length is `len` rounded up to whole pages.
    pub fn buffer(&self) -> &SharedBuffer {
        &self.buf
    }

    pub fn present_chunks(&self) -> Vec<usize> {
        let c = self.chunks.lock();
        (0..c.present.len()).filter(|&i| c.present[i]).collect()
    }

    pub fn dirty_chunks(&self) -> Vec<usize> {
        let c = self.chunks.lock();
        (0..c.dirty.len()).filter(|&i| c.dirty[i]).collect()
    }

    pub(super) fn meta(&self) -> MutexGuard<'_, Chunks> {
        self.chunks.lock()
    }

    pub(super) fn span(&self, off: usize, len: usize) -> Result<Range<usize>> {
        match off.checked_add(len) {
            Some(end) if end <= self.len => Ok(chunk_span(off, len, self.chunk_size)),
            _ => Err(Error::Range(format!(
                "{}: [{off}, +{len}) beyond {}",
                self.key, self.len
            ))),
        }
    }

    pub(super) fn chunk_bytes(&self, i: usize) -> Range<usize> {
        let start = i * self.chunk_size;
        start..start + chunk_len(i, self.chunk_size, self.len)
    }

    pub fn read_bytes(&self, off: usize, len: usize) -> Vec<u8> {
        self.buf.to_vec(off, len)
    }

    pub(super) fn write_bytes(&self, off: usize, data: &[u8]) {
        self.buf.write(off, data)
    }

    pub fn lock_read(&self) {
        self.lock.lock_shared();
    }

    pub fn lock_write(&self) {
        self.lock.lock_exclusive();
    }

    pub fn try_lock_write(&self) -> bool {
        self.lock.try_lock_exclusive()
    }

    /// # Safety
    /// The caller must hold a read lock taken with [`Self::lock_read`].
    pub unsafe fn unlock_read(&self) {
        self.lock.unlock_shared();
    }

    /// # Safety
    /// The caller must hold the write lock taken with [`Self::lock_write`].
    pub unsafe fn unlock_write(&self) {
        self.lock.unlock_exclusive();
    }
}

/// Which local lock, if any, the caller already holds on a value. State
/// operations lock implicitly only when the caller holds none.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Held {
    #[default]
    None,
    Read,
    Write,
}

pub(super) struct Implicit<'a> {
    value: &'a StateValue,
    mode: Option<bool>,
}

impl<'a> Implicit<'a> {
    pub fn read(value: &'a StateValue, held: Held) -> Self {
        let mode = (held == Held::None).then(|| {
            value.lock_read();
            false
        });
        Implicit { value, mode }
    }

    pub fn write(value: &'a StateValue, held: Held) -> Self {
        let mode = (held == Held::None).then(|| {
            value.lock_write();
            true
        });
        Implicit { value, mode }
    }
}

impl Drop for Implicit<'_> {
    fn drop(&mut self) {
        unsafe {
            match self.mode {
                Some(true) => self.value.unlock_write(),
                Some(false) => self.value.unlock_read(),
                None => {}
            }
        }
    }
}
