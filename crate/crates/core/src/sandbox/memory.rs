//! Guest linear memories backed by one fixed virtual-address reservation.
//!
//! Each memory reserves `limit` bytes up front, so the base never moves. The
//! guest-visible prefix `[0, size)` is a sequence of segments with no holes:
//! private segments are anonymous (or copy-on-write snapshot) pages, shared
//! segments map a local-tier replica's memory file directly, so every Faaslet
//! mapping the same key reads and writes the same physical pages.

use std::cell::RefCell;
use std::io;
use std::sync::Arc;

use parking_lot::{Mutex, MutexGuard};
use wasmtime::{LinearMemory, MemoryCreator, MemoryType};

use crate::shm::{SealedImage, WASM_PAGE};
use crate::state::{StateKey, StateValue};

#[derive(Clone)]
pub enum SegmentKind {
    Private,
    Shared { key: StateKey, value: Arc<StateValue> },
}

impl std::fmt::Debug for SegmentKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SegmentKind::Private => f.write_str("Private"),
            SegmentKind::Shared { key, .. } => write!(f, "Shared({key})"),
        }
    }
}

/// A page range of linear memory.
#[derive(Debug, Clone)]
pub struct Segment {
    pub start_page: usize,
    pub pages: usize,
    pub kind: SegmentKind,
}

/// A shared region as seen by the guest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionMapping {
    pub state_key: StateKey,
    pub guest_offset_pages: usize,
    pub length_pages: usize,
}

/// Snapshot of a memory's layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemoryLayout {
    pub private_pages: usize,
    pub regions: Vec<RegionMapping>,
    pub total_pages: usize,
}

enum Pending {
    Shared { key: StateKey, value: Arc<StateValue> },
}

pub(crate) struct MemCore {
    base: *mut u8,
    reserved: usize,
    size: usize,
    segments: Vec<Segment>,
    pending: Option<Pending>,
}

// SAFETY: the reservation is owned by the core and only unmapped on drop.
unsafe impl Send for MemCore {}

fn check(ret: *mut libc::c_void) -> io::Result<()> {
    if ret == libc::MAP_FAILED {
        Err(io::Error::last_os_error())
    } else {
        Ok(())
    }
}

impl MemCore {
    #[cfg(test)]
    fn base(&self) -> *mut u8 {
        self.base
    }

    #[cfg(test)]
    fn segments(&self) -> &[Segment] {
        &self.segments
    }

    fn reserve(bytes: usize) -> io::Result<MemCore> {
        let reserved = bytes.max(WASM_PAGE);
        let base = unsafe {
            libc::mmap(
                std::ptr::null_mut(),
                reserved,
                libc::PROT_NONE,
                libc::MAP_PRIVATE | libc::MAP_ANONYMOUS | libc::MAP_NORESERVE,
                -1,
                0,
            )
        };
        check(base)?;
        Ok(MemCore {
            base: base as *mut u8,
            reserved,
            size: 0,
            segments: Vec::new(),
            pending: None,
        })
    }

    fn map_anon(&self, off: usize, len: usize) -> io::Result<()> {
        check(unsafe {
            libc::mmap(
                self.base.add(off) as *mut libc::c_void,
                len,
                libc::PROT_READ | libc::PROT_WRITE,
                libc::MAP_PRIVATE | libc::MAP_ANONYMOUS | libc::MAP_FIXED,
                -1,
                0,
            )
        })
    }

    fn map_shared(&self, off: usize, len: usize, fd: i32) -> io::Result<()> {
        check(unsafe {
            libc::mmap(
                self.base.add(off) as *mut libc::c_void,
                len,
                libc::PROT_READ | libc::PROT_WRITE,
                libc::MAP_SHARED | libc::MAP_FIXED,
                fd,
                0,
            )
        })
    }

    /// Maps `[off, off + len)` of the image copy-on-write at the same offset.
    fn map_image(&self, off: usize, len: usize, image: &SealedImage) -> io::Result<()> {
        check(unsafe {
            libc::mmap(
                self.base.add(off) as *mut libc::c_void,
                len,
                libc::PROT_READ | libc::PROT_WRITE,
                libc::MAP_PRIVATE | libc::MAP_FIXED,
                image.fd(),
                off as libc::off_t,
            )
        })
    }

    fn push_segment(&mut self, pages: usize, kind: SegmentKind) {
        let start_page = self.size / WASM_PAGE;
        if let (Some(last), SegmentKind::Private) = (self.segments.last_mut(), &kind) {
            if matches!(last.kind, SegmentKind::Private) {
                last.pages += pages;
                return;
            }
        }
        self.segments.push(Segment {
            start_page,
            pages,
            kind,
        });
    }

    fn grow(&mut self, new_size: usize) -> io::Result<()> {
        if new_size > self.reserved {
            return Err(io::Error::other("growth beyond reservation"));
        }
        if new_size <= self.size {
            return Ok(());
        }
        let (off, len) = (self.size, new_size - self.size);
        let kind = match self.pending.take() {
            Some(Pending::Shared { key, value }) => {
                if value.buffer().len() < len {
                    return Err(io::Error::other("shared region larger than its replica"));
                }
                self.map_shared(off, len, value.buffer().fd())?;
                SegmentKind::Shared { key, value }
            }
            None => {
                self.map_anon(off, len)?;
                SegmentKind::Private
            }
        };
        self.push_segment(len / WASM_PAGE, kind);
        self.size = new_size;
        Ok(())
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn layout(&self) -> MemoryLayout {
        let mut private_pages = 0;
        let mut regions = Vec::new();
        for s in &self.segments {
            match &s.kind {
                SegmentKind::Private => private_pages += s.pages,
                SegmentKind::Shared { key, .. } => regions.push(RegionMapping {
                    state_key: key.clone(),
                    guest_offset_pages: s.start_page,
                    length_pages: s.pages,
                }),
            }
        }
        MemoryLayout {
            private_pages,
            regions,
            total_pages: self.size / WASM_PAGE,
        }
    }

    /// Copies `[0, size)`, with shared ranges zeroed.
    pub fn private_image(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.size];
        for s in &self.segments {
            if let SegmentKind::Private = s.kind {
                let (off, len) = (s.start_page * WASM_PAGE, s.pages * WASM_PAGE);
                unsafe { std::ptr::copy_nonoverlapping(self.base.add(off), out[off..].as_mut_ptr(), len) };
            }
        }
        out
    }

    /// Replaces the whole memory with `segments`, mapping private ranges from
    /// `image` and shared ranges from their replicas. Memory must already be
    /// `image.len()` bytes long.
    pub fn install(&mut self, image: &SealedImage, segments: Vec<Segment>) -> io::Result<()> {
        if image.len() != self.size {
            return Err(io::Error::other("image size differs from memory size"));
        }
        for s in &segments {
            let (off, len) = (s.start_page * WASM_PAGE, s.pages * WASM_PAGE);
            match &s.kind {
                SegmentKind::Private => self.map_image(off, len, image)?,
                SegmentKind::Shared { value, .. } => self.map_shared(off, len, value.buffer().fd())?,
            }
        }
        self.segments = segments;
        Ok(())
    }

    /// Discards private-page writes by re-mapping them from `image`.
    pub fn reset_private(&mut self, image: &SealedImage) -> io::Result<()> {
        if image.len() != self.size {
            return Err(io::Error::other("image size differs from memory size"));
        }
        for s in &self.segments {
            if let SegmentKind::Private = s.kind {
                self.map_image(s.start_page * WASM_PAGE, s.pages * WASM_PAGE, image)?;
            }
        }
        Ok(())
    }
}

impl Drop for MemCore {
    fn drop(&mut self) {
        unsafe { libc::munmap(self.base as *mut libc::c_void, self.reserved) };
    }
}

/// Shared handle between the engine-owned memory object and the Faaslet.
#[derive(Clone)]
pub struct MemHandle(Arc<Mutex<MemCore>>);

impl MemHandle {
    pub(crate) fn lock(&self) -> MutexGuard<'_, MemCore> {
        self.0.lock()
    }

    /// Routes the next growth of this memory to `value`'s replica.
    pub(crate) fn set_pending_shared(&self, key: StateKey, value: Arc<StateValue>) {
        self.0.lock().pending = Some(Pending::Shared { key, value });
    }

    pub(crate) fn clear_pending(&self) {
        self.0.lock().pending = None;
    }

    pub fn layout(&self) -> MemoryLayout {
        self.0.lock().layout()
    }

    pub fn size(&self) -> usize {
        self.0.lock().size
    }
}

struct MmapMemory(MemHandle);

unsafe impl LinearMemory for MmapMemory {
    fn byte_size(&self) -> usize {
        self.0.lock().size
    }

    fn byte_capacity(&self) -> usize {
        self.0.lock().reserved
    }

    fn grow_to(&mut self, new_size: usize) -> wasmtime::Result<()> {
        self.0.lock().grow(new_size).map_err(wasmtime::Error::new)
    }

    fn as_ptr(&self) -> *mut u8 {
        self.0.lock().base
    }
}

thread_local! {
    static NEXT_LIMIT: RefCell<Option<usize>> = const { RefCell::new(None) };
    static CREATED: RefCell<Option<MemHandle>> = const { RefCell::new(None) };
}

/// Memory limit, in bytes, applied to memories created by the next
/// instantiation on this thread.
pub(crate) fn set_next_limit(bytes: usize) {
    NEXT_LIMIT.with(|n| *n.borrow_mut() = Some(bytes));
    CREATED.with(|c| *c.borrow_mut() = None);
}

/// The memory created by the last instantiation on this thread, if any.
pub(crate) fn take_created() -> Option<MemHandle> {
    NEXT_LIMIT.with(|n| *n.borrow_mut() = None);
    CREATED.with(|c| c.borrow_mut().take())
}

pub(crate) const DEFAULT_LIMIT_BYTES: usize = 1 << 30;

pub(crate) struct MmapMemoryCreator;

unsafe impl MemoryCreator for MmapMemoryCreator {
    fn new_memory(
        &self,
        _ty: MemoryType,
        minimum: usize,
        maximum: Option<usize>,
        _reserved_size_in_bytes: Option<usize>,
        _guard_size_in_bytes: usize,
    ) -> Result<Box<dyn LinearMemory>, String> {
        let limit = NEXT_LIMIT.with(|n| *n.borrow()).unwrap_or(DEFAULT_LIMIT_BYTES);
        let limit = maximum.map_or(limit, |m| m.min(limit));
        if minimum > limit {
            return Err(format!("minimum memory {minimum} exceeds limit {limit}"));
        }
        let mut core = MemCore::reserve(limit).map_err(|e| e.to_string())?;
        core.grow(minimum).map_err(|e| e.to_string())?;
        let handle = MemHandle(Arc::new(Mutex::new(core)));
        CREATED.with(|c| *c.borrow_mut() = Some(handle.clone()));
        Ok(Box::new(MmapMemory(handle)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segments_stay_dense() {
        let mut m = MemCore::reserve(8 * WASM_PAGE).unwrap();
        m.grow(2 * WASM_PAGE).unwrap();
        m.grow(3 * WASM_PAGE).unwrap();
        assert_eq!(m.segments().len(), 1);
        assert_eq!(m.layout().private_pages, 3);
        assert!(m.grow(9 * WASM_PAGE).is_err());
        // Every byte of [0, size) is accessible.
        for p in 0..3 {
            unsafe { *m.base().add(p * WASM_PAGE + 17) = 1 };
        }
        assert_eq!(m.private_image().iter().filter(|b| **b == 1).count(), 3);
    }

    #[test]
    fn image_maps_copy_on_write() {
        let mut m = MemCore::reserve(4 * WASM_PAGE).unwrap();
        m.grow(2 * WASM_PAGE).unwrap();
        let mut bytes = vec![0u8; 2 * WASM_PAGE];
        bytes[5] = 9;
        bytes[WASM_PAGE + 1] = 8;
        let img = SealedImage::new(&bytes).unwrap();
        let segs = m.segments().to_vec();
        m.install(&img, segs).unwrap();
        assert_eq!(unsafe { *m.base().add(5) }, 9);
        unsafe { *m.base().add(5) = 1 };
        assert_eq!(m.private_image()[5], 1);
        m.reset_private(&img).unwrap();
        assert_eq!(unsafe { *m.base().add(5) }, 9);
        assert_eq!(unsafe { *m.base().add(WASM_PAGE + 1) }, 8);
    }
}
