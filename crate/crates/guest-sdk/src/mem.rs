//! Memory management calls.

use crate::abi;

pub const PAGE_SIZE: usize = 65536;
const MAP_PRIVATE: i32 = 0x02;
const MAP_ANONYMOUS: i32 = 0x20;

/// Extends the break by `delta` bytes (rounded up to pages); returns the old
/// break, or `None` past the memory limit.
pub fn sbrk(delta: usize) -> Option<usize> {
    let r = unsafe { abi::sbrk(delta as i32) };
    (r >= 0).then_some(r as usize)
}

pub fn brk(addr: usize) -> bool {
    unsafe { abi::brk(addr as i32) == 0 }
}

/// Maps `len` fresh zeroed bytes; returns their page-aligned offset.
pub fn mmap_anonymous(len: usize) -> Option<usize> {
    let r = unsafe { abi::mmap(0, len as i32, 3, MAP_PRIVATE | MAP_ANONYMOUS, -1, 0) };
    (r >= 0).then_some(r as usize)
}

pub fn munmap(addr: usize, len: usize) -> bool {
    unsafe { abi::munmap(addr as i32, len as i32) == 0 }
}

/// Current linear memory size in pages.
pub fn memory_pages() -> usize {
    core::arch::wasm32::memory_size(0)
}
