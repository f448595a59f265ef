//! Memory-file backed buffers that can be mapped both into the host and into
//! guest linear memories.

use std::ffi::CStr;
use std::io;
use std::os::fd::{AsRawFd, FromRawFd, OwnedFd, RawFd};
use std::ptr::NonNull;

pub const WASM_PAGE: usize = 65536;

pub fn round_to_pages(bytes: usize) -> usize {
    bytes.div_ceil(WASM_PAGE).max(1) * WASM_PAGE
}

fn memfd(name: &CStr, len: usize) -> io::Result<OwnedFd> {
    let fd = unsafe { libc::memfd_create(name.as_ptr(), libc::MFD_CLOEXEC) };
    if fd < 0 {
        return Err(io::Error::last_os_error());
    }
    let fd = unsafe { OwnedFd::from_raw_fd(fd) };
    if unsafe { libc::ftruncate(fd.as_raw_fd(), len as libc::off_t) } != 0 {
        return Err(io::Error::last_os_error());
    }
    Ok(fd)
}

/// A `MAP_SHARED` mapping of an anonymous memory file. Every mapping of the
/// file, in the host or in a guest, sees the same bytes.
pub struct SharedBuffer {
    fd: OwnedFd,
    ptr: NonNull<u8>,
    len: usize,
}

// SAFETY: the mapping lives as long as the struct; concurrent access is the
// callers' responsibility, as with any shared memory.
unsafe impl Send for SharedBuffer {}
unsafe impl Sync for SharedBuffer {}

impl SharedBuffer {
    /// A zero-filled buffer of `len` bytes (a multiple of the wasm page size).
    pub fn new(len: usize) -> io::Result<Self> {
        assert!(len > 0 && len % WASM_PAGE == 0);
        let fd = memfd(c"faaslite-state", len)?;
        let ptr = unsafe {
            libc::mmap(
                std::ptr::null_mut(),
                len,
                libc::PROT_READ | libc::PROT_WRITE,
                libc::MAP_SHARED,
                fd.as_raw_fd(),
                0,
            )
        };
        if ptr == libc::MAP_FAILED {
            return Err(io::Error::last_os_error());
        }
        Ok(SharedBuffer {
            fd,
            ptr: NonNull::new(ptr as *mut u8).unwrap(),
            len,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn fd(&self) -> RawFd {
        self.fd.as_raw_fd()
    }

    pub fn as_ptr(&self) -> *mut u8 {
        self.ptr.as_ptr()
    }

    pub fn read(&self, off: usize, out: &mut [u8]) {
        assert!(off + out.len() <= self.len);
        unsafe { std::ptr::copy_nonoverlapping(self.ptr.as_ptr().add(off), out.as_mut_ptr(), out.len()) }
    }

    pub fn write(&self, off: usize, data: &[u8]) {
        assert!(off + data.len() <= self.len);
        unsafe { std::ptr::copy_nonoverlapping(data.as_ptr(), self.ptr.as_ptr().add(off), data.len()) }
    }

    pub fn to_vec(&self, off: usize, len: usize) -> Vec<u8> {
        let mut v = vec![0u8; len];
        self.read(off, &mut v);
        v
    }
}

impl Drop for SharedBuffer {
    fn drop(&mut self) {
        unsafe { libc::munmap(self.ptr.as_ptr() as *mut libc::c_void, self.len) };
    }
}

/// An immutable memory file holding a memory image. Guests map it privately,
/// so writes are copy-on-write and never reach the file.
#[derive(Debug)]
pub struct SealedImage {
    fd: OwnedFd,
    len: usize,
}

impl SealedImage {
    pub fn new(bytes: &[u8]) -> io::Result<Self> {
        let len = bytes.len();
        let fd = unsafe {
            libc::memfd_create(
                c"faaslite-snapshot".as_ptr(),
                libc::MFD_CLOEXEC | libc::MFD_ALLOW_SEALING,
            )
        };
        if fd < 0 {
            return Err(io::Error::last_os_error());
        }
        let fd = unsafe { OwnedFd::from_raw_fd(fd) };
        let mut written = 0;
        while written < len {
            let n = unsafe {
                libc::write(
                    fd.as_raw_fd(),
                    bytes[written..].as_ptr() as *const libc::c_void,
                    len - written,
                )
            };
            if n < 0 {
                let err = io::Error::last_os_error();
                if err.kind() == io::ErrorKind::Interrupted {
                    continue;
                }
                return Err(err);
            }
            written += n as usize;
        }
        let seals = libc::F_SEAL_SHRINK | libc::F_SEAL_GROW | libc::F_SEAL_WRITE | libc::F_SEAL_SEAL;
        if unsafe { libc::fcntl(fd.as_raw_fd(), libc::F_ADD_SEALS, seals) } != 0 {
            return Err(io::Error::last_os_error());
        }
        Ok(SealedImage { fd, len })
    }

    pub fn fd(&self) -> RawFd {
        self.fd.as_raw_fd()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_mappings_alias() {
        let a = SharedBuffer::new(WASM_PAGE).unwrap();
        let second = unsafe {
            libc::mmap(
                std::ptr::null_mut(),
                WASM_PAGE,
                libc::PROT_READ | libc::PROT_WRITE,
                libc::MAP_SHARED,
                a.fd(),
                0,
            )
        } as *mut u8;
        assert_ne!(second as *mut libc::c_void, libc::MAP_FAILED);
        a.write(10, b"hi");
        assert_eq!(unsafe { *second.add(11) }, b'i');
        unsafe { libc::munmap(second as *mut libc::c_void, WASM_PAGE) };
    }

    #[test]
    fn sealed_image_rejects_writes() {
        let img = SealedImage::new(&[7u8; 100]).unwrap();
        assert_eq!(img.len(), 100);
        let n = unsafe { libc::write(img.fd(), [1u8].as_ptr() as *const libc::c_void, 1) };
        assert!(n < 0);
    }

    #[test]
    fn page_rounding() {
        assert_eq!(round_to_pages(0), WASM_PAGE);
        assert_eq!(round_to_pages(1), WASM_PAGE);
        assert_eq!(round_to_pages(WASM_PAGE + 1), 2 * WASM_PAGE);
    }
}
