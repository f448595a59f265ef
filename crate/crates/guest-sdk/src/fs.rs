//! Per-user virtual filesystem (read-global, write-local).

use crate::abi::{self, Iovec};

/// The preopened virtual root.
pub const ROOT_FD: i32 = 3;
const OFLAGS_CREAT: i32 = 1;
const OFLAGS_TRUNC: i32 = 8;
const RIGHT_FD_READ: i64 = 1 << 1;
const RIGHT_FD_WRITE: i64 = 1 << 6;

/// A WASI errno value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WasiErrno(pub i32);

impl WasiErrno {
    pub const ACCES: WasiErrno = WasiErrno(2);
    pub const BADF: WasiErrno = WasiErrno(8);
    pub const NOENT: WasiErrno = WasiErrno(44);
    pub const NOTCAPABLE: WasiErrno = WasiErrno(76);
}

fn check(code: i32) -> Result<(), WasiErrno> {
    if code == 0 {
        Ok(())
    } else {
        Err(WasiErrno(code))
    }
}

pub struct File {
    fd: i32,
}

impl File {
    pub fn open(path: &str) -> Result<File, WasiErrno> {
        Self::open_with(path, 0, RIGHT_FD_READ)
    }

    /// Opens for writing, creating and truncating the local copy.
    pub fn create(path: &str) -> Result<File, WasiErrno> {
        Self::open_with(path, OFLAGS_CREAT | OFLAGS_TRUNC, RIGHT_FD_READ | RIGHT_FD_WRITE)
    }

    /// Opens for read and write without truncating; the global content is
    /// copied into the local overlay on first write.
    pub fn open_rw(path: &str) -> Result<File, WasiErrno> {
        Self::open_with(path, OFLAGS_CREAT, RIGHT_FD_READ | RIGHT_FD_WRITE)
    }

    fn open_with(path: &str, oflags: i32, rights: i64) -> Result<File, WasiErrno> {
        let mut fd = -1;
        check(unsafe { abi::path_open(ROOT_FD, 0, path.as_ptr(), path.len(), oflags, rights, 0, 0, &mut fd) })?;
        Ok(File { fd })
    }

    pub fn fd(&self) -> i32 {
        self.fd
    }

    pub fn read(&mut self, buf: &mut [u8]) -> Result<usize, WasiErrno> {
        let iov = Iovec {
            buf: buf.as_mut_ptr(),
            len: buf.len(),
        };
        let mut n = 0usize;
        check(unsafe { abi::fd_read(self.fd, &iov, 1, &mut n) })?;
        Ok(n)
    }

    pub fn read_to_end(&mut self) -> Result<Vec<u8>, WasiErrno> {
        let mut out = Vec::new();
        let mut buf = [0u8; 4096];
        loop {
            let n = self.read(&mut buf)?;
            if n == 0 {
                return Ok(out);
            }
            out.extend_from_slice(&buf[..n]);
        }
    }

    pub fn write(&mut self, data: &[u8]) -> Result<usize, WasiErrno> {
        let iov = Iovec {
            buf: data.as_ptr(),
            len: data.len(),
        };
        let mut n = 0usize;
        check(unsafe { abi::fd_write(self.fd, &iov, 1, &mut n) })?;
        Ok(n)
    }

    pub fn seek_start(&mut self, pos: u64) -> Result<u64, WasiErrno> {
        let mut new = 0u64;
        check(unsafe { abi::fd_seek(self.fd, pos as i64, 0, &mut new) })?;
        Ok(new)
    }

    pub fn size(&self) -> Result<u64, WasiErrno> {
        let mut stat = [0u8; 64];
        check(unsafe { abi::fd_filestat_get(self.fd, stat.as_mut_ptr()) })?;
        Ok(u64::from_le_bytes(stat[32..40].try_into().unwrap()))
    }

    pub fn try_clone(&self) -> Result<File, WasiErrno> {
        let fd = unsafe { abi::dup(self.fd) };
        if fd < 0 {
            Err(WasiErrno(-fd))
        } else {
            Ok(File { fd })
        }
    }
}

impl Drop for File {
    fn drop(&mut self) {
        unsafe { abi::fd_close(self.fd) };
    }
}

pub fn stat_size(path: &str) -> Result<u64, WasiErrno> {
    let mut stat = [0u8; 64];
    check(unsafe { abi::path_filestat_get(ROOT_FD, 0, path.as_ptr(), path.len(), stat.as_mut_ptr()) })?;
    Ok(u64::from_le_bytes(stat[32..40].try_into().unwrap()))
}

pub fn read_file(path: &str) -> Result<Vec<u8>, WasiErrno> {
    File::open(path)?.read_to_end()
}

pub fn write_file(path: &str, data: &[u8]) -> Result<(), WasiErrno> {
    let mut f = File::create(path)?;
    let mut off = 0;
    while off < data.len() {
        off += f.write(&data[off..])?;
    }
    Ok(())
}
