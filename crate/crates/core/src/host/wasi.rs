//! The `wasi_snapshot_preview1` subset: files, clock, randomness and the
//! process calls standard runtimes expect.

use std::sync::Arc;

use parking_lot::Mutex;
use wasmtime::Linker;

use super::fs::{normalise_path, Content, FdEntry, OpenFile, ROOT_FD};
use super::{read_guest, read_str, write_guest, write_u32, write_u64, Ctx, WASI_NAMESPACE};
use crate::error::Error;
use crate::sandbox::{FaasletData, ProcExit};

pub(super) const NAMES: &[&str] = &[
    "path_open",
    "fd_read",
    "fd_write",
    "fd_close",
    "fd_seek",
    "fd_filestat_get",
    "path_filestat_get",
    "fd_fdstat_get",
    "fd_prestat_get",
    "fd_prestat_dir_name",
    "clock_time_get",
    "clock_res_get",
    "random_get",
    "args_get",
    "args_sizes_get",
    "environ_get",
    "environ_sizes_get",
    "sched_yield",
    "proc_exit",
];

pub(super) const ESUCCESS: i32 = 0;
pub(super) const EACCES: i32 = 2;
pub(super) const EBADF: i32 = 8;
pub(super) const EEXIST: i32 = 20;
pub(super) const EINVAL: i32 = 28;
pub(super) const EIO: i32 = 29;
pub(super) const ENOENT: i32 = 44;
pub(super) const ENOTSUP: i32 = 58;
pub(super) const ESPIPE: i32 = 70;
pub(super) const ENOTCAPABLE: i32 = 76;

const OFLAGS_CREAT: i32 = 1;
const OFLAGS_DIRECTORY: i32 = 2;
const OFLAGS_EXCL: i32 = 4;
const OFLAGS_TRUNC: i32 = 8;
const FDFLAGS_APPEND: i32 = 1;
const RIGHT_FD_READ: i64 = 1 << 1;
const RIGHT_FD_WRITE: i64 = 1 << 6;

const FILETYPE_CHARACTER_DEVICE: u8 = 2;
const FILETYPE_DIRECTORY: u8 = 3;
const FILETYPE_REGULAR_FILE: u8 = 4;
const FILETYPE_SOCKET_STREAM: u8 = 6;

const CLOCK_REALTIME: i32 = 0;
const CLOCK_THREAD_CPUTIME: i32 = 3;

fn wasi_errno(e: &Error) -> i32 {
    match e {
        Error::Permission(_) => EACCES,
        Error::NotFound(_) => ENOENT,
        Error::Invalid(_) => EINVAL,
        _ => EIO,
    }
}

fn filestat(filetype: u8, size: u64) -> [u8; 64] {
    let mut b = [0u8; 64];
    b[16] = filetype;
    b[24..32].copy_from_slice(&1u64.to_le_bytes());
    b[32..40].copy_from_slice(&size.to_le_bytes());
    b
}

/// Guest `(ptr, len)` pairs of an iovec array.
fn iovecs(caller: &Ctx<'_>, iovs: i32, n: i32) -> wasmtime::Result<Vec<(i32, i32)>> {
    let raw = read_guest(caller, iovs, n.wrapping_mul(8))?;
    Ok(raw
        .chunks_exact(8)
        .map(|c| {
            (
                i32::from_le_bytes(c[..4].try_into().unwrap()),
                i32::from_le_bytes(c[4..].try_into().unwrap()),
            )
        })
        .collect())
}

fn open(caller: &mut Ctx<'_>, path: &str, oflags: i32, rights: i64, fdflags: i32) -> Result<i32, i32> {
    let path = normalise_path(path).map_err(|e| wasi_errno(&e))?;
    if oflags & OFLAGS_DIRECTORY != 0 {
        return Err(ENOTSUP);
    }
    let host = &caller.data().host;
    let user = host.user().to_string();
    let (env, overlay) = (host.env.clone(), host.env.overlay.clone());
    let local = overlay.get(&user, &path);
    let write = rights & RIGHT_FD_WRITE != 0 || oflags & (OFLAGS_CREAT | OFLAGS_TRUNC) != 0;
    let exists = local.is_some() || env.files.read(&user, &path).is_some();
    if oflags & OFLAGS_EXCL != 0 && exists {
        return Err(EEXIST);
    }
    let content = if write {
        if !exists && oflags & OFLAGS_CREAT == 0 {
            return Err(ENOENT);
        }
        // Global files are copied into the overlay on first write access.
        let f = overlay.get_or_insert(&user, &path, || {
            env.files.read(&user, &path).map(|b| b.to_vec()).unwrap_or_default()
        });
        if oflags & OFLAGS_TRUNC != 0 {
            f.lock().clear();
        }
        Content::Local(f)
    } else {
        match local {
            Some(f) => Content::Local(f),
            None => Content::Global(env.files.read(&user, &path).ok_or(ENOENT)?),
        }
    };
    let file = OpenFile {
        content,
        cursor: 0,
        readable: rights & RIGHT_FD_READ != 0 || !write,
        writable: write,
        append: fdflags & FDFLAGS_APPEND != 0,
    };
    Ok(caller
        .data_mut()
        .host
        .fds
        .insert(FdEntry::File(Arc::new(Mutex::new(file)))))
}

fn path_size(caller: &Ctx<'_>, path: &str) -> Result<u64, i32> {
    let path = normalise_path(path).map_err(|e| wasi_errno(&e))?;
    let host = &caller.data().host;
    if let Some(f) = host.env.overlay.get(host.user(), &path) {
        return Ok(f.lock().len() as u64);
    }
    host.env
        .files
        .read(host.user(), &path)
        .map(|b| b.len() as u64)
        .ok_or(ENOENT)
}

pub(super) fn add_to_linker(linker: &mut Linker<FaasletData>) -> wasmtime::Result<()> {
    let ns = WASI_NAMESPACE;

    linker.func_wrap(
        ns,
        "path_open",
        |mut caller: Ctx<'_>,
         dirfd: i32,
         _dirflags: i32,
         path: i32,
         path_len: i32,
         oflags: i32,
         rights: i64,
         _inheriting: i64,
         fdflags: i32,
         fd_out: i32| {
            if dirfd != ROOT_FD {
                return Ok(EBADF);
            }
            let Some(path) = read_str(&caller, path, path_len)? else {
                return Ok(EINVAL);
            };
            match open(&mut caller, &path, oflags, rights, fdflags) {
                Ok(fd) => {
                    write_u32(&mut caller, fd_out, fd as u32)?;
                    Ok(ESUCCESS)
                }
                Err(e) => Ok(e),
            }
        },
    )?;
    linker.func_wrap(
        ns,
        "fd_read",
        |mut caller: Ctx<'_>, fd: i32, iovs: i32, n: i32, nread: i32| {
            let iovs = iovecs(&caller, iovs, n)?;
            if fd == 0 {
                write_u32(&mut caller, nread, 0)?;
                return Ok(ESUCCESS);
            }
            let Some(file) = caller.data().host.fds.file(fd) else {
                return Ok(EBADF);
            };
            if !file.lock().readable {
                return Ok(ENOTCAPABLE);
            }
            let mut total = 0usize;
            for (ptr, len) in iovs {
                let data = file.lock().read(len as u32 as usize);
                write_guest(&mut caller, ptr, &data)?;
                total += data.len();
                if data.len() < len as u32 as usize {
                    break;
                }
            }
            write_u32(&mut caller, nread, total as u32)?;
            Ok(ESUCCESS)
        },
    )?;
    linker.func_wrap(
        ns,
        "fd_write",
        |mut caller: Ctx<'_>, fd: i32, iovs: i32, n: i32, nwritten: i32| {
            let iovs = iovecs(&caller, iovs, n)?;
            let mut data = Vec::new();
            for (ptr, len) in iovs {
                data.extend_from_slice(&read_guest(&caller, ptr, len)?);
            }
            if fd == 1 || fd == 2 {
                log::debug!("guest fd {fd}: {}", String::from_utf8_lossy(&data).trim_end());
                write_u32(&mut caller, nwritten, data.len() as u32)?;
                return Ok(ESUCCESS);
            }
            let Some(file) = caller.data().host.fds.file(fd) else {
                return Ok(EBADF);
            };
            let mut file = file.lock();
            if !file.writable {
                return Ok(ENOTCAPABLE);
            }
            let written = file.write(&data).unwrap_or(0);
            drop(file);
            write_u32(&mut caller, nwritten, written as u32)?;
            Ok(ESUCCESS)
        },
    )?;
    linker.func_wrap(ns, "fd_close", |mut caller: Ctx<'_>, fd: i32| {
        if (0..=ROOT_FD).contains(&fd) {
            return Ok(ESUCCESS);
        }
        Ok(if caller.data_mut().host.fds.close(fd) {
            ESUCCESS
        } else {
            EBADF
        })
    })?;
    linker.func_wrap(
        ns,
        "fd_seek",
        |mut caller: Ctx<'_>, fd: i32, offset: i64, whence: i32, new_out: i32| {
            let Some(file) = caller.data().host.fds.file(fd) else {
                return Ok(if caller.data().host.fds.get(fd).is_some() {
                    ESPIPE
                } else {
                    EBADF
                });
            };
            let mut f = file.lock();
            let base = match whence {
                0 => 0i64,
                1 => f.cursor as i64,
                2 => f.content.len() as i64,
                _ => return Ok(EINVAL),
            };
            let Some(pos) = base.checked_add(offset).filter(|p| *p >= 0) else {
                return Ok(EINVAL);
            };
            f.cursor = pos as u64;
            drop(f);
            write_u64(&mut caller, new_out, pos as u64)?;
            Ok(ESUCCESS)
        },
    )?;
    linker.func_wrap(ns, "fd_filestat_get", |mut caller: Ctx<'_>, fd: i32, buf: i32| {
        let stat = match caller.data().host.fds.get(fd) {
            Some(FdEntry::File(f)) => filestat(FILETYPE_REGULAR_FILE, f.lock().content.len() as u64),
            Some(FdEntry::Socket(_)) => filestat(FILETYPE_SOCKET_STREAM, 0),
            None if fd == ROOT_FD => filestat(FILETYPE_DIRECTORY, 0),
            None if (0..ROOT_FD).contains(&fd) => filestat(FILETYPE_CHARACTER_DEVICE, 0),
            None => return Ok(EBADF),
        };
        write_guest(&mut caller, buf, &stat)?;
        Ok(ESUCCESS)
    })?;
    linker.func_wrap(
        ns,
        "path_filestat_get",
        |mut caller: Ctx<'_>, dirfd: i32, _flags: i32, path: i32, path_len: i32, buf: i32| {
            if dirfd != ROOT_FD {
                return Ok(EBADF);
            }
            let Some(path) = read_str(&caller, path, path_len)? else {
                return Ok(EINVAL);
            };
            match path_size(&caller, &path) {
                Ok(size) => {
                    write_guest(&mut caller, buf, &filestat(FILETYPE_REGULAR_FILE, size))?;
                    Ok(ESUCCESS)
                }
                Err(e) => Ok(e),
            }
        },
    )?;
    linker.func_wrap(ns, "fd_fdstat_get", |mut caller: Ctx<'_>, fd: i32, buf: i32| {
        let (ty, rights) = match caller.data().host.fds.get(fd) {
            Some(FdEntry::File(f)) => {
                let f = f.lock();
                let mut r = 0i64;
                if f.readable {
                    r |= RIGHT_FD_READ;
                }
                if f.writable {
                    r |= RIGHT_FD_WRITE;
                }
                (FILETYPE_REGULAR_FILE, r)
            }
            Some(FdEntry::Socket(_)) => (FILETYPE_SOCKET_STREAM, RIGHT_FD_READ | RIGHT_FD_WRITE),
            None if fd == ROOT_FD => (FILETYPE_DIRECTORY, -1),
            None if (0..ROOT_FD).contains(&fd) => (FILETYPE_CHARACTER_DEVICE, RIGHT_FD_READ | RIGHT_FD_WRITE),
            None => return Ok(EBADF),
        };
        let mut b = [0u8; 24];
        b[0] = ty;
        b[8..16].copy_from_slice(&rights.to_le_bytes());
        b[16..24].copy_from_slice(&rights.to_le_bytes());
        write_guest(&mut caller, buf, &b)?;
        Ok(ESUCCESS)
    })?;
    linker.func_wrap(ns, "fd_prestat_get", |mut caller: Ctx<'_>, fd: i32, buf: i32| {
        if fd != ROOT_FD {
            return Ok(EBADF);
        }
        let mut b = [0u8; 8];
        b[4..8].copy_from_slice(&1u32.to_le_bytes());
        write_guest(&mut caller, buf, &b)?;
        Ok(ESUCCESS)
    })?;
    linker.func_wrap(
        ns,
        "fd_prestat_dir_name",
        |mut caller: Ctx<'_>, fd: i32, buf: i32, len: i32| {
            if fd != ROOT_FD {
                return Ok(EBADF);
            }
            if len < 1 {
                return Ok(EINVAL);
            }
            write_guest(&mut caller, buf, b"/")?;
            Ok(ESUCCESS)
        },
    )?;
    // Every clock reads the Faaslet's own monotonic clock, zero at call start.
    linker.func_wrap(
        ns,
        "clock_time_get",
        |mut caller: Ctx<'_>, id: i32, _precision: i64, out: i32| {
            if !(CLOCK_REALTIME..=CLOCK_THREAD_CPUTIME).contains(&id) {
                return Ok(EINVAL);
            }
            let ns = caller.data().host.call_start.elapsed().as_nanos() as u64;
            write_u64(&mut caller, out, ns)?;
            Ok(ESUCCESS)
        },
    )?;
    linker.func_wrap(ns, "clock_res_get", |mut caller: Ctx<'_>, id: i32, out: i32| {
        if !(CLOCK_REALTIME..=CLOCK_THREAD_CPUTIME).contains(&id) {
            return Ok(EINVAL);
        }
        write_u64(&mut caller, out, 1)?;
        Ok(ESUCCESS)
    })?;
    linker.func_wrap(ns, "random_get", |mut caller: Ctx<'_>, buf: i32, len: i32| {
        let mut bytes = vec![0u8; len as u32 as usize];
        if getrandom::fill(&mut bytes).is_err() {
            return Ok(EIO);
        }
        write_guest(&mut caller, buf, &bytes)?;
        Ok(ESUCCESS)
    })?;
    for (list, sizes) in [("args_get", "args_sizes_get"), ("environ_get", "environ_sizes_get")] {
        linker.func_wrap(ns, list, |_: Ctx<'_>, _ptrs: i32, _buf: i32| Ok(ESUCCESS))?;
        linker.func_wrap(ns, sizes, |mut caller: Ctx<'_>, count: i32, size: i32| {
            write_u32(&mut caller, count, 0)?;
            write_u32(&mut caller, size, 0)?;
            Ok(ESUCCESS)
        })?;
    }
    linker.func_wrap(ns, "sched_yield", |_: Ctx<'_>| {
        std::thread::yield_now();
        Ok(ESUCCESS)
    })?;
    linker.func_wrap(ns, "proc_exit", |_: Ctx<'_>, code: i32| -> wasmtime::Result<()> {
        Err(wasmtime::Error::new(ProcExit(code)))
    })?;
    Ok(())
}
