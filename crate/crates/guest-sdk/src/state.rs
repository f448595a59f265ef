//! Raw key/value state API.

use crate::abi;
use crate::Errno;

fn status(ret: i32) -> Result<(), Errno> {
    Errno::check(ret as i64).map(|_| ())
}

/// Maps the whole value into linear memory, pulling missing chunks.
pub fn get_state(key: &str, len: usize, flags: i32) -> Result<&'static mut [u8], Errno> {
    let off = Errno::check(unsafe { abi::get_state(key.as_ptr(), key.len(), len as i64, flags) })?;
    Ok(unsafe { std::slice::from_raw_parts_mut(off as usize as *mut u8, len) })
}

/// Maps the value and pulls only the chunks covering `[off, off + len)`.
/// The returned slice starts at `off`.
pub fn get_state_offset(key: &str, off: usize, len: usize, flags: i32) -> Result<&'static mut [u8], Errno> {
    let ptr = Errno::check(unsafe { abi::get_state_offset(key.as_ptr(), key.len(), off as i64, len as i64, flags) })?;
    Ok(unsafe { std::slice::from_raw_parts_mut(ptr as usize as *mut u8, len) })
}

pub fn state_size(key: &str) -> Result<usize, Errno> {
    Errno::check(unsafe { abi::get_state_size(key.as_ptr(), key.len()) }).map(|n| n as usize)
}

pub fn set_state(key: &str, value: &[u8]) -> Result<(), Errno> {
    status(unsafe { abi::set_state(key.as_ptr(), key.len(), value.as_ptr(), value.len()) })
}

pub fn set_state_offset(key: &str, off: usize, value: &[u8]) -> Result<(), Errno> {
    status(unsafe { abi::set_state_offset(key.as_ptr(), key.len(), value.as_ptr(), value.len(), off as i64) })
}

pub fn push_state(key: &str) -> Result<(), Errno> {
    status(unsafe { abi::push_state(key.as_ptr(), key.len()) })
}

pub fn push_state_offset(key: &str, off: usize, len: usize) -> Result<(), Errno> {
    status(unsafe { abi::push_state_offset(key.as_ptr(), key.len(), off as i64, len as i64) })
}

pub fn pull_state(key: &str) -> Result<(), Errno> {
    status(unsafe { abi::pull_state(key.as_ptr(), key.len()) })
}

pub fn pull_state_offset(key: &str, off: usize, len: usize) -> Result<(), Errno> {
    status(unsafe { abi::pull_state_offset(key.as_ptr(), key.len(), off as i64, len as i64) })
}

pub fn append_state(key: &str, value: &[u8]) -> Result<(), Errno> {
    status(unsafe { abi::append_state(key.as_ptr(), key.len(), value.as_ptr(), value.len()) })
}

pub fn read_appended(key: &str) -> Result<Vec<Vec<u8>>, Errno> {
    let len =
        Errno::check(unsafe { abi::read_appended_state(key.as_ptr(), key.len(), std::ptr::null_mut(), 0) })? as usize;
    let mut buf = vec![0u8; len];
    Errno::check(unsafe { abi::read_appended_state(key.as_ptr(), key.len(), buf.as_mut_ptr(), len) })?;
    crate::codec::decode_segments(&buf).ok_or(Errno::Invalid)
}

pub fn lock_read(key: &str) -> Result<(), Errno> {
    status(unsafe { abi::lock_state_read(key.as_ptr(), key.len()) })
}

pub fn unlock_read(key: &str) -> Result<(), Errno> {
    status(unsafe { abi::unlock_state_read(key.as_ptr(), key.len()) })
}

pub fn lock_write(key: &str) -> Result<(), Errno> {
    status(unsafe { abi::lock_state_write(key.as_ptr(), key.len()) })
}

pub fn unlock_write(key: &str) -> Result<(), Errno> {
    status(unsafe { abi::unlock_state_write(key.as_ptr(), key.len()) })
}

pub fn lock_global_read(key: &str) -> Result<(), Errno> {
    status(unsafe { abi::lock_state_global_read(key.as_ptr(), key.len()) })
}

pub fn unlock_global_read(key: &str) -> Result<(), Errno> {
    status(unsafe { abi::unlock_state_global_read(key.as_ptr(), key.len()) })
}

pub fn lock_global_write(key: &str) -> Result<(), Errno> {
    status(unsafe { abi::lock_state_global_write(key.as_ptr(), key.len()) })
}

pub fn unlock_global_write(key: &str) -> Result<(), Errno> {
    status(unsafe { abi::unlock_state_global_write(key.as_ptr(), key.len()) })
}
