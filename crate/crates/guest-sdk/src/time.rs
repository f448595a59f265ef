//! Clock and randomness.

use crate::abi;

const CLOCK_MONOTONIC: i32 = 1;

/// Nanoseconds since the start of the current call.
pub fn monotonic_ns() -> u64 {
    let mut t = 0u64;
    unsafe { abi::clock_time_get(CLOCK_MONOTONIC, 1, &mut t) };
    t
}

pub fn random_bytes(len: usize) -> Vec<u8> {
    let mut buf = vec![0u8; len];
    unsafe { abi::random_get(buf.as_mut_ptr(), len) };
    buf
}
