//! Increments a 64-bit counter held in a mapped shared region.
//! Input: `<key> <iterations> [nolock]`. Output: the final counter value.

use faaslite_guest::{call, flags, state};

#[no_mangle]
pub extern "C" fn _faasm_main() -> i32 {
    let input = call::input();
    let text = core::str::from_utf8(&input).unwrap_or("");
    let mut parts = text.split_whitespace();
    let key = parts.next().unwrap_or("counter");
    let iterations: u64 = parts.next().and_then(|s| s.parse().ok()).unwrap_or(1);
    let locked = parts.next() != Some("nolock");
    let region = match state::get_state(key, 8, flags::CREATE_EMPTY) {
        Ok(r) => r,
        Err(e) => return -e.code(),
    };
    let ptr = region.as_mut_ptr() as *mut u64;
    for _ in 0..iterations {
        if locked {
            state::lock_write(key).unwrap();
        }
        unsafe {
            let v = core::ptr::read_volatile(ptr);
            core::ptr::write_volatile(ptr, v + 1);
        }
        if locked {
            state::unlock_write(key).unwrap();
        }
    }
    let value = unsafe { core::ptr::read_volatile(ptr) };
    call::set_output(&value.to_le_bytes());
    0
}
