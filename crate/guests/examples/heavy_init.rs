//! Init builds a 40 MiB heap table; main samples it at input-derived offsets.

use faaslite_guest::call;

const TABLE_LEN: usize = 40 << 20;
static mut TABLE: *mut u8 = core::ptr::null_mut();

fn xorshift(mut x: u64) -> u64 {
    x ^= x << 13;
    x ^= x >> 7;
    x ^= x << 17;
    x
}

#[no_mangle]
pub extern "C" fn _faasm_init() -> i32 {
    let mut table = vec![0u8; TABLE_LEN];
    let mut s = 0x9E37_79B9_7F4A_7C15u64;
    for chunk in table.chunks_exact_mut(8) {
        s = xorshift(s);
        chunk.copy_from_slice(&s.to_le_bytes());
    }
    unsafe { TABLE = Box::leak(table.into_boxed_slice()).as_mut_ptr() };
    0
}

#[no_mangle]
pub extern "C" fn _faasm_main() -> i32 {
    let table = unsafe {
        if TABLE.is_null() {
            return 2;
        }
        core::slice::from_raw_parts(TABLE, TABLE_LEN)
    };
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in call::input() {
        h = (h ^ b as u64).wrapping_mul(0x100_0000_01b3);
    }
    let mut acc = h;
    for i in 0..64 {
        let idx = (xorshift(h.wrapping_add(i)) as usize) % TABLE_LEN;
        acc = acc.rotate_left(5) ^ table[idx] as u64;
    }
    call::set_output(&acc.to_le_bytes());
    0
}
