//! Deterministic guest with mutable heap state: init builds a table, each call
//! mixes the input with the table and bumps a per-instance call counter.

use faaslite_guest::call;

const TABLE_WORDS: usize = 8192;
static mut TABLE: *mut u64 = core::ptr::null_mut();
static mut CALLS: u64 = 0;

fn splitmix(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[no_mangle]
pub extern "C" fn _faasm_init() -> i32 {
    let table: Vec<u64> = (0..TABLE_WORDS as u64).map(splitmix).collect();
    unsafe { TABLE = Box::leak(table.into_boxed_slice()).as_mut_ptr() };
    0
}

#[no_mangle]
pub extern "C" fn _faasm_main() -> i32 {
    let table = unsafe {
        if TABLE.is_null() {
            return 2;
        }
        core::slice::from_raw_parts_mut(TABLE, TABLE_WORDS)
    };
    let calls = unsafe {
        CALLS += 1;
        CALLS
    };
    let mut h = calls;
    for b in call::input() {
        h = splitmix(h ^ b as u64);
        let slot = (h as usize) % TABLE_WORDS;
        h ^= table[slot];
        table[slot] = table[slot].wrapping_add(h);
    }
    let mut out = h.to_le_bytes().to_vec();
    out.extend_from_slice(&calls.to_le_bytes());
    call::set_output(&out);
    0
}
