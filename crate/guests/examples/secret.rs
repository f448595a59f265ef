//! Writes a caller-supplied secret into heap memory allocated during init, or
//! reads that memory back. Input: `w<bytes>` to write, `r<len>` to read.

use faaslite_guest::call;

static mut HEAP: *mut u8 = core::ptr::null_mut();
const HEAP_LEN: usize = 4096;
pub const SECRET_OFFSET: usize = 1000;

#[no_mangle]
pub extern "C" fn _faasm_init() -> i32 {
    let mut buf = vec![0u8; HEAP_LEN].into_boxed_slice();
    for (i, b) in buf.iter_mut().enumerate() {
        *b = (i % 251) as u8;
    }
    unsafe { HEAP = Box::leak(buf).as_mut_ptr() };
    0
}

#[no_mangle]
pub extern "C" fn _faasm_main() -> i32 {
    let input = call::input();
    let heap = unsafe {
        if HEAP.is_null() {
            return 2;
        }
        core::slice::from_raw_parts_mut(HEAP, HEAP_LEN)
    };
    match input.split_first() {
        Some((b'w', secret)) => {
            let n = secret.len().min(HEAP_LEN - SECRET_OFFSET);
            heap[SECRET_OFFSET..SECRET_OFFSET + n].copy_from_slice(&secret[..n]);
            0
        }
        Some((b'r', len)) => {
            let n = core::str::from_utf8(len)
                .ok()
                .and_then(|s| s.parse::<usize>().ok())
                .unwrap_or(16)
                .min(HEAP_LEN - SECRET_OFFSET);
            call::set_output(&heap[SECRET_OFFSET..SECRET_OFFSET + n]);
            0
        }
        _ => 1,
    }
}
