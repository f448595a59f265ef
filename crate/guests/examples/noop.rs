#[no_mangle]
pub extern "C" fn _faasm_main() -> i32 {
    0
}
