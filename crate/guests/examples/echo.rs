use faaslite_guest::call;

#[no_mangle]
pub extern "C" fn _faasm_main() -> i32 {
    call::set_output(&call::input());
    0
}
