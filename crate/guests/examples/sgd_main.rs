//! Driver: per epoch, partitions the examples and chains one `weight_update`
//! per worker, then awaits them all.

use faaslite_guest::call;
use faaslite_guest::sgd::{divide_problem, SgdArgs, UpdateArgs, UPDATE_FN};

#[no_mangle]
pub extern "C" fn _faasm_main() -> i32 {
    let Some(args) = SgdArgs::decode(&call::input()) else {
        return 1;
    };
    for _epoch in 0..args.n_epochs {
        let inputs: Vec<Vec<u8>> = divide_problem(args.n_examples, args.n_workers)
            .into_iter()
            .map(|(a, b)| {
                UpdateArgs {
                    col_start: a,
                    col_end: b,
                    push_every: args.push_every,
                    learning_rate: args.learning_rate,
                }
                .encode()
            })
            .collect();
        let handles = match call::chain_all(UPDATE_FN, &inputs) {
            Ok(h) => h,
            Err(e) => return -e.code(),
        };
        match call::await_all(&handles) {
            Ok(0) => {}
            Ok(code) => return code,
            Err(e) => return -e.code(),
        }
    }
    0
}
