//! Logistic-regression SGD over a column range of the training set.
//! Weights are updated in the shared local replica and pushed every
//! `push_every` examples.

use faaslite_guest::call;
use faaslite_guest::ddo::{AsyncVector, MatrixReadOnly, SparseMatrixReadOnly};
use faaslite_guest::sgd::{sigmoid, UpdateArgs, FEATURES_KEY, LABELS_KEY, WEIGHTS_KEY};
use faaslite_guest::Errno;

fn update(args: UpdateArgs) -> Result<(), Errno> {
    let t_a = SparseMatrixReadOnly::new(FEATURES_KEY)?;
    let t_b = MatrixReadOnly::new(LABELS_KEY)?;
    let mut weights = AsyncVector::new(WEIGHTS_KEY, t_a.rows())?;
    let cols = t_a.columns(args.col_start as usize..args.col_end as usize)?;
    let push_every = args.push_every.max(1) as usize;
    for (iter_count, (col_idx, col_a)) in cols.iter().enumerate() {
        let label = t_b.column(col_idx)?[0];
        let dot: f64 = col_a.non_nulls().map(|(r, v)| weights.get(r) * v).sum();
        let adj = args.learning_rate * (label - sigmoid(dot));
        for (val_idx, val) in col_a.non_nulls() {
            weights.add(val_idx, val * adj);
        }
        if (iter_count + 1) % push_every == 0 {
            weights.push()?;
        }
    }
    weights.push()
}

#[no_mangle]
pub extern "C" fn _faasm_main() -> i32 {
    let Some(args) = UpdateArgs::decode(&call::input()) else {
        return 1;
    };
    match update(args) {
        Ok(()) => 0,
        Err(e) => -e.code(),
    }
}
