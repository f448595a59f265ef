//! Scripted exerciser for the distributed data objects, one command per
//! input line, one result line per command.

use faaslite_guest::call;
use faaslite_guest::ddo::{AsyncVector, MatrixReadOnly, SparseMatrixReadOnly};

fn num(s: Option<&str>) -> usize {
    s.and_then(|s| s.parse().ok()).unwrap_or(0)
}

fn run(line: &str) -> String {
    let mut it = line.split_whitespace();
    let cmd = it.next().unwrap_or("");
    let key = it.next().unwrap_or("");
    let a = it.next();
    let b = it.next();
    let c = it.next();
    let res = match cmd {
        "vec_add" => AsyncVector::new(key, num(a)).map(|mut v| {
            let i = num(b);
            v.add(i, c.and_then(|s| s.parse().ok()).unwrap_or(0.0));
            v.get(i).to_string()
        }),
        "vec_get" => AsyncVector::new(key, num(a)).map(|v| v.get(num(b)).to_string()),
        "vec_all" => AsyncVector::new(key, num(a)).map(|v| {
            v.to_vec().iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
        }),
        "vec_push" => AsyncVector::new(key, num(a)).and_then(|v| v.push()).map(|_| "ok".into()),
        "vec_pull" => AsyncVector::new(key, num(a)).and_then(|v| v.pull()).map(|_| "ok".into()),
        "dense" => MatrixReadOnly::new(key).and_then(|m| {
            let view = m.columns(num(a)..num(b))?;
            let sum: f64 = (num(a)..num(b)).flat_map(|col| view.column(col).collect::<Vec<_>>()).sum();
            Ok(format!("{}x{} sum:{sum}", m.rows(), m.cols()))
        }),
        "sparse" => SparseMatrixReadOnly::new(key).and_then(|m| {
            let view = m.columns(num(a)..num(b))?;
            let mut n = 0;
            let mut sum = 0.0;
            for (_, col) in view.iter() {
                for (_, v) in col.non_nulls() {
                    n += 1;
                    sum += v;
                }
            }
            Ok(format!("nnz:{n} sum:{sum}"))
        }),
        "" => return String::new(),
        other => return format!("unknown:{other}"),
    };
    res.unwrap_or_else(|e| format!("err:{e:?}"))
}

#[no_mangle]
pub extern "C" fn _faasm_main() -> i32 {
    let input = call::input();
    let script = String::from_utf8_lossy(&input).into_owned();
    let mut out = String::new();
    for line in script.lines() {
        out.push_str(&run(line));
        out.push('\n');
    }
    call::set_output(out.as_bytes());
    0
}
