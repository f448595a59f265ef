use std::sync::Arc;

use faaslite_core::host::{HostEnv, NoChaining};
use faaslite_core::sandbox::{validate_and_compile, Faaslet, FunctionDef, FunctionId, TrapKind};
use faaslite_core::state::{CountingGlobalTier, GlobalTier, InMemoryGlobalTier, LocalTier, LocalTierConfig, Traffic};
use faaslite_guest::codec::f64s_to_bytes;
use faaslite_guest::layout::{self, chunk_span, DenseLayout, SparseLayout};
use proptest::prelude::*;

const CHUNK: usize = 800;

struct Rig {
    global: Arc<dyn GlobalTier>,
    traffic: Arc<Traffic>,
    def: Arc<FunctionDef>,
    nodes: Vec<Arc<HostEnv>>,
}

fn rig(nodes: usize) -> Rig {
    let counting = Arc::new(CountingGlobalTier::new(Arc::new(InMemoryGlobalTier::new())));
    let traffic = counting.traffic();
    let global: Arc<dyn GlobalTier> = counting;
    let cfg = LocalTierConfig {
        chunk_size: CHUNK,
        ..LocalTierConfig::default()
    };
    let nodes = (0..nodes)
        .map(|_| {
            let local = Arc::new(LocalTier::new(global.clone(), cfg.clone()));
            Arc::new(HostEnv::new(local, Arc::new(NoChaining)))
        })
        .collect();
    let def = Arc::new(validate_and_compile(FunctionId::new("u", "ddo"), faaslite_fixtures::DDO, 256).unwrap());
    Rig {
        global,
        traffic,
        def,
        nodes,
    }
}

impl Rig {
    fn run(&self, node: usize, script: &str) -> Vec<String> {
        let mut f = Faaslet::instantiate(&self.def, &self.nodes[node]).unwrap();
        let inv = f.invoke_input(script.as_bytes());
        assert!(inv.ok(), "{script}: {:?}", inv.trap);
        String::from_utf8(inv.output)
            .unwrap()
            .lines()
            .map(str::to_string)
            .collect()
    }

    fn bytes_in(&self) -> u64 {
        self.traffic.snapshot().state_in
    }
}

#[test]
fn adds_are_seen_by_co_located_faaslets_only_after_push_elsewhere() {
    let r = rig(2);
    r.global.put("u/w", &f64s_to_bytes(&[0.0; 4])).unwrap();
    assert_eq!(r.run(0, "vec_add w 4 1 2.5"), vec!["2.5"]);
    // Same node, different Faaslet: the region is shared.
    assert_eq!(r.run(0, "vec_get w 4 1"), vec!["2.5"]);
    // Remote node before any push: stale.
    assert_eq!(r.run(1, "vec_get w 4 1"), vec!["0"]);
    assert_eq!(r.run(0, "vec_push w 4"), vec!["ok"]);
    assert_eq!(r.run(1, "vec_get w 4 1"), vec!["0"]);
    assert_eq!(r.run(1, "vec_pull w 4\nvec_get w 4 1"), vec!["ok", "2.5"]);
}

#[test]
fn vector_index_out_of_range_traps() {
    let r = rig(1);
    r.global.put("u/w", &f64s_to_bytes(&[0.0; 4])).unwrap();
    let mut f = Faaslet::instantiate(&r.def, &r.nodes[0]).unwrap();
    let inv = f.invoke_input(b"vec_get w 4 4");
    assert_eq!(inv.trap.map(|t| t.kind), Some(TrapKind::Unreachable));
    assert_eq!(r.run(0, "vec_get w 4 3"), vec!["0"]);
}

fn dense_fixture(r: &Rig, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    let columns: Vec<Vec<f64>> = (0..cols)
        .map(|c| (0..rows).map(|i| (c * rows + i) as f64).collect())
        .collect();
    let (l, bytes) = DenseLayout::encode(&columns);
    r.global
        .put(&format!("u/{}", layout::meta_key("m")), &l.encode_meta())
        .unwrap();
    r.global.put("u/m", &bytes).unwrap();
    columns
}

#[test]
fn column_views_pull_only_covering_chunks() {
    let r = rig(1);
    // 100 columns of 10 f64s: 8000 bytes in 10 chunks of 800.
    let columns = dense_fixture(&r, 10, 100);
    let meta = DenseLayout::encode(&columns).0.encode_meta().len() as u64;
    let l = DenseLayout::encode(&columns).0;
    let cover = |a: usize, b: usize| -> u64 {
        let bytes = l.column_bytes(a..b);
        chunk_span(bytes.start, bytes.len(), CHUNK)
            .map(|i| layout::chunk_len(i, CHUNK, l.value_len()) as u64)
            .sum()
    };
    let before = r.bytes_in();
    let out = r.run(0, "dense m 10 20");
    let expect: f64 = columns[10..20].iter().flatten().sum();
    assert_eq!(out, vec![format!("10x100 sum:{expect}")]);
    let pulled = r.bytes_in() - before;
    assert_eq!(pulled, meta + cover(10, 20));
    assert!(pulled - meta <= 2 * CHUNK as u64);
    // Repeating the request moves nothing.
    let before = r.bytes_in();
    r.run(0, "dense m 10 20");
    assert_eq!(r.bytes_in() - before, 0);
    // The full range pulls the rest.
    let before = r.bytes_in();
    r.run(0, "dense m 0 100");
    assert_eq!(r.bytes_in() - before, 8000 - cover(10, 20));
}

#[test]
fn sparse_column_ranges_match_the_source() {
    let r = rig(1);
    let rows = 50;
    let columns: Vec<Vec<(u32, f64)>> = (0..200u32)
        .map(|c| {
            (0..rows as u32)
                .filter(|i| (i * 7 + c * 3) % 11 == 0)
                .map(|i| (i, (c + i) as f64 * 0.5))
                .collect()
        })
        .collect();
    let enc = SparseLayout::encode(rows, &columns, CHUNK);
    r.global
        .put(&format!("u/{}", layout::meta_key("s")), &enc.meta)
        .unwrap();
    r.global
        .put(&format!("u/{}", layout::colptr_key("s")), &enc.colptr)
        .unwrap();
    r.global
        .put(&format!("u/{}", layout::entries_key("s")), &enc.entries)
        .unwrap();
    for (a, b) in [(0, 1), (13, 77), (150, 200), (40, 40)] {
        let nnz: usize = columns[a..b].iter().map(Vec::len).sum();
        let sum = columns[a..b].iter().flatten().fold(0.0, |acc, (_, v)| acc + v);
        assert_eq!(
            r.run(0, &format!("sparse s {a} {b}")),
            vec![format!("nnz:{nnz} sum:{sum}")]
        );
    }
    assert_eq!(r.run(0, "sparse s 10 201"), vec!["err:Range"]);
}

#[derive(Debug, Clone)]
enum Op {
    Add(usize, i32),
    Push,
    Pull,
    ReadLocal,
    ReadRemote,
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        (0usize..8, -5i32..5).prop_map(|(i, d)| Op::Add(i, d)),
        Just(Op::Push),
        Just(Op::Pull),
        Just(Op::ReadLocal),
        Just(Op::ReadRemote),
    ]
}

fn fmt(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    /// The vector behaves like a local copy that reaches the global value
    /// only on push, and is refreshed from it only on pull.
    #[test]
    fn vector_matches_explicit_push_pull_model(ops in proptest::collection::vec(op(), 1..12)) {
        let r = rig(2);
        r.global.put("u/w", &f64s_to_bytes(&[0.0; 8])).unwrap();
        let mut local = [0.0f64; 8];
        let mut global = [0.0f64; 8];
        let mut script = Vec::new();
        let mut expect = Vec::new();
        for op in &ops {
            match *op {
                Op::Add(i, d) => {
                    local[i] += d as f64;
                    script.push(format!("vec_add w 8 {i} {d}"));
                    expect.push(local[i].to_string());
                }
                Op::Push => {
                    global = local;
                    script.push("vec_push w 8".into());
                    expect.push("ok".into());
                }
                Op::Pull => {
                    local = global;
                    script.push("vec_pull w 8".into());
                    expect.push("ok".into());
                }
                Op::ReadLocal => {
                    script.push("vec_all w 8".into());
                    expect.push(fmt(&local));
                }
                Op::ReadRemote => {
                    // Flush the script so far, then read through a fresh
                    // pull on the other node.
                    prop_assert_eq!(r.run(0, &script.join("\n")), std::mem::take(&mut expect));
                    script.clear();
                    prop_assert_eq!(r.run(1, "vec_pull w 8\nvec_all w 8"), vec!["ok".to_string(), fmt(&global)]);
                }
            }
        }
        prop_assert_eq!(r.run(0, &script.join("\n")), expect);
    }
}
