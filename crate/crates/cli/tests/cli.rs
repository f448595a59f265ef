use std::collections::BTreeMap;
use std::net::TcpStream;
use std::path::Path;
use std::process::{Command, Output};

use faaslite_cli::client::{Client, Gateway};
use faaslite_cli::cluster::Cluster;

fn exe() -> &'static Path {
    Path::new(env!("CARGO_BIN_EXE_faaslite"))
}

fn faaslite(args: &[&str]) -> Output {
    Command::new(exe()).args(args).output().expect("run faaslite")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Call ids from `invoke` progress lines: `call <id> on <node> returned <code>`.
fn call_ids(err: &str) -> Vec<i64> {
    err.lines()
        .filter_map(|l| l.strip_prefix("call "))
        .map(|l| l.split(' ').next().unwrap().parse().unwrap())
        .collect()
}

#[test]
fn single_node_upload_invoke_status() {
    let cluster = Cluster::up(exe(), 1, |_| {}).unwrap();
    let node = cluster.urls()[0].clone();
    let up = faaslite(&["upload", "--node", &node, "alice", "echo", "--fixture", "echo"]);
    assert!(up.status.success(), "{}", stderr(&up));
    assert_eq!(stdout(&up).trim(), "version 1");

    let inv = faaslite(&["invoke", "--node", &node, "alice", "echo", "--input", "hello"]);
    assert!(inv.status.success(), "{}", stderr(&inv));
    assert_eq!(stdout(&inv), "hello");
    let id = call_ids(&stderr(&inv))[0];

    let st = faaslite(&["status", "--node", &node, &id.to_string()]);
    assert!(st.status.success(), "{}", stderr(&st));
    let v: serde_json::Value = serde_json::from_str(&stdout(&st)).unwrap();
    assert_eq!(v["status"], "completed");
    assert_eq!(v["return_code"], 0);

    let bg = faaslite(&[
        "invoke", "--node", &node, "alice", "echo", "--input", "later", "--async",
    ]);
    assert!(bg.status.success(), "{}", stderr(&bg));
    let id: i64 = stdout(&bg).trim().parse().unwrap();
    let done = Client::new(&node).wait(id, std::time::Duration::from_secs(30)).unwrap();
    assert_eq!(done["status"], "completed");
}

#[test]
fn upload_from_a_file_and_errors_exit_with_code_2() {
    let cluster = Cluster::up(exe(), 1, |_| {}).unwrap();
    let node = cluster.urls()[0].clone();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("noop.wasm");
    std::fs::write(&path, faaslite_fixtures::NOOP).unwrap();
    let up = faaslite(&["upload", "--node", &node, "bob", "noop", path.to_str().unwrap()]);
    assert!(up.status.success(), "{}", stderr(&up));
    let inv = faaslite(&["invoke", "--node", &node, "bob", "missing"]);
    assert_eq!(inv.status.code(), Some(2), "{}", stderr(&inv));
    let bad = faaslite(&["status", "--node", &node, "424242"]);
    assert_eq!(bad.status.code(), Some(2));
    std::fs::write(&path, b"not wasm").unwrap();
    let up = faaslite(&["upload", "--node", &node, "bob", "junk", path.to_str().unwrap()]);
    assert_eq!(up.status.code(), Some(2));
}

#[test]
fn trapping_call_exits_with_code_1() {
    let cluster = Cluster::up(exe(), 1, |_| {}).unwrap();
    let node = cluster.urls()[0].clone();
    faaslite(&["upload", "--node", &node, "t", "hostcalls", "--fixture", "hostcalls"]);
    let inv = faaslite(&["invoke", "--node", &node, "t", "hostcalls", "--input", "oob"]);
    assert_eq!(inv.status.code(), Some(1), "{}", stderr(&inv));
}

#[test]
fn three_nodes_take_calls_round_robin() {
    let cluster = Cluster::up(exe(), 3, |_| {}).unwrap();
    let urls = cluster.urls();
    let up = faaslite(&["upload", "--node", &urls[0], "rr", "echo", "--fixture", "echo"]);
    assert!(up.status.success(), "{}", stderr(&up));
    let mut args = vec!["invoke"];
    for u in &urls {
        args.extend(["--node", u.as_str()]);
    }
    args.extend(["rr", "echo", "--input", "x", "--repeat", "6"]);
    let inv = faaslite(&args);
    assert!(inv.status.success(), "{}", stderr(&inv));
    assert_eq!(stdout(&inv), "xxxxxx");
    let ids = call_ids(&stderr(&inv));
    assert_eq!(ids.len(), 6);
    let mut origins: BTreeMap<String, usize> = BTreeMap::new();
    for id in ids {
        let rec = Client::new(&urls[0]).status(id).unwrap().expect("record");
        *origins
            .entry(rec["origin_node"].as_str().unwrap().to_string())
            .or_default() += 1;
    }
    let expected: BTreeMap<String, usize> = cluster.nodes.iter().map(|n| (n.node_id.clone(), 2)).collect();
    assert_eq!(origins, expected);

    let gw = Gateway::new(&urls).unwrap();
    for _ in 0..3 {
        assert!(gw.invoke("rr", "echo", b"y").unwrap().ok());
    }
}

#[test]
fn teardown_kills_every_process() {
    let mut cluster = Cluster::up(exe(), 3, |_| {}).unwrap();
    assert_eq!(cluster.running(), 4);
    let addrs: Vec<_> = cluster.nodes.iter().map(|n| n.http).chain([cluster.global]).collect();
    cluster.down();
    assert_eq!(cluster.running(), 0);
    for a in addrs {
        assert!(TcpStream::connect(a).is_err(), "{a} still listening");
    }
}

#[test]
fn cluster_up_command_lists_nodes_and_exits() {
    let out = faaslite(&["cluster", "up", "--nodes", "2", "--duration", "1"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.starts_with("global tier "), "{text}");
    assert_eq!(text.lines().filter(|l| l.starts_with("node-")).count(), 2);
}

fn csv_header(path: &Path) -> Vec<String> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.headers().unwrap().iter().map(str::to_string).collect()
}

#[test]
fn bench_csv_schemas_are_stable() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let cs = faaslite(&[
        "bench",
        "coldstart",
        "--samples",
        "20",
        "--heavy-samples",
        "2",
        "--out",
        out,
    ]);
    assert!(matches!(cs.status.code(), Some(0 | 1)), "{}", stderr(&cs));
    assert_eq!(
        csv_header(&dir.path().join("coldstart.csv")),
        ["function", "phase", "samples", "median_us", "p99_us"]
    );
    assert!(dir.path().join("coldstart.gp").exists());

    let ch = faaslite(&[
        "bench",
        "churn",
        "--rate",
        "200",
        "--rate",
        "400",
        "--step-ms",
        "50",
        "--out",
        out,
    ]);
    assert!(matches!(ch.status.code(), Some(0 | 1)), "{}", stderr(&ch));
    let path = dir.path().join("churn.csv");
    assert_eq!(
        csv_header(&path),
        [
            "path",
            "target_per_s",
            "achieved_per_s",
            "median_us",
            "p99_us",
            "arrivals"
        ]
    );
    assert_eq!(csv::Reader::from_path(&path).unwrap().records().count(), 6);

    let sgd = faaslite(&[
        "bench",
        "sgd",
        "--workers",
        "2",
        "--epochs",
        "1",
        "--examples",
        "200",
        "--features",
        "20",
        "--nnz",
        "4",
        "--out",
        out,
    ]);
    assert!(matches!(sgd.status.code(), Some(0 | 1)), "{}", stderr(&sgd));
    assert_eq!(
        csv_header(&dir.path().join("sgd.csv")),
        [
            "mode",
            "workers",
            "epochs",
            "push_every",
            "examples",
            "features",
            "wall_s",
            "state_in",
            "state_out",
            "system_bytes",
            "wire_bytes",
            "billable_gb_s",
            "loss",
            "reference_loss",
            "accuracy"
        ]
    );
}

#[test]
fn bad_bench_arguments_are_infrastructure_errors() {
    assert_eq!(faaslite(&["bench", "churn", "--rate", "0"]).status.code(), Some(2));
    assert_eq!(
        faaslite(&["bench", "churn", "--function", "nope", "--rate", "10"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(faaslite(&["bench", "sgd", "--mode", "sideways"]).status.code(), Some(2));
}
