use std::io::{Read, Write};
use std::net::TcpStream;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use faaslite_core::node::{CallStatus, Node, NodeConfig, Pool};
use faaslite_core::sandbox::FunctionId;
use faaslite_core::scheduler::Decision;
use faaslite_core::snapshot;
use faaslite_core::state::{GlobalTier, InMemoryGlobalTier};

struct Cluster {
    _dir: tempfile::TempDir,
    global: Arc<InMemoryGlobalTier>,
    nodes: Vec<Node>,
}

fn cfg(id: &str, dir: &std::path::Path) -> NodeConfig {
    NodeConfig {
        node_id: id.into(),
        object_store: dir.to_path_buf(),
        heartbeat_ms: 100,
        ..NodeConfig::default()
    }
}

fn cluster_with(n: usize, tweak: impl Fn(&mut NodeConfig)) -> Cluster {
    let dir = tempfile::tempdir().unwrap();
    let global = Arc::new(InMemoryGlobalTier::new());
    let nodes: Vec<Node> = (0..n)
        .map(|i| {
            let mut c = cfg(&format!("n{i}"), dir.path());
            tweak(&mut c);
            Node::start_with_global(c, global.clone()).unwrap()
        })
        .collect();
    for a in &nodes {
        for b in &nodes {
            a.add_peer(b.node_id(), &b.bus_addr().to_string());
        }
    }
    Cluster {
        _dir: dir,
        global,
        nodes,
    }
}

fn cluster(n: usize) -> Cluster {
    cluster_with(n, |_| {})
}

/// Minimal HTTP/1.1 client: returns status and body.
fn http(addr: std::net::SocketAddr, method: &str, path: &str, body: &[u8]) -> (u16, Vec<u8>) {
    let mut s = TcpStream::connect(addr).unwrap();
    write!(
        s,
        "{method} {path} HTTP/1.1\r\nHost: x\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
        body.len()
    )
    .unwrap();
    s.write_all(body).unwrap();
    let mut out = Vec::new();
    s.read_to_end(&mut out).unwrap();
    let split = out.windows(4).position(|w| w == b"\r\n\r\n").unwrap();
    let head = String::from_utf8_lossy(&out[..split]).to_string();
    let code = head.split(' ').nth(1).unwrap().parse().unwrap();
    (code, out[split + 4..].to_vec())
}

#[test]
fn http_surface() {
    let c = cluster(1);
    let addr = c.nodes[0].http_addr();
    let (code, _) = http(addr, "POST", "/f/upload/u/noop", faaslite_fixtures::NOOP);
    assert_eq!(code, 200);
    assert!(snapshot::fetch(&*c.global, &FunctionId::new("u", "noop")).is_ok());
    let (code, body) = http(addr, "POST", "/f/upload/u/bad", b"\0asm garbage");
    assert_eq!(code, 400, "{}", String::from_utf8_lossy(&body));
    http(addr, "POST", "/f/upload/u/echo", faaslite_fixtures::ECHO);
    assert_eq!(http(addr, "POST", "/f/invoke/u/echo", b"q"), (200, b"q".to_vec()));
    let (code, id) = http(addr, "POST", "/f/invoke/u/echo?async=1", b"later");
    assert_eq!(code, 202);
    let id = String::from_utf8(id).unwrap().trim().to_string();
    let deadline = Instant::now() + Duration::from_secs(10);
    loop {
        let (code, body) = http(addr, "GET", &format!("/f/status/{id}"), b"");
        assert_eq!(code, 200);
        let v: serde_json::Value = serde_json::from_slice(&body).unwrap();
        if v["status"] == "completed" {
            assert_eq!(v["output"], hex::encode("later"));
            break;
        }
        assert!(Instant::now() < deadline);
        std::thread::sleep(Duration::from_millis(10));
    }
    assert_eq!(http(addr, "POST", "/f/invoke/u/nothing", b"").0, 404);
    assert_eq!(http(addr, "GET", "/f/status/12345", b"").0, 404);
    assert_eq!(http(addr, "GET", "/f/nope", b"").0, 404);
    let (code, _) = http(addr, "POST", "/f/file/u/data/in.txt", b"file body");
    assert_eq!(code, 200);
    let (code, m) = http(addr, "GET", "/f/metrics", b"");
    assert_eq!(code, 200);
    let m: serde_json::Value = serde_json::from_slice(&m).unwrap();
    assert!(m["calls"].as_u64().unwrap() >= 2);
}

#[test]
fn warm_path_reuses_one_faaslet() {
    let c = cluster(1);
    let n = &c.nodes[0];
    n.upload("u", "echo", faaslite_fixtures::ECHO).unwrap();
    let id = FunctionId::new("u", "echo");
    for i in 0..5 {
        let r = n.invoke("u", "echo", vec![i]).unwrap();
        assert_eq!((r.status, r.output), (CallStatus::Completed, vec![i]));
    }
    assert_eq!(n.pool_view(&id).faaslets, 1);
    let t = n.trace();
    assert_eq!(t[0].decision, Decision::ColdStartLocal);
    assert!(t[1..].iter().all(|e| e.decision == Decision::ExecuteLocal));
    assert!(n.scheduler().warm_sets().read(&id).unwrap().contains("n0"));
}

#[test]
fn pool_queue_is_fifo() {
    let pool = Arc::new(Pool::new(1));
    let id = FunctionId::new("u", "f");
    let held = pool.acquire(&id, 1);
    let order = Arc::new(Mutex::new(Vec::new()));
    let mut threads = Vec::new();
    for i in 0..6 {
        let (p, fid, order) = (pool.clone(), id.clone(), order.clone());
        threads.push(std::thread::spawn(move || {
            let (pool, id) = (p, fid);
            let s = pool.acquire(&id, 1);
            order.lock().unwrap().push(i);
            pool.release(s, None, 1);
        }));
        while pool.queued(&id) < i + 1 {
            std::thread::yield_now();
        }
    }
    pool.release(held, None, 1);
    for t in threads {
        t.join().unwrap();
    }
    assert_eq!(*order.lock().unwrap(), (0..6).collect::<Vec<_>>());
}

#[test]
fn capacity_bounds_concurrency() {
    let c = cluster_with(1, |c| c.capacity = 2);
    let n = &c.nodes[0];
    n.upload("u", "echo", faaslite_fixtures::ECHO).unwrap();
    let ids: Vec<i64> = (0..12).map(|i| n.invoke_async("u", "echo", vec![i]).unwrap()).collect();
    for (i, id) in ids.into_iter().enumerate() {
        let r = n.wait(id, Some(Duration::from_secs(30))).unwrap();
        assert_eq!(r.output, vec![i as u8]);
    }
    assert!(n.pool_view(&FunctionId::new("u", "echo")).faaslets <= 2);
}

const SPIN: &str = r#"(module
  (func (export "_faasm_main") (result i32) (local i32)
    i32.const 60000000 local.set 0
    (loop local.get 0 i32.const 1 i32.sub local.tee 0 br_if 0)
    i32.const 1))"#;
const TWO: &str = r#"(module (func (export "_faasm_main") (result i32) i32.const 2))"#;

#[test]
fn reupload_replaces_version_and_drains() {
    let c = cluster(1);
    let n = &c.nodes[0];
    assert_eq!(n.upload("u", "f", &wat::parse_str(SPIN).unwrap()).unwrap(), 1);
    let old = n.invoke_async("u", "f", vec![]).unwrap();
    while n.status(old).unwrap().status != CallStatus::Running {
        std::thread::sleep(Duration::from_millis(1));
    }
    assert_eq!(n.upload("u", "f", &wat::parse_str(TWO).unwrap()).unwrap(), 2);
    assert_eq!(n.wait(old, None).unwrap().return_code, 1);
    let r = n.invoke("u", "f", vec![]).unwrap();
    assert_eq!(r.return_code, 2, "{:?}", r.error);
    // The old instance was dropped on return; only the new one is pooled.
    assert_eq!(n.pool_view(&FunctionId::new("u", "f")).faaslets, 1);
}

#[test]
fn shared_calls_run_on_the_warm_peer() {
    let c = cluster(2);
    let (a, b) = (&c.nodes[0], &c.nodes[1]);
    b.upload("u", "echo", faaslite_fixtures::ECHO).unwrap();
    let cold = b.invoke("u", "echo", b"cold".to_vec()).unwrap();
    let warm = b.invoke("u", "echo", b"warm".to_vec()).unwrap();
    let shared = a.invoke("u", "echo", b"shared".to_vec()).unwrap();
    assert_eq!(
        (cold.output, warm.output, shared.output.clone()),
        (b"cold".to_vec(), b"warm".to_vec(), b"shared".to_vec())
    );
    assert_eq!(shared.executed_on.as_deref(), Some("n1"));
    assert_eq!(shared.origin_node, "n0");
    assert_eq!(a.pool_view(&FunctionId::new("u", "echo")).faaslets, 0);
    // The result is also visible from the executing node and the global tier.
    assert_eq!(b.status(shared.call_id).unwrap().status, CallStatus::Completed);
    assert!(c
        .global
        .size(&faaslite_core::node::result_key(shared.call_id))
        .unwrap()
        .is_some());
}

#[test]
fn unreachable_peer_falls_back_to_local() {
    // A slow heartbeat keeps the dead peer from being noticed before the call.
    let mut c = cluster_with(2, |c| c.heartbeat_ms = 60_000);
    c.nodes[1].upload("u", "echo", faaslite_fixtures::ECHO).unwrap();
    c.nodes[1].invoke("u", "echo", b"x".to_vec()).unwrap();
    let mut b = c.nodes.pop().unwrap();
    b.shutdown();
    let a = &c.nodes[0];
    let r = a.invoke("u", "echo", b"fallback".to_vec()).unwrap();
    assert_eq!(r.output, b"fallback");
    assert_eq!(r.executed_on.as_deref(), Some("n0"));
    assert!(matches!(a.trace()[0].decision, Decision::Share(_)));
    // Once marked down the peer is skipped without another attempt.
    let r = a.invoke("u", "echo", b"again".to_vec()).unwrap();
    assert_eq!(r.executed_on.as_deref(), Some("n0"));
    assert_eq!(a.trace()[1].decision, Decision::ExecuteLocal);
}

#[test]
fn heartbeats_mark_peers_alive() {
    let c = cluster(2);
    let deadline = Instant::now() + Duration::from_secs(5);
    while c.nodes[0].peer_last_seen("n1").is_none() {
        assert!(Instant::now() < deadline, "no heartbeat");
        std::thread::sleep(Duration::from_millis(20));
    }
}

#[test]
fn chained_child_result_routes_back_across_nodes() {
    let c = cluster(2);
    let (a, b) = (&c.nodes[0], &c.nodes[1]);
    a.upload("u", "hostcalls", faaslite_fixtures::HOSTCALLS).unwrap();
    b.upload("u", "echo", faaslite_fixtures::ECHO).unwrap();
    b.invoke("u", "echo", b"w".to_vec()).unwrap();
    let r = a
        .invoke("u", "hostcalls", b"chain echo z\nchain_n echo 4 k".to_vec())
        .unwrap();
    assert_eq!(String::from_utf8(r.output).unwrap(), "code:0 out:z\ncodes:0,0,0,0\n");
    let remote: Vec<_> = a.trace().into_iter().filter(|t| t.function.name == "echo").collect();
    assert_eq!(remote.len(), 5);
    assert!(remote.iter().all(|t| t.decision == Decision::Share("n1".into())));
}

const TRAP: &str = r#"(module (func (export "_faasm_main") (result i32) unreachable))"#;

#[test]
fn trapping_guest_leaves_the_node_serving() {
    let c = cluster(1);
    let n = &c.nodes[0];
    n.upload("u", "boom", &wat::parse_str(TRAP).unwrap()).unwrap();
    n.upload("u", "echo", faaslite_fixtures::ECHO).unwrap();
    for _ in 0..3 {
        let r = n.invoke("u", "boom", vec![]).unwrap();
        assert_eq!(r.status, CallStatus::Failed);
        assert!(r.error.unwrap().contains("unreachable"));
        assert_eq!(n.invoke("u", "echo", b"ok".to_vec()).unwrap().output, b"ok");
    }
    assert_eq!(http(n.http_addr(), "POST", "/f/invoke/u/boom", b"").0, 500);
}

#[test]
fn tenants_never_see_each_other() {
    let c = cluster(1);
    let n = &c.nodes[0];
    n.upload("u1", "secret", faaslite_fixtures::SECRET).unwrap();
    n.upload("u2", "secret", faaslite_fixtures::SECRET).unwrap();
    let clean: Vec<u8> = (1000..1016).map(|i| (i % 251) as u8).collect();
    for i in 0..20u8 {
        let (me, other) = if i % 2 == 0 { ("u1", "u2") } else { ("u2", "u1") };
        assert_eq!(
            n.invoke(me, "secret", [b"w".as_slice(), &[0xEE; 16]].concat())
                .unwrap()
                .return_code,
            0
        );
        assert_eq!(n.invoke(other, "secret", b"r16".to_vec()).unwrap().output, clean);
        assert_eq!(n.invoke(me, "secret", b"r16".to_vec()).unwrap().output, clean);
    }
}

#[test]
fn idle_faaslets_expire_and_leave_the_warm_set() {
    let c = cluster_with(1, |c| {
        c.warm_ttl_ms = 150;
        c.heartbeat_ms = 50;
    });
    let n = &c.nodes[0];
    n.upload("u", "echo", faaslite_fixtures::ECHO).unwrap();
    n.invoke("u", "echo", b"x".to_vec()).unwrap();
    let id = FunctionId::new("u", "echo");
    assert!(n.scheduler().warm_sets().read(&id).unwrap().contains("n0"));
    let deadline = Instant::now() + Duration::from_secs(5);
    while n.pool_view(&id).faaslets > 0 || n.scheduler().warm_sets().read(&id).unwrap().contains("n0") {
        assert!(Instant::now() < deadline, "never evicted");
        std::thread::sleep(Duration::from_millis(20));
    }
    assert_eq!(n.invoke("u", "echo", b"y".to_vec()).unwrap().output, b"y");
}

#[test]
fn billing_accumulates_per_call() {
    let c = cluster(1);
    let n = &c.nodes[0];
    assert_eq!(n.meter().gb_seconds(), 0.0);
    n.upload("u", "echo", faaslite_fixtures::ECHO).unwrap();
    n.invoke("u", "echo", vec![1]).unwrap();
    assert_eq!(n.meter().calls(), 1);
    assert!(n.meter().gb_seconds() > 0.0);
}
