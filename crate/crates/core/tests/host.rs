use std::io::{Read, Write};
use std::net::TcpListener;
use std::sync::Arc;
use std::time::{Duration, Instant};

use faaslite_core::host::{CallDispatcher, EgressLimit, FileSource, HostEnv, InlineDispatcher, MemFiles};
use faaslite_core::sandbox::{validate_and_compile, Faaslet, FunctionDef, FunctionId, Invocation, TrapKind, PAGE_SIZE};
use faaslite_core::state::{GlobalTier, InMemoryGlobalTier, LocalTier, LocalTierConfig};
use faaslite_core::Error;

const USER: &str = "t";

fn def(name: &str, bytes: &[u8]) -> Arc<FunctionDef> {
    Arc::new(validate_and_compile(FunctionId::new(USER, name), bytes, 256).unwrap())
}

fn wat(name: &str, src: &str) -> Arc<FunctionDef> {
    def(name, &wat::parse_str(src).unwrap())
}

struct Rig {
    env: Arc<HostEnv>,
    global: Arc<InMemoryGlobalTier>,
    files: Arc<MemFiles>,
    dispatcher: InlineDispatcher,
    hostcalls: Arc<FunctionDef>,
}

fn rig_with(egress: EgressLimit) -> Rig {
    let global = Arc::new(InMemoryGlobalTier::new());
    let local = Arc::new(LocalTier::new(global.clone(), LocalTierConfig::default()));
    let dispatcher = InlineDispatcher::new();
    let files = Arc::new(MemFiles::default());
    files.insert(USER, "data/model.bin", &[1, 2, 3, 0xfe]).unwrap();
    let env = Arc::new(
        HostEnv::new(local, Arc::new(dispatcher.clone()))
            .with_files(files.clone())
            .with_egress(egress),
    );
    dispatcher.register(def("echo", faaslite_fixtures::ECHO));
    dispatcher.register(wat(
        "seven",
        r#"(module (func (export "_faasm_main") (result i32) i32.const 7))"#,
    ));
    dispatcher.register(wat(
        "boom",
        r#"(module (func (export "_faasm_main") (result i32) unreachable))"#,
    ));
    let hostcalls = def("hostcalls", faaslite_fixtures::HOSTCALLS);
    dispatcher.register(hostcalls.clone());
    Rig {
        env,
        global,
        files,
        dispatcher,
        hostcalls,
    }
}

fn rig() -> Rig {
    rig_with(EgressLimit::default())
}

impl Rig {
    fn faaslet(&self) -> Faaslet {
        Faaslet::instantiate(&self.hostcalls, &self.env).unwrap()
    }

    /// Runs a script in a fresh Faaslet and returns its output lines.
    fn run(&self, script: &str) -> Vec<String> {
        let inv = self.faaslet().invoke_input(script.as_bytes());
        assert!(inv.ok(), "{script}: {:?}", inv.trap);
        lines(&inv)
    }

    fn one(&self, cmd: &str) -> String {
        self.run(cmd).remove(0)
    }
}

fn lines(inv: &Invocation) -> Vec<String> {
    String::from_utf8(inv.output.clone())
        .unwrap()
        .lines()
        .map(str::to_string)
        .collect()
}

fn fnv(bytes: &[u8]) -> String {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h = (h ^ b as u64).wrapping_mul(0x100_0000_01b3);
    }
    format!("{h:016x}")
}

#[test]
fn call_input_round_trips() {
    let r = rig();
    assert_eq!(r.run("input_len\necho_rest\nx"), vec!["21", "x"]);
    let mut f = Faaslet::instantiate(&def("echo", faaslite_fixtures::ECHO), &r.env).unwrap();
    assert_eq!(f.invoke_input(b"").output, b"");
    let mut big = b"input_hash\n".to_vec();
    big.extend((0..1 << 20).map(|i: u32| (i.wrapping_mul(2654435761) >> 13) as u8 | 1));
    let inv = r.faaslet().invoke_input(&big);
    assert_eq!(lines(&inv)[0], fnv(&big));
}

#[test]
fn output_is_write_once() {
    let r = rig();
    let inv = r.faaslet().invoke_input(b"output_twice");
    assert_eq!(inv.trap.map(|t| t.kind), Some(TrapKind::HostError));
    assert!(inv.output.is_empty());
    let inv = r.faaslet().invoke_input(b"output_then_trap");
    assert!(inv.trap.is_some());
    assert_ne!(inv.return_code, 0);
    assert!(inv.output.is_empty());
    let mut silent = Faaslet::instantiate(&def("noop", faaslite_fixtures::NOOP), &r.env).unwrap();
    let inv = silent.invoke_input(b"ignored");
    assert!(inv.ok() && inv.output.is_empty());
}

#[test]
fn chaining() {
    let r = rig();
    assert_eq!(r.one("chain echo z"), "code:0 out:z");
    assert_eq!(r.one("chain seven x"), "code:7 out:");
    let boom = r.one("chain boom x");
    assert!(boom.starts_with("code:") && boom != "code:0 out:", "{boom}");
    assert_eq!(r.one("chain_n echo 8 w"), "codes:0,0,0,0,0,0,0,0");
    assert_eq!(r.one("chain missing x"), "err:UnknownFunction");
    assert_eq!(r.one("chain_twice_await seven x"), "Ok(7) Ok(7)");
    assert_eq!(r.one("await 12345"), "err:UnknownCall");
}

#[test]
fn chained_ids_are_children_of_the_call() {
    let r = rig();
    let mut f = r.faaslet();
    let inv = f.invoke_input(b"chain_n echo 3 a");
    assert_eq!(inv.chained.len(), 3);
    for id in &inv.chained {
        assert_eq!(r.dispatcher.await_call(USER, *id).unwrap(), 0);
        assert_eq!(r.dispatcher.output(USER, *id).unwrap(), b"a");
        // Other users cannot see the call.
        assert!(matches!(
            r.dispatcher.await_call("mallory", *id),
            Err(Error::UnknownCall(_))
        ));
    }
    let mut ids = inv.chained.clone();
    ids.sort();
    ids.dedup();
    assert_eq!(ids.len(), 3);
}

#[test]
fn memory_calls() {
    let r = rig();
    let out = r.run("pages\nsbrk 65536\npages\nsbrk 20000000\nmmap 131072\npages\nmunmap 0 65536\nbrk 0");
    let pages: usize = out[0].parse().unwrap();
    assert_eq!(out[1], (pages * PAGE_SIZE).to_string());
    assert_eq!(out[2], (pages + 1).to_string());
    assert_eq!(out[3], "err:-1");
    let mapped: usize = out[4].parse().unwrap();
    assert_eq!(mapped % PAGE_SIZE, 0);
    assert_eq!(mapped, (pages + 1) * PAGE_SIZE);
    assert_eq!(out[5], (pages + 3).to_string());
    assert_eq!(out[6], "true");
    assert_eq!(out[7], "true");
}

#[test]
fn out_of_range_pointers_trap() {
    let r = rig();
    let heap: Vec<u8> = (0..64).collect();
    let canary = heap.clone();
    for cmd in ["bad_ptr", "oob"] {
        let inv = r.faaslet().invoke_input(cmd.as_bytes());
        assert_eq!(inv.trap.map(|t| t.kind), Some(TrapKind::OutOfBounds), "{cmd}");
    }
    assert_eq!(heap, canary);
}

#[test]
fn state_entry_points() {
    let r = rig();
    let out = r.run(
        "get nokey 4\nget fresh 4 create\nset k hello\nget k 5\nsize k\nset_off k 1 EL\nget_off k 1 3\npush k\n\
         append log a\nappend log b\nread_appended log\nappend_empty log\nget log 1\nset k toolongvalue",
    );
    assert_eq!(out[0], "err:NotFound");
    assert_eq!(out[1], "\0\0\0\0");
    assert_eq!(&out[2..5], ["ok", "hello", "5"]);
    assert_eq!(&out[5..8], ["ok", "ELl", "ok"]);
    assert_eq!(r.global.read_all("t/k").unwrap(), b"hELlo");
    assert_eq!(&out[8..11], ["ok", "ok", "a,b"]);
    assert_eq!(out[11], "err:Invalid");
    assert_eq!(out[12], "err:Mode");
    assert_eq!(out[13], "err:Range");
}

#[test]
fn pointer_writes_reach_the_global_tier_on_push() {
    let r = rig();
    r.global.put("t/p", b"0123456789").unwrap();
    assert_eq!(r.run("poke p 3 ab\npush p\nget p 10"), vec!["ok", "ok", "012ab56789"]);
    assert_eq!(r.global.read_all("t/p").unwrap(), b"012ab56789");
    // Another Faaslet on the node maps the same key at the same replica.
    assert_eq!(r.one("get p 10"), "012ab56789");
    r.global.put("t/p", b"ABCDEFGHIJ").unwrap();
    assert_eq!(
        r.run("get p 10\npull p\nget p 10"),
        vec!["012ab56789", "ok", "ABCDEFGHIJ"]
    );
    assert_eq!(r.run("pull_off p 0 2\npush_off p 0 2"), vec!["ok", "ok"]);
}

#[test]
fn regions_are_mapped_once_per_faaslet() {
    let r = rig();
    r.global.put("t/r", &[5; 100]).unwrap();
    let out = r.run("get_ptr r 100\nget_ptr r 50\npages");
    assert_eq!(out[0], out[1]);
    let off: usize = out[0].parse().unwrap();
    assert_eq!(off % PAGE_SIZE, 0);
    assert_eq!(out[2], (off / PAGE_SIZE + 1).to_string());
}

#[test]
fn locks() {
    let r = rig();
    r.global.put("t/l", b"x").unwrap();
    let out = r.run(
        "lockw l\nlockw l\nunlockw l\nunlockr l\nlockr l\nunlockr l\n\
         glockw l\nglockw l\ngunlockw l\ngunlockr l\nglockr l\ngunlockr l\nlockw missing",
    );
    assert_eq!(
        out,
        vec![
            "ok",
            "err:Reentrant",
            "ok",
            "err:NotHeld",
            "ok",
            "ok",
            "ok",
            "err:Reentrant",
            "ok",
            "err:NotHeld",
            "ok",
            "ok",
            "err:NotFound"
        ]
    );
}

#[test]
fn locks_are_released_when_a_call_ends() {
    let r = rig();
    r.global.put("t/l", b"x").unwrap();
    assert_eq!(r.one("lockw l"), "ok");
    assert_eq!(r.one("glockw l"), "ok");
    // A second call would block forever if the locks had leaked.
    assert_eq!(r.run("lockw l\nglockw l"), vec!["ok", "ok"]);
}

#[test]
fn virtual_filesystem() {
    let r = rig();
    let out = r.run(
        "read_file_hex data/model.bin\nstat data/model.bin\nwrite_file tmp/out hello\nread_file tmp/out\n\
         read_file ../../etc/x\nread_file nothing\ndup_read data/model.bin\nappend_file data/model.bin XY\n\
         read_file_hex data/model.bin\nread_file /data/./sub/../model.bin",
    );
    assert_eq!(out[0], "010203fe");
    assert_eq!(out[1], "4");
    assert_eq!(&out[2..4], ["ok", "hello"]);
    assert_eq!(out[4], "err:WasiErrno(2)");
    assert_eq!(out[5], "err:WasiErrno(44)");
    assert_eq!(out[6], "\u{1}\u{2}\u{3}\u{fffd}");
    assert_eq!(out[7], "2");
    assert_eq!(out[8], "010203fe5859");
    assert_eq!(out[9], "\u{1}\u{2}\u{3}\u{fffd}XY");
    // The read-only source never changes; writes live in the overlay.
    assert_eq!(&*r.files.read(USER, "data/model.bin").unwrap(), &[1, 2, 3, 0xfe]);
    assert!(r.files.read(USER, "tmp/out").is_none());
    assert_eq!(r.env.overlay.contents(USER, "tmp/out").unwrap(), b"hello");
    // Overlays are per user.
    assert!(r.env.overlay.contents("someone", "tmp/out").is_none());
}

fn echo_server() -> (String, std::thread::JoinHandle<()>) {
    let l = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = l.local_addr().unwrap().to_string();
    let h = std::thread::spawn(move || {
        if let Ok((mut s, _)) = l.accept() {
            let mut buf = [0u8; 4096];
            while let Ok(n) = s.read(&mut buf) {
                if n == 0 || s.write_all(&buf[..n]).is_err() {
                    break;
                }
            }
        }
    });
    (addr, h)
}

#[test]
fn client_networking() {
    let r = rig();
    let (addr, h) = echo_server();
    assert_eq!(r.one(&format!("ping {addr} ping")), "ping");
    h.join().unwrap();
    assert_eq!(r.one("socket 1 1"), "err:Unsupported");
    assert_eq!(r.one("socket 2 2049"), "err:Unsupported");
    assert!(r.one("socket 2 1").starts_with("fd:"));
    assert_eq!(r.one("connect 10.255.255.1:80"), "err:Permission");
    assert_eq!(r.one("connect not-an-address"), "err:Invalid");
}

/// A sink that timestamps every read.
fn sink() -> (String, std::thread::JoinHandle<Vec<(Instant, usize)>>) {
    let l = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = l.local_addr().unwrap().to_string();
    let h = std::thread::spawn(move || {
        let mut log = Vec::new();
        if let Ok((mut s, _)) = l.accept() {
            let mut buf = [0u8; 65536];
            while let Ok(n) = s.read(&mut buf) {
                if n == 0 {
                    break;
                }
                log.push((Instant::now(), n));
            }
        }
        log
    });
    (addr, h)
}

#[test]
fn egress_is_rate_limited() {
    // 1 KiB/s with a 1 KiB burst: 10 KiB cannot finish in under 9 s.
    let r = rig_with(EgressLimit {
        rate_bytes_per_s: 1024.0,
        burst_bytes: 1024.0,
    });
    let (addr, h) = sink();
    let t0 = Instant::now();
    let out = r.one(&format!("send_n {addr} 10240"));
    let elapsed = t0.elapsed();
    assert!(out.starts_with("sent:10240"), "{out}");
    assert!(elapsed >= Duration::from_secs(9), "{elapsed:?}");
    let log = h.join().unwrap();
    assert_eq!(log.iter().map(|(_, n)| n).sum::<usize>(), 10240);
}

#[test]
fn egress_ceiling_holds_in_every_window() {
    let (rate, burst) = (64.0 * 1024.0, 16.0 * 1024.0);
    let r = rig_with(EgressLimit {
        rate_bytes_per_s: rate,
        burst_bytes: burst,
    });
    let (addr, h) = sink();
    let out = r.one(&format!("send_n {addr} 196608"));
    assert!(out.starts_with("sent:196608"), "{out}");
    let log = h.join().unwrap();
    // Receive timestamps can lag the send by scheduling delay; the window is
    // widened by that jitter allowance.
    let jitter = 0.05;
    for (i, (t, _)) in log.iter().enumerate() {
        let end = *t + Duration::from_secs(1);
        let bytes: usize = log[i..].iter().take_while(|(u, _)| *u <= end).map(|(_, n)| n).sum();
        assert!(
            bytes as f64 <= rate * (1.0 + jitter) + burst,
            "{bytes} bytes in one window"
        );
    }
}

#[test]
fn clock_is_per_call_and_monotonic() {
    let r = rig();
    let out = r.run("time\ntime_pair\ntime_resolution");
    let first: u64 = out[0].parse().unwrap();
    assert!(first < 1_000_000_000, "{first}");
    let pair: Vec<u64> = out[1].split(' ').map(|s| s.parse().unwrap()).collect();
    assert!(pair[1] >= pair[0] && pair[0] >= first);
    let res: u64 = out[2].parse().unwrap();
    assert!(res <= 1_000_000, "resolution {res} ns");
    // A later call on the same Faaslet starts from zero again.
    let mut f = r.faaslet();
    f.invoke_input(b"time_resolution");
    let again: u64 = lines(&f.invoke_input(b"time"))[0].parse().unwrap();
    assert!(again < 1_000_000_000);
}

#[test]
fn randomness() {
    let r = rig();
    let out = r.run("random 0\nrandom 16\nrandom 16\nrandom 1048576");
    assert_eq!(out[0], "");
    assert_eq!(out[1].len(), 32);
    // Two 128-bit draws collide with probability 2^-128.
    assert_ne!(out[1], out[2]);
    assert_eq!(out[3], "len:1048576");
}

#[test]
fn every_abi_import_is_bound() {
    let src = include_str!("../../guest-sdk/src/abi.rs");
    let mut ns = "";
    let mut seen = 0;
    for line in src.lines() {
        let line = line.trim();
        if let Some(rest) = line.strip_prefix("#[link(wasm_import_module = \"") {
            ns = rest.split('"').next().unwrap();
        }
        if let Some(rest) = line.strip_prefix("pub fn ") {
            let name = rest.split('(').next().unwrap();
            assert!(faaslite_core::host::is_host_import(ns, name), "{ns}.{name}");
            seen += 1;
        }
    }
    assert!(seen >= 40, "{seen}");
}
