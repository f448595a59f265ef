//! Scripted host-interface exerciser used by the conformance tests.
//!
//! The input is a list of commands, one per line, whitespace separated. Each
//! command appends one result line to the output. Failures print `err:<code>`.

use faaslite_guest::{call, flags, fs, mem, net, state, time};

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn num(s: Option<&str>) -> usize {
    s.and_then(|s| s.parse().ok()).unwrap_or(0)
}

fn err<E: core::fmt::Debug>(e: E) -> String {
    format!("err:{e:?}")
}

fn unit<E: core::fmt::Debug>(r: Result<(), E>) -> String {
    match r {
        Ok(()) => "ok".into(),
        Err(e) => err(e),
    }
}

fn run(line: &str, rest_of_input: &str) -> String {
    let mut it = line.split_whitespace();
    let cmd = it.next().unwrap_or("");
    let a1 = it.next();
    let a2 = it.next();
    let a3 = it.next();
    match cmd {
        "input_len" => call::input().len().to_string(),
        "input_hash" => {
            let mut h = 0xcbf2_9ce4_8422_2325u64;
            for b in call::input() {
                h = (h ^ b as u64).wrapping_mul(0x100_0000_01b3);
            }
            format!("{h:016x}")
        }
        "echo_rest" => rest_of_input.to_string(),
        "output_twice" => {
            call::set_output(b"first");
            call::set_output(b"second");
            "unreachable".into()
        }
        "output_then_trap" => {
            call::set_output(b"partial");
            core::arch::wasm32::unreachable()
        }
        "chain" => {
            let name = a1.unwrap_or("");
            let arg = a2.unwrap_or("").replace('|', "\n");
            match call::chain(name, arg.as_bytes()) {
                Ok(h) => match (h.wait(), h.output()) {
                    (Ok(code), Ok(out)) => format!("code:{code} out:{}", text(&out).trim_end()),
                    (Err(e), _) | (_, Err(e)) => err(e),
                },
                Err(e) => err(e),
            }
        }
        "chain_n" => {
            let name = a1.unwrap_or("");
            let n = num(a2);
            let arg = a3.unwrap_or("").replace('|', "\n");
            let inputs: Vec<Vec<u8>> = (0..n).map(|_| arg.clone().into_bytes()).collect();
            match call::chain_all(name, &inputs) {
                Ok(handles) => {
                    let codes: Vec<String> = handles
                        .iter()
                        .map(|h| h.wait().map(|c| c.to_string()).unwrap_or_else(err))
                        .collect();
                    format!("codes:{}", codes.join(","))
                }
                Err(e) => err(e),
            }
        }
        "chain_twice_await" => {
            let name = a1.unwrap_or("");
            let arg = a2.unwrap_or("").replace('|', "\n");
            match call::chain(name, arg.as_bytes()) {
                Ok(h) => {
                    let first = h.wait();
                    let second = h.wait();
                    format!("{first:?} {second:?}")
                }
                Err(e) => err(e),
            }
        }
        "await" => {
            let id: i64 = a1.and_then(|s| s.parse().ok()).unwrap_or(0);
            match (call::CallHandle { call_id: id }).wait() {
                Ok(c) => format!("code:{c}"),
                Err(e) => err(e),
            }
        }
        "get" => {
            let key = a1.unwrap_or("");
            let len = num(a2);
            let f = if a3 == Some("create") { flags::CREATE_EMPTY } else { 0 };
            match state::get_state(key, len, f) {
                Ok(b) => text(b),
                Err(e) => err(e),
            }
        }
        "get_ptr" => match state::get_state(a1.unwrap_or(""), num(a2), flags::CREATE_EMPTY) {
            Ok(b) => (b.as_ptr() as usize).to_string(),
            Err(e) => err(e),
        },
        "get_off" => match state::get_state_offset(a1.unwrap_or(""), num(a2), num(a3), 0) {
            Ok(b) => text(b),
            Err(e) => err(e),
        },
        "size" => match state::state_size(a1.unwrap_or("")) {
            Ok(n) => n.to_string(),
            Err(e) => err(e),
        },
        "set" => unit(state::set_state(a1.unwrap_or(""), a2.unwrap_or("").as_bytes())),
        "set_off" => unit(state::set_state_offset(
            a1.unwrap_or(""),
            num(a2),
            a3.unwrap_or("").as_bytes(),
        )),
        "poke" => {
            // Direct write through the mapped pointer, bypassing the state API.
            match state::get_state(a1.unwrap_or(""), num(a2) + a3.unwrap_or("").len(), 0) {
                Ok(b) => {
                    let off = num(a2);
                    let v = a3.unwrap_or("").as_bytes();
                    b[off..off + v.len()].copy_from_slice(v);
                    "ok".into()
                }
                Err(e) => err(e),
            }
        }
        "push" => unit(state::push_state(a1.unwrap_or(""))),
        "push_off" => unit(state::push_state_offset(a1.unwrap_or(""), num(a2), num(a3))),
        "pull" => unit(state::pull_state(a1.unwrap_or(""))),
        "pull_off" => unit(state::pull_state_offset(a1.unwrap_or(""), num(a2), num(a3))),
        "append" => unit(state::append_state(a1.unwrap_or(""), a2.unwrap_or("").as_bytes())),
        "append_empty" => unit(state::append_state(a1.unwrap_or(""), b"")),
        "read_appended" => match state::read_appended(a1.unwrap_or("")) {
            Ok(segs) => segs.iter().map(|s| text(s)).collect::<Vec<_>>().join(","),
            Err(e) => err(e),
        },
        "lockr" => unit(state::lock_read(a1.unwrap_or(""))),
        "unlockr" => unit(state::unlock_read(a1.unwrap_or(""))),
        "lockw" => unit(state::lock_write(a1.unwrap_or(""))),
        "unlockw" => unit(state::unlock_write(a1.unwrap_or(""))),
        "glockr" => unit(state::lock_global_read(a1.unwrap_or(""))),
        "gunlockr" => unit(state::unlock_global_read(a1.unwrap_or(""))),
        "glockw" => unit(state::lock_global_write(a1.unwrap_or(""))),
        "gunlockw" => unit(state::unlock_global_write(a1.unwrap_or(""))),
        "pages" => mem::memory_pages().to_string(),
        "sbrk" => match mem::sbrk(num(a1)) {
            Some(old) => old.to_string(),
            None => "err:-1".into(),
        },
        "brk" => mem::brk(num(a1)).to_string(),
        "mmap" => match mem::mmap_anonymous(num(a1)) {
            Some(off) => off.to_string(),
            None => "err:-1".into(),
        },
        "munmap" => mem::munmap(num(a1), num(a2)).to_string(),
        "write_file" => unit(fs::write_file(a1.unwrap_or(""), a2.unwrap_or("").as_bytes())),
        "read_file" => match fs::read_file(a1.unwrap_or("")) {
            Ok(b) => text(&b),
            Err(e) => err(e),
        },
        "read_file_hex" => match fs::read_file(a1.unwrap_or("")) {
            Ok(b) => hex(&b),
            Err(e) => err(e),
        },
        "stat" => match fs::stat_size(a1.unwrap_or("")) {
            Ok(n) => n.to_string(),
            Err(e) => err(e),
        },
        "dup_read" => {
            // Reads one byte through the original fd, the rest through a dup;
            // the two share a cursor.
            match fs::File::open(a1.unwrap_or("")) {
                Ok(mut f) => {
                    let mut first = [0u8; 1];
                    let _ = f.read(&mut first);
                    match f.try_clone() {
                        Ok(mut g) => {
                            drop(f);
                            match g.read_to_end() {
                                Ok(rest) => format!("{}{}", text(&first), text(&rest)),
                                Err(e) => err(e),
                            }
                        }
                        Err(e) => err(e),
                    }
                }
                Err(e) => err(e),
            }
        }
        "append_file" => match fs::File::open_rw(a1.unwrap_or("")) {
            Ok(mut f) => {
                let end = f.size().unwrap_or(0);
                let _ = f.seek_start(end);
                match f.write(a2.unwrap_or("").as_bytes()) {
                    Ok(n) => n.to_string(),
                    Err(e) => err(e),
                }
            }
            Err(e) => err(e),
        },
        "socket" => match net::socket(num(a1) as i32, num(a2) as i32, 0) {
            Ok(fd) => format!("fd:{fd}"),
            Err(e) => err(e),
        },
        "connect" => match net::TcpStream::connect(a1.unwrap_or("")) {
            Ok(_) => "ok".into(),
            Err(e) => err(e),
        },
        "ping" => match net::TcpStream::connect(a1.unwrap_or("")) {
            Ok(mut s) => {
                let msg = a2.unwrap_or("ping").as_bytes();
                match s.send_all(msg).and_then(|_| s.recv_exact(msg.len())) {
                    Ok(back) => text(&back),
                    Err(e) => err(e),
                }
            }
            Err(e) => err(e),
        },
        "send_n" => match net::TcpStream::connect(a1.unwrap_or("")) {
            Ok(mut s) => {
                let data = vec![b'x'; num(a2)];
                let t0 = time::monotonic_ns();
                match s.send_all(&data) {
                    Ok(()) => format!("sent:{} ns:{}", data.len(), time::monotonic_ns() - t0),
                    Err(e) => err(e),
                }
            }
            Err(e) => err(e),
        },
        "time" => time::monotonic_ns().to_string(),
        "time_pair" => {
            let t1 = time::monotonic_ns();
            let t2 = time::monotonic_ns();
            format!("{t1} {t2}")
        }
        "time_resolution" => {
            // Smallest observed non-zero clock step.
            let mut best = u64::MAX;
            let mut last = time::monotonic_ns();
            for _ in 0..100_000 {
                let t = time::monotonic_ns();
                if t > last {
                    best = best.min(t - last);
                    last = t;
                }
            }
            best.to_string()
        }
        "random" => {
            let b = time::random_bytes(num(a1));
            if b.len() <= 64 {
                hex(&b)
            } else {
                format!("len:{}", b.len())
            }
        }
        "oob" => {
            let addr = (mem::memory_pages() * mem::PAGE_SIZE) as *mut u8;
            unsafe { core::ptr::write_volatile(addr, 1) };
            "unreachable".into()
        }
        "bad_ptr" => {
            unsafe { faaslite_guest::abi::write_call_output(0xFFFF_FF00usize as *const u8, 512) };
            "unreachable".into()
        }
        "" => String::new(),
        other => format!("unknown:{other}"),
    }
}

#[no_mangle]
pub extern "C" fn _faasm_main() -> i32 {
    let input = call::input();
    let script = String::from_utf8_lossy(&input).into_owned();
    let lines: Vec<&str> = script.lines().collect();
    let mut out = String::new();
    for (i, line) in lines.iter().enumerate() {
        let rest = lines[i + 1..].join("\n");
        if line.trim() == "echo_rest" {
            out.push_str(&rest);
            out.push('\n');
            break;
        }
        out.push_str(&run(line, &rest));
        out.push('\n');
    }
    call::set_output(out.as_bytes());
    0
}
