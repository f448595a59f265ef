//! Client-side stream sockets with an allow-list and egress shaping.

use std::io::{Read, Write};
use std::net::{IpAddr, SocketAddr, TcpStream};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use socket2::{Domain, Protocol, SockAddr, Socket as RawSocket, Type};
use wasmtime::Linker;

use super::fs::FdEntry;
use super::{neg, read_guest, read_str, write_guest, Ctx, FAASM_NAMESPACE};
use crate::error::{Error, Result};
use crate::sandbox::FaasletData;

pub const AF_INET: i32 = 2;
pub const AF_INET6: i32 = 10;
pub const SOCK_STREAM: i32 = 1;
const IPPROTO_TCP: i32 = 6;
const CONNECT_TIMEOUT: Duration = Duration::from_secs(5);

/// One allowed destination: `loopback`, `*`, an address, or `address:port`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum AllowRule {
    Loopback,
    Any,
    Host(IpAddr),
    Endpoint(SocketAddr),
}

impl TryFrom<String> for AllowRule {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, String> {
        match s.as_str() {
            "loopback" => Ok(AllowRule::Loopback),
            "*" => Ok(AllowRule::Any),
            _ => s
                .parse::<SocketAddr>()
                .map(AllowRule::Endpoint)
                .or_else(|_| s.parse::<IpAddr>().map(AllowRule::Host))
                .map_err(|_| format!("bad allow-list entry {s:?}")),
        }
    }
}

impl From<AllowRule> for String {
    fn from(r: AllowRule) -> String {
        match r {
            AllowRule::Loopback => "loopback".into(),
            AllowRule::Any => "*".into(),
            AllowRule::Host(ip) => ip.to_string(),
            AllowRule::Endpoint(a) => a.to_string(),
        }
    }
}

impl AllowRule {
    fn permits(&self, addr: &SocketAddr) -> bool {
        match self {
            AllowRule::Loopback => addr.ip().is_loopback(),
            AllowRule::Any => true,
            AllowRule::Host(ip) => addr.ip() == *ip,
            AllowRule::Endpoint(a) => a == addr,
        }
    }
}

/// Outbound destinations guests may connect to. Loopback only by default.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetPolicy {
    pub allow: Vec<AllowRule>,
}

impl Default for NetPolicy {
    fn default() -> Self {
        NetPolicy {
            allow: vec![AllowRule::Loopback],
        }
    }
}

impl NetPolicy {
    pub fn permits(&self, addr: &SocketAddr) -> bool {
        self.allow.iter().any(|r| r.permits(addr))
    }
}

/// Per-Faaslet network shaping parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EgressLimit {
    pub rate_bytes_per_s: f64,
    pub burst_bytes: f64,
}

impl Default for EgressLimit {
    fn default() -> Self {
        EgressLimit {
            rate_bytes_per_s: 100.0 * 1024.0 * 1024.0,
            burst_bytes: 1024.0 * 1024.0,
        }
    }
}

/// Token bucket. Over any window `W`, at most `rate·W + burst` bytes are
/// granted, provided each request is at most `burst` bytes.
#[derive(Debug, Clone)]
pub struct TokenBucket {
    rate: f64,
    burst: f64,
    tokens: f64,
    last: Option<Instant>,
}

impl TokenBucket {
    pub fn new(rate_bytes_per_s: f64, burst_bytes: f64) -> Self {
        TokenBucket {
            rate: rate_bytes_per_s,
            burst: burst_bytes.max(1.0),
            tokens: burst_bytes.max(1.0),
            last: None,
        }
    }

    pub fn burst(&self) -> usize {
        self.burst as usize
    }

    /// Largest single request the bucket serves at once.
    pub fn chunk(&self, want: usize) -> usize {
        want.min(self.burst())
    }

    /// Debits `n` bytes at `now` and returns how long the caller must wait
    /// before using them.
    pub fn reserve(&mut self, n: usize, now: Instant) -> Duration {
        if let Some(last) = self.last {
            let dt = now.saturating_duration_since(last).as_secs_f64();
            self.tokens = (self.tokens + dt * self.rate).min(self.burst);
        }
        self.last = Some(now.max(self.last.unwrap_or(now)));
        self.tokens -= n as f64;
        if self.tokens >= 0.0 {
            Duration::ZERO
        } else {
            Duration::from_secs_f64(-self.tokens / self.rate)
        }
    }
}

pub(crate) struct Socket {
    domain: i32,
    source: Option<SocketAddr>,
    stream: Option<TcpStream>,
}

fn resolve(caller: &Ctx<'_>, ptr: i32, len: i32) -> wasmtime::Result<Result<SocketAddr>> {
    Ok(match read_str(caller, ptr, len)? {
        Some(s) => s
            .trim()
            .parse::<SocketAddr>()
            .map_err(|_| Error::Invalid(format!("bad socket address {s:?}"))),
        None => Err(Error::Invalid("address is not UTF-8".into())),
    })
}

fn family(addr: &SocketAddr) -> i32 {
    if addr.is_ipv4() {
        AF_INET
    } else {
        AF_INET6
    }
}

fn socket_of(caller: &Ctx<'_>, fd: i32) -> Result<Arc<Mutex<Socket>>> {
    caller
        .data()
        .host
        .fds
        .socket(fd)
        .ok_or_else(|| Error::Invalid(format!("{fd} is not a socket")))
}

fn connect(caller: &Ctx<'_>, fd: i32, addr: Result<SocketAddr>) -> Result<()> {
    let addr = addr?;
    if !caller.data().host.env.net.permits(&addr) {
        return Err(Error::Permission(format!("{addr} is not allow-listed")));
    }
    let sock = socket_of(caller, fd)?;
    let mut s = sock.lock();
    if s.stream.is_some() {
        return Err(Error::Invalid("socket already connected".into()));
    }
    if family(&addr) != s.domain {
        return Err(Error::Invalid(format!("{addr} does not match the socket family")));
    }
    let raw = RawSocket::new(Domain::for_address(addr), Type::STREAM, Some(Protocol::TCP))?;
    if let Some(src) = s.source {
        raw.bind(&SockAddr::from(src))?;
    }
    raw.connect_timeout(&SockAddr::from(addr), CONNECT_TIMEOUT)
        .map_err(|e| Error::Transport(format!("connect {addr}: {e}")))?;
    let stream: TcpStream = raw.into();
    stream.set_nodelay(true)?;
    s.stream = Some(stream);
    Ok(())
}

fn bind(caller: &Ctx<'_>, fd: i32, addr: Result<SocketAddr>) -> Result<()> {
    let addr = addr?;
    let sock = socket_of(caller, fd)?;
    let mut s = sock.lock();
    if s.stream.is_some() || family(&addr) != s.domain {
        return Err(Error::Invalid(format!("cannot bind {addr}")));
    }
    s.source = Some(addr);
    Ok(())
}

fn stream(sock: &Arc<Mutex<Socket>>) -> Result<TcpStream> {
    let s = sock.lock();
    let stream = s
        .stream
        .as_ref()
        .ok_or_else(|| Error::Invalid("socket not connected".into()))?;
    Ok(stream.try_clone()?)
}

/// Waits for the bucket to cover `n` bytes.
fn debit(caller: &mut Ctx<'_>, n: usize) {
    let wait = caller.data_mut().host.bucket.reserve(n, Instant::now());
    if !wait.is_zero() {
        std::thread::sleep(wait);
    }
}

fn send(caller: &mut Ctx<'_>, fd: i32, data: &[u8]) -> Result<usize> {
    let sock = socket_of(caller, fd)?;
    let mut stream = stream(&sock)?;
    let n = caller.data().host.bucket.chunk(data.len());
    debit(caller, n);
    stream
        .write_all(&data[..n])
        .map_err(|e| Error::Transport(format!("send: {e}")))?;
    Ok(n)
}

fn recv(caller: &mut Ctx<'_>, fd: i32, max: usize) -> Result<Vec<u8>> {
    let sock = socket_of(caller, fd)?;
    let mut stream = stream(&sock)?;
    let mut buf = vec![0u8; caller.data().host.bucket.chunk(max)];
    let n = stream
        .read(&mut buf)
        .map_err(|e| Error::Transport(format!("recv: {e}")))?;
    buf.truncate(n);
    debit(caller, n);
    Ok(buf)
}

pub(super) fn add_to_linker(linker: &mut Linker<FaasletData>) -> wasmtime::Result<()> {
    let ns = FAASM_NAMESPACE;
    linker.func_wrap(
        ns,
        "socket",
        |mut caller: Ctx<'_>, domain: i32, ty: i32, protocol: i32| {
            if domain != AF_INET && domain != AF_INET6 {
                return Ok(neg(&Error::Unsupported(format!("address family {domain}"))));
            }
            if ty != SOCK_STREAM || (protocol != 0 && protocol != IPPROTO_TCP) {
                return Ok(neg(&Error::Unsupported(format!("socket type {ty}/{protocol}"))));
            }
            let sock = Socket {
                domain,
                source: None,
                stream: None,
            };
            Ok(caller
                .data_mut()
                .host
                .fds
                .insert(FdEntry::Socket(Arc::new(Mutex::new(sock)))))
        },
    )?;
    linker.func_wrap(ns, "connect", |caller: Ctx<'_>, fd: i32, addr: i32, len: i32| {
        let addr = resolve(&caller, addr, len)?;
        Ok(super::status(connect(&caller, fd, addr)))
    })?;
    linker.func_wrap(ns, "bind", |caller: Ctx<'_>, fd: i32, addr: i32, len: i32| {
        let addr = resolve(&caller, addr, len)?;
        Ok(super::status(bind(&caller, fd, addr)))
    })?;
    linker.func_wrap(
        ns,
        "send",
        |mut caller: Ctx<'_>, fd: i32, buf: i32, len: i32, flags: i32| {
            if flags != 0 {
                return Ok(neg(&Error::Unsupported(format!("send flags {flags:#x}"))) as i64);
            }
            let data = read_guest(&caller, buf, len)?;
            Ok(match send(&mut caller, fd, &data) {
                Ok(n) => n as i64,
                Err(e) => neg(&e) as i64,
            })
        },
    )?;
    linker.func_wrap(
        ns,
        "recv",
        |mut caller: Ctx<'_>, fd: i32, buf: i32, len: i32, flags: i32| {
            if flags != 0 {
                return Ok(neg(&Error::Unsupported(format!("recv flags {flags:#x}"))) as i64);
            }
            // Validate the destination before blocking on the network.
            read_guest(&caller, buf, len)?;
            match recv(&mut caller, fd, len as u32 as usize) {
                Ok(data) => {
                    write_guest(&mut caller, buf, &data)?;
                    Ok(data.len() as i64)
                }
                Err(e) => Ok(neg(&e) as i64),
            }
        },
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn allow_rules_parse() {
        let p: NetPolicy = serde_json::from_str(r#"{"allow":["loopback","10.0.0.1","10.0.0.2:80","*"]}"#).unwrap();
        assert_eq!(p.allow.len(), 4);
        let only_lo = NetPolicy::default();
        assert!(only_lo.permits(&"127.0.0.1:9".parse().unwrap()));
        assert!(!only_lo.permits(&"10.0.0.1:9".parse().unwrap()));
        let host = NetPolicy {
            allow: vec![AllowRule::Endpoint("10.0.0.2:80".parse().unwrap())],
        };
        assert!(host.permits(&"10.0.0.2:80".parse().unwrap()));
        assert!(!host.permits(&"10.0.0.2:81".parse().unwrap()));
    }

    #[test]
    fn bucket_arithmetic() {
        // 1 KiB/s with a 1 KiB burst: 10 KiB needs 9 s of refill.
        let mut b = TokenBucket::new(1024.0, 1024.0);
        let t0 = Instant::now();
        let mut now = t0;
        for _ in 0..10 {
            now += b.reserve(1024, now);
        }
        let secs = (now - t0).as_secs_f64();
        assert!((secs - 9.0).abs() < 1e-6, "{secs}");
    }

    proptest! {
        /// Bytes granted by time t never exceed rate·t + burst.
        #[test]
        fn bucket_bound(rate in 100.0f64..10_000.0, burst in 1.0f64..4096.0,
                        reqs in proptest::collection::vec((1usize..8192, 0u64..2_000_000), 1..60)) {
            let mut b = TokenBucket::new(rate, burst);
            let t0 = Instant::now();
            let mut now = t0;
            let mut granted = 0f64;
            for (want, gap_us) in reqs {
                now += Duration::from_micros(gap_us);
                let n = b.chunk(want);
                now += b.reserve(n, now);
                granted += n as f64;
                let elapsed = (now - t0).as_secs_f64();
                prop_assert!(granted <= rate * elapsed + burst.max(1.0) + 1e-6,
                    "granted {granted} by {elapsed}s");
            }
        }
    }
}
