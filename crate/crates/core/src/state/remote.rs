use std::io::{BufReader, BufWriter};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use faaslite_guest::codec;
use faaslite_guest::Errno;
use parking_lot::Mutex;

use super::global::{GlobalTier, LockMode, LockToken};
use super::wire::{self, Request, Response};
use crate::error::{Error, Result};

/// Byte counters observed at the socket.
#[derive(Default, Debug)]
pub struct WireStats {
    pub frames: AtomicU64,
    pub bytes_out: AtomicU64,
    pub bytes_in: AtomicU64,
    /// Payload bytes of data-carrying frames, per direction.
    pub data_out: AtomicU64,
    pub data_in: AtomicU64,
}

impl WireStats {
    pub fn data_total(&self) -> u64 {
        self.data_out.load(Ordering::Relaxed) + self.data_in.load(Ordering::Relaxed)
    }
}

/// Client for a [`GlobalTierServer`]. Connections are pooled so that a call
/// blocked on a lock does not stall other callers.
pub struct RemoteGlobalTier {
    addr: SocketAddr,
    pool: Mutex<Vec<TcpStream>>,
    stats: Arc<WireStats>,
}

impl RemoteGlobalTier {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self> {
        let addr = addr
            .to_socket_addrs()
            .map_err(|e| Error::Transport(e.to_string()))?
            .next()
            .ok_or_else(|| Error::Transport("no address".into()))?;
        let client = RemoteGlobalTier {
            addr,
            pool: Mutex::new(Vec::new()),
            stats: Arc::new(WireStats::default()),
        };
        let conn = client.open()?;
        client.pool.lock().push(conn);
        Ok(client)
    }

    pub fn stats(&self) -> Arc<WireStats> {
        self.stats.clone()
    }

    fn open(&self) -> Result<TcpStream> {
        let s = TcpStream::connect_timeout(&self.addr, Duration::from_secs(5))
            .map_err(|e| Error::Transport(format!("{}: {e}", self.addr)))?;
        s.set_nodelay(true).ok();
        Ok(s)
    }

    fn call(&self, op: u8, key: &str, offset: u64, payload: &[u8]) -> Result<Vec<u8>> {
        let conn = self.pool.lock().pop();
        let mut conn = match conn {
            Some(c) => c,
            None => self.open()?,
        };
        let req = Request {
            op,
            key: key.to_string(),
            offset,
            payload: payload.to_vec(),
        };
        let frame = req.encode();
        let resp = (|| -> std::io::Result<Response> {
            wire::write_all(&mut conn, &frame)?;
            let body =
                wire::read_frame(&mut conn)?.ok_or_else(|| std::io::Error::from(std::io::ErrorKind::UnexpectedEof))?;
            Response::decode(&body)
        })();
        let resp = resp.map_err(|e| Error::Transport(e.to_string()))?;
        self.pool.lock().push(conn);

        let s = &self.stats;
        s.frames.fetch_add(1, Ordering::Relaxed);
        s.bytes_out.fetch_add(frame.len() as u64, Ordering::Relaxed);
        s.bytes_in.fetch_add(5 + resp.payload.len() as u64, Ordering::Relaxed);
        if resp.status != wire::STATUS_OK {
            let errno = Errno::from_code(resp.status as i32).unwrap_or(Errno::Invalid);
            return Err(Error::from_errno(
                errno,
                String::from_utf8_lossy(&resp.payload).into_owned(),
            ));
        }
        if wire::sends_data(op) {
            s.data_out.fetch_add(payload.len() as u64, Ordering::Relaxed);
        }
        if wire::receives_data(op) {
            s.data_in.fetch_add(resp.payload.len() as u64, Ordering::Relaxed);
        }
        Ok(resp.payload)
    }
}

fn u64_arg(v: u64) -> [u8; 8] {
    v.to_be_bytes()
}

fn parse_u64(p: &[u8]) -> Result<u64> {
    p.try_into()
        .map(u64::from_be_bytes)
        .map_err(|_| Error::Transport("malformed u64 payload".into()))
}

impl GlobalTier for RemoteGlobalTier {
    fn read(&self, key: &str, off: u64, len: u64) -> Result<Vec<u8>> {
        self.call(wire::READ, key, off, &u64_arg(len))
    }

    fn write(&self, key: &str, off: u64, data: &[u8]) -> Result<()> {
        self.call(wire::WRITE, key, off, data).map(drop)
    }

    fn put(&self, key: &str, data: &[u8]) -> Result<()> {
        self.call(wire::PUT, key, 0, data).map(drop)
    }

    fn delete(&self, key: &str) -> Result<()> {
        self.call(wire::DELETE, key, 0, &[]).map(drop)
    }

    fn append(&self, key: &str, data: &[u8]) -> Result<()> {
        self.call(wire::APPEND, key, 0, data).map(drop)
    }

    fn read_appended(&self, key: &str) -> Result<Vec<Vec<u8>>> {
        let p = self.call(wire::READAPP, key, 0, &[])?;
        codec::decode_segments(&p).ok_or_else(|| Error::Transport("malformed segments".into()))
    }

    fn size(&self, key: &str) -> Result<Option<u64>> {
        let p = self.call(wire::SIZE, key, 0, &[])?;
        if p.is_empty() {
            Ok(None)
        } else {
            parse_u64(&p).map(Some)
        }
    }

    fn lock(&self, key: &str, mode: LockMode, lease: Duration, timeout: Duration) -> Result<LockToken> {
        let op = match mode {
            LockMode::Read => wire::LOCKR,
            LockMode::Write => wire::LOCKW,
        };
        let p = self.call(op, key, lease.as_millis() as u64, &u64_arg(timeout.as_millis() as u64))?;
        parse_u64(&p)
    }

    fn unlock(&self, key: &str, token: LockToken) -> Result<()> {
        self.call(wire::UNLOCK, key, token, &[]).map(drop)
    }
}

fn dispatch(backend: &dyn GlobalTier, req: &Request) -> Result<Vec<u8>> {
    let arg = || parse_u64(&req.payload);
    match req.op {
        wire::READ => backend.read(&req.key, req.offset, arg()?),
        wire::WRITE => backend.write(&req.key, req.offset, &req.payload).map(|_| vec![]),
        wire::PUT => backend.put(&req.key, &req.payload).map(|_| vec![]),
        wire::DELETE => backend.delete(&req.key).map(|_| vec![]),
        wire::APPEND => backend.append(&req.key, &req.payload).map(|_| vec![]),
        wire::READAPP => backend.read_appended(&req.key).map(|s| codec::encode_segments(&s)),
        wire::SIZE => backend
            .size(&req.key)
            .map(|s| s.map(|n| n.to_be_bytes().to_vec()).unwrap_or_default()),
        wire::LOCKR | wire::LOCKW => {
            let mode = if req.op == wire::LOCKR {
                LockMode::Read
            } else {
                LockMode::Write
            };
            let lease = Duration::from_millis(req.offset);
            let timeout = Duration::from_millis(arg()?);
            backend
                .lock(&req.key, mode, lease, timeout)
                .map(|t| t.to_be_bytes().to_vec())
        }
        wire::UNLOCK => backend.unlock(&req.key, req.offset).map(|_| vec![]),
        other => Err(Error::Unsupported(format!("opcode {other}"))),
    }
}

fn serve_conn(stream: TcpStream, backend: Arc<dyn GlobalTier>) {
    stream.set_nodelay(true).ok();
    let mut reader = BufReader::new(match stream.try_clone() {
        Ok(s) => s,
        Err(_) => return,
    });
    let mut writer = BufWriter::new(stream);
    loop {
        let body = match wire::read_frame(&mut reader) {
            Ok(Some(b)) => b,
            _ => return,
        };
        let resp = match Request::decode(&body) {
            Ok(req) => match dispatch(backend.as_ref(), &req) {
                Ok(payload) => Response {
                    status: wire::STATUS_OK,
                    payload,
                },
                Err(e) => Response {
                    status: e.errno().code() as u8,
                    payload: e.to_string().into_bytes(),
                },
            },
            Err(e) => Response {
                status: Errno::Invalid.code() as u8,
                payload: e.to_string().into_bytes(),
            },
        };
        if wire::write_all(&mut writer, &resp.encode()).is_err() {
            return;
        }
    }
}

/// Serves a global tier backend over TCP, one thread per connection.
pub struct GlobalTierServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    conns: Arc<Mutex<Vec<TcpStream>>>,
    accept: Option<thread::JoinHandle<()>>,
}

impl GlobalTierServer {
    pub fn bind(addr: impl ToSocketAddrs, backend: Arc<dyn GlobalTier>) -> Result<Self> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let conns: Arc<Mutex<Vec<TcpStream>>> = Arc::default();
        let accept = {
            let stop = stop.clone();
            let conns = conns.clone();
            thread::Builder::new()
                .name("global-tier-accept".into())
                .spawn(move || {
                    for stream in listener.incoming() {
                        if stop.load(Ordering::SeqCst) {
                            break;
                        }
                        let Ok(stream) = stream else { continue };
                        if let Ok(c) = stream.try_clone() {
                            conns.lock().push(c);
                        }
                        let backend = backend.clone();
                        let _ = thread::Builder::new()
                            .name("global-tier-conn".into())
                            .spawn(move || serve_conn(stream, backend));
                    }
                })?
        };
        Ok(GlobalTierServer {
            addr,
            stop,
            conns,
            accept: Some(accept),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stops accepting and closes every open connection.
    pub fn shutdown(&mut self) {
        if self.stop.swap(true, Ordering::SeqCst) {
            return;
        }
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
        for c in self.conns.lock().drain(..) {
            let _ = c.shutdown(Shutdown::Both);
        }
    }

    /// Blocks the calling thread until the accept loop exits.
    pub fn wait(mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for GlobalTierServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}
