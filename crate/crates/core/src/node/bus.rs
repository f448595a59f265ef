use std::collections::HashMap;
use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use parking_lot::Mutex;

use super::calls::CallStatus;
use crate::error::{Error, Result};
use crate::sandbox::FunctionId;
use crate::scheduler::NodeId;

const MAX_FRAME: usize = 1 << 30;
const CONNECT_TIMEOUT: Duration = Duration::from_secs(1);
const RETRY_BACKOFF: Duration = Duration::from_millis(50);

#[derive(Debug, Clone, PartialEq)]
pub enum BusMessage {
    ShareCall {
        call_id: i64,
        user: String,
        function: String,
        input: Vec<u8>,
        hops: u8,
        origin: NodeId,
    },
    CallResult {
        call_id: i64,
        status: CallStatus,
        return_code: i32,
        output: Vec<u8>,
        executed_on: NodeId,
        error: Option<String>,
    },
    Heartbeat {
        node_id: NodeId,
        bus_addr: String,
        warm: Vec<FunctionId>,
    },
}

const SHARE_CALL: u8 = 1;
const CALL_RESULT: u8 = 2;
const HEARTBEAT: u8 = 3;

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_be_bytes());
    out.extend_from_slice(b);
}

struct Cursor<'a>(&'a [u8]);

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> io::Result<&'a [u8]> {
        if self.0.len() < n {
            return Err(io::Error::new(io::ErrorKind::InvalidData, "truncated bus message"));
        }
        let (a, b) = self.0.split_at(n);
        self.0 = b;
        Ok(a)
    }

    fn u8(&mut self) -> io::Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn i32(&mut self) -> io::Result<i32> {
        Ok(i32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn i64(&mut self) -> io::Result<i64> {
        Ok(i64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn bytes(&mut self) -> io::Result<Vec<u8>> {
        let n = u32::from_be_bytes(self.take(4)?.try_into().unwrap()) as usize;
        Ok(self.take(n)?.to_vec())
    }

    fn string(&mut self) -> io::Result<String> {
        String::from_utf8(self.bytes()?).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
    }
}

fn status_byte(s: CallStatus) -> u8 {
    match s {
        CallStatus::Queued => 0,
        CallStatus::Running => 1,
        CallStatus::Completed => 2,
        CallStatus::Failed => 3,
    }
}

impl BusMessage {
    pub fn kind(&self) -> u8 {
        match self {
            BusMessage::ShareCall { .. } => SHARE_CALL,
            BusMessage::CallResult { .. } => CALL_RESULT,
            BusMessage::Heartbeat { .. } => HEARTBEAT,
        }
    }

    /// A complete frame: big-endian length of the rest, kind byte, payload.
    pub fn encode(&self) -> Vec<u8> {
        let mut p = vec![0, 0, 0, 0, self.kind()];
        match self {
            BusMessage::ShareCall {
                call_id,
                user,
                function,
                input,
                hops,
                origin,
            } => {
                p.extend_from_slice(&call_id.to_be_bytes());
                put_bytes(&mut p, user.as_bytes());
                put_bytes(&mut p, function.as_bytes());
                put_bytes(&mut p, input);
                p.push(*hops);
                put_bytes(&mut p, origin.as_bytes());
            }
            BusMessage::CallResult {
                call_id,
                status,
                return_code,
                output,
                executed_on,
                error,
            } => {
                p.extend_from_slice(&call_id.to_be_bytes());
                p.push(status_byte(*status));
                p.extend_from_slice(&return_code.to_be_bytes());
                put_bytes(&mut p, output);
                put_bytes(&mut p, executed_on.as_bytes());
                match error {
                    Some(e) => {
                        p.push(1);
                        put_bytes(&mut p, e.as_bytes());
                    }
                    None => p.push(0),
                }
            }
            BusMessage::Heartbeat {
                node_id,
                bus_addr,
                warm,
            } => {
                put_bytes(&mut p, node_id.as_bytes());
                put_bytes(&mut p, bus_addr.as_bytes());
                p.extend_from_slice(&(warm.len() as u32).to_be_bytes());
                for f in warm {
                    put_bytes(&mut p, f.user.as_bytes());
                    put_bytes(&mut p, f.name.as_bytes());
                }
            }
        }
        let len = (p.len() - 4) as u32;
        p[..4].copy_from_slice(&len.to_be_bytes());
        p
    }

    /// Decodes the body of a frame (kind byte onwards).
    pub fn decode(body: &[u8]) -> io::Result<BusMessage> {
        let mut c = Cursor(body);
        let msg = match c.u8()? {
            SHARE_CALL => BusMessage::ShareCall {
                call_id: c.i64()?,
                user: c.string()?,
                function: c.string()?,
                input: c.bytes()?,
                hops: c.u8()?,
                origin: c.string()?,
            },
            CALL_RESULT => BusMessage::CallResult {
                call_id: c.i64()?,
                status: match c.u8()? {
                    0 => CallStatus::Queued,
                    1 => CallStatus::Running,
                    2 => CallStatus::Completed,
                    _ => CallStatus::Failed,
                },
                return_code: c.i32()?,
                output: c.bytes()?,
                executed_on: c.string()?,
                error: match c.u8()? {
                    0 => None,
                    _ => Some(c.string()?),
                },
            },
            HEARTBEAT => {
                let node_id = c.string()?;
                let bus_addr = c.string()?;
                let n = c.i32()? as u32 as usize;
                let mut warm = Vec::with_capacity(n.min(1024));
                for _ in 0..n {
                    let user = c.string()?;
                    warm.push(FunctionId::new(&user, &c.string()?));
                }
                BusMessage::Heartbeat {
                    node_id,
                    bus_addr,
                    warm,
                }
            }
            k => {
                return Err(io::Error::new(
                    io::ErrorKind::InvalidData,
                    format!("bus message kind {k}"),
                ))
            }
        };
        if !c.0.is_empty() {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                "trailing bytes in bus message",
            ));
        }
        Ok(msg)
    }
}

/// Reads one frame body; `None` at a clean end of stream.
pub fn read_frame(r: &mut impl Read) -> io::Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let len = u32::from_be_bytes(len) as usize;
    if len == 0 || len > MAX_FRAME {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("bad frame length {len}"),
        ));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    Ok(Some(body))
}

pub type Handler = Arc<dyn Fn(BusMessage) + Send + Sync>;

struct Peer {
    addr: String,
    conn: Mutex<Option<TcpStream>>,
    alive: AtomicBool,
    last_seen: Mutex<Option<Instant>>,
}

impl Peer {
    fn connect(&self) -> io::Result<TcpStream> {
        let mut last = io::Error::new(io::ErrorKind::AddrNotAvailable, format!("{}: no address", self.addr));
        for a in self.addr.to_socket_addrs()? {
            match TcpStream::connect_timeout(&a, CONNECT_TIMEOUT) {
                Ok(s) => {
                    s.set_nodelay(true)?;
                    return Ok(s);
                }
                Err(e) => last = e,
            }
        }
        Err(last)
    }

    fn send_once(&self, frame: &[u8]) -> io::Result<()> {
        let mut conn = self.conn.lock();
        if conn.as_ref().is_some_and(|c| !still_open(c)) {
            *conn = None;
        }
        if conn.is_none() {
            *conn = Some(self.connect()?);
        }
        let r = conn.as_mut().expect("connected above").write_all(frame);
        if r.is_err() {
            *conn = None;
        }
        r
    }
}

/// Peers never write on our outbound connection, so readable means closed:
/// end of stream or a reset. Catches a peer that went away before a write
/// would be silently buffered into a dead socket.
fn still_open(c: &TcpStream) -> bool {
    if c.set_nonblocking(true).is_err() {
        return false;
    }
    let mut b = [0u8; 1];
    let open = matches!(c.peek(&mut b), Err(e) if e.kind() == io::ErrorKind::WouldBlock);
    c.set_nonblocking(false).is_ok() && open
}

/// Persistent stream connections to peers plus a listener for theirs.
pub struct Bus {
    me: NodeId,
    addr: SocketAddr,
    peers: Mutex<HashMap<NodeId, Arc<Peer>>>,
    stop: Arc<AtomicBool>,
    conns: Arc<Mutex<Vec<TcpStream>>>,
    accept: Mutex<Option<thread::JoinHandle<()>>>,
}

impl Bus {
    pub fn bind(me: &str, addr: impl ToSocketAddrs, handler: Handler) -> Result<Bus> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let conns: Arc<Mutex<Vec<TcpStream>>> = Arc::default();
        let accept = {
            let (stop, conns) = (stop.clone(), conns.clone());
            thread::Builder::new().name(format!("bus-{me}")).spawn(move || {
                for stream in listener.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(stream) = stream else { continue };
                    if let Ok(c) = stream.try_clone() {
                        conns.lock().push(c);
                    }
                    let handler = handler.clone();
                    let _ = thread::Builder::new()
                        .name("bus-conn".into())
                        .spawn(move || serve(stream, handler));
                }
            })?
        };
        Ok(Bus {
            me: me.to_string(),
            addr,
            peers: Mutex::default(),
            stop,
            conns,
            accept: Mutex::new(Some(accept)),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Registers a peer, replacing its address if it changed.
    pub fn add_peer(&self, id: &str, addr: &str) {
        if id == self.me {
            return;
        }
        let mut peers = self.peers.lock();
        if peers.get(id).is_some_and(|p| p.addr == addr) {
            return;
        }
        peers.insert(
            id.to_string(),
            Arc::new(Peer {
                addr: addr.to_string(),
                conn: Mutex::new(None),
                alive: AtomicBool::new(true),
                last_seen: Mutex::new(None),
            }),
        );
    }

    pub fn peer_ids(&self) -> Vec<NodeId> {
        self.peers.lock().keys().cloned().collect()
    }

    /// Records a heartbeat from `id`.
    pub fn seen(&self, id: &str, addr: &str) {
        self.add_peer(id, addr);
        if let Some(p) = self.peers.lock().get(id) {
            p.alive.store(true, Ordering::SeqCst);
            *p.last_seen.lock() = Some(Instant::now());
        }
    }

    pub fn last_seen(&self, id: &str) -> Option<Instant> {
        self.peers.lock().get(id).and_then(|p| *p.last_seen.lock())
    }

    /// A known peer that has not failed since it was last heard from.
    pub fn usable(&self, id: &str) -> bool {
        self.peers
            .lock()
            .get(id)
            .is_some_and(|p| p.alive.load(Ordering::SeqCst))
    }

    /// Sends one message, reconnecting and retrying once after a short
    /// backoff. A peer that fails both attempts is marked unusable until
    /// its next heartbeat.
    pub fn send(&self, to: &str, msg: &BusMessage) -> Result<()> {
        let peer = self
            .peers
            .lock()
            .get(to)
            .cloned()
            .ok_or_else(|| Error::NotFound(format!("peer {to}")))?;
        let frame = msg.encode();
        if peer.send_once(&frame).is_ok() {
            return Ok(());
        }
        thread::sleep(RETRY_BACKOFF);
        peer.send_once(&frame).map_err(|e| {
            peer.alive.store(false, Ordering::SeqCst);
            Error::Transport(format!("peer {to}: {e}"))
        })
    }

    pub fn shutdown(&self) {
        if self.stop.swap(true, Ordering::SeqCst) {
            return;
        }
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.accept.lock().take() {
            let _ = h.join();
        }
        for c in self.conns.lock().drain(..) {
            let _ = c.shutdown(Shutdown::Both);
        }
        for p in self.peers.lock().values() {
            if let Some(c) = p.conn.lock().take() {
                let _ = c.shutdown(Shutdown::Both);
            }
        }
    }
}

impl Drop for Bus {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn serve(mut stream: TcpStream, handler: Handler) {
    loop {
        match read_frame(&mut stream) {
            Ok(Some(body)) => match BusMessage::decode(&body) {
                Ok(msg) => handler(msg),
                Err(e) => {
                    log::warn!("dropping bus connection: {e}");
                    return;
                }
            },
            Ok(None) => return,
            Err(e) => {
                log::debug!("bus connection closed: {e}");
                return;
            }
        }
    }
}
