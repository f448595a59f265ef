//! Framing for the remote global tier.
//!
//! Request: `u32` BE frame length, then opcode (1 byte), key length (`u16`
//! BE), key bytes, offset (`u64` BE), payload length (`u32` BE), payload.
//! Response: `u32` BE frame length, status byte (0 or an errno code), payload.

use std::io::{self, Read, Write};

pub const READ: u8 = 1;
pub const WRITE: u8 = 2;
pub const APPEND: u8 = 3;
pub const READAPP: u8 = 4;
pub const SIZE: u8 = 5;
pub const LOCKR: u8 = 6;
pub const LOCKW: u8 = 7;
pub const UNLOCK: u8 = 8;
pub const PUT: u8 = 9;
pub const DELETE: u8 = 10;

pub const STATUS_OK: u8 = 0;
const MAX_FRAME: usize = 1 << 30;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Request {
    pub op: u8,
    pub key: String,
    pub offset: u64,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Response {
    pub status: u8,
    pub payload: Vec<u8>,
}

fn bad(msg: &str) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.to_string())
}

/// Whether the request payload of `op` is value bytes rather than a control
/// argument such as a length or timeout.
pub fn sends_data(op: u8) -> bool {
    matches!(op, WRITE | APPEND | PUT)
}

/// Whether the response payload of `op` is value bytes.
pub fn receives_data(op: u8) -> bool {
    matches!(op, READ | READAPP)
}

impl Request {
    pub fn encode(&self) -> Vec<u8> {
        let key = self.key.as_bytes();
        let body = 1 + 2 + key.len() + 8 + 4 + self.payload.len();
        let mut out = Vec::with_capacity(4 + body);
        out.extend_from_slice(&(body as u32).to_be_bytes());
        out.push(self.op);
        out.extend_from_slice(&(key.len() as u16).to_be_bytes());
        out.extend_from_slice(key);
        out.extend_from_slice(&self.offset.to_be_bytes());
        out.extend_from_slice(&(self.payload.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn decode(body: &[u8]) -> io::Result<Request> {
        let mut at = 0usize;
        let mut take = |n: usize| -> io::Result<&[u8]> {
            let s = body.get(at..at + n).ok_or_else(|| bad("truncated request"))?;
            at += n;
            Ok(s)
        };
        let op = take(1)?[0];
        let klen = u16::from_be_bytes(take(2)?.try_into().unwrap()) as usize;
        let key = std::str::from_utf8(take(klen)?)
            .map_err(|_| bad("key is not utf-8"))?
            .to_string();
        let offset = u64::from_be_bytes(take(8)?.try_into().unwrap());
        let plen = u32::from_be_bytes(take(4)?.try_into().unwrap()) as usize;
        let payload = take(plen)?.to_vec();
        if at != body.len() {
            return Err(bad("trailing bytes in request"));
        }
        Ok(Request {
            op,
            key,
            offset,
            payload,
        })
    }
}

impl Response {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(5 + self.payload.len());
        out.extend_from_slice(&(1 + self.payload.len() as u32).to_be_bytes());
        out.push(self.status);
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn decode(body: &[u8]) -> io::Result<Response> {
        let (status, payload) = body.split_first().ok_or_else(|| bad("empty response"))?;
        Ok(Response {
            status: *status,
            payload: payload.to_vec(),
        })
    }
}

/// Reads one frame body. `Ok(None)` on a clean end of stream.
pub fn read_frame(r: &mut impl Read) -> io::Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(bad("frame too large"));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    Ok(Some(body))
}

pub fn write_all(w: &mut impl Write, bytes: &[u8]) -> io::Result<()> {
    w.write_all(bytes)?;
    w.flush()
}
