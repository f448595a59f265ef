//! Client-side stream sockets.

use crate::abi;
use crate::Errno;

pub const AF_UNIX: i32 = 1;
pub const AF_INET: i32 = 2;
pub const AF_INET6: i32 = 10;
pub const SOCK_STREAM: i32 = 1;

pub struct TcpStream {
    fd: i32,
}

fn check(ret: i64) -> Result<i64, Errno> {
    Errno::check(ret)
}

/// Raw `socket` call, exposed for conformance tests of rejected flags.
pub fn socket(domain: i32, ty: i32, protocol: i32) -> Result<i32, Errno> {
    check(unsafe { abi::socket(domain, ty, protocol) } as i64).map(|fd| fd as i32)
}

impl TcpStream {
    /// Connects to `addr` (`ip:port`).
    pub fn connect(addr: &str) -> Result<TcpStream, Errno> {
        let fd = socket(AF_INET, SOCK_STREAM, 0)?;
        let stream = TcpStream { fd };
        check(unsafe { abi::connect(fd, addr.as_ptr(), addr.len()) } as i64)?;
        Ok(stream)
    }

    pub fn send(&mut self, data: &[u8]) -> Result<usize, Errno> {
        check(unsafe { abi::send(self.fd, data.as_ptr(), data.len(), 0) }).map(|n| n as usize)
    }

    pub fn send_all(&mut self, mut data: &[u8]) -> Result<(), Errno> {
        while !data.is_empty() {
            let n = self.send(data)?;
            data = &data[n..];
        }
        Ok(())
    }

    pub fn recv(&mut self, buf: &mut [u8]) -> Result<usize, Errno> {
        check(unsafe { abi::recv(self.fd, buf.as_mut_ptr(), buf.len(), 0) }).map(|n| n as usize)
    }

    pub fn recv_exact(&mut self, len: usize) -> Result<Vec<u8>, Errno> {
        let mut out = vec![0u8; len];
        let mut got = 0;
        while got < len {
            let n = self.recv(&mut out[got..])?;
            if n == 0 {
                return Err(Errno::Io);
            }
            got += n;
        }
        Ok(out)
    }
}

impl Drop for TcpStream {
    fn drop(&mut self) {
        unsafe { abi::fd_close(self.fd) };
    }
}
