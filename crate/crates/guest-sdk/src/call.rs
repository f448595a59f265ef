//! Call I/O and chaining.

use crate::abi;
use crate::Errno;

/// The invocation payload.
pub fn input() -> Vec<u8> {
    let len = unsafe { abi::read_call_input(std::ptr::null_mut(), 0) } as usize;
    let mut buf = vec![0u8; len];
    unsafe { abi::read_call_input(buf.as_mut_ptr(), len) };
    buf
}

/// Sets this call's output. The host traps on a second write.
pub fn set_output(bytes: &[u8]) {
    unsafe { abi::write_call_output(bytes.as_ptr(), bytes.len()) }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CallHandle {
    pub call_id: i64,
}

pub fn chain(name: &str, input: &[u8]) -> Result<CallHandle, Errno> {
    let id = unsafe { abi::chain_call(name.as_ptr(), name.len(), input.as_ptr(), input.len()) };
    Errno::check(id).map(|call_id| CallHandle { call_id })
}

impl CallHandle {
    /// Blocks until the call finishes and returns its return code.
    pub fn wait(&self) -> Result<i32, Errno> {
        let mut code = 0i32;
        let status = unsafe { abi::await_call(self.call_id, &mut code) };
        Errno::check(status as i64).map(|_| code)
    }

    pub fn output(&self) -> Result<Vec<u8>, Errno> {
        let len = Errno::check(unsafe { abi::get_call_output(self.call_id, std::ptr::null_mut(), 0) })?;
        let mut buf = vec![0u8; len as usize];
        Errno::check(unsafe { abi::get_call_output(self.call_id, buf.as_mut_ptr(), buf.len()) })?;
        Ok(buf)
    }
}

/// Chains `name` once per input.
pub fn chain_all(name: &str, inputs: &[Vec<u8>]) -> Result<Vec<CallHandle>, Errno> {
    inputs.iter().map(|i| chain(name, i)).collect()
}

/// Awaits every handle in order, returning the first non-zero code if any.
pub fn await_all(handles: &[CallHandle]) -> Result<i32, Errno> {
    let mut first_failure = 0;
    for h in handles {
        let code = h.wait()?;
        if code != 0 && first_failure == 0 {
            first_failure = code;
        }
    }
    Ok(first_failure)
}
