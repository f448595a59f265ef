use std::fmt;

use wasmtime::Trap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TrapKind {
    OutOfBounds,
    Unreachable,
    StackExhausted,
    InvalidCall,
    LimitExceeded,
    HostError,
}

impl fmt::Display for TrapKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrapKind::OutOfBounds => "out_of_bounds",
            TrapKind::Unreachable => "unreachable",
            TrapKind::StackExhausted => "stack_exhausted",
            TrapKind::InvalidCall => "invalid_call",
            TrapKind::LimitExceeded => "limit_exceeded",
            TrapKind::HostError => "host_error",
        })
    }
}

/// Why a guest call terminated abnormally.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrapInfo {
    pub kind: TrapKind,
    pub detail: String,
}

impl fmt::Display for TrapInfo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} trap: {}", self.kind, self.detail)
    }
}

impl std::error::Error for TrapInfo {}

/// Raised by host functions when a guest breaks the host-interface contract.
#[derive(Debug)]
pub struct HostViolation(pub String);

impl fmt::Display for HostViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "host interface violation: {}", self.0)
    }
}

impl std::error::Error for HostViolation {}

pub(crate) fn violation(msg: impl Into<String>) -> wasmtime::Error {
    wasmtime::Error::new(HostViolation(msg.into()))
}

impl TrapInfo {
    pub fn new(kind: TrapKind, detail: impl Into<String>) -> Self {
        TrapInfo {
            kind,
            detail: detail.into(),
        }
    }

    /// Classifies an error returned from a guest call. `grow_refused` is set
    /// when the guest hit its memory limit during the call; any trap that
    /// follows is reported as a limit trap.
    pub fn classify(err: &wasmtime::Error, grow_refused: bool) -> TrapInfo {
        if let Some(v) = err.downcast_ref::<HostViolation>() {
            return TrapInfo::new(TrapKind::HostError, v.0.clone());
        }
        let detail = format!("{err:#}");
        let kind = match err.downcast_ref::<Trap>() {
            Some(Trap::OutOfFuel) => TrapKind::LimitExceeded,
            Some(_) if grow_refused => TrapKind::LimitExceeded,
            Some(Trap::MemoryOutOfBounds | Trap::HeapMisaligned) => TrapKind::OutOfBounds,
            Some(Trap::StackOverflow) => TrapKind::StackExhausted,
            Some(Trap::IndirectCallToNull | Trap::BadSignature | Trap::TableOutOfBounds) => TrapKind::InvalidCall,
            // Arithmetic traps and anything else raised by the guest code.
            Some(_) => TrapKind::Unreachable,
            None if grow_refused => TrapKind::LimitExceeded,
            None => TrapKind::HostError,
        };
        TrapInfo { kind, detail }
    }
}

/// Raised by `proc_exit`: the guest ended the call with this code.
#[derive(Debug)]
pub struct ProcExit(pub i32);

impl fmt::Display for ProcExit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "guest exited with {}", self.0)
    }
}

impl std::error::Error for ProcExit {}
