use faaslite_guest::Errno;

use crate::sandbox::TrapInfo;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),
    #[error("link error: {0}")]
    Link(String),
    #[error("memory limit exceeded: {0}")]
    Limit(String),
    #[error("instantiation failed: {0}")]
    Instantiation(String),
    #[error("bad snapshot: {0}")]
    Format(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("out of range: {0}")]
    Range(String),
    #[error("busy: {0}")]
    Busy(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("key mode mismatch: {0}")]
    Mode(String),
    #[error("lock already held: {0}")]
    Reentrant(String),
    #[error("lease expired: {0}")]
    LeaseExpired(String),
    #[error("lock not held: {0}")]
    NotHeld(String),
    #[error("permission denied: {0}")]
    Permission(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("unknown function {0}")]
    UnknownFunction(String),
    #[error("unknown call {0}")]
    UnknownCall(i64),
    #[error("{0}")]
    Trap(TrapInfo),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// The code a guest sees (negated) when a host call fails with this error.
    pub fn errno(&self) -> Errno {
        match self {
            Error::NotFound(_) => Errno::NotFound,
            Error::Range(_) => Errno::Range,
            Error::Permission(_) => Errno::Permission,
            Error::Busy(_) => Errno::Busy,
            Error::Transport(_) => Errno::Transport,
            Error::Limit(_) => Errno::Limit,
            Error::Unsupported(_) | Error::Link(_) => Errno::Unsupported,
            Error::Mode(_) => Errno::Mode,
            Error::Reentrant(_) => Errno::Reentrant,
            Error::LeaseExpired(_) => Errno::LeaseExpired,
            Error::UnknownFunction(_) => Errno::UnknownFunction,
            Error::UnknownCall(_) => Errno::UnknownCall,
            Error::NotHeld(_) => Errno::NotHeld,
            Error::Io(_) => Errno::Io,
            Error::Validation(_) | Error::Instantiation(_) | Error::Format(_) | Error::Invalid(_) | Error::Trap(_) => {
                Errno::Invalid
            }
        }
    }

    /// Rebuilds an error from a wire status code.
    pub fn from_errno(errno: Errno, detail: String) -> Error {
        match errno {
            Errno::NotFound => Error::NotFound(detail),
            Errno::Range => Error::Range(detail),
            Errno::Permission => Error::Permission(detail),
            Errno::Busy => Error::Busy(detail),
            Errno::Transport => Error::Transport(detail),
            Errno::Invalid => Error::Invalid(detail),
            Errno::Limit => Error::Limit(detail),
            Errno::Unsupported => Error::Unsupported(detail),
            Errno::Mode => Error::Mode(detail),
            Errno::Reentrant => Error::Reentrant(detail),
            Errno::LeaseExpired => Error::LeaseExpired(detail),
            Errno::UnknownFunction => Error::UnknownFunction(detail),
            Errno::UnknownCall => Error::UnknownCall(detail.parse().unwrap_or(0)),
            Errno::NotHeld => Error::NotHeld(detail),
            Errno::Io => Error::Io(std::io::Error::other(detail)),
        }
    }
}
