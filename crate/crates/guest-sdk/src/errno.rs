use std::fmt;

/// Error codes returned (negated) by `faasm` host calls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(i32)]
pub enum Errno {
    NotFound = 1,
    Range = 2,
    Permission = 3,
    Busy = 4,
    Transport = 5,
    Invalid = 6,
    Limit = 7,
    Unsupported = 8,
    Mode = 9,
    Reentrant = 10,
    LeaseExpired = 11,
    UnknownFunction = 12,
    UnknownCall = 13,
    NotHeld = 14,
    Io = 15,
}

impl Errno {
    pub const ALL: [Errno; 15] = [
        Errno::NotFound,
        Errno::Range,
        Errno::Permission,
        Errno::Busy,
        Errno::Transport,
        Errno::Invalid,
        Errno::Limit,
        Errno::Unsupported,
        Errno::Mode,
        Errno::Reentrant,
        Errno::LeaseExpired,
        Errno::UnknownFunction,
        Errno::UnknownCall,
        Errno::NotHeld,
        Errno::Io,
    ];

    pub fn code(self) -> i32 {
        self as i32
    }

    pub fn from_code(code: i32) -> Option<Errno> {
        Self::ALL.iter().copied().find(|e| e.code() == code)
    }

    /// Interprets a raw host return value: negative values are errors.
    pub fn check(ret: i64) -> Result<i64, Errno> {
        if ret >= 0 {
            Ok(ret)
        } else {
            Err(i32::try_from(-ret)
                .ok()
                .and_then(Errno::from_code)
                .unwrap_or(Errno::Invalid))
        }
    }
}

impl fmt::Display for Errno {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?} ({})", self.code())
    }
}

impl std::error::Error for Errno {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes_are_unique_and_round_trip() {
        for e in Errno::ALL {
            assert_eq!(Errno::from_code(e.code()), Some(e));
            assert_eq!(Errno::check(-(e.code() as i64)), Err(e));
        }
        assert_eq!(Errno::check(7), Ok(7));
        assert_eq!(Errno::from_code(0), None);
    }
}
