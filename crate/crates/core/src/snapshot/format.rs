//! Snapshot binary format.
//!
//! ```text
//! magic "FLSNAP\0\0" | version u32 | section count u32
//! section table: (kind u32, offset u64, length u64) per section
//! section bodies
//! ```
//! All integers are little-endian. Offsets are from the start of the file.

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"FLSNAP\0\0";
pub const VERSION: u32 = 1;

pub(super) const META: u32 = 1;
pub(super) const GLOBALS: u32 = 2;
pub(super) const MEMORY: u32 = 3;
pub(super) const REGIONS: u32 = 4;

const HEADER: usize = 16;
const ENTRY: usize = 20;

pub(super) fn encode(sections: &[(u32, Vec<u8>)]) -> Vec<u8> {
    let table_end = HEADER + ENTRY * sections.len();
    let total = table_end + sections.iter().map(|(_, b)| b.len()).sum::<usize>();
    let mut out = Vec::with_capacity(total);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
    let mut at = table_end as u64;
    for (kind, body) in sections {
        out.extend_from_slice(&kind.to_le_bytes());
        out.extend_from_slice(&at.to_le_bytes());
        out.extend_from_slice(&(body.len() as u64).to_le_bytes());
        at += body.len() as u64;
    }
    for (_, body) in sections {
        out.extend_from_slice(body);
    }
    out
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

/// Splits a file into its sections, checking the header and bounds.
pub(super) fn decode(bytes: &[u8]) -> Result<Vec<(u32, &[u8])>> {
    if bytes.len() < HEADER || &bytes[..8] != MAGIC {
        return Err(bad("not a snapshot"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(bad(format!("version {version}, expected {VERSION}")));
    }
    let count = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let table_end = count
        .checked_mul(ENTRY)
        .and_then(|n| n.checked_add(HEADER))
        .filter(|&n| n <= bytes.len())
        .ok_or_else(|| bad("truncated section table"))?;
    let mut out = Vec::with_capacity(count);
    for e in bytes[HEADER..table_end].chunks_exact(ENTRY) {
        let kind = u32::from_le_bytes(e[..4].try_into().unwrap());
        let off = u64::from_le_bytes(e[4..12].try_into().unwrap());
        let len = u64::from_le_bytes(e[12..20].try_into().unwrap());
        let body = usize::try_from(off)
            .ok()
            .zip(usize::try_from(len).ok())
            .and_then(|(o, l)| Some(o..o.checked_add(l)?))
            .filter(|r| r.start >= table_end && r.end <= bytes.len())
            .map(|r| &bytes[r])
            .ok_or_else(|| bad(format!("section {kind} out of bounds")))?;
        out.push((kind, body));
    }
    Ok(out)
}

/// Cursor over a section body.
pub(super) struct Reader<'a>(pub &'a [u8]);

impl<'a> Reader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.0.len() < n {
            return Err(bad("truncated section"));
        }
        let (head, rest) = self.0.split_at(n);
        self.0 = rest;
        Ok(head)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| bad("string is not UTF-8"))
    }

    pub fn finish(&self) -> Result<()> {
        if self.0.is_empty() {
            Ok(())
        } else {
            Err(bad("trailing bytes in section"))
        }
    }
}

pub(super) fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn sections_round_trip(secs in proptest::collection::vec((any::<u32>(), proptest::collection::vec(any::<u8>(), 0..64)), 0..6)) {
            let enc = encode(&secs);
            let dec = decode(&enc).unwrap();
            prop_assert_eq!(dec.len(), secs.len());
            for ((k, b), (dk, db)) in secs.iter().zip(dec) {
                prop_assert_eq!(*k, dk);
                prop_assert_eq!(&b[..], db);
            }
        }

        #[test]
        fn truncation_never_panics(cut in 0usize..200) {
            let enc = encode(&[(META, vec![1; 40]), (MEMORY, vec![2; 100])]);
            let cut = cut.min(enc.len());
            let _ = decode(&enc[..cut]);
        }
    }

    #[test]
    fn rejects_other_versions() {
        let mut enc = encode(&[]);
        enc[8] = 2;
        assert!(matches!(decode(&enc), Err(Error::Format(m)) if m.contains("version")));
        assert!(matches!(decode(b"garbage garbage!"), Err(Error::Format(_))));
    }
}
