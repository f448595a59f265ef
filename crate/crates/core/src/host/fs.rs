//! Per-user virtual filesystem: reads resolve against a read-only file
//! source, writes land in a per-user local overlay.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use parking_lot::Mutex;

use super::net::Socket;
use crate::error::{Error, Result};

/// Read-only files visible to every Faaslet of a user.
pub trait FileSource: Send + Sync {
    fn read(&self, user: &str, path: &str) -> Option<Arc<[u8]>>;
}

/// A file source held in memory.
#[derive(Default)]
pub struct MemFiles {
    files: Mutex<HashMap<(String, String), Arc<[u8]>>>,
}

impl MemFiles {
    pub fn insert(&self, user: &str, path: &str, bytes: &[u8]) -> Result<()> {
        let path = normalise_path(path)?;
        self.files.lock().insert((user.to_string(), path), Arc::from(bytes));
        Ok(())
    }
}

impl FileSource for MemFiles {
    fn read(&self, user: &str, path: &str) -> Option<Arc<[u8]>> {
        self.files.lock().get(&(user.to_string(), path.to_string())).cloned()
    }
}

pub(super) type LocalFile = Arc<Mutex<Vec<u8>>>;

/// Node-local writable copies, one namespace per user.
#[derive(Default)]
pub struct Overlay {
    files: Mutex<BTreeMap<(String, String), LocalFile>>,
}

impl Overlay {
    pub(super) fn get(&self, user: &str, path: &str) -> Option<LocalFile> {
        self.files.lock().get(&(user.to_string(), path.to_string())).cloned()
    }

    pub(super) fn get_or_insert(&self, user: &str, path: &str, init: impl FnOnce() -> Vec<u8>) -> LocalFile {
        self.files
            .lock()
            .entry((user.to_string(), path.to_string()))
            .or_insert_with(|| Arc::new(Mutex::new(init())))
            .clone()
    }

    /// Contents of a local file, for inspection.
    pub fn contents(&self, user: &str, path: &str) -> Option<Vec<u8>> {
        let path = normalise_path(path).ok()?;
        self.get(user, &path).map(|f| f.lock().clone())
    }

    pub fn len(&self) -> usize {
        self.files.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Resolves `path` inside the virtual root. Leading slashes and `.` are
/// dropped and `..` is applied; a path that would leave the root is refused.
pub fn normalise_path(path: &str) -> Result<String> {
    let mut parts: Vec<&str> = Vec::new();
    for part in path.split('/') {
        match part {
            "" | "." => {}
            ".." => {
                if parts.pop().is_none() {
                    return Err(Error::Permission(format!("{path:?} escapes the virtual root")));
                }
            }
            p if p.contains('\0') => return Err(Error::Invalid("NUL in path".into())),
            p => parts.push(p),
        }
    }
    if parts.is_empty() {
        return Err(Error::Invalid(format!("{path:?} names the root")));
    }
    Ok(parts.join("/"))
}

pub(super) enum Content {
    Global(Arc<[u8]>),
    Local(LocalFile),
}

impl Content {
    pub(super) fn len(&self) -> usize {
        match self {
            Content::Global(b) => b.len(),
            Content::Local(f) => f.lock().len(),
        }
    }
}

pub(super) struct OpenFile {
    pub content: Content,
    pub cursor: u64,
    pub readable: bool,
    pub writable: bool,
    pub append: bool,
}

impl OpenFile {
    pub(super) fn read(&mut self, max: usize) -> Vec<u8> {
        let at = self.cursor as usize;
        let out = match &self.content {
            Content::Global(b) => b.get(at..).map_or(&[][..], |s| &s[..s.len().min(max)]).to_vec(),
            Content::Local(f) => {
                let f = f.lock();
                f.get(at..).map_or(&[][..], |s| &s[..s.len().min(max)]).to_vec()
            }
        };
        self.cursor += out.len() as u64;
        out
    }

    pub(super) fn write(&mut self, data: &[u8]) -> Option<usize> {
        let Content::Local(f) = &self.content else { return None };
        let mut f = f.lock();
        let at = if self.append { f.len() } else { self.cursor as usize };
        if f.len() < at + data.len() {
            f.resize(at + data.len(), 0);
        }
        f[at..at + data.len()].copy_from_slice(data);
        self.cursor = (at + data.len()) as u64;
        Some(data.len())
    }
}

#[derive(Clone)]
pub(super) enum FdEntry {
    File(Arc<Mutex<OpenFile>>),
    Socket(Arc<Mutex<Socket>>),
}

/// First descriptor handed to the guest; 0-2 are stdio and 3 the root.
pub(super) const FIRST_FD: i32 = 4;
pub(super) const ROOT_FD: i32 = 3;

#[derive(Default)]
pub(super) struct FdTable {
    entries: BTreeMap<i32, FdEntry>,
}

impl FdTable {
    pub(super) fn insert(&mut self, entry: FdEntry) -> i32 {
        let mut fd = FIRST_FD;
        while self.entries.contains_key(&fd) {
            fd += 1;
        }
        self.entries.insert(fd, entry);
        fd
    }

    pub(super) fn get(&self, fd: i32) -> Option<FdEntry> {
        self.entries.get(&fd).cloned()
    }

    pub(super) fn file(&self, fd: i32) -> Option<Arc<Mutex<OpenFile>>> {
        match self.entries.get(&fd) {
            Some(FdEntry::File(f)) => Some(f.clone()),
            _ => None,
        }
    }

    pub(super) fn socket(&self, fd: i32) -> Option<Arc<Mutex<Socket>>> {
        match self.entries.get(&fd) {
            Some(FdEntry::Socket(s)) => Some(s.clone()),
            _ => None,
        }
    }

    pub(super) fn close(&mut self, fd: i32) -> bool {
        self.entries.remove(&fd).is_some()
    }

    /// A new descriptor sharing the open file (and its cursor). Errors are
    /// WASI codes.
    pub(super) fn dup(&mut self, fd: i32) -> std::result::Result<i32, i32> {
        let entry = self.get(fd).ok_or(super::wasi::EBADF)?;
        Ok(self.insert(entry))
    }

    pub(super) fn close_all(&mut self) {
        self.entries.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paths_stay_inside_the_root() {
        assert_eq!(normalise_path("data/model.bin").unwrap(), "data/model.bin");
        assert_eq!(normalise_path("/data//./x/../model.bin").unwrap(), "data/model.bin");
        assert!(matches!(normalise_path("../../etc/x"), Err(Error::Permission(_))));
        assert!(matches!(normalise_path("a/../../b"), Err(Error::Permission(_))));
        assert!(normalise_path("/").is_err());
    }

    #[test]
    fn dup_shares_cursor() {
        let mut t = FdTable::default();
        let f = OpenFile {
            content: Content::Global(Arc::from(&b"hello"[..])),
            cursor: 0,
            readable: true,
            writable: false,
            append: false,
        };
        let a = t.insert(FdEntry::File(Arc::new(Mutex::new(f))));
        let b = t.dup(a).unwrap();
        assert_ne!(a, b);
        assert_eq!(t.file(a).unwrap().lock().read(2), b"he");
        assert_eq!(t.file(b).unwrap().lock().read(10), b"llo");
        assert!(t.close(a));
        assert_eq!(t.dup(a), Err(crate::host::wasi::EBADF));
    }
}
