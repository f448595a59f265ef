use std::path::{Path, PathBuf};
use std::sync::Arc;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::host::{normalise_path, FileSource};
use crate::sandbox::FunctionId;

/// Content-addressed object store on a directory tree.
///
/// Blobs live under `objects/<sha256>`. The manifest is a tree of small
/// files under `manifest/`, each naming the blob a module or user file
/// currently refers to. Every update replaces a manifest file atomically,
/// so nodes sharing the directory see either the old or the new blob.
pub struct ObjectStore {
    root: PathBuf,
}

impl ObjectStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(root.join("objects"))?;
        std::fs::create_dir_all(root.join("manifest"))?;
        Ok(ObjectStore { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn put_blob(&self, bytes: &[u8]) -> Result<String> {
        let hash = hex::encode(Sha256::digest(bytes));
        let path = self.root.join("objects").join(&hash);
        if !path.exists() {
            write_atomic(&path, bytes)?;
        }
        Ok(hash)
    }

    fn blob(&self, hash: &str) -> Result<Vec<u8>> {
        Ok(std::fs::read(self.root.join("objects").join(hash))?)
    }

    fn manifest_path(&self, kind: &str, user: &str, name: &str) -> Result<PathBuf> {
        if user.is_empty() || user.contains('/') || user.starts_with('.') {
            return Err(Error::Invalid(format!("bad user {user:?}")));
        }
        let name = normalise_path(name)?;
        if name.is_empty() {
            return Err(Error::Invalid("empty name".into()));
        }
        // Encoded so that nested paths become single manifest entries.
        Ok(self.root.join("manifest").join(kind).join(user).join(hex::encode(name)))
    }

    fn bind(&self, kind: &str, user: &str, name: &str, bytes: &[u8]) -> Result<String> {
        let path = self.manifest_path(kind, user, name)?;
        let hash = self.put_blob(bytes)?;
        std::fs::create_dir_all(path.parent().expect("manifest entries have a parent"))?;
        write_atomic(&path, hash.as_bytes())?;
        Ok(hash)
    }

    fn resolve(&self, kind: &str, user: &str, name: &str) -> Result<Option<(String, Vec<u8>)>> {
        let path = self.manifest_path(kind, user, name)?;
        match std::fs::read_to_string(&path) {
            Ok(hash) => Ok(Some((hash.clone(), self.blob(&hash)?))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    /// Stores module bytes; returns their content hash.
    pub fn put_module(&self, id: &FunctionId, bytes: &[u8]) -> Result<String> {
        self.bind("modules", &id.user, &id.name, bytes)
    }

    pub fn module(&self, id: &FunctionId) -> Result<Option<(String, Vec<u8>)>> {
        self.resolve("modules", &id.user, &id.name)
    }

    pub fn module_by_hash(&self, hash: &str) -> Result<Vec<u8>> {
        if hash.len() != 64 || !hash.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(Error::Invalid(format!("bad hash {hash:?}")));
        }
        self.blob(hash)
    }

    /// Stores machine code compiled from the module with hash `module_hash`.
    pub fn put_object(&self, user: &str, module_hash: &str, bytes: &[u8]) -> Result<String> {
        self.bind("objects", user, module_hash, bytes)
    }

    pub fn object(&self, user: &str, module_hash: &str) -> Result<Option<Vec<u8>>> {
        Ok(self.resolve("objects", user, module_hash)?.map(|(_, b)| b))
    }

    /// Adds a read-only file visible to the user's functions.
    pub fn put_file(&self, user: &str, path: &str, bytes: &[u8]) -> Result<String> {
        self.bind("files", user, path, bytes)
    }
}

impl FileSource for ObjectStore {
    fn read(&self, user: &str, path: &str) -> Option<Arc<[u8]>> {
        self.resolve("files", user, path).ok().flatten().map(|(_, b)| b.into())
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!("tmp{}", crate::host::new_call_id()));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}
