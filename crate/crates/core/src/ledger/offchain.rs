use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use thiserror::Error;

use crate::canonical::sha256_hex;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OffchainError {
    #[error("no blob with digest {0}")]
    NotFound(String),
    #[error("blob {0} does not match its digest")]
    IntegrityMismatch(String),
    #[error("store I/O: {0}")]
    Io(String),
}

/// Content-addressed blob storage. `get` recomputes the SHA-256 digest and
/// refuses blobs that no longer match.
pub trait OffchainStore {
    fn put(&mut self, blob: &[u8]) -> Result<String, OffchainError>;
    fn raw(&self, digest: &str) -> Result<Vec<u8>, OffchainError>;

    fn get(&self, digest: &str) -> Result<Vec<u8>, OffchainError> {
        let blob = self.raw(digest)?;
        if sha256_hex(&blob) != digest {
            return Err(OffchainError::IntegrityMismatch(digest.to_string()));
        }
        Ok(blob)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MemoryStore {
    blobs: BTreeMap<String, Vec<u8>>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.blobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blobs.is_empty()
    }

    /// Direct mutable access to a stored blob, bypassing the digest.
    pub fn blob_mut(&mut self, digest: &str) -> Option<&mut Vec<u8>> {
        self.blobs.get_mut(digest)
    }
}

impl OffchainStore for MemoryStore {
    fn put(&mut self, blob: &[u8]) -> Result<String, OffchainError> {
        let d = sha256_hex(blob);
        self.blobs.insert(d.clone(), blob.to_vec());
        Ok(d)
    }

    fn raw(&self, digest: &str) -> Result<Vec<u8>, OffchainError> {
        self.blobs
            .get(digest)
            .cloned()
            .ok_or_else(|| OffchainError::NotFound(digest.to_string()))
    }
}

/// One file per blob, named by its digest.
#[derive(Debug, Clone)]
pub struct DirStore {
    root: PathBuf,
}

impl DirStore {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self, OffchainError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| OffchainError::Io(e.to_string()))?;
        Ok(DirStore { root })
    }

    pub fn path(&self, digest: &str) -> PathBuf {
        self.root.join(digest)
    }
}

impl OffchainStore for DirStore {
    fn put(&mut self, blob: &[u8]) -> Result<String, OffchainError> {
        let d = sha256_hex(blob);
        fs::write(self.path(&d), blob).map_err(|e| OffchainError::Io(e.to_string()))?;
        Ok(d)
    }

    fn raw(&self, digest: &str) -> Result<Vec<u8>, OffchainError> {
        // digests are hex; anything else cannot name a stored blob
        if digest.is_empty() || !digest.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(OffchainError::NotFound(digest.to_string()));
        }
        fs::read(self.path(digest)).map_err(|_| OffchainError::NotFound(digest.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_tamper() {
        let mut s = MemoryStore::new();
        let d = s.put(b"blob").unwrap();
        assert_eq!(s.get(&d).unwrap(), b"blob");
        s.blob_mut(&d).unwrap()[0] ^= 1;
        assert_eq!(s.get(&d), Err(OffchainError::IntegrityMismatch(d.clone())));
    }

    #[test]
    fn empty_blob() {
        let mut s = MemoryStore::new();
        let d = s.put(b"").unwrap();
        assert_eq!(d, sha256_hex(b""));
        assert_eq!(s.get(&d).unwrap(), Vec::<u8>::new());
    }

    #[test]
    fn dir_store() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = DirStore::new(dir.path()).unwrap();
        let d = s.put(b"abc").unwrap();
        assert_eq!(s.get(&d).unwrap(), b"abc");
        fs::write(s.path(&d), b"abd").unwrap();
        assert!(matches!(s.get(&d), Err(OffchainError::IntegrityMismatch(_))));
        assert!(matches!(s.get("00"), Err(OffchainError::NotFound(_))));
    }
}
