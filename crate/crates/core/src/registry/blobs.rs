use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Lowercase hex SHA-256 of `bytes`.
pub fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn is_valid_hash(hash: &str) -> bool {
    hash.len() == 64 && hash.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'))
}

/// Immutable content-addressed files: `dir/<sha256>`.
#[derive(Debug)]
pub struct BlobStore {
    dir: PathBuf,
    tmp_counter: AtomicU64,
}

impl BlobStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self {
            dir,
            tmp_counter: AtomicU64::new(0),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, hash: &str) -> Result<PathBuf> {
        if !is_valid_hash(hash) {
            return Err(Error::Validation(format!("{hash:?} is not a sha256 hex digest")));
        }
        Ok(self.dir.join(hash))
    }

    pub fn contains(&self, hash: &str) -> bool {
        self.path(hash).is_ok_and(|p| p.is_file())
    }

    /// Stores `bytes` and returns their digest. Writing the same content twice
    /// is a no-op.
    pub fn put(&self, bytes: &[u8]) -> Result<String> {
        let hash = digest(bytes);
        let path = self.dir.join(&hash);
        if path.is_file() {
            return Ok(hash);
        }
        let n = self.tmp_counter.fetch_add(1, Ordering::Relaxed);
        let tmp = self.dir.join(format!(".{hash}.{}.{n}.tmp", std::process::id()));
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, &path)?;
        Ok(hash)
    }

    /// Reads a blob and checks it still hashes to its name.
    pub fn get(&self, hash: &str) -> Result<Vec<u8>> {
        let path = self.path(hash)?;
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(Error::NotFound(format!("blob {hash}")));
            }
            Err(e) => return Err(e.into()),
        };
        let actual = digest(&bytes);
        if actual != hash {
            return Err(Error::Corruption {
                hash: hash.to_string(),
                reason: format!("content hashes to {actual}"),
            });
        }
        Ok(bytes)
    }
}
