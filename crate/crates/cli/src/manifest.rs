//! Run manifests: which files a command read and wrote, with their hashes.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use gladder_core::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: PathBuf,
    pub sha256: String,
}

impl Artifact {
    pub fn of(path: &Path) -> Result<Self> {
        Ok(Self {
            path: path.to_path_buf(),
            sha256: sha256_file(path)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub graph: Artifact,
    pub cache: Option<Artifact>,
    pub checkpoint: Option<Artifact>,
    /// Everything else the command wrote (metrics, predictions, reports).
    pub outputs: Vec<Artifact>,
    /// Unix time in milliseconds.
    pub started_at_ms: u128,
    pub finished_at_ms: u128,
}

impl RunManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        write_file(path, format!("{text}\n").as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = read_file(path)?;
        serde_json::from_slice(&text).map_err(|e| Error::Validation(format!("{}: bad manifest: {e}", path.display())))
    }

    /// Checks that every referenced file exists and still has its recorded hash.
    pub fn verify(&self) -> Result<()> {
        let all = std::iter::once(&self.graph)
            .chain(self.cache.as_ref())
            .chain(self.checkpoint.as_ref())
            .chain(&self.outputs);
        for a in all {
            let actual = sha256_file(&a.path)?;
            if actual != a.sha256 {
                return Err(Error::Validation(format!(
                    "{} changed since the manifest was written (sha256 {actual}, recorded {})",
                    a.path.display(),
                    a.sha256
                )));
            }
        }
        Ok(())
    }
}

pub fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(read_file(path)?)))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|source| Error::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    std::fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// `<path>.<suffix>`, keeping the original extension.
pub fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}
