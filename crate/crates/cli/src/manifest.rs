//! Run manifests: what a command read, what it wrote, and content hashes of both.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.toml";

/// Hash of `bytes` in git's object form: `sha256("blob <len>\0" ++ bytes)`.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub hash: String,
}

impl FileEntry {
    pub fn of(path: &Path) -> std::io::Result<Self> {
        Ok(FileEntry { path: path.display().to_string(), hash: content_hash(&fs::read(path)?) })
    }
}

/// Written next to every command's outputs. Contains no timestamps, so
/// identical runs produce identical manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub version: String,
    pub seed: Option<u64>,
    pub config_paths: Vec<String>,
    pub inputs: Vec<FileEntry>,
    pub outputs: Vec<FileEntry>,
}

impl RunManifest {
    pub fn new(command: &str, seed: Option<u64>) -> Self {
        RunManifest {
            command: command.to_string(),
            args: std::env::args().skip(1).collect(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config_paths: Vec::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn config(&mut self, path: &Path) -> std::io::Result<()> {
        self.config_paths.push(path.display().to_string());
        self.input(path)
    }

    pub fn input(&mut self, path: &Path) -> std::io::Result<()> {
        self.inputs.push(FileEntry::of(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> std::io::Result<()> {
        self.outputs.push(FileEntry::of(path)?);
        Ok(())
    }

    /// Writes `manifest.toml` into `dir` and returns its path.
    pub fn write(&self, dir: &Path) -> std::io::Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, toml::to_string(self).expect("manifest serialises"))?;
        Ok(path)
    }
}
