use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::nn::write_atomic;

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

/// Record of one command run: what went in, what came out, how long it took.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    /// Checkpoints read or written, with their SHA-256.
    pub checkpoints: BTreeMap<String, String>,
    pub outputs: Vec<PathBuf>,
    pub seconds: f64,
    pub version: String,
}

impl RunManifest {
    pub fn new(command: &str, config_hash: &str) -> Self {
        Self {
            command: command.to_string(),
            config_hash: config_hash.to_string(),
            seeds: BTreeMap::new(),
            checkpoints: BTreeMap::new(),
            outputs: Vec::new(),
            seconds: 0.0,
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    pub fn seed(mut self, name: &str, value: u64) -> Self {
        self.seeds.insert(name.to_string(), value);
        self
    }

    pub fn checkpoint(&mut self, path: &Path) -> Result<()> {
        self.checkpoints.insert(path.display().to_string(), file_sha256(path)?);
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut json = serde_json::to_vec_pretty(self)?;
        json.push(b'\n');
        write_atomic(path, &json)
    }
}
