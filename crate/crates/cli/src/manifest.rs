//! `manifest.json`: what produced an output directory.

use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use tapf::train::RunConfig;

pub const FILE: &str = "manifest.json";

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    /// The run configuration as TOML.
    pub config: String,
    pub seed: u64,
    /// SHA-256 of the executable that wrote this manifest.
    pub binary_sha256: String,
    /// Paths relative to the output directory.
    pub outputs: Vec<String>,
    pub created_unix_s: u64,
}

fn binary_hash() -> Result<String> {
    let exe = std::env::current_exe().context("cannot locate the running executable")?;
    let bytes = std::fs::read(&exe).with_context(|| format!("cannot read {}", exe.display()))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

impl Manifest {
    pub fn new(command: &str, cfg: &RunConfig, seed: u64, outputs: &[&str]) -> Result<Self> {
        Ok(Self {
            command: command.to_string(),
            config: cfg.to_toml(),
            seed,
            binary_sha256: binary_hash()?,
            outputs: outputs.iter().map(|s| s.to_string()).collect(),
            created_unix_s: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        })
    }

    /// Writes the manifest into `dir`, replacing any previous one.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(FILE);
        std::fs::write(&path, serde_json::to_string_pretty(self)? + "\n")
            .with_context(|| format!("cannot write {}", path.display()))
    }
}
