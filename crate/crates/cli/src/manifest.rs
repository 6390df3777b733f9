//! Run manifests: one JSON file per run, written next to the main output.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(FileDigest {
            path: path.to_path_buf(),
            sha256: sha256_hex(&bytes),
        })
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn unix_millis() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub inputs: Vec<FileDigest>,
    /// Milliseconds since the Unix epoch.
    pub started_at: u128,
    pub finished_at: u128,
    pub outputs: Vec<FileDigest>,
}

impl RunManifest {
    /// Starts a manifest; input files are hashed immediately.
    pub fn start<C: Serialize>(command: &str, config: &C, inputs: &[&Path]) -> Result<Self> {
        Ok(RunManifest {
            command: command.to_string(),
            config: serde_json::to_value(config)?,
            inputs: inputs
                .iter()
                .map(|p| FileDigest::of(p))
                .collect::<Result<_>>()?,
            started_at: unix_millis(),
            finished_at: 0,
            outputs: Vec::new(),
        })
    }

    /// Hashes `outputs`, stamps the end time and writes the manifest to `path`.
    pub fn finish(mut self, outputs: &[&Path], path: &Path) -> Result<()> {
        self.outputs = outputs
            .iter()
            .map(|p| FileDigest::of(p))
            .collect::<Result<_>>()?;
        self.finished_at = unix_millis();
        let json = serde_json::to_string_pretty(&self)?;
        sensekit::io::write_atomic(path, json.as_bytes())?;
        Ok(())
    }
}

/// `<output>.manifest.json`
pub fn default_path(output: &Path) -> PathBuf {
    let mut name = output.as_os_str().to_os_string();
    name.push(".manifest.json");
    PathBuf::from(name)
}
