//! Reproducibility records written next to command outputs.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

impl FileDigest {
    fn of(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
        Ok(Self {
            path: path.to_path_buf(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub version: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub duration_secs: f64,
}

impl RunRecord {
    pub fn new(command: &str, config: serde_json::Value, seed: Option<u64>) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            duration_secs: 0.0,
        }
    }

    pub fn inputs(mut self, paths: &[&Path]) -> Result<Self> {
        for p in paths {
            self.inputs.push(FileDigest::of(p)?);
        }
        Ok(self)
    }

    pub fn outputs(mut self, paths: &[&Path]) -> Result<Self> {
        for p in paths {
            self.outputs.push(FileDigest::of(p)?);
        }
        Ok(self)
    }

    /// Writes `<primary>.run.json`.
    pub fn finish(mut self, primary: &Path, start: Instant) -> Result<()> {
        self.duration_secs = start.elapsed().as_secs_f64();
        let mut path = primary.as_os_str().to_owned();
        path.push(".run.json");
        let text = serde_json::to_string_pretty(&self)? + "\n";
        std::fs::write(&path, text).with_context(|| format!("writing {:?}", path))
    }
}

/// Digests in the record that no longer match the files on disk.
pub fn verify(path: &Path) -> Result<Vec<String>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let record: RunRecord = serde_json::from_str(&text).context("parsing run record")?;
    let mut bad = Vec::new();
    for d in record.inputs.iter().chain(&record.outputs) {
        match FileDigest::of(&d.path) {
            Ok(now) if now.sha256 == d.sha256 => {}
            Ok(now) => bad.push(format!(
                "{}: recorded {}, found {}",
                d.path.display(),
                d.sha256,
                now.sha256
            )),
            Err(e) => bad.push(format!("{}: {e:#}", d.path.display())),
        }
    }
    Ok(bad)
}
