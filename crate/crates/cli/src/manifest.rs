//! Run manifests tying every output file to the command, config and
//! inputs that produced it, plus the error-to-exit-code mapping.

use std::path::Path;

use anyhow::Result;
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Bad flags, unreadable or malformed config files.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// 2 for configuration or usage errors, 3 for numerical aborts, 1 otherwise.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    match e.downcast_ref::<moeforge::Error>() {
        Some(moeforge::Error::Numerical { .. }) => 3,
        Some(moeforge::Error::Config(_) | moeforge::Error::InvalidArgument(_) | moeforge::Error::Json(_)) => 2,
        _ => 1,
    }
}

#[derive(Debug, Serialize)]
pub struct FileDigest {
    /// File name relative to its directory.
    pub name: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    /// Digest of command, config, seed and inputs.
    pub run_id: String,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub mode: Option<String>,
    /// The effective config, defaults filled in.
    pub config: serde_json::Value,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex(&Sha256::digest(&bytes)))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn digest(path: &Path) -> Result<FileDigest> {
    let name = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(FileDigest { name, sha256: sha256_file(path)? })
}

impl RunManifest {
    pub fn new<T: Serialize>(command: &str, config: &T, seed: u64, mode: Option<String>) -> Result<Self> {
        Ok(Self {
            run_id: String::new(),
            command: command.into(),
            config_hash: moeforge::trainer::config_hash(config)?,
            seed,
            mode,
            config: serde_json::to_value(config)?,
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(digest(path)?);
        Ok(())
    }

    pub fn add_output(&mut self, dir: &Path, name: &str) -> Result<()> {
        self.outputs.push(digest(&dir.join(name))?);
        Ok(())
    }

    /// Writes `manifest_<command>.json` into `dir`.
    pub fn write(&mut self, dir: &Path) -> Result<()> {
        let mut h = Sha256::new();
        h.update(self.command.as_bytes());
        h.update(self.config_hash.as_bytes());
        h.update(self.seed.to_le_bytes());
        for i in &self.inputs {
            h.update(i.sha256.as_bytes());
        }
        self.run_id = hex(&h.finalize()[..6]);
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(dir.join(format!("manifest_{}.json", self.command)), text)?;
        Ok(())
    }
}
