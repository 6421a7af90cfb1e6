use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// Provenance record written next to every output.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// SHA-256 of the config bytes (capture) or of the canonical JSON of the
    /// generator parameters (gen).
    pub config_hash: String,
    pub master_seed: u64,
    pub versions: BTreeMap<String, String>,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub outputs: BTreeMap<String, String>,
    /// Command-specific settings needed to reproduce or verify the outputs.
    #[serde(default)]
    pub settings: serde_json::Value,
}

impl RunManifest {
    pub fn new(command: &str, config_hash: String, master_seed: u64, settings: serde_json::Value) -> Self {
        let mut versions = BTreeMap::new();
        versions.insert("capkernel".into(), capkernel::VERSION.into());
        versions.insert("capkernel-cli".into(), env!("CARGO_PKG_VERSION").into());
        versions.insert("generator".into(), capkernel::tasks::GENERATOR_VERSION.to_string());
        versions.insert("capture_config".into(), capkernel::harness::CONFIG_VERSION.to_string());
        Self {
            command: command.into(),
            config_hash,
            master_seed,
            versions,
            started_unix: unix_now(),
            finished_unix: 0,
            outputs: BTreeMap::new(),
            settings,
        }
    }

    /// Records an output file with its SHA-256.
    pub fn add_output(&mut self, path: &Path) -> Result<(), CliError> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        self.outputs.insert(path.display().to_string(), sha256_hex(&bytes));
        Ok(())
    }

    pub fn write(mut self, path: &Path) -> Result<(), CliError> {
        self.finished_unix = unix_now();
        let text = serde_json::to_string_pretty(&self).expect("manifest serializes");
        write_atomic(path, format!("{text}\n").as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes through a temporary sibling and renames, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

/// Relative output paths are placed under `CAPKERNEL_OUT_ROOT` when set.
pub fn output_path(p: &Path) -> PathBuf {
    match std::env::var_os("CAPKERNEL_OUT_ROOT") {
        Some(root) if p.is_relative() => Path::new(&root).join(p),
        _ => p.to_path_buf(),
    }
}

/// `data.jsonl` -> `data.jsonl.<suffix>`.
pub fn sibling(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}
