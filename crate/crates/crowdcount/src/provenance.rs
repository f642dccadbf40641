//! A JSON record written beside every artifact: the command, the resolved
//! configuration, the seed and the tool version. No timestamps, so repeated
//! runs produce identical bytes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub command: String,
    pub args: Vec<String>,
    pub config: serde_json::Value,
    pub seed: u64,
    pub version: String,
}

impl Provenance {
    pub fn new(command: &str, args: Vec<String>, config: serde_json::Value, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            args,
            config,
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

/// `<artifact>.provenance.json`; for a directory, `<dir>/provenance.json`.
pub fn provenance_path(artifact: &Path) -> PathBuf {
    if artifact.is_dir() {
        return artifact.join("provenance.json");
    }
    let mut name = artifact.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".provenance.json");
    artifact.with_file_name(name)
}

pub fn write_provenance(artifact: &Path, p: &Provenance) -> Result<PathBuf> {
    let path = provenance_path(artifact);
    let mut text = serde_json::to_string_pretty(p).expect("provenance serializes");
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
