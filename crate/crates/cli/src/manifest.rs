//! `manifest.json`: versions, seeds and input hashes of every step that
//! wrote into a directory. Entries are keyed so reruns overwrite in place.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sgjnd::ladder::sha256_file;

use crate::CliError;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub command: String,
    pub tool_version: String,
    pub library_version: String,
    pub seeds: BTreeMap<String, u64>,
    /// Input path → SHA-256.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
}

impl Step {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            library_version: sgjnd::VERSION.to_string(),
            seeds: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }

    pub fn seed(mut self, name: &str, value: u64) -> Self {
        self.seeds.insert(name.to_string(), value);
        self
    }

    pub fn input(mut self, path: &Path) -> Result<Self, CliError> {
        self.inputs
            .insert(path.display().to_string(), sha256_file(path)?);
        Ok(self)
    }

    pub fn output(mut self, name: impl Into<String>) -> Self {
        self.outputs.push(name.into());
        self
    }
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Manifest {
    steps: BTreeMap<String, Step>,
}

/// Inserts or replaces `key` in `dir/manifest.json`.
pub fn record(dir: &Path, key: &str, step: Step) -> Result<(), CliError> {
    let path = dir.join(MANIFEST);
    let mut manifest: Manifest = match fs::read_to_string(&path) {
        Ok(text) => serde_json::from_str(&text).unwrap_or_default(),
        Err(_) => Manifest::default(),
    };
    manifest.steps.insert(key.to_string(), step);
    let text = serde_json::to_string_pretty(&manifest).map_err(sgjnd::Error::from)?;
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))
}
