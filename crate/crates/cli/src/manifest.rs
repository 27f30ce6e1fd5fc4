//! Run manifests: a JSON snapshot of what a command was asked to do and
//! which bytes it read, written into the output directory before any work
//! starts. A finished run directory is therefore self-describing and two
//! runs can be compared by hashing their inputs alone.

use serde::Serialize;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io;
use std::path::Path;

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub seed: u64,
    /// The effective configuration after flag/config-file merging.
    pub config: serde_json::Value,
    /// sha256 of every input file, keyed by the path as given.
    pub input_hashes: BTreeMap<String, String>,
    /// Fixed-name outputs this run will produce (relative to the run dir).
    pub artifacts: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: serde_json::Value) -> Self {
        RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            seed,
            config,
            input_hashes: BTreeMap::new(),
            artifacts: Vec::new(),
        }
    }

    pub fn hash_input(&mut self, path: &Path) -> io::Result<()> {
        self.input_hashes.insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    /// Hash the five fixed files of a dataset directory.
    pub fn hash_dataset_dir(&mut self, dir: &Path) -> io::Result<()> {
        for name in ["catalog.tsv", "train.tsv", "val.tsv", "test.tsv", "pop.tsv"] {
            self.hash_input(&dir.join(name))?;
        }
        Ok(())
    }

    pub fn artifact(&mut self, name: &str) {
        self.artifacts.push(name.to_string());
    }

    /// Write `manifest.json` into the run directory. Called before the run's
    /// real work; the file is never touched again.
    pub fn write(&self, out_dir: &Path) -> io::Result<()> {
        std::fs::create_dir_all(out_dir)?;
        let body = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(out_dir.join("manifest.json"), body + "\n")
    }
}

pub fn sha256_file(path: &Path) -> io::Result<String> {
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hex(&hasher.finalize()))
}

fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}
