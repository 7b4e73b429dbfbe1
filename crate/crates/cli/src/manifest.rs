//! Run manifest: written before any artifact, rewritten with checksums once
//! every artifact is on disk.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub inputs: BTreeMap<String, PathBuf>,
    pub outputs: Vec<String>,
    pub seed: u64,
    /// sha256 of each output, keyed by file name; empty until the run ends.
    pub checksums: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            config,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            seed,
            checksums: BTreeMap::new(),
        }
    }

    pub fn input(mut self, name: &str, path: &Path) -> Self {
        self.inputs.insert(name.to_string(), path.to_path_buf());
        self
    }

    pub fn outputs(mut self, files: &[&str]) -> Self {
        self.outputs = files.iter().map(|f| f.to_string()).collect();
        self
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }

    /// Hashes every declared output and rewrites the manifest.
    pub fn finish(mut self, dir: &Path) -> Result<()> {
        for name in &self.outputs {
            let path = dir.join(name);
            let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
            self.checksums.insert(name.clone(), sha256_hex(&bytes));
        }
        self.write(dir)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
