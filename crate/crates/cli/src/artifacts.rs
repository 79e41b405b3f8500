//! Output-directory helpers: pretty JSON files and the hash manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Records the inputs and outputs of one command.
#[derive(Debug, Default, Serialize)]
pub struct Manifest {
    command: String,
    seed: Option<u64>,
    config_sha256: BTreeMap<String, String>,
    artifacts: BTreeMap<String, String>,
    #[serde(skip)]
    out_dir: PathBuf,
}

impl Manifest {
    pub fn new(command: &str, out_dir: &Path) -> Result<Self> {
        fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
        Ok(Self {
            command: command.to_string(),
            out_dir: out_dir.to_path_buf(),
            ..Self::default()
        })
    }

    pub fn seed(&mut self, seed: u64) {
        self.seed = Some(seed);
    }

    pub fn config(&mut self, path: Option<&Path>) -> Result<()> {
        if let Some(p) = path {
            self.config_sha256.insert(p.display().to_string(), sha256_file(p)?);
        }
        Ok(())
    }

    /// Path of an artifact inside the output directory, registered for hashing.
    pub fn artifact(&mut self, name: &str) -> PathBuf {
        self.artifacts.insert(name.to_string(), String::new());
        self.out_dir.join(name)
    }

    pub fn finish(mut self) -> Result<()> {
        for (name, hash) in self.artifacts.iter_mut() {
            *hash = sha256_file(&self.out_dir.join(name))?;
        }
        let path = self.out_dir.join("manifest.json");
        write_json(&path, &self)
    }
}
