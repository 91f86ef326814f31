//! Provenance manifests: every artifact directory records the command,
//! config, seeds, tool version and content hashes of its inputs and outputs.
//! Manifests carry no timestamps or host details, so identical runs produce
//! identical manifests — reproducibility is checked by hashing.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PROVENANCE_FILE: &str = "provenance.json";

/// SHA-256 of a byte slice, lowercase hex.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// SHA-256 of a file's contents.
pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Machine-readable record of how an artifact directory was produced.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub crate_version: String,
    /// Subcommand and logical arguments, normalised (not raw argv).
    pub command: String,
    pub seed: u64,
    /// Resolved configuration as flat key = value pairs.
    pub config: BTreeMap<String, String>,
    /// Input artifact name -> content hash.
    pub inputs: BTreeMap<String, String>,
    /// Output artifact name -> content hash.
    pub outputs: BTreeMap<String, String>,
}

impl Provenance {
    pub fn new(command: impl Into<String>, seed: u64) -> Self {
        Self {
            crate_version: crate::VERSION.to_string(),
            command: command.into(),
            seed,
            config: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn with_config_text(mut self, text: &str) -> Self {
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some((k, v)) = line.split_once('=') {
                self.config.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        self
    }

    /// Records `path` (which must exist) as a named input.
    pub fn add_input(&mut self, name: &str, path: &Path) -> Result<()> {
        self.inputs.insert(name.to_string(), sha256_file(path)?);
        Ok(())
    }

    /// Records `path` (which must exist) as a named output.
    pub fn add_output(&mut self, name: &str, path: &Path) -> Result<()> {
        self.outputs.insert(name.to_string(), sha256_file(path)?);
        Ok(())
    }

    /// Writes the manifest as pretty JSON into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(PROVENANCE_FILE);
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Io {
                path: path.display().to_string(),
                source: std::io::Error::other(e),
            })?;
        fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(PROVENANCE_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Corpus(format!("bad provenance manifest: {e}")))
    }
}
