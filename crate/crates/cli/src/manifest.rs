use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{hex, RunConfig};
use crate::CliError;

/// Reproducibility record written next to each command's outputs. Holds no
/// timestamps, so identical runs write identical manifests.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    /// Logical name to `[path, sha256]`.
    pub inputs: BTreeMap<String, [String; 2]>,
    pub outputs: BTreeMap<String, [String; 2]>,
}

pub fn file_sha256(path: &Path) -> Result<String, CliError> {
    let io_err = |e| CliError::Io {
        path: path.to_path_buf(),
        source: e,
    };
    let mut f = fs::File::open(path).map_err(io_err)?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 20];
    loop {
        let n = f.read(&mut buf).map_err(io_err)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex(&h.finalize()))
}

impl Manifest {
    pub fn new(command: &str, cfg: &RunConfig) -> Self {
        Self {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config_hash: cfg.hash(),
            seed: cfg.seed,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn input(&mut self, name: &str, path: &Path) -> Result<(), CliError> {
        self.inputs
            .insert(name.into(), [path.display().to_string(), file_sha256(path)?]);
        Ok(())
    }

    pub fn output(&mut self, name: &str, path: &Path) -> Result<(), CliError> {
        self.outputs
            .insert(name.into(), [path.display().to_string(), file_sha256(path)?]);
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, json + "\n").map_err(|e| CliError::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }
}
