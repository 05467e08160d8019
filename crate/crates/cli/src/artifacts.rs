//! Output directory bookkeeping: atomic writes and the run manifest.

use std::fs;
use std::path::{Path, PathBuf};

use mbbr_core::tensor::write_atomic;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

pub const MANIFEST: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of the canonical JSON form of the resolved config.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    sha256_hex(&serde_json::to_vec(cfg).expect("config serializes"))
}

pub fn to_json_bytes<S: Serialize>(value: &S) -> CliResult<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(mbbr_core::Error::from)?;
    bytes.push(b'\n');
    Ok(bytes)
}

#[derive(Serialize)]
struct OutputRecord {
    file: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    seed: u64,
    config_sha256: String,
    config: &'a ExperimentConfig,
    outputs: &'a [OutputRecord],
}

/// Files written by one command. Tracked files are listed with their hash
/// in the manifest; untracked ones (wall-clock timings) are not.
pub struct Artifacts {
    dir: PathBuf,
    outputs: Vec<OutputRecord>,
}

impl Artifacts {
    pub fn create(dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        Ok(Artifacts { dir: dir.to_path_buf(), outputs: Vec::new() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> CliResult<PathBuf> {
        let path = self.write_untracked(name, bytes)?;
        self.outputs.push(OutputRecord { file: name.to_string(), sha256: sha256_hex(bytes) });
        Ok(path)
    }

    pub fn write_json<S: Serialize>(&mut self, name: &str, value: &S) -> CliResult<PathBuf> {
        self.write_bytes(name, &to_json_bytes(value)?)
    }

    pub fn write_untracked(&self, name: &str, bytes: &[u8]) -> CliResult<PathBuf> {
        let path = self.path(name);
        write_atomic(&path, bytes)?;
        Ok(path)
    }

    pub fn finish(self, command: &str, cfg: &ExperimentConfig) -> CliResult<PathBuf> {
        let manifest = Manifest {
            command,
            seed: cfg.seed,
            config_sha256: config_hash(cfg),
            config: cfg,
            outputs: &self.outputs,
        };
        let path = self.path(MANIFEST);
        write_atomic(&path, &to_json_bytes(&manifest)?)?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_of_empty_input() {
        assert_eq!(sha256_hex(b""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    }
}
