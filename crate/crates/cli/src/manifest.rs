//! `manifest.json`: one record per command run into a directory, with file
//! checksums and per-stage parameter counts.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use slimbio_core::bench::Mode;

use crate::config::RunConfig;
use crate::error::CliError;

pub const FILE_NAME: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub bytes: u64,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path) -> Result<Self, CliError> {
        let data = fs::read(path)?;
        Ok(Self {
            path: path.to_path_buf(),
            bytes: data.len() as u64,
            sha256: sha256_hex(&data),
        })
    }
}

/// Parameter count and serialized-graph checksum after one pipeline stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub name: String,
    pub params: usize,
    pub sha256: String,
    pub detail: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub mode: Mode,
    pub config: RunConfig,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub params_before: Option<usize>,
    pub params_after: Option<usize>,
    pub stages: Vec<Stage>,
    pub extra: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub runs: Vec<RunRecord>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self, CliError> {
        Ok(serde_json::from_slice(&fs::read(dir.join(FILE_NAME))?)?)
    }

    /// Appends `record` to the directory's manifest, creating it if needed.
    pub fn append(dir: &Path, record: RunRecord) -> Result<(), CliError> {
        let mut m = if dir.join(FILE_NAME).exists() {
            Self::load(dir)?
        } else {
            Manifest {
                tool: "slimbio".into(),
                version: env!("CARGO_PKG_VERSION").into(),
                runs: Vec::new(),
            }
        };
        m.runs.push(record);
        fs::write(dir.join(FILE_NAME), serde_json::to_string_pretty(&m)?)?;
        Ok(())
    }

    /// Most recent record of `command`.
    pub fn last(&self, command: &str) -> Option<&RunRecord> {
        self.runs.iter().rev().find(|r| r.command == command)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_known_vector() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }
}
