//! Serialized model state: configuration, label maps and all trainable
//! tensors. Floats round-trip exactly, so a reloaded checkpoint reproduces the
//! saved model bit for bit.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::Aligner;
use crate::config::RunConfig;
use crate::data::LabelMaps;
use crate::error::{Error, Result};
use crate::metrics::Metrics;
use crate::student::StudentParams;

pub const FORMAT: &str = "afd-slu-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: RunConfig,
    pub label_maps: LabelMaps,
    /// Epoch whose parameters were kept.
    pub epoch: usize,
    pub dev: Metrics,
    pub teacher_checksum: Option<String>,
    pub student: StudentParams,
    /// Absent when distillation is disabled.
    pub aligner: Option<Aligner>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("checkpoint serializes")
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let ck: Checkpoint =
            serde_json::from_slice(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if ck.format != FORMAT || ck.version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format {} v{}",
                ck.format, ck.version
            )));
        }
        Ok(ck)
    }

    /// SHA-256 of the serialized bytes, hex encoded.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}
