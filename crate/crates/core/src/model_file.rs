//! On-disk model format.
//!
//! ```text
//! magic        8 bytes   "LATCLOUD"
//! version      u32 LE    currently 1
//! header_len   u32 LE
//! header       JSON      {"architecture": ..., "config": ...}
//! count        u64 LE    number of parameters
//! payload      count × f64 LE, in ModelParameters::to_flat order
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Architecture, ModelParameters};
use crate::trainer::TrainConfig;

pub const MAGIC: &[u8; 8] = b"LATCLOUD";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelFileError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a valid model file: {0}")]
    Format(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    architecture: Architecture,
    config: TrainConfig,
}

/// Parameters plus the training config (including seed) that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub params: ModelParameters,
    pub config: TrainConfig,
}

impl ModelFile {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&Header {
            architecture: self.params.architecture(),
            config: self.config.clone(),
        })
        .expect("header always serialises");
        let flat = self.params.to_flat();
        let mut out = Vec::with_capacity(24 + header.len() + flat.len() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(flat.len() as u64).to_le_bytes());
        for v in flat {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelFileError> {
        let bad = |m: String| ModelFileError::Format(m);
        let mut rest = bytes;
        let mut take = |n: usize, what: &str| -> Result<&[u8], ModelFileError> {
            if rest.len() < n {
                return Err(bad(format!("truncated {what}")));
            }
            let (head, tail) = rest.split_at(n);
            rest = tail;
            Ok(head)
        };
        if take(8, "magic")? != MAGIC {
            return Err(bad("bad magic".into()));
        }
        let version = u32::from_le_bytes(take(4, "version")?.try_into().unwrap());
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let header_len = u32::from_le_bytes(take(4, "header length")?.try_into().unwrap()) as usize;
        let header: Header =
            serde_json::from_slice(take(header_len, "header")?).map_err(|e| bad(format!("header: {e}")))?;
        let count = u64::from_le_bytes(take(8, "parameter count")?.try_into().unwrap());
        let payload_len = usize::try_from(count)
            .ok()
            .and_then(|c| c.checked_mul(8))
            .ok_or_else(|| bad("parameter count overflows".into()))?;
        let payload = take(payload_len, "payload")?;
        if !rest.is_empty() {
            return Err(bad(format!("{} trailing bytes", rest.len())));
        }
        let flat: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let params =
            ModelParameters::from_flat(header.architecture, &flat).map_err(|e| bad(format!("payload: {e}")))?;
        Ok(Self {
            params,
            config: header.config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelFileError> {
        fs::write(path, self.to_bytes()).map_err(|source| ModelFileError::Io {
            path: path.to_owned(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ModelFileError> {
        let bytes = fs::read(path).map_err(|source| ModelFileError::Io {
            path: path.to_owned(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}
