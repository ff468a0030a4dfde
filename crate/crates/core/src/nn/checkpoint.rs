//! `ckpt/v1` on-disk format:
//!
//! ```text
//! b"CKPT" | u32 LE header length | header JSON | f32 LE values, params in manifest order
//! ```
//!
//! The header is `{"format":"ckpt/v1","config_hash":..,"params":[{"id":..,"shape":[r,c]}]}`.

use std::io::{self, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::graph::{NnError, ParamId, ParamStore};
use super::tensor::Tensor;

pub const CKPT_FORMAT: &str = "ckpt/v1";
const MAGIC: &[u8; 4] = b"CKPT";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("bad checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Param(#[from] NnError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub shape: [usize; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub config_hash: String,
    pub params: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    /// Snapshot of the listed parameters (values rounded to f32).
    pub fn capture(store: &ParamStore, ids: &[ParamId], config_hash: &str) -> Self {
        let params = ids
            .iter()
            .map(|&pid| {
                let t = store.get(pid);
                ManifestEntry {
                    id: store.id_of(pid).to_string(),
                    shape: [t.rows, t.cols],
                }
            })
            .collect();
        let tensors = ids
            .iter()
            .map(|&pid| store.get(pid).map(|v| v as f32 as f64))
            .collect();
        Self {
            header: CheckpointHeader {
                format: CKPT_FORMAT.to_string(),
                config_hash: config_hash.to_string(),
                params,
            },
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let n: usize = self.tensors.iter().map(Tensor::len).sum();
        let mut out = Vec::with_capacity(8 + header.len() + 4 * n);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for &v in &t.data {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(CheckpointError::Format("missing CKPT magic".into()));
        }
        let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let body = bytes
            .get(8..8 + hlen)
            .ok_or_else(|| CheckpointError::Format("truncated header".into()))?;
        let header: CheckpointHeader =
            serde_json::from_slice(body).map_err(|e| CheckpointError::Format(e.to_string()))?;
        if header.format != CKPT_FORMAT {
            return Err(CheckpointError::Format(format!("unsupported format {}", header.format)));
        }
        let mut off = 8 + hlen;
        let mut tensors = Vec::with_capacity(header.params.len());
        for e in &header.params {
            let n = e.shape[0] * e.shape[1];
            let raw = bytes
                .get(off..off + 4 * n)
                .ok_or_else(|| CheckpointError::Format(format!("truncated data for {}", e.id)))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            tensors.push(Tensor::from_vec(e.shape[0], e.shape[1], data));
            off += 4 * n;
        }
        if off != bytes.len() {
            return Err(CheckpointError::Format("trailing bytes after parameter data".into()));
        }
        Ok(Self { header, tensors })
    }

    pub fn write_to(&self, w: &mut impl Write) -> io::Result<()> {
        w.write_all(&self.to_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut f = std::fs::File::create(path)?;
        self.write_to(&mut f)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    /// Writes every tensor into the store by id.
    pub fn apply(&self, store: &mut ParamStore) -> Result<(), CheckpointError> {
        for (e, t) in self.header.params.iter().zip(&self.tensors) {
            store.assign(&e.id, t.clone())?;
        }
        Ok(())
    }

    pub fn sha256(&self) -> String {
        sha256_hex(&self.to_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
