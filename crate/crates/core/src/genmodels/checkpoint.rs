//! `GMK1` checkpoint files: magic, little-endian `u64` header length, a
//! JSON header (metadata plus tensor directory), then the tensors as
//! contiguous little-endian `f32`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::signature::{GammaSource, SignPlacement};

use super::ModelSpec;

const MAGIC: &[u8; 4] = b"GMK1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(String),
    #[error("corrupt header: {0}")]
    CorruptHeader(String),
    #[error("tensor `{name}`: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("truncated data for tensor `{name}`: need {need} bytes at offset {offset}, blob has {have}")]
    Truncated { name: String, offset: usize, need: usize, have: usize },
    #[error("tensor `{0}` missing from checkpoint")]
    MissingTensor(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: u64,
    pub seed: u64,
    pub config_hash: String,
    pub placement: SignPlacement,
    /// Prefix of the signed generator's tensors (`"g."` or `"dec."`).
    pub gamma_prefix: String,
    pub model: ModelSpec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct DirEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: CheckpointMeta,
    tensors: Vec<DirEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<NamedTensor>,
}

impl ModelCheckpoint {
    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut NamedTensor> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    /// Scale factors of a placement layer.
    pub fn gammas(&self, layer: &str) -> Option<&[f32]> {
        let name = format!("{}{}", self.meta.gamma_prefix, SignPlacement::gamma_tensor(layer));
        self.get(&name).map(|t| t.data.as_slice())
    }

    pub fn gammas_mut(&mut self, layer: &str) -> Option<&mut Vec<f32>> {
        let name = format!("{}{}", self.meta.gamma_prefix, SignPlacement::gamma_tensor(layer));
        self.get_mut(&name).map(|t| &mut t.data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let tensors = self
            .tensors
            .iter()
            .map(|t| {
                let e = DirEntry { name: t.name.clone(), shape: t.shape.clone(), offset };
                offset += t.data.len() * 4;
                e
            })
            .collect();
        let header = serde_json::to_vec(&Header { meta: self.meta.clone(), tensors }).expect("header serializes");
        let mut out = Vec::with_capacity(12 + header.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(CheckpointError::CorruptHeader("bad magic".into()));
        }
        let len = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
        let body = &bytes[12..];
        if len > body.len() {
            return Err(CheckpointError::CorruptHeader(format!("header length {len} exceeds file")));
        }
        let header: Header =
            serde_json::from_slice(&body[..len]).map_err(|e| CheckpointError::CorruptHeader(e.to_string()))?;
        let blob = &body[len..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let need = e.shape.iter().product::<usize>() * 4;
            if e.offset + need > blob.len() {
                return Err(CheckpointError::Truncated { name: e.name, offset: e.offset, need, have: blob.len() });
            }
            let data = blob[e.offset..e.offset + need]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push(NamedTensor { name: e.name, shape: e.shape, data });
        }
        Ok(Self { meta: header.meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes()).map_err(|e| CheckpointError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|e| CheckpointError::Io(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn sha256(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

impl GammaSource for ModelCheckpoint {
    fn gamma(&self, layer: &str) -> Option<&[f32]> {
        self.gammas(layer)
    }
}
