//! Named tensor archives in the safetensors layout.
//!
//! ```text
//! [u64 little-endian header length N][N bytes of JSON header][raw data]
//! ```
//!
//! The header maps each tensor name to `{dtype, shape, data_offsets}` and may
//! carry a `__metadata__` string map. Files written here are readable by any
//! safetensors implementation; `F32`, `F16` and `BF16` tensors can be read.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use half::{bf16, f16};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{numel, Tensor};

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("archive too short for its header")]
    Truncated,
    #[error("malformed archive header: {0}")]
    Header(String),
    #[error("tensor {name}: unsupported dtype {dtype}")]
    Dtype { name: String, dtype: String },
    #[error("tensor {name}: byte range does not match shape {shape:?}")]
    Extent { name: String, shape: Vec<usize> },
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

/// An in-memory tensor dictionary plus string metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub tensors: BTreeMap<String, Tensor>,
    pub metadata: BTreeMap<String, String>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    /// Serializes with tensors in name order; output is deterministic.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = serde_json::Map::new();
        if !self.metadata.is_empty() {
            header.insert(
                "__metadata__".into(),
                serde_json::to_value(&self.metadata).expect("string map serializes"),
            );
        }
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            let len = t.numel() * 4;
            let entry = HeaderEntry {
                dtype: "F32".into(),
                shape: t.shape().to_vec(),
                data_offsets: [offset, offset + len],
            };
            header.insert(name.clone(), serde_json::to_value(entry).expect("entry serializes"));
            offset += len;
        }
        let mut json = serde_json::to_vec(&header).expect("header serializes");
        while !json.len().is_multiple_of(8) {
            json.push(b' ');
        }
        let mut out = Vec::with_capacity(8 + json.len() + offset);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ArchiveError> {
        if bytes.len() < 8 {
            return Err(ArchiveError::Truncated);
        }
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let body_start = 8usize.checked_add(n).ok_or(ArchiveError::Truncated)?;
        if bytes.len() < body_start {
            return Err(ArchiveError::Truncated);
        }
        let header: serde_json::Map<String, serde_json::Value> =
            serde_json::from_slice(&bytes[8..body_start]).map_err(|e| ArchiveError::Header(e.to_string()))?;
        let body = &bytes[body_start..];
        let mut archive = Archive::new();
        for (name, value) in header {
            if name == "__metadata__" {
                archive.metadata = serde_json::from_value(value).map_err(|e| ArchiveError::Header(e.to_string()))?;
                continue;
            }
            let entry: HeaderEntry =
                serde_json::from_value(value).map_err(|e| ArchiveError::Header(format!("{name}: {e}")))?;
            let [start, end] = entry.data_offsets;
            let width = match entry.dtype.as_str() {
                "F32" => 4,
                "F16" | "BF16" => 2,
                other => {
                    return Err(ArchiveError::Dtype {
                        name,
                        dtype: other.into(),
                    })
                }
            };
            if start > end || end > body.len() || end - start != numel(&entry.shape) * width {
                return Err(ArchiveError::Extent {
                    name,
                    shape: entry.shape,
                });
            }
            let raw = &body[start..end];
            let data: Vec<f32> = match entry.dtype.as_str() {
                "F32" => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
                "F16" => raw
                    .chunks_exact(2)
                    .map(|c| f16::from_le_bytes(c.try_into().unwrap()).to_f32())
                    .collect(),
                _ => raw
                    .chunks_exact(2)
                    .map(|c| bf16::from_le_bytes(c.try_into().unwrap()).to_f32())
                    .collect(),
            };
            archive.tensors.insert(name, Tensor::from_vec(entry.shape, data));
        }
        Ok(archive)
    }

    pub fn read(path: &Path) -> Result<Self, ArchiveError> {
        let bytes = fs::read(path).map_err(|source| ArchiveError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    pub fn write(&self, path: &Path) -> Result<(), ArchiveError> {
        fs::write(path, self.to_bytes()).map_err(|source| ArchiveError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}
