//! Binary checkpoint container.
//!
//! Layout, all integers little-endian, no padding:
//!
//! ```text
//! "FPM1" | version: u32 (=1) | meta_len: u64 | meta: UTF-8 JSON | f32 arrays
//! ```
//!
//! The metadata carries the model config, the checkpoint kind, a free-text
//! provenance string, the frozen-parameter list and an ordered manifest of
//! `{name, shape, dtype}`. Arrays follow in manifest order.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{FfnKind, ModelConfig};
use super::model::Model;
use crate::autodiff::Tensor;
use crate::error::{CheckpointError, Error, Result};
use crate::io::write_atomic;

pub const MAGIC: [u8; 4] = *b"FPM1";
pub const FORMAT_VERSION: u32 = 1;

/// A named `f32` array as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl StoredTensor {
    pub fn from_tensor(t: &Tensor) -> Self {
        StoredTensor {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&x| x as f32).collect(),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.shape.clone(), self.data.iter().map(|&x| x as f64).collect())
            .expect("stored tensor shape verified on load")
    }

    pub fn bits_eq(&self, other: &StoredTensor) -> bool {
        self.shape == other.shape
            && self.data.len() == other.data.len()
            && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub kind: FfnKind,
    /// Free text such as `warmup:lang0` or `assembled:configA`.
    pub provenance: String,
    pub params: BTreeMap<String, StoredTensor>,
    pub frozen: BTreeSet<String>,
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    config: ModelConfig,
    kind: FfnKind,
    provenance: String,
    frozen: Vec<String>,
    params: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
}

impl Checkpoint {
    /// Snapshot of a model; parameters are rounded to `f32`.
    pub fn from_model(model: &Model, provenance: impl Into<String>) -> Self {
        Checkpoint {
            config: model.config.clone(),
            kind: model.config.ffn_kind,
            provenance: provenance.into(),
            params: model
                .params
                .iter()
                .map(|(k, t)| (k.clone(), StoredTensor::from_tensor(t)))
                .collect(),
            frozen: model.frozen.clone(),
        }
    }

    pub fn to_model(&self) -> Result<Model> {
        self.validate()?;
        let model = Model {
            config: self.config.clone(),
            params: self.params.iter().map(|(k, t)| (k.clone(), t.to_tensor())).collect(),
            frozen: self.frozen.clone(),
        };
        model.validate()?;
        Ok(model)
    }

    pub fn expect_kind(&self, kind: FfnKind) -> Result<()> {
        if self.kind != kind {
            return Err(CheckpointError::KindMismatch { expected: kind.as_str(), found: self.kind.as_str() }.into());
        }
        Ok(())
    }

    /// Parameters must match the config exactly in names and shapes.
    pub fn validate(&self) -> Result<(), CheckpointError> {
        self.config.validate().map_err(|e| CheckpointError::Metadata(e.to_string()))?;
        if self.kind != self.config.ffn_kind {
            return Err(CheckpointError::KindMismatch {
                expected: self.config.ffn_kind.as_str(),
                found: self.kind.as_str(),
            });
        }
        let expected = self.config.param_shapes();
        for (name, shape) in &expected {
            match self.params.get(name) {
                None => return Err(CheckpointError::Manifest(format!("missing parameter `{name}`"))),
                Some(t) if &t.shape != shape => {
                    return Err(CheckpointError::ShapeMismatch {
                        name: name.clone(),
                        found: t.shape.clone(),
                        expected: shape.clone(),
                    })
                }
                Some(t) if t.data.len() != shape.iter().product::<usize>() => {
                    return Err(CheckpointError::Manifest(format!("`{name}` length disagrees with its shape")))
                }
                _ => {}
            }
        }
        if self.params.len() != expected.len() {
            let known: BTreeSet<&String> = expected.iter().map(|(n, _)| n).collect();
            let extra = self.params.keys().find(|k| !known.contains(k)).cloned().unwrap_or_default();
            return Err(CheckpointError::Manifest(format!("unexpected parameter `{extra}`")));
        }
        if let Some(f) = self.frozen.iter().find(|f| !self.params.contains_key(*f)) {
            return Err(CheckpointError::Manifest(format!("frozen parameter `{f}` does not exist")));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        self.validate()?;
        let meta = Metadata {
            config: self.config.clone(),
            kind: self.kind,
            provenance: self.provenance.clone(),
            frozen: self.frozen.iter().cloned().collect(),
            params: self
                .params
                .iter()
                .map(|(name, t)| ManifestEntry { name: name.clone(), shape: t.shape.clone(), dtype: "f32".into() })
                .collect(),
        };
        let meta = serde_json::to_vec(&meta).map_err(|e| CheckpointError::Metadata(e.to_string()))?;
        let payload: usize = self.params.values().map(|t| t.data.len() * 4).sum();
        let mut out = Vec::with_capacity(16 + meta.len() + payload);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        for t in self.params.values() {
            for x in &t.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(CheckpointError::VersionMismatch { found: version, expected: FORMAT_VERSION });
        }
        let meta_len = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let meta_len = usize::try_from(meta_len).map_err(|_| CheckpointError::Truncated {
            needed: usize::MAX,
            available: bytes.len(),
        })?;
        let meta_bytes = r.take(meta_len)?;
        let meta: Metadata = serde_json::from_slice(meta_bytes).map_err(|e| CheckpointError::Metadata(e.to_string()))?;

        let mut params = BTreeMap::new();
        for entry in &meta.params {
            if entry.dtype != "f32" {
                return Err(CheckpointError::Metadata(format!("unsupported dtype `{}`", entry.dtype)));
            }
            let numel: usize = entry.shape.iter().product();
            let raw = r.take(numel * 4)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            if params
                .insert(entry.name.clone(), StoredTensor { shape: entry.shape.clone(), data })
                .is_some()
            {
                return Err(CheckpointError::Manifest(format!("duplicate parameter `{}`", entry.name)));
            }
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Manifest(format!("{} trailing bytes after payload", bytes.len() - r.pos)));
        }
        let ckpt = Checkpoint {
            config: meta.config,
            kind: meta.kind,
            provenance: meta.provenance,
            params,
            frozen: meta.frozen.into_iter().collect(),
        };
        ckpt.validate()?;
        Ok(ckpt)
    }

    /// Parameter-wise bitwise equality, ignoring provenance.
    pub fn params_bits_eq(&self, other: &Checkpoint) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .all(|(k, t)| other.params.get(k).is_some_and(|o| t.bits_eq(o)))
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let available = self.buf.len() - self.pos;
        if n > available {
            return Err(CheckpointError::Truncated { needed: n, available });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    write_atomic(path.as_ref(), &bytes)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Checkpoint::from_bytes(&bytes)?)
}

/// Loads and checks the checkpoint kind in one step.
pub fn load_checkpoint_of_kind(path: impl AsRef<Path>, kind: FfnKind) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    ckpt.expect_kind(kind)?;
    Ok(ckpt)
}
