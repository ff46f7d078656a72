//! Binary checkpoint files.
//!
//! Layout: magic `OFNT`, `u32` LE format version, `u64` LE header length,
//! a UTF-8 JSON header listing the training step, the model variant and each
//! tensor's name, dtype and shape, then raw little-endian `f32` payloads in
//! header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};
use crate::model::{build_model, Model, ModelVariant};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"OFNT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic bytes)")]
    NotACheckpoint,
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint is truncated: needed {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },
    #[error("checkpoint header is malformed: {0}")]
    MalformedHeader(String),
    #[error("tensor {name:?}: model expects shape {expected:?}, checkpoint has {found}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: String },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    step: u64,
    variant: ModelVariant,
    tensors: Vec<TensorEntry>,
}

/// Decoded checkpoint contents.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub step: u64,
    pub variant: ModelVariant,
    pub tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
}

pub fn encode<T: Scalar>(model: &Model<T>, step: u64) -> Vec<u8> {
    let ps = model.params();
    let header = Header {
        step,
        variant: model.variant().clone(),
        tensors: ps
            .iter()
            .map(|(_, name, t)| TensorEntry { name: name.to_string(), dtype: "f32".into(), shape: t.shape().to_vec() })
            .collect(),
    };
    let header = serde_json::to_vec(&header).expect("header serialises");
    let mut out = Vec::with_capacity(16 + header.len() + 4 * ps.num_scalars());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, _, t) in ps.iter() {
        for &v in t.data() {
            out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
    }
    out
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8], CheckpointError> {
    let end = pos.checked_add(n).filter(|&e| e <= bytes.len()).ok_or(CheckpointError::Truncated {
        needed: pos.saturating_add(n),
        found: bytes.len(),
    })?;
    let s = &bytes[*pos..end];
    *pos = end;
    Ok(s)
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(CheckpointError::NotACheckpoint);
    }
    let mut pos = 4;
    let version = u32::from_le_bytes(take(bytes, &mut pos, 4)?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch { found: version, expected: FORMAT_VERSION });
    }
    let len = u64::from_le_bytes(take(bytes, &mut pos, 8)?.try_into().expect("8 bytes"));
    let len = usize::try_from(len).map_err(|_| CheckpointError::MalformedHeader("header length overflows".into()))?;
    let header: Header =
        serde_json::from_slice(take(bytes, &mut pos, len)?).map_err(|e| CheckpointError::MalformedHeader(e.to_string()))?;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in header.tensors {
        if entry.dtype != "f32" {
            return Err(CheckpointError::MalformedHeader(format!("tensor {:?} has dtype {:?}", entry.name, entry.dtype)));
        }
        let count: usize = entry.shape.iter().product();
        let raw = take(bytes, &mut pos, count * 4)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        tensors.push((entry.name, entry.shape, data));
    }
    if pos != bytes.len() {
        return Err(CheckpointError::MalformedHeader(format!("{} trailing bytes after the last tensor", bytes.len() - pos)));
    }
    Ok(Checkpoint { step: header.step, variant: header.variant, tensors })
}

impl Checkpoint {
    /// Copies the stored tensors into `model`, checking every model
    /// parameter in construction order.
    pub fn apply_to<T: Scalar>(&self, model: &mut Model<T>) -> Result<()> {
        let ps = model.params_mut();
        let ids: Vec<_> = ps.ids().collect();
        let mut updates = Vec::with_capacity(ids.len());
        for id in ids {
            let name = ps.name(id).to_string();
            let expected = ps.get(id).shape().to_vec();
            match self.tensors.iter().find(|(n, _, _)| *n == name) {
                Some((_, shape, data)) if *shape == expected => updates.push((id, data)),
                Some((_, shape, _)) => {
                    return Err(CheckpointError::ShapeMismatch { name, expected, found: format!("{shape:?}") }.into())
                }
                None => return Err(CheckpointError::ShapeMismatch { name, expected, found: "no such tensor".into() }.into()),
            }
        }
        if self.tensors.len() != updates.len() {
            let extra = self.tensors.iter().find(|(n, _, _)| ps.find(n).is_none()).expect("some tensor is unmatched");
            return Err(CheckpointError::ShapeMismatch {
                name: extra.0.clone(),
                expected: Vec::new(),
                found: format!("{:?} (not part of this model)", extra.1),
            }
            .into());
        }
        for (id, data) in updates {
            let t = ps.get_mut(id);
            for (dst, &src) in t.data_mut().iter_mut().zip(data) {
                *dst = T::from_f64_lossy(src as f64);
            }
        }
        Ok(())
    }

    pub fn into_model<T: Scalar>(self) -> Result<Model<T>> {
        let mut model = build_model(&self.variant, 0)?;
        self.apply_to(&mut model)?;
        Ok(model)
    }
}

pub fn save_checkpoint<T: Scalar>(model: &Model<T>, step: u64, path: &Path) -> Result<()> {
    fs::write(path, encode(model, step)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode(&bytes)?)
}

/// Loads a checkpoint and rebuilds the model it was saved from. Returns the
/// model and its training step.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(Model<T>, u64)> {
    let ckpt = read_checkpoint(path)?;
    let step = ckpt.step;
    Ok((ckpt.into_model()?, step))
}

/// Loads parameters into an already built model of a given variant.
pub fn load_into<T: Scalar>(model: &mut Model<T>, path: &Path) -> Result<u64> {
    let ckpt = read_checkpoint(path)?;
    ckpt.apply_to(model)?;
    Ok(ckpt.step)
}
