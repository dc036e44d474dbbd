//! `GVQC` checkpoint files.
//!
//! Layout, integers little-endian:
//!
//! | bytes | field |
//! |---|---|
//! | 4 | magic `GVQC` |
//! | 2 | container version, u16 (currently 1) |
//! | 4 | manifest length `L`, u32 |
//! | L | UTF-8 JSON manifest |
//! | rest | one `GVQT` tensor record per manifest entry, in manifest order |
//!
//! The manifest carries the training config, step and epoch counters, the
//! epoch cursor and partial accumulators, RNG states, Adam step counts, the
//! metrics history, and `{name, role, shape}` for every tensor.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor_file::{decode_tensor, encode_tensor};
use crate::error::{Error, Result};
use crate::numerics::{RngStream, Scalar};
use crate::trainer::{Checkpoint, EpochAccum, EpochMetrics, NamedTensor, TensorRole, TrainConfig, Trainer};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GVQC";
pub const CHECKPOINT_CONTAINER_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub role: TensorRole,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub config: TrainConfig,
    pub step: u64,
    pub epoch: usize,
    pub cursor: usize,
    pub accum: EpochAccum,
    pub rng: BTreeMap<String, RngStream>,
    pub adam_steps: BTreeMap<String, Vec<u64>>,
    pub history: Vec<EpochMetrics>,
    pub tensors: Vec<ManifestEntry>,
}

pub fn encode_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>) -> Result<Vec<u8>> {
    let manifest = Manifest {
        format_version: ckpt.format_version,
        config: ckpt.config.clone(),
        step: ckpt.step,
        epoch: ckpt.epoch,
        cursor: ckpt.cursor,
        accum: ckpt.accum.clone(),
        rng: ckpt.rng.clone(),
        adam_steps: ckpt.adam_steps.clone(),
        history: ckpt.history.clone(),
        tensors: ckpt
            .tensors
            .iter()
            .map(|t| ManifestEntry {
                name: t.name.clone(),
                role: t.role.clone(),
                shape: t.tensor.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| Error::config(format!("manifest: {e}")))?;
    let len = u32::try_from(json.len()).map_err(|_| Error::config("manifest exceeds 4 GiB"))?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_CONTAINER_VERSION.to_le_bytes());
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&json);
    for t in &ckpt.tensors {
        out.extend_from_slice(&encode_tensor(&t.tensor)?);
    }
    Ok(out)
}

/// Parses a checkpoint and checks it restores cleanly against its own config.
pub fn decode_checkpoint<T: Scalar>(bytes: &[u8], path: &Path) -> Result<Checkpoint<T>> {
    let bad = |msg: String| Error::format(path, msg);
    if bytes.len() < 10 {
        return Err(bad(format!("header needs 10 bytes, found {}", bytes.len())));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(bad(format!("bad magic {:?}, expected \"GVQC\"", String::from_utf8_lossy(&bytes[..4]))));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CHECKPOINT_CONTAINER_VERSION {
        return Err(bad(format!("unsupported checkpoint container version {version}")));
    }
    let len = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
    let body = &bytes[10..];
    if body.len() < len {
        return Err(bad(format!("manifest needs {len} bytes, found {}", body.len())));
    }
    let manifest: Manifest =
        serde_json::from_slice(&body[..len]).map_err(|e| bad(format!("manifest: {e}")))?;
    let mut seen = BTreeSet::new();
    if let Some(dup) = manifest.tensors.iter().find(|e| !seen.insert(e.name.as_str())) {
        return Err(bad(format!("duplicate tensor name {:?} in manifest", dup.name)));
    }
    let mut rest = &body[len..];
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        if rest.is_empty() {
            return Err(bad(format!("missing payload for tensor {:?}", entry.name)));
        }
        let (tensor, used) = decode_tensor::<T>(rest, path)
            .map_err(|e| bad(format!("tensor {:?}: {e}", entry.name)))?;
        if tensor.shape() != entry.shape.as_slice() {
            return Err(bad(format!(
                "tensor {:?} has shape {:?}, manifest says {:?}",
                entry.name,
                tensor.shape(),
                entry.shape
            )));
        }
        tensors.push(NamedTensor {
            name: entry.name.clone(),
            role: entry.role.clone(),
            tensor,
        });
        rest = &rest[used..];
    }
    if !rest.is_empty() {
        return Err(bad(format!("{} trailing bytes after the last tensor", rest.len())));
    }
    let ckpt = Checkpoint {
        format_version: manifest.format_version,
        config: manifest.config,
        tensors,
        adam_steps: manifest.adam_steps,
        step: manifest.step,
        epoch: manifest.epoch,
        cursor: manifest.cursor,
        accum: manifest.accum,
        rng: manifest.rng,
        history: manifest.history,
    };
    Trainer::from_checkpoint(&ckpt).map_err(|e| bad(e.to_string()))?;
    Ok(ckpt)
}

pub fn write_checkpoint_file<T: Scalar>(path: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    let bytes = encode_checkpoint(ckpt)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint_file<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
