//! `OVFL1` tensor files: magic, little-endian u64 header length, a JSON header
//! mapping each tensor name to its dtype, shape and data offset, then raw
//! little-endian f32 blobs each starting on a 64-byte boundary.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use overfill_core::model::{ModelConfig, Weights};
use overfill_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"OVFL1";
const ALIGN: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub dtype: String,
    pub shape: Vec<usize>,
    /// Offset from the start of the data section, a multiple of 64.
    pub byte_offset: usize,
}

fn pad_to(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

/// Serializes named tensors. Blobs follow the given order; the header is
/// sorted by name so identical inputs give identical bytes.
pub fn encode(tensors: &[(String, &Tensor<f32>)]) -> Vec<u8> {
    let mut header = BTreeMap::new();
    let mut offset = 0;
    for (name, t) in tensors {
        header.insert(
            name.clone(),
            TensorEntry {
                dtype: "f32".into(),
                shape: t.shape().to_vec(),
                byte_offset: offset,
            },
        );
        offset = pad_to(offset + t.len() * 4);
    }
    let mut json = serde_json::to_vec(&header).expect("header serializes");
    // pad the header with spaces so the data section starts aligned
    let data_start = pad_to(MAGIC.len() + 8 + json.len());
    json.resize(data_start - MAGIC.len() - 8, b' ');
    let mut out = Vec::with_capacity(data_start + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in tensors {
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out.resize(pad_to(out.len()), 0);
    }
    out
}

/// Parses a checkpoint into name → tensor.
pub fn decode(bytes: &[u8], path: &Path) -> Result<BTreeMap<String, Tensor<f32>>> {
    let bad = |m: &str| Error::format(path, m);
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(bad("not an OVFL1 checkpoint"));
    }
    let len = u64::from_le_bytes(bytes[5..13].try_into().expect("8 bytes")) as usize;
    let data_start = 13usize.checked_add(len).ok_or_else(|| bad("header length overflows"))?;
    if data_start > bytes.len() {
        return Err(bad("truncated header"));
    }
    let header: BTreeMap<String, TensorEntry> = serde_json::from_slice(&bytes[13..data_start])
        .map_err(|e| Error::format(path, format!("bad header: {e}")))?;
    let data = &bytes[data_start..];
    let mut out = BTreeMap::new();
    for (name, e) in header {
        if e.dtype != "f32" {
            return Err(bad(&format!("{name}: unsupported dtype {}", e.dtype)));
        }
        if e.byte_offset % ALIGN != 0 {
            return Err(bad(&format!("{name}: misaligned offset")));
        }
        let n: usize = e.shape.iter().product();
        let end = e.byte_offset + n * 4;
        if end > data.len() {
            return Err(bad(&format!("{name}: data out of bounds")));
        }
        let values = data[e.byte_offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        out.insert(name, Tensor::new(e.shape, values).map_err(|err| bad(&err.to_string()))?);
    }
    Ok(out)
}

pub fn save(w: &Weights<f32>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode(&w.named_tensors())).map_err(|e| Error::io(path, e))
}

/// Loads weights whose attention geometry and vocabulary come from `base`;
/// hidden and FFN widths and embedding tying are read off the tensor shapes,
/// so the same base config loads full and pruned checkpoints.
pub fn load(path: &Path, base: &ModelConfig) -> Result<Weights<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut tensors = decode(&bytes, path)?;
    let dim = |name: &str, axis: usize| {
        tensors
            .get(name)
            .and_then(|t| t.shape().get(axis).copied())
            .ok_or_else(|| Error::format(path, format!("missing tensor {name}")))
    };
    let config = ModelConfig {
        hidden_dim: dim("tok_embeddings", 1)?,
        intermediate_dim: dim("layers.0.w_gate", 1)?,
        tied_embeddings: !tensors.contains_key("lm_head"),
        ..base.clone()
    };
    let mut ordered = Vec::new();
    for (name, shape) in Weights::<f32>::expected_shapes(&config) {
        let t = tensors
            .remove(&name)
            .ok_or_else(|| Error::format(path, format!("missing tensor {name}")))?;
        if t.shape() != shape.as_slice() {
            return Err(Error::format(
                path,
                format!("{name}: shape {:?}, expected {shape:?}", t.shape()),
            ));
        }
        ordered.push(t);
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::format(path, format!("unexpected tensor {extra}")));
    }
    Ok(Weights::from_tensors(config, ordered, false)?)
}
