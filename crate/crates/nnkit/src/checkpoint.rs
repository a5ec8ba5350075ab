//! Binary checkpoint container: magic `CKPT`, u16 version, u32 header length,
//! JSON header, then each parameter tensor as little-endian scalars in header
//! order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CKPT";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub step: u64,
    #[serde(default)]
    pub dtype: String,
    #[serde(default)]
    pub params: Vec<ParamEntry>,
    /// Free-form metadata (model config, metrics of the saved epoch, ...).
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub fn encode_checkpoint<T: Scalar>(header: &CheckpointHeader, store: &ParamStore<T>) -> Result<Vec<u8>> {
    let mut header = header.clone();
    header.dtype = T::DTYPE.to_string();
    header.params = store
        .iter()
        .map(|(name, t)| ParamEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
        })
        .collect();
    let json = serde_json::to_vec(&header).map_err(|e| NnError::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(10 + json.len() + store.num_scalars() * T::BYTES);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in store.iter() {
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<(CheckpointHeader, ParamStore<T>)> {
    let bad = |m: &str| NnError::Checkpoint(m.to_string());
    if bytes.len() < 10 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(bad("missing CKPT magic"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CHECKPOINT_VERSION {
        return Err(NnError::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let hlen = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
    let body = bytes.get(10..10 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| NnError::Checkpoint(e.to_string()))?;
    if header.dtype != T::DTYPE {
        return Err(NnError::Checkpoint(format!(
            "checkpoint holds {} tensors, requested {}",
            header.dtype,
            T::DTYPE
        )));
    }
    let mut pos = 10 + hlen;
    let mut store = ParamStore::new();
    for entry in &header.params {
        let n: usize = entry.shape.iter().product();
        let raw = bytes
            .get(pos..pos + n * T::BYTES)
            .ok_or_else(|| bad("truncated tensor data"))?;
        let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
        store.add(entry.name.clone(), Tensor::from_vec(&entry.shape, data)?)?;
        pos += n * T::BYTES;
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes after tensor data"));
    }
    Ok((header, store))
}

pub fn write_checkpoint<T: Scalar>(path: &Path, header: &CheckpointHeader, store: &ParamStore<T>) -> Result<()> {
    fs::write(path, encode_checkpoint(header, store)?)?;
    Ok(())
}

pub fn read_checkpoint<T: Scalar>(path: &Path) -> Result<(CheckpointHeader, ParamStore<T>)> {
    decode_checkpoint(&fs::read(path)?)
}
