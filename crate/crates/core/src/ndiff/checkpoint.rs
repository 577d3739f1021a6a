//! Parameter checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes   b"TGCKPT\0\x01"
//! index_len u64       byte length of the JSON index
//! index     JSON      {"meta": <any>, "tensors": [{"name", "shape": [r, c], "offset"}]}
//! data      f64 * n   row-major values, `offset` counted in elements
//! ```
//!
//! Tensors appear in parameter registration order, so saving the same store
//! twice yields identical bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Matrix, ParamStore};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"TGCKPT\0\x01";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Index {
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

pub fn encode(params: &ParamStore, meta: &serde_json::Value) -> Result<Vec<u8>> {
    let mut tensors = Vec::with_capacity(params.len());
    let mut offset = 0;
    for (_, name, m) in params.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: [m.rows(), m.cols()],
            offset,
        });
        offset += m.len();
    }
    let index = serde_json::to_vec(&Index {
        meta: meta.clone(),
        tensors,
    })?;
    let mut out = Vec::with_capacity(16 + index.len() + offset * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(index.len() as u64).to_le_bytes());
    out.extend_from_slice(&index);
    for (_, _, m) in params.iter() {
        for v in m.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(ParamStore, serde_json::Value)> {
    let bad = |msg: &str| Error::Checkpoint(msg.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let index_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let data_start = 16usize
        .checked_add(index_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated index"))?;
    let index: Index = serde_json::from_slice(&bytes[16..data_start])?;
    let data = &bytes[data_start..];
    if data.len() % 8 != 0 {
        return Err(bad("data section is not a whole number of f64 values"));
    }
    let values: Vec<f64> = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut store = ParamStore::new();
    for t in index.tensors {
        let n = t.shape[0] * t.shape[1];
        let slice = values
            .get(t.offset..t.offset + n)
            .ok_or_else(|| bad(&format!("tensor `{}` runs past the data section", t.name)))?;
        store.add(t.name, Matrix::from_vec(t.shape[0], t.shape[1], slice.to_vec())?)?;
    }
    Ok((store, index.meta))
}

pub fn save(path: &Path, params: &ParamStore, meta: &serde_json::Value) -> Result<()> {
    let bytes = encode(params, meta)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(ParamStore, serde_json::Value)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
