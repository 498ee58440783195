//! Single-file parameter checkpoints.
//!
//! Layout: one line of JSON manifest terminated by `\n`, followed by the raw
//! little-endian `f32` blobs. Offsets in the manifest are byte offsets into
//! the blob section.
//!
//! ```text
//! {"format":"spacetoken-ckpt-v1","tensors":[{"name":"w","shape":[2,3],"offset":0},...]}\n
//! <f32 LE bytes>...
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DiffError, Result};
use crate::scalar::Scalar;
use crate::store::ParameterStore;
use crate::tensor::numel;

pub const CHECKPOINT_FORMAT: &str = "spacetoken-ckpt-v1";

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub format: String,
    pub tensors: Vec<ManifestEntry>,
}

fn corrupt(msg: impl Into<String>) -> DiffError {
    DiffError::Checkpoint(msg.into())
}

/// Serializes a store (converted to `f32`) into bytes.
pub fn encode<T: Scalar>(store: &ParameterStore<T>) -> Result<Vec<u8>> {
    let mut tensors = Vec::with_capacity(store.len());
    let mut blob = Vec::with_capacity(store.num_scalars() * 4);
    for (name, p) in store.iter() {
        tensors.push(ManifestEntry { name: name.to_string(), shape: p.shape.clone(), offset: blob.len() as u64 });
        for &v in &p.data {
            blob.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    let manifest = Manifest { format: CHECKPOINT_FORMAT.to_string(), tensors };
    let mut out = serde_json::to_vec(&manifest).map_err(|e| corrupt(e.to_string()))?;
    out.push(b'\n');
    out.extend_from_slice(&blob);
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<ParameterStore<f32>> {
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| corrupt("missing manifest line"))?;
    let manifest: Manifest =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| corrupt(format!("bad manifest: {e}")))?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(corrupt(format!("unsupported format `{}`, expected `{CHECKPOINT_FORMAT}`", manifest.format)));
    }
    let blob = &bytes[nl + 1..];
    let mut store = ParameterStore::new();
    for entry in manifest.tensors {
        let n = numel(&entry.shape);
        let start = entry.offset as usize;
        let end = start + n * 4;
        if end > blob.len() {
            return Err(corrupt(format!(
                "tensor `{}` at byte offset {start} needs {} bytes, blob has {}",
                entry.name,
                n * 4,
                blob.len().saturating_sub(start)
            )));
        }
        let data = blob[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        store.insert(entry.name, &entry.shape, data)?;
    }
    Ok(store)
}

pub fn save<T: Scalar>(path: &Path, store: &ParameterStore<T>) -> Result<()> {
    let bytes = encode(store)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParameterStore<f32>> {
    decode(&fs::read(path)?)
}
