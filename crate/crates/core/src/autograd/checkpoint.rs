//! Single-file checkpoints: a text header line, a JSON manifest of tensor
//! names, shapes and byte offsets, then one little-endian `f64` blob.
//!
//! ```text
//! LANETR-CKPT 1 <manifest bytes>\n
//! {"meta": {...}, "tensors": [{"name": .., "shape": [..], "offset": ..}, ..]}
//! <blob>
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &str = "LANETR-CKPT";
const VERSION: u32 = 1;

/// Named tensors plus free-form metadata (model config, optimizer step, ...).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the blob.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut offset = 0;
    let mut entries = Vec::with_capacity(ckpt.tensors.len());
    let mut blob = Vec::new();
    for (name, t) in &ckpt.tensors {
        entries.push(Entry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        for x in t.data() {
            blob.extend_from_slice(&x.to_le_bytes());
        }
        offset += 8 * t.len();
    }
    let manifest = serde_json::to_vec(&Manifest {
        meta: ckpt.meta.clone(),
        tensors: entries,
    })
    .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut bytes = format!("{CHECKPOINT_MAGIC} {VERSION} {}\n", manifest.len()).into_bytes();
    bytes.extend_from_slice(&manifest);
    bytes.extend_from_slice(&blob);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.display()));
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("missing header"))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| bad("header is not text"))?;
    let mut parts = header.split(' ');
    if parts.next() != Some(CHECKPOINT_MAGIC) {
        return Err(bad("not a checkpoint file"));
    }
    if parts.next().and_then(|v| v.parse::<u32>().ok()) != Some(VERSION) {
        return Err(bad("unsupported version"));
    }
    let len: usize = parts
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| bad("bad manifest length"))?;
    let start = nl + 1;
    let manifest_bytes = bytes
        .get(start..start + len)
        .ok_or_else(|| bad("truncated manifest"))?;
    let manifest: Manifest =
        serde_json::from_slice(manifest_bytes).map_err(|e| bad(&e.to_string()))?;
    let blob = &bytes[start + len..];
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for e in manifest.tensors {
        let n: usize = e.shape.iter().product();
        let raw = blob
            .get(e.offset..e.offset + 8 * n)
            .ok_or_else(|| bad(&format!("tensor `{}` out of range", e.name)))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push((e.name, Tensor::new(e.shape, data)?));
    }
    Ok(Checkpoint {
        meta: manifest.meta,
        tensors,
    })
}
