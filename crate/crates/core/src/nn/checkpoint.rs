//! Weight checkpoints: a flat little-endian `f64` blob plus a JSON index.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the blob.
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointIndex {
    pub blob: String,
    pub entries: Vec<CheckpointEntry>,
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("bin"), stem.with_extension("json"))
}

/// Writes `<stem>.bin` and `<stem>.json`.
pub fn save_checkpoint(store: &ParamStore, stem: &Path) -> Result<()> {
    let (bin, idx) = paths(stem);
    let mut blob = Vec::with_capacity(store.numel() * 8);
    let mut entries = Vec::with_capacity(store.len());
    for p in store.iter() {
        entries.push(CheckpointEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            dtype: "f64".into(),
            offset: blob.len(),
            len: p.value.len(),
        });
        for v in p.value.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let index = CheckpointIndex {
        blob: bin
            .file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_default(),
        entries,
    };
    fs::write(&bin, blob)?;
    fs::write(&idx, serde_json::to_string_pretty(&index)?)?;
    Ok(())
}

/// Reads a checkpoint written by [`save_checkpoint`]; gradients start at zero.
pub fn load_checkpoint(stem: &Path) -> Result<ParamStore> {
    let (_, idx) = paths(stem);
    let index: CheckpointIndex = serde_json::from_str(&fs::read_to_string(&idx)?)?;
    let bin = idx.with_file_name(&index.blob);
    let blob = fs::read(bin)?;
    let mut store = ParamStore::new();
    for e in &index.entries {
        if e.dtype != "f64" {
            return Err(Error::Config(format!("unsupported dtype `{}` for {}", e.dtype, e.name)));
        }
        let end = e.offset + e.len * 8;
        if end > blob.len() || e.shape.iter().product::<usize>() != e.len {
            return Err(Error::Config(format!("corrupt checkpoint entry {}", e.name)));
        }
        let data = blob[e.offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        store.add(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
    }
    Ok(store)
}
