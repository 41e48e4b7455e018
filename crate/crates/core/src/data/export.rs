//! Dataset export: flat little-endian arrays plus a JSON manifest.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DomainPair, ShiftParams};
use crate::error::Result;
use crate::nn::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub shift: ShiftParams,
    pub num_classes: usize,
    pub image_hw: usize,
    pub n_source: usize,
    pub n_target_train: usize,
    pub n_target_eval: usize,
    /// Image files hold `f64` pixels in `(3, H, W)` order per image; label
    /// files hold one byte per pixel.
    pub files: Vec<String>,
    /// Hex SHA-256 over every exported byte, in file order.
    pub digest: String,
}

fn image_bytes<'a>(images: impl Iterator<Item = &'a Tensor>) -> Vec<u8> {
    images
        .flat_map(|t| t.data().iter().flat_map(|v| v.to_le_bytes()))
        .collect()
}

fn label_bytes<'a>(labels: impl Iterator<Item = &'a Vec<usize>>) -> Vec<u8> {
    labels.flat_map(|l| l.iter().map(|&c| c as u8)).collect()
}

fn payload(d: &DomainPair) -> Vec<(&'static str, Vec<u8>)> {
    vec![
        ("source_images.bin", image_bytes(d.source.iter().map(|s| &s.image))),
        ("source_labels.bin", label_bytes(d.source.iter().map(|s| &s.label))),
        ("target_train_images.bin", image_bytes(d.target_train.iter())),
        ("target_eval_images.bin", image_bytes(d.target_eval.iter().map(|s| &s.image))),
        ("target_eval_labels.bin", label_bytes(d.target_eval.iter().map(|s| &s.label))),
    ]
}

/// Seed-stable fingerprint of a dataset.
pub fn dataset_digest(d: &DomainPair) -> String {
    let mut h = Sha256::new();
    for (_, bytes) in payload(d) {
        h.update(&bytes);
    }
    hex::encode(h.finalize())
}

pub fn export_dataset(d: &DomainPair, dir: &Path) -> Result<DatasetManifest> {
    fs::create_dir_all(dir)?;
    let mut h = Sha256::new();
    let mut files = Vec::new();
    for (name, bytes) in payload(d) {
        h.update(&bytes);
        fs::write(dir.join(name), &bytes)?;
        files.push(name.to_string());
    }
    let manifest = DatasetManifest {
        seed: d.seed,
        shift: d.shift,
        num_classes: d.num_classes,
        image_hw: d.image_hw,
        n_source: d.source.len(),
        n_target_train: d.target_train.len(),
        n_target_eval: d.target_eval.len(),
        files,
        digest: hex::encode(h.finalize()),
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}
