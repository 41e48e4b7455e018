//! Teacher pseudo-labels: confidence-weighted and energy-masked.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Hard per-pixel labels for a batch of target images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelBatch {
    /// `N·H·W` argmax classes.
    pub labels: Vec<usize>,
    pub valid_mask: Vec<bool>,
    /// One weight in `[0, 1]` per image.
    pub quality: Vec<f64>,
}

impl PseudoLabelBatch {
    pub fn pixels_per_image(&self) -> usize {
        self.labels.len() / self.quality.len().max(1)
    }

    /// Loss weight of every pixel: image quality where the mask holds, else 0.
    pub fn pixel_weights(&self) -> Vec<f64> {
        let hw = self.pixels_per_image();
        self.valid_mask
            .iter()
            .enumerate()
            .map(|(p, &ok)| if ok { self.quality[p / hw] } else { 0.0 })
            .collect()
    }

    pub fn valid_fraction(&self) -> f64 {
        self.valid_mask.iter().filter(|&&v| v).count() as f64 / self.valid_mask.len().max(1) as f64
    }

    pub fn mean_quality(&self) -> f64 {
        self.quality.iter().sum::<f64>() / self.quality.len().max(1) as f64
    }
}

/// Visits every pixel's logit vector as `(image, pixel, logits)`.
fn for_each_pixel(logits: &Tensor, mut f: impl FnMut(usize, usize, &[f64])) -> Result<()> {
    let (n, c, h, w) = logits.dims4()?;
    let hw = h * w;
    let d = logits.data();
    let mut row = vec![0.0; c];
    for b in 0..n {
        for p in 0..hw {
            for (k, r) in row.iter_mut().enumerate() {
                *r = d[(b * c + k) * hw + p];
            }
            f(b, p, &row);
        }
    }
    Ok(())
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Largest softmax probability of a logit vector.
pub fn max_softmax(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    1.0 / row.iter().map(|v| (v - m).exp()).sum::<f64>()
}

/// Argmax labels, an all-true mask, and per-image quality equal to the
/// fraction of pixels whose largest softmax probability is at least `tau`.
pub fn pseudo_confidence(teacher_logits: &Tensor, tau: f64) -> Result<PseudoLabelBatch> {
    let (n, _, h, w) = teacher_logits.dims4()?;
    let hw = h * w;
    let mut labels = Vec::with_capacity(n * hw);
    let mut confident = vec![0usize; n];
    for_each_pixel(teacher_logits, |b, _, row| {
        labels.push(argmax(row));
        if max_softmax(row) >= tau {
            confident[b] += 1;
        }
    })?;
    Ok(PseudoLabelBatch {
        valid_mask: vec![true; labels.len()],
        labels,
        quality: confident.iter().map(|&c| c as f64 / hw as f64).collect(),
    })
}

/// Free energy `−T·log Σ_c exp(h_c / T)` of one logit vector.
pub fn energy(row: &[f64], temperature: f64) -> f64 {
    let m = row.iter().map(|v| v / temperature).fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = row.iter().map(|v| (v / temperature - m).exp()).sum();
    -temperature * (m + s.ln())
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("energy temperature must be positive, got {t}")))
    }
}

/// Per-pixel energy, shaped `(N, H, W)`.
pub fn energy_score(teacher_logits: &Tensor, temperature: f64) -> Result<Tensor> {
    check_temperature(temperature)?;
    let (n, _, h, w) = teacher_logits.dims4()?;
    let mut out = Vec::with_capacity(n * h * w);
    for_each_pixel(teacher_logits, |_, _, row| out.push(energy(row, temperature)))?;
    Tensor::new(vec![n, h, w], out)
}

/// Argmax labels valid exactly where the energy is below `tau_e`; quality 1.
pub fn pseudo_energy(teacher_logits: &Tensor, tau_e: f64, temperature: f64) -> Result<PseudoLabelBatch> {
    check_temperature(temperature)?;
    let n = teacher_logits.dims4()?.0;
    let mut labels = Vec::new();
    let mut valid_mask = Vec::new();
    for_each_pixel(teacher_logits, |_, _, row| {
        labels.push(argmax(row));
        valid_mask.push(energy(row, temperature) < tau_e);
    })?;
    Ok(PseudoLabelBatch {
        labels,
        valid_mask,
        quality: vec![1.0; n],
    })
}
