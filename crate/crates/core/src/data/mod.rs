//! Synthetic source/target segmentation domains.
//!
//! An image is a textured background (class 0) with a few randomly placed
//! polygons painted over it; a polygon's class fixes both its shape and its
//! base colour. The target domain renders the same scene distribution and then
//! applies a [`ShiftParams`] transform: hue rotation about the grey axis, an
//! additive intensity offset, rescaled texture frequency and polygon size, and
//! extra pixel noise.

mod export;
mod metrics;

pub use export::{dataset_digest, export_dataset, DatasetManifest};
pub use metrics::{miou, write_miou_csv, MiouReport};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

pub const CHANNELS: usize = 3;

/// Pixel noise of the source domain.
const BASE_NOISE: f64 = 0.03;

/// Target-domain transform. [`ShiftParams::none`] leaves the generative
/// distribution unchanged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftParams {
    /// Rotation about the grey axis, radians.
    pub hue: f64,
    /// Added to every channel.
    pub intensity: f64,
    /// Multiplies the background texture frequency.
    pub texture_scale: f64,
    /// Multiplies polygon radii.
    pub size_scale: f64,
    /// Standard deviation of extra Gaussian pixel noise.
    pub noise: f64,
}

impl ShiftParams {
    pub fn none() -> Self {
        Self {
            hue: 0.0,
            intensity: 0.0,
            texture_scale: 1.0,
            size_scale: 1.0,
            noise: 0.0,
        }
    }

    /// Intensity and hue offset used by the desk-scale experiments.
    pub fn desk_default() -> Self {
        Self {
            hue: 0.3,
            intensity: 0.3,
            texture_scale: 1.0,
            size_scale: 1.0,
            noise: 0.0,
        }
    }

    pub fn intensity_only(delta: f64) -> Self {
        Self {
            intensity: delta,
            ..Self::none()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.hue, self.intensity, self.texture_scale, self.size_scale, self.noise];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config(format!("shift parameters must be finite: {self:?}")));
        }
        if self.texture_scale <= 0.0 || self.size_scale <= 0.0 || self.noise < 0.0 {
            return Err(Error::Config(format!(
                "shift scales must be positive and noise non-negative: {self:?}"
            )));
        }
        Ok(())
    }
}

impl Default for ShiftParams {
    fn default() -> Self {
        Self::desk_default()
    }
}

/// One image `(3, H, W)` with its per-pixel class map in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub image: Tensor,
    pub label: Vec<usize>,
}

/// Labelled source data, unlabelled target training images and labelled
/// target evaluation data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainPair {
    pub seed: u64,
    pub shift: ShiftParams,
    pub num_classes: usize,
    pub image_hw: usize,
    pub source: Vec<Sample>,
    pub target_train: Vec<Tensor>,
    pub target_eval: Vec<Sample>,
}

impl DomainPair {
    /// Splits off the last `val_fraction` of the source set (at least one
    /// sample each side when possible).
    pub fn source_split(&self, val_fraction: f64) -> (&[Sample], &[Sample]) {
        let n = self.source.len();
        let val = ((n as f64 * val_fraction).round() as usize).clamp(usize::from(n > 1), n.saturating_sub(1));
        self.source.split_at(n - val)
    }
}

/// A stacked batch: images `(N, 3, H, W)` and `N·H·W` labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn stack_images(images: &[&Tensor]) -> Result<Tensor> {
    Tensor::stack(images)
}

pub fn stack_samples(samples: &[&Sample]) -> Result<Batch> {
    let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
    Ok(Batch {
        images: Tensor::stack(&images)?,
        labels: samples.iter().flat_map(|s| s.label.iter().copied()).collect(),
    })
}

pub fn class_names(num_classes: usize) -> Vec<String> {
    const NAMES: [&str; 6] = ["background", "square", "disc", "triangle", "diamond", "cross"];
    (0..num_classes)
        .map(|c| NAMES.get(c).map_or_else(|| format!("class_{c}"), |s| s.to_string()))
        .collect()
}

fn palette(class: usize) -> [f64; 3] {
    const FIXED: [[f64; 3]; 6] = [
        [0.40, 0.45, 0.38],
        [0.80, 0.30, 0.25],
        [0.25, 0.40, 0.80],
        [0.82, 0.78, 0.25],
        [0.35, 0.75, 0.40],
        [0.70, 0.35, 0.75],
    ];
    if let Some(c) = FIXED.get(class) {
        return *c;
    }
    let t = class as f64 * 2.399;
    [0.55 + 0.25 * t.cos(), 0.55 + 0.25 * (t + 2.094).cos(), 0.55 + 0.25 * (t + 4.189).cos()]
}

/// Whether offset `(dx, dy)` from a polygon centre lies inside the shape of
/// `class` with radius `r`.
fn inside(class: usize, dx: f64, dy: f64, r: f64) -> bool {
    match (class - 1) % 5 {
        0 => dx.abs() <= 0.8 * r && dy.abs() <= 0.8 * r,
        1 => dx * dx + dy * dy <= r * r,
        2 => dy <= 0.7 * r && dy >= -r && dx.abs() <= 0.6 * (dy + r),
        3 => dx.abs() + dy.abs() <= r,
        _ => (dx.abs() <= 0.3 * r && dy.abs() <= r) || (dy.abs() <= 0.3 * r && dx.abs() <= r),
    }
}

fn hue_matrix(theta: f64) -> [[f64; 3]; 3] {
    let (s, c) = theta.sin_cos();
    let a = c + (1.0 - c) / 3.0;
    let b = (1.0 - c) / 3.0 - (1.0f64 / 3.0).sqrt() * s;
    let d = (1.0 - c) / 3.0 + (1.0f64 / 3.0).sqrt() * s;
    [[a, b, d], [d, a, b], [b, d, a]]
}

/// Independent generator for image `index` of `stream`.
fn image_rng(seed: u64, stream: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.wrapping_mul(1 << 32).wrapping_add(index as u64));
    rng
}

fn render(rng: &mut ChaCha8Rng, classes: usize, hw: usize, shift: &ShiftParams) -> Sample {
    let n = hw * hw;
    let mut label = vec![0usize; n];
    let mut pix = vec![[0.0f64; 3]; n];

    let bg = palette(0);
    let jitter: Vec<f64> = (0..3).map(|_| rng.gen_range(-0.05..0.05)).collect();
    let freq = rng.gen_range(2.0..4.0) * shift.texture_scale;
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
    let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (sa, ca) = angle.sin_cos();
    for y in 0..hw {
        for x in 0..hw {
            let u = (x as f64 * ca + y as f64 * sa) / hw as f64;
            let tex = 0.08 * (std::f64::consts::TAU * freq * u + phase).sin();
            for ch in 0..3 {
                pix[y * hw + x][ch] = bg[ch] + jitter[ch] + tex;
            }
        }
    }

    let shapes = rng.gen_range(1..=3);
    for _ in 0..shapes {
        let class = rng.gen_range(1..classes);
        let r = rng.gen_range(0.14..0.26) * hw as f64 * shift.size_scale;
        let cx = rng.gen_range(0.0..hw as f64);
        let cy = rng.gen_range(0.0..hw as f64);
        let base = palette(class);
        let col: Vec<f64> = base.iter().map(|b| b + rng.gen_range(-0.06..0.06)).collect();
        for y in 0..hw {
            for x in 0..hw {
                if inside(class, x as f64 + 0.5 - cx, y as f64 + 0.5 - cy, r) {
                    label[y * hw + x] = class;
                    pix[y * hw + x].copy_from_slice(&col);
                }
            }
        }
    }

    let m = hue_matrix(shift.hue);
    let sigma = (BASE_NOISE * BASE_NOISE + shift.noise * shift.noise).sqrt();
    let noise = Normal::new(0.0, sigma).expect("finite sigma");
    let mut data = vec![0.0; 3 * n];
    for (p, rgb) in pix.iter().enumerate() {
        for ch in 0..3 {
            let rot: f64 = (0..3).map(|k| m[ch][k] * rgb[k]).sum();
            data[ch * n + p] = rot + shift.intensity + noise.sample(rng);
        }
    }
    Sample {
        image: Tensor::new(vec![CHANNELS, hw, hw], data).expect("sized"),
        label,
    }
}

/// Deterministic source/target pair. Target training and evaluation images
/// come from the same shifted distribution; only the evaluation labels are
/// kept.
pub fn generate(
    seed: u64,
    n_source: usize,
    n_target: usize,
    n_eval: usize,
    classes: usize,
    hw: usize,
    shift: ShiftParams,
) -> Result<DomainPair> {
    if classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {classes}")));
    }
    if hw < 4 {
        return Err(Error::Config(format!("image side {hw} is too small")));
    }
    shift.validate()?;
    let none = ShiftParams::none();
    let source = (0..n_source)
        .map(|i| render(&mut image_rng(seed, 0, i), classes, hw, &none))
        .collect();
    let target_train = (0..n_target)
        .map(|i| render(&mut image_rng(seed, 1, i), classes, hw, &shift).image)
        .collect();
    let target_eval = (0..n_eval)
        .map(|i| render(&mut image_rng(seed, 2, i), classes, hw, &shift))
        .collect();
    Ok(DomainPair {
        seed,
        shift,
        num_classes: classes,
        image_hw: hw,
        source,
        target_train,
        target_eval,
    })
}

/// Per-channel mean over a set of `(3, H, W)` images.
pub fn channel_means<'a>(images: impl IntoIterator<Item = &'a Tensor>) -> [f64; 3] {
    let mut sum = [0.0; 3];
    let mut count = 0usize;
    for img in images {
        let plane = img.len() / CHANNELS;
        for (ch, s) in sum.iter_mut().enumerate() {
            *s += img.data()[ch * plane..(ch + 1) * plane].iter().sum::<f64>();
        }
        count += plane;
    }
    sum.map(|s| s / count.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_cover_background_and_shapes() {
        let d = generate(1, 20, 2, 2, 5, 16, ShiftParams::none()).unwrap();
        let mut seen = [false; 5];
        for s in &d.source {
            assert_eq!(s.image.shape(), &[3, 16, 16]);
            assert_eq!(s.label.len(), 256);
            for &l in &s.label {
                seen[l] = true;
            }
        }
        assert!(seen.iter().all(|&b| b), "{seen:?}");
    }

    #[test]
    fn invalid_dimensions_are_rejected() {
        assert!(generate(1, 1, 1, 1, 1, 16, ShiftParams::none()).is_err());
        assert!(generate(1, 1, 1, 1, 5, 2, ShiftParams::none()).is_err());
        let bad = ShiftParams {
            noise: f64::NAN,
            ..ShiftParams::none()
        };
        assert!(generate(1, 1, 1, 1, 5, 16, bad).is_err());
    }

    #[test]
    fn hue_rotation_preserves_grey() {
        let m = hue_matrix(0.9);
        for row in m {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let id = hue_matrix(0.0);
        assert!((id[0][0] - 1.0).abs() < 1e-15 && id[0][1].abs() < 1e-15);
    }

    #[test]
    fn source_split_keeps_both_sides_non_empty() {
        let d = generate(1, 10, 0, 0, 3, 8, ShiftParams::none()).unwrap();
        let (tr, va) = d.source_split(0.2);
        assert_eq!((tr.len(), va.len()), (8, 2));
        let (tr, va) = d.source_split(0.0);
        assert_eq!((tr.len(), va.len()), (9, 1));
    }
}
