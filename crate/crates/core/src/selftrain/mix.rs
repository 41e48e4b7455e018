//! ClassMix and the photometric/geometric augmentations.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::PseudoLabelBatch;
use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Target images with source pixels pasted in, and the per-pixel targets and
/// loss weights that go with them.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedBatch {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub weights: Vec<f64>,
    /// True where the pixel came from the source image.
    pub pasted: Vec<bool>,
    /// Classes pasted into each image, ascending.
    pub classes: Vec<Vec<usize>>,
}

/// For each source/target pair, pastes the pixels of ⌈K/2⌉ randomly chosen
/// classes (of the K present in the source labels) onto the target.
/// Pasted pixels get weight 1; the rest keep the pseudo-label weight.
pub fn classmix(
    src_img: &Tensor,
    src_lbl: &[usize],
    tgt_img: &Tensor,
    tgt_pseudo: &PseudoLabelBatch,
    rng_seed: u64,
) -> Result<MixedBatch> {
    let (n, c, h, w) = src_img.dims4()?;
    let hw = h * w;
    if tgt_img.shape() != src_img.shape()
        || src_lbl.len() != n * hw
        || tgt_pseudo.labels.len() != n * hw
        || tgt_pseudo.quality.len() != n
    {
        return Err(Error::Shape(format!(
            "classmix: source {:?}, target {:?}, {} labels, {} pseudo-labels",
            src_img.shape(),
            tgt_img.shape(),
            src_lbl.len(),
            tgt_pseudo.labels.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut images = tgt_img.clone();
    let mut labels = tgt_pseudo.labels.clone();
    let mut weights = tgt_pseudo.pixel_weights();
    let mut pasted = vec![false; n * hw];
    let mut chosen_all = Vec::with_capacity(n);
    for b in 0..n {
        let lbl = &src_lbl[b * hw..(b + 1) * hw];
        let mut present: Vec<usize> = lbl.to_vec();
        present.sort_unstable();
        present.dedup();
        let k = present.len().div_ceil(2);
        let mut chosen: Vec<usize> = present.choose_multiple(&mut rng, k).copied().collect();
        chosen.sort_unstable();
        for (p, &l) in lbl.iter().enumerate() {
            if chosen.binary_search(&l).is_ok() {
                let q = b * hw + p;
                pasted[q] = true;
                labels[q] = l;
                weights[q] = 1.0;
                for ch in 0..c {
                    let i = (b * c + ch) * hw + p;
                    images.data_mut()[i] = src_img.data()[i];
                }
            }
        }
        chosen_all.push(chosen);
    }
    Ok(MixedBatch {
        images,
        labels,
        weights,
        pasted,
        classes: chosen_all,
    })
}

/// Augmentation strengths. Zero everywhere disables augmentation.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AugmentParams {
    /// Maximum translation in pixels (reflect-padded crop).
    pub max_shift: usize,
    /// Per-channel gain drawn from `1 ± gain`.
    pub gain: f64,
    /// Per-channel offset drawn from `± offset`.
    pub offset: f64,
    /// Probability of a 3×3 box blur.
    pub blur_prob: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            max_shift: 2,
            gain: 0.1,
            offset: 0.05,
            blur_prob: 0.25,
        }
    }
}

impl AugmentParams {
    pub fn none() -> Self {
        Self {
            max_shift: 0,
            gain: 0.0,
            offset: 0.0,
            blur_prob: 0.0,
        }
    }
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i - 1;
    }
    if i >= n {
        i = 2 * n - i - 1;
    }
    i.clamp(0, n - 1) as usize
}

/// Random translation (labels follow), channel gain/offset and blur.
/// `labels` may be empty for unlabelled images.
pub fn augment(images: &mut Tensor, labels: &mut [usize], params: &AugmentParams, rng: &mut ChaCha8Rng) -> Result<()> {
    let (n, c, h, w) = images.dims4()?;
    let hw = h * w;
    let with_labels = !labels.is_empty();
    if with_labels && labels.len() != n * hw {
        return Err(Error::Shape(format!("augment: {} labels for {n}×{h}×{w}", labels.len())));
    }
    for b in 0..n {
        let s = params.max_shift as isize;
        let (dy, dx) = if s > 0 {
            (rng.gen_range(-s..=s), rng.gen_range(-s..=s))
        } else {
            (0, 0)
        };
        if dy != 0 || dx != 0 {
            let src_of = |p: usize| {
                let (y, x) = ((p / w) as isize, (p % w) as isize);
                reflect(y + dy, h) * w + reflect(x + dx, w)
            };
            for ch in 0..c {
                let plane = &mut images.data_mut()[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                let old = plane.to_vec();
                for (p, v) in plane.iter_mut().enumerate() {
                    *v = old[src_of(p)];
                }
            }
            if with_labels {
                let lp = &mut labels[b * hw..(b + 1) * hw];
                let old = lp.to_vec();
                for (p, v) in lp.iter_mut().enumerate() {
                    *v = old[src_of(p)];
                }
            }
        }
        let blur = params.blur_prob > 0.0 && rng.gen_bool(params.blur_prob.min(1.0));
        for ch in 0..c {
            let g = if params.gain > 0.0 {
                1.0 + rng.gen_range(-params.gain..params.gain)
            } else {
                1.0
            };
            let o = if params.offset > 0.0 {
                rng.gen_range(-params.offset..params.offset)
            } else {
                0.0
            };
            let plane = &mut images.data_mut()[(b * c + ch) * hw..(b * c + ch + 1) * hw];
            if blur {
                let old = plane.to_vec();
                for y in 0..h {
                    for x in 0..w {
                        let mut acc = 0.0;
                        for ky in -1isize..=1 {
                            for kx in -1isize..=1 {
                                acc += old[reflect(y as isize + ky, h) * w + reflect(x as isize + kx, w)];
                            }
                        }
                        plane[y * w + x] = acc / 9.0;
                    }
                }
            }
            for v in plane.iter_mut() {
                *v = *v * g + o;
            }
        }
    }
    Ok(())
}
