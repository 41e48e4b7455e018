use crate::error::{Error, Result};
use crate::nn::{Tape, Var};

/// Logits with their per-pixel targets and optional per-pixel weights
/// (all ones when absent).
#[derive(Debug, Clone, Copy)]
pub struct LossTerm<'a> {
    pub logits: Var,
    pub labels: &'a [usize],
    pub weights: Option<&'a [f64]>,
}

impl<'a> LossTerm<'a> {
    pub fn new(logits: Var, labels: &'a [usize], weights: Option<&'a [f64]>) -> Self {
        Self { logits, labels, weights }
    }

    /// Weighted pixel-averaged cross-entropy of this term alone.
    pub fn loss(&self, tape: &mut Tape) -> Result<Var> {
        match self.weights {
            Some(w) => tape.cross_entropy(self.logits, self.labels, w),
            None => tape.cross_entropy(self.logits, self.labels, &vec![1.0; self.labels.len()]),
        }
    }
}

/// `H(source) + λ·H(target)`, each a pixel-averaged weighted cross-entropy.
/// With `λ = 0` the target term is not built.
pub fn combined_loss(tape: &mut Tape, source: LossTerm<'_>, target: LossTerm<'_>, lambda_t: f64) -> Result<Var> {
    let src = source.loss(tape)?;
    if lambda_t == 0.0 {
        return Ok(src);
    }
    let tgt = target.loss(tape)?;
    let tgt = tape.scale(tgt, lambda_t);
    tape.add(src, tgt)
}

/// Per-class weights `1 − recall_c` from the batch confusion counts of
/// `logits` against `labels`; uniform ones if any class is absent from
/// the labels.
pub fn recall_weights(logits: &crate::nn::Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    let (n, c, h, w) = logits.dims4()?;
    let hw = h * w;
    if labels.len() != n * hw {
        return Err(Error::Shape(format!("recall weights: {} labels for {n}×{h}×{w}", labels.len())));
    }
    let d = logits.data();
    let mut hits = vec![0usize; c];
    let mut count = vec![0usize; c];
    for b in 0..n {
        for p in 0..hw {
            let mut best = 0;
            for k in 1..c {
                if d[(b * c + k) * hw + p] > d[(b * c + best) * hw + p] {
                    best = k;
                }
            }
            let t = labels[b * hw + p];
            if t >= c {
                return Err(Error::Shape(format!("label {t} with {c} classes")));
            }
            count[t] += 1;
            hits[t] += usize::from(best == t);
        }
    }
    if count.iter().any(|&k| k == 0) {
        return Ok(vec![1.0; c]);
    }
    Ok((0..c).map(|k| 1.0 - hits[k] as f64 / count[k] as f64).collect())
}

/// Cross-entropy with pixel `p` weighted by `1 − recall` of its true class.
pub fn recall_ce(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let w = recall_weights(tape.value(logits), labels)?;
    let pw: Vec<f64> = labels.iter().map(|&t| w[t]).collect();
    tape.cross_entropy(logits, labels, &pw)
}
