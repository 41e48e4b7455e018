//! Gibbs sampling and its Gumbel-Softmax relaxation.
//!
//! Both samplers sweep the variables in ascending id order and consume the
//! same noise stream: for every visited variable, one standard Gumbel draw per
//! label. The discrete sampler picks `argmax(logits + g)` (the Gumbel-max
//! trick, an exact draw from the conditional); the relaxed sampler returns
//! `softmax((logits + g) / temperature)`, where neighbours enter through the
//! expectation of the pairwise table under their current simplex.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Assignment, PairwiseMrf};
use crate::error::{Error, Result};
use crate::nn::{Tape, Tensor, Var};

/// Deterministic stream of standard Gumbel variates.
pub struct GumbelStream {
    rng: ChaCha8Rng,
}

impl GumbelStream {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn draw(&mut self, n: usize) -> Vec<f64> {
        (0..n)
            .map(|_| {
                let u: f64 = self.rng.gen::<f64>().max(f64::MIN_POSITIVE);
                -(-u.ln()).ln()
            })
            .collect()
    }
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

/// Runs `sweeps` Gibbs sweeps from `init` and returns the final state.
pub fn gibbs_sample(
    mrf: &PairwiseMrf,
    init: &Assignment,
    sweeps: usize,
    rng_seed: u64,
) -> Result<Assignment> {
    mrf.check_assignment(init)?;
    if sweeps == 0 {
        return Err(Error::Domain("gibbs_sample needs at least one sweep".into()));
    }
    let mut noise = GumbelStream::new(rng_seed);
    let mut labels = init.labels.clone();
    for _ in 0..sweeps {
        for var in 0..mrf.num_variables() {
            let logits = mrf.conditional_logits(var, &labels);
            let g = noise.draw(logits.len());
            let perturbed: Vec<f64> = logits.iter().zip(&g).map(|(l, g)| l + g).collect();
            labels[var] = argmax(&perturbed);
        }
    }
    Ok(Assignment::new(labels))
}

/// Per-variable probability vectors produced by the relaxed sampler.
#[derive(Debug, Clone)]
pub struct RelaxedAssignment {
    pub simplex: Vec<Vec<f64>>,
    vars: Vec<Var>,
}

impl RelaxedAssignment {
    /// Tape nodes holding each variable's simplex.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Per-variable argmax, lowest label on ties.
    pub fn harden(&self) -> Assignment {
        Assignment::new(self.simplex.iter().map(|s| argmax(s)).collect())
    }

    /// Constant relaxed assignment (e.g. one-hot) recorded as tape leaves.
    pub fn constant(tape: &mut Tape, simplex: Vec<Vec<f64>>) -> Self {
        let vars = simplex
            .iter()
            .map(|s| tape.leaf(Tensor::vector(s.clone())))
            .collect();
        Self { simplex, vars }
    }

    pub fn one_hot(tape: &mut Tape, mrf_cards: &[usize], a: &Assignment) -> Self {
        let simplex = mrf_cards
            .iter()
            .zip(&a.labels)
            .map(|(&c, &l)| (0..c).map(|k| if k == l { 1.0 } else { 0.0 }).collect())
            .collect();
        Self::constant(tape, simplex)
    }
}

/// Starting state of a relaxed chain.
#[derive(Debug, Clone, Copy)]
pub enum RelaxedInit<'a> {
    Uniform,
    OneHot(&'a Assignment),
}

/// Tape leaves mirroring the factor tables of an MRF, one per factor.
#[derive(Debug, Clone)]
pub struct FactorBinding {
    vars: Vec<Var>,
}

/// Same-shape gradient (or any update) for every factor table.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorGradients {
    pub tables: Vec<Vec<f64>>,
}

impl FactorGradients {
    pub fn zeros_like(mrf: &PairwiseMrf) -> Self {
        Self {
            tables: mrf.factors().iter().map(|f| vec![0.0; f.values.len()]).collect(),
        }
    }
}

impl FactorBinding {
    pub fn new(tape: &mut Tape, mrf: &PairwiseMrf) -> Self {
        let vars = mrf
            .factors()
            .iter()
            .map(|f| {
                let shape: Vec<usize> = f.scope.iter().map(|&v| mrf.cardinality(v)).collect();
                tape.leaf(Tensor::new(shape, f.values.clone()).expect("validated table"))
            })
            .collect();
        Self { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients accumulated on the bound leaves by the last backward pass.
    pub fn gradients(&self, tape: &Tape, mrf: &PairwiseMrf) -> FactorGradients {
        FactorGradients {
            tables: self
                .vars
                .iter()
                .zip(mrf.factors())
                .map(|(v, f)| {
                    tape.grad(*v)
                        .map(|g| g.to_vec())
                        .unwrap_or_else(|| vec![0.0; f.values.len()])
                })
                .collect(),
        }
    }
}

/// Differentiable Gumbel-Softmax sweep recorded on `tape`. Gradients flow to
/// the leaves of `binding`.
pub fn relaxed_sample(
    tape: &mut Tape,
    mrf: &PairwiseMrf,
    binding: &FactorBinding,
    init: RelaxedInit<'_>,
    temperature: f64,
    sweeps: usize,
    rng_seed: u64,
) -> Result<RelaxedAssignment> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Domain(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if sweeps == 0 {
        return Err(Error::Domain("relaxed sampling needs at least one sweep".into()));
    }
    let cards = mrf.cardinalities();
    let mut state = match init {
        RelaxedInit::Uniform => RelaxedAssignment::constant(
            tape,
            cards.iter().map(|&c| vec![1.0 / c as f64; c]).collect(),
        ),
        RelaxedInit::OneHot(a) => {
            mrf.check_assignment(a)?;
            RelaxedAssignment::one_hot(tape, &cards, a)
        }
    };
    let mut noise = GumbelStream::new(rng_seed);
    for _ in 0..sweeps {
        for var in 0..mrf.num_variables() {
            let mut logits = match mrf.unary_factor(var) {
                Some(f) => binding.vars[f],
                None => tape.leaf(Tensor::zeros(&[cards[var]])),
            };
            for inc in mrf.incidences(var) {
                // Row variable: Σ_b T[l, b]·s_b; column variable: Σ_a T[a, l]·s_a.
                let msg = tape.matvec(binding.vars[inc.factor], state.vars[inc.other], !inc.is_row)?;
                logits = tape.add(logits, msg)?;
            }
            let g = noise.draw(cards[var]);
            let perturbed = tape.shift(logits, &g)?;
            let scaled = tape.scale(perturbed, 1.0 / temperature);
            let s = tape.softmax(scaled)?;
            state.simplex[var] = tape.value(s).data().to_vec();
            state.vars[var] = s;
        }
    }
    Ok(state)
}

/// Relaxed sample from a uniform start on a private tape (values only).
pub fn gumbel_relaxed_sample(
    mrf: &PairwiseMrf,
    temperature: f64,
    sweeps: usize,
    rng_seed: u64,
) -> Result<RelaxedAssignment> {
    let mut tape = Tape::new();
    let binding = FactorBinding::new(&mut tape, mrf);
    relaxed_sample(
        &mut tape,
        mrf,
        &binding,
        RelaxedInit::Uniform,
        temperature,
        sweeps,
        rng_seed,
    )
}
