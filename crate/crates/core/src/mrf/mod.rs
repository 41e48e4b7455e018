//! Pairwise Markov random fields over architecture choices.
//!
//! A [`PairwiseMrf`] assigns every configuration `a` the log-potential
//! `score(a) = Σ_S ψ_S(a_S)` over unary and pairwise factors, inducing
//! `P(a) ∝ exp(score(a))`. Sampling is available both discretely (Gibbs) and as
//! a differentiable Gumbel-Softmax relaxation recorded on a [`Tape`].

mod sample;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use sample::{
    gibbs_sample, gumbel_relaxed_sample, relaxed_sample, FactorBinding, FactorGradients,
    GumbelStream, RelaxedAssignment, RelaxedInit,
};

/// Exhaustive enumeration is refused above this many configurations.
pub const BRUTE_FORCE_LIMIT: u128 = 1_000_000;

/// Factor entries are clamped into `[-FACTOR_CLAMP, FACTOR_CLAMP]` after updates.
pub const FACTOR_CLAMP: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MrfVariable {
    pub id: usize,
    pub cardinality: usize,
    #[serde(rename = "labels")]
    pub label_names: Vec<String>,
}

/// Log-scale table over the labels of one or two variables, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorTable {
    pub scope: Vec<usize>,
    pub values: Vec<f64>,
}

impl FactorTable {
    pub fn unary(var: usize, values: Vec<f64>) -> Self {
        Self {
            scope: vec![var],
            values,
        }
    }

    pub fn pairwise(a: usize, b: usize, values: Vec<f64>) -> Self {
        Self {
            scope: vec![a, b],
            values,
        }
    }

    pub fn is_pairwise(&self) -> bool {
        self.scope.len() == 2
    }
}

/// One label index per variable.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Assignment {
    pub labels: Vec<usize>,
}

impl Assignment {
    pub fn new(labels: Vec<usize>) -> Self {
        Self { labels }
    }

    pub fn zeros(n: usize) -> Self {
        Self { labels: vec![0; n] }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Number of positions with equal labels.
    pub fn overlap(&self, other: &Assignment) -> usize {
        self.labels
            .iter()
            .zip(&other.labels)
            .filter(|(a, b)| a == b)
            .count()
    }

    pub fn hamming(&self, other: &Assignment) -> usize {
        self.labels.len() - self.overlap(other)
    }
}

/// Pairwise factor incident on a variable, seen from that variable.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Incidence {
    pub factor: usize,
    pub other: usize,
    /// True when the variable is the first (row) entry of the scope.
    pub is_row: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MrfDocument", into = "MrfDocument")]
pub struct PairwiseMrf {
    variables: Vec<MrfVariable>,
    factors: Vec<FactorTable>,
    index: FactorIndex,
}

#[derive(Debug, Clone, Default, PartialEq)]
struct FactorIndex {
    unary: Vec<Option<usize>>,
    pairs: Vec<Vec<(usize, usize, bool)>>,
}

/// On-disk layout: `{variables: [{id, cardinality, labels}], factors: [{scope, values}]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct MrfDocument {
    variables: Vec<MrfVariable>,
    factors: Vec<FactorTable>,
}

impl TryFrom<MrfDocument> for PairwiseMrf {
    type Error = Error;
    fn try_from(doc: MrfDocument) -> Result<Self> {
        PairwiseMrf::new(doc.variables, doc.factors)
    }
}

impl From<PairwiseMrf> for MrfDocument {
    fn from(m: PairwiseMrf) -> Self {
        MrfDocument {
            variables: m.variables,
            factors: m.factors,
        }
    }
}

impl PairwiseMrf {
    pub fn new(variables: Vec<MrfVariable>, factors: Vec<FactorTable>) -> Result<Self> {
        for (i, v) in variables.iter().enumerate() {
            if v.id != i {
                return Err(Error::InvalidModel(format!(
                    "variable ids must be dense 0..n, found {} at position {i}",
                    v.id
                )));
            }
            if v.cardinality == 0 || v.label_names.len() != v.cardinality {
                return Err(Error::InvalidModel(format!(
                    "variable {i}: cardinality {} with {} label names",
                    v.cardinality,
                    v.label_names.len()
                )));
            }
        }
        let n = variables.len();
        let mut index = FactorIndex {
            unary: vec![None; n],
            pairs: vec![Vec::new(); n],
        };
        let mut seen_pairs = std::collections::HashSet::new();
        for (f, t) in factors.iter().enumerate() {
            if let Some(&bad) = t.scope.iter().find(|&&s| s >= n) {
                return Err(Error::InvalidModel(format!(
                    "factor {f} references unknown variable {bad}"
                )));
            }
            if !t.values.iter().all(|v| v.is_finite()) {
                return Err(Error::InvalidModel(format!("factor {f} has non-finite entries")));
            }
            match t.scope.as_slice() {
                &[a] => {
                    if t.values.len() != variables[a].cardinality {
                        return Err(Error::InvalidModel(format!(
                            "unary factor {f} on variable {a}: {} entries for cardinality {}",
                            t.values.len(),
                            variables[a].cardinality
                        )));
                    }
                    if index.unary[a].replace(f).is_some() {
                        return Err(Error::InvalidModel(format!(
                            "duplicate unary factor on variable {a}"
                        )));
                    }
                }
                &[a, b] => {
                    if a == b {
                        return Err(Error::InvalidModel(format!(
                            "pairwise factor {f} repeats variable {a}"
                        )));
                    }
                    let expect = variables[a].cardinality * variables[b].cardinality;
                    if t.values.len() != expect {
                        return Err(Error::InvalidModel(format!(
                            "pairwise factor {f} on ({a}, {b}): {} entries, expected {expect}",
                            t.values.len()
                        )));
                    }
                    if !seen_pairs.insert((a.min(b), a.max(b))) {
                        return Err(Error::InvalidModel(format!(
                            "duplicate pairwise factor on ({a}, {b})"
                        )));
                    }
                    index.pairs[a].push((f, b, true));
                    index.pairs[b].push((f, a, false));
                }
                s => {
                    return Err(Error::InvalidModel(format!(
                        "factor {f} has scope of size {}; only 1 or 2 supported",
                        s.len()
                    )))
                }
            }
        }
        Ok(Self {
            variables,
            factors,
            index,
        })
    }

    /// Variables with the given cardinalities and default label names, no factors.
    pub fn with_cardinalities(cards: &[usize]) -> Result<Self> {
        let variables = cards
            .iter()
            .enumerate()
            .map(|(id, &c)| MrfVariable {
                id,
                cardinality: c,
                label_names: (0..c).map(|l| l.to_string()).collect(),
            })
            .collect();
        Self::new(variables, Vec::new())
    }

    /// Adds a factor, re-validating the model.
    pub fn add_factor(&mut self, factor: FactorTable) -> Result<usize> {
        let mut factors = self.factors.clone();
        factors.push(factor);
        *self = Self::new(self.variables.clone(), factors)?;
        Ok(self.factors.len() - 1)
    }

    pub fn variables(&self) -> &[MrfVariable] {
        &self.variables
    }

    pub fn factors(&self) -> &[FactorTable] {
        &self.factors
    }

    pub fn num_variables(&self) -> usize {
        self.variables.len()
    }

    pub fn cardinality(&self, var: usize) -> usize {
        self.variables[var].cardinality
    }

    pub fn cardinalities(&self) -> Vec<usize> {
        self.variables.iter().map(|v| v.cardinality).collect()
    }

    pub fn unary_factor(&self, var: usize) -> Option<usize> {
        self.index.unary[var]
    }

    pub(crate) fn incidences(&self, var: usize) -> impl Iterator<Item = Incidence> + '_ {
        self.index.pairs[var]
            .iter()
            .map(|&(factor, other, is_row)| Incidence {
                factor,
                other,
                is_row,
            })
    }

    /// Total number of joint configurations, saturating at `u128::MAX`.
    pub fn num_configurations(&self) -> u128 {
        self.variables
            .iter()
            .try_fold(1u128, |acc, v| acc.checked_mul(v.cardinality as u128))
            .unwrap_or(u128::MAX)
    }

    pub fn check_assignment(&self, a: &Assignment) -> Result<()> {
        if a.labels.len() != self.variables.len() {
            return Err(Error::InvalidAssignment(format!(
                "{} labels for {} variables",
                a.labels.len(),
                self.variables.len()
            )));
        }
        for (i, (&l, v)) in a.labels.iter().zip(&self.variables).enumerate() {
            if l >= v.cardinality {
                return Err(Error::InvalidAssignment(format!(
                    "label {l} out of range for variable {i} (cardinality {})",
                    v.cardinality
                )));
            }
        }
        Ok(())
    }

    /// `Σ_S ψ_S(a_S)`.
    pub fn score(&self, a: &Assignment) -> Result<f64> {
        self.check_assignment(a)?;
        Ok(self.score_unchecked(&a.labels))
    }

    pub(crate) fn score_unchecked(&self, labels: &[usize]) -> f64 {
        self.factors
            .iter()
            .map(|f| match f.scope.as_slice() {
                &[v] => f.values[labels[v]],
                &[u, v] => f.values[labels[u] * self.variables[v].cardinality + labels[v]],
                _ => unreachable!("validated on construction"),
            })
            .sum()
    }

    /// Log-potential of each label of `var` with every other variable fixed
    /// to `labels`.
    pub fn conditional_logits(&self, var: usize, labels: &[usize]) -> Vec<f64> {
        let card = self.variables[var].cardinality;
        let mut out = match self.index.unary[var] {
            Some(f) => self.factors[f].values.clone(),
            None => vec![0.0; card],
        };
        for inc in self.incidences(var) {
            let t = &self.factors[inc.factor].values;
            let other = labels[inc.other];
            if inc.is_row {
                let oc = self.variables[inc.other].cardinality;
                for (l, o) in out.iter_mut().enumerate() {
                    *o += t[l * oc + other];
                }
            } else {
                for (l, o) in out.iter_mut().enumerate() {
                    *o += t[other * card + l];
                }
            }
        }
        out
    }

    fn guard_enumeration(&self) -> Result<u128> {
        let configs = self.num_configurations();
        if configs > BRUTE_FORCE_LIMIT {
            return Err(Error::Capacity {
                configs,
                limit: BRUTE_FORCE_LIMIT,
            });
        }
        Ok(configs)
    }

    /// Visits every configuration in lexicographic order.
    pub fn for_each_configuration(&self, mut f: impl FnMut(&[usize])) -> Result<()> {
        self.guard_enumeration()?;
        let cards = self.cardinalities();
        let mut labels = vec![0usize; cards.len()];
        loop {
            f(&labels);
            let mut i = cards.len();
            loop {
                if i == 0 {
                    return Ok(());
                }
                i -= 1;
                labels[i] += 1;
                if labels[i] < cards[i] {
                    break;
                }
                labels[i] = 0;
            }
        }
    }

    /// `log Z` by exhaustive enumeration with a max shift.
    pub fn partition_brute_force(&self) -> Result<f64> {
        let mut scores = Vec::with_capacity(self.guard_enumeration()? as usize);
        self.for_each_configuration(|l| scores.push(self.score_unchecked(l)))?;
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
        Ok(m + z.ln())
    }

    /// Exact single-variable marginals by enumeration.
    pub fn marginals_brute_force(&self) -> Result<Vec<Vec<f64>>> {
        let log_z = self.partition_brute_force()?;
        let mut out: Vec<Vec<f64>> = self.variables.iter().map(|v| vec![0.0; v.cardinality]).collect();
        self.for_each_configuration(|l| {
            let p = (self.score_unchecked(l) - log_z).exp();
            for (i, &li) in l.iter().enumerate() {
                out[i][li] += p;
            }
        })?;
        Ok(out)
    }

    /// In-place descent step `ψ ← clamp(ψ − lr·∇ψ)` on every factor table.
    pub fn update_factors(&mut self, gradient: &FactorGradients, lr: f64) -> Result<()> {
        if gradient.tables.len() != self.factors.len()
            || gradient
                .tables
                .iter()
                .zip(&self.factors)
                .any(|(g, f)| g.len() != f.values.len())
        {
            return Err(Error::Shape(
                "factor gradient does not match the factor tables".into(),
            ));
        }
        if !lr.is_finite() || gradient.tables.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::Numerical("non-finite factor update".into()));
        }
        for (f, g) in self.factors.iter_mut().zip(&gradient.tables) {
            for (v, d) in f.values.iter_mut().zip(g) {
                *v = (*v - lr * d).clamp(-FACTOR_CLAMP, FACTOR_CLAMP);
            }
        }
        Ok(())
    }

    /// Euclidean norm over all factor entries.
    pub fn factor_l2(&self) -> f64 {
        self.factors
            .iter()
            .flat_map(|f| f.values.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}
