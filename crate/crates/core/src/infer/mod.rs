//! MAP inference and diverse M-best extraction over a [`PairwiseMrf`].

use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mrf::{Assignment, FactorTable, PairwiseMrf};

/// Message change (sup-norm) below which loopy max-product is converged.
pub const CONVERGENCE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceResult {
    pub assignment: Assignment,
    pub score: f64,
    pub converged: bool,
    pub iterations_used: usize,
}

/// Which solver the diverse M-best rounds call.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Solver {
    Exact,
    Loopy { max_iters: usize, damping: f64 },
}

impl Solver {
    pub const DEFAULT_LOOPY: Solver = Solver::Loopy {
        max_iters: 500,
        damping: 0.5,
    };
}

/// Exhaustive MAP. Ties go to the lexicographically smallest assignment.
pub fn map_brute_force(mrf: &PairwiseMrf) -> Result<InferenceResult> {
    best_excluding(mrf, &HashSet::new())?
        .ok_or_else(|| Error::InvalidModel("empty configuration space".into()))
        .and_then(|(labels, iters)| finish(mrf, labels, true, iters))
}

fn finish(
    mrf: &PairwiseMrf,
    labels: Vec<usize>,
    converged: bool,
    iterations_used: usize,
) -> Result<InferenceResult> {
    let assignment = Assignment::new(labels);
    let score = mrf.score(&assignment)?;
    Ok(InferenceResult {
        assignment,
        score,
        converged,
        iterations_used,
    })
}

/// Best configuration not contained in `exclude`; `None` when all are excluded.
fn best_excluding(
    mrf: &PairwiseMrf,
    exclude: &HashSet<Vec<usize>>,
) -> Result<Option<(Vec<usize>, usize)>> {
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut visited = 0usize;
    mrf.for_each_configuration(|labels| {
        visited += 1;
        if exclude.contains(labels) {
            return;
        }
        let s = mrf.score_unchecked(labels);
        if best.as_ref().map_or(true, |(b, _)| s > *b) {
            best = Some((s, labels.to_vec()));
        }
    })?;
    Ok(best.map(|(_, l)| (l, visited)))
}

/// Damped synchronous max-product message passing, decoded by per-variable
/// max belief (lowest label on ties).
pub fn map_loopy(mrf: &PairwiseMrf, max_iters: usize, damping: f64) -> Result<InferenceResult> {
    if max_iters == 0 {
        return Err(Error::Domain("map_loopy needs max_iters >= 1".into()));
    }
    if !(0.0..1.0).contains(&damping) {
        return Err(Error::Domain(format!("damping must lie in [0, 1), got {damping}")));
    }
    let n = mrf.num_variables();
    let cards = mrf.cardinalities();
    let unary: Vec<Vec<f64>> = (0..n)
        .map(|i| match mrf.unary_factor(i) {
            Some(f) => mrf.factors()[f].values.clone(),
            None => vec![0.0; cards[i]],
        })
        .collect();
    // Directed edges: (factor, from, to, from_is_row).
    let mut edges = Vec::new();
    for (f, t) in mrf.factors().iter().enumerate() {
        if let &[a, b] = t.scope.as_slice() {
            edges.push((f, a, b, true));
            edges.push((f, b, a, false));
        }
    }
    // incoming[v] lists the edge indices that deliver messages to v.
    let mut incoming = vec![Vec::new(); n];
    for (e, &(_, _, to, _)) in edges.iter().enumerate() {
        incoming[to].push(e);
    }
    let reverse = |e: usize| e ^ 1;
    let mut msgs: Vec<Vec<f64>> = edges.iter().map(|&(_, _, to, _)| vec![0.0; cards[to]]).collect();

    let mut converged = false;
    let mut iters = 0;
    while iters < max_iters {
        iters += 1;
        let beliefs = beliefs(&unary, &incoming, &msgs);
        let mut delta: f64 = 0.0;
        let mut next = msgs.clone();
        for (e, &(f, from, to, from_is_row)) in edges.iter().enumerate() {
            let table = &mrf.factors()[f].values;
            let back = &msgs[reverse(e)];
            let (cf, ct) = (cards[from], cards[to]);
            let mut out = vec![f64::NEG_INFINITY; ct];
            for xf in 0..cf {
                let base = beliefs[from][xf] - back[xf];
                for (xt, o) in out.iter_mut().enumerate() {
                    let pair = if from_is_row {
                        table[xf * ct + xt]
                    } else {
                        table[xt * cf + xf]
                    };
                    *o = o.max(base + pair);
                }
            }
            let m = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for (o, old) in out.iter_mut().zip(&msgs[e]) {
                *o = (1.0 - damping) * (*o - m) + damping * old;
                delta = delta.max((*o - old).abs());
            }
            next[e] = out;
        }
        msgs = next;
        if delta < CONVERGENCE_TOL {
            converged = true;
            break;
        }
    }
    let beliefs = beliefs(&unary, &incoming, &msgs);
    let labels = beliefs
        .iter()
        .map(|b| {
            let mut best = 0;
            for (l, &v) in b.iter().enumerate() {
                if v > b[best] {
                    best = l;
                }
            }
            best
        })
        .collect();
    finish(mrf, labels, converged, iters)
}

fn beliefs(unary: &[Vec<f64>], incoming: &[Vec<usize>], msgs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    unary
        .iter()
        .zip(incoming)
        .map(|(u, inc)| {
            let mut b = u.clone();
            for &e in inc {
                for (x, m) in b.iter_mut().zip(&msgs[e]) {
                    *x += m;
                }
            }
            b
        })
        .collect()
}

/// Solutions of a diverse M-best run, in extraction order.
#[derive(Debug, Clone, PartialEq)]
pub struct DiverseSolutionSet {
    pub solutions: Vec<InferenceResult>,
    pub min_pairwise_hamming: usize,
}

/// One row of the serialized solution list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionEntry {
    pub labels: Vec<usize>,
    pub score: f64,
    pub hamming_to_previous: Option<usize>,
}

impl DiverseSolutionSet {
    pub fn entries(&self) -> Vec<SolutionEntry> {
        self.solutions
            .iter()
            .enumerate()
            .map(|(k, s)| SolutionEntry {
                labels: s.assignment.labels.clone(),
                score: s.score,
                hamming_to_previous: (k > 0)
                    .then(|| s.assignment.hamming(&self.solutions[k - 1].assignment)),
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.entries())?)
    }

    pub fn len(&self) -> usize {
        self.solutions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.solutions.is_empty()
    }
}

/// `mrf` with `weight · #{j : previous[j][i] = l}` subtracted from the unary of
/// every variable `i` at label `l`.
pub fn augmented_mrf(mrf: &PairwiseMrf, previous: &[Assignment], weight: f64) -> Result<PairwiseMrf> {
    let mut factors = mrf.factors().to_vec();
    for i in 0..mrf.num_variables() {
        let card = mrf.cardinality(i);
        let mut penalty = vec![0.0; card];
        for p in previous {
            penalty[p.labels[i]] += weight;
        }
        match mrf.unary_factor(i) {
            Some(f) => {
                for (v, p) in factors[f].values.iter_mut().zip(&penalty) {
                    *v -= p;
                }
            }
            None => factors.push(FactorTable::unary(i, penalty.iter().map(|p| -p).collect())),
        }
    }
    PairwiseMrf::new(mrf.variables().to_vec(), factors)
}

/// `score(a) − weight · Σ_j overlap(a, previous[j])`.
pub fn augmented_score(
    mrf: &PairwiseMrf,
    a: &Assignment,
    previous: &[Assignment],
    weight: f64,
) -> Result<f64> {
    let overlap: usize = previous.iter().map(|p| a.overlap(p)).sum();
    Ok(mrf.score(a)? - weight * overlap as f64)
}

/// Greedy sequential diverse M-best with a Hamming (label agreement) penalty.
///
/// Round `k` maximizes `score(a) − weight · Σ_{j<k} overlap(a, a_j)`. With a
/// positive weight, assignments already returned are excluded so that every
/// solution is distinct; with weight zero every round repeats the MAP.
pub fn diverse_m_best(
    mrf: &PairwiseMrf,
    m: usize,
    diversity_weight: f64,
    exact: bool,
) -> Result<DiverseSolutionSet> {
    let solver = if exact {
        Solver::Exact
    } else {
        Solver::DEFAULT_LOOPY
    };
    diverse_m_best_with(mrf, m, diversity_weight, solver)
}

pub fn diverse_m_best_with(
    mrf: &PairwiseMrf,
    m: usize,
    diversity_weight: f64,
    solver: Solver,
) -> Result<DiverseSolutionSet> {
    if m == 0 {
        return Err(Error::Domain("diverse_m_best needs m >= 1".into()));
    }
    if !(diversity_weight >= 0.0) || !diversity_weight.is_finite() {
        return Err(Error::Domain(format!(
            "diversity weight must be finite and non-negative, got {diversity_weight}"
        )));
    }
    let configs = mrf.num_configurations();
    if m as u128 > configs {
        return Err(Error::Capacity {
            configs,
            limit: m as u128,
        });
    }
    let distinct = diversity_weight > 0.0;
    let mut previous: Vec<Assignment> = Vec::with_capacity(m);
    let mut seen: HashSet<Vec<usize>> = HashSet::new();
    let mut solutions = Vec::with_capacity(m);
    for _ in 0..m {
        let aug = augmented_mrf(mrf, &previous, diversity_weight)?;
        let (labels, converged, iters) = match solver {
            Solver::Exact => {
                let none = HashSet::new();
                let exclude = if distinct { &seen } else { &none };
                let (labels, visited) = best_excluding(&aug, exclude)?
                    .ok_or_else(|| Error::InvalidModel("no configuration left".into()))?;
                (labels, true, visited)
            }
            Solver::Loopy { max_iters, damping } => {
                let r = map_loopy(&aug, max_iters, damping)?;
                let labels = if distinct && seen.contains(&r.assignment.labels) {
                    nearest_unseen(&aug, &r.assignment.labels, &seen)
                } else {
                    r.assignment.labels
                };
                (labels, r.converged, r.iterations_used)
            }
        };
        seen.insert(labels.clone());
        let result = finish(mrf, labels, converged, iters)?;
        previous.push(result.assignment.clone());
        solutions.push(result);
    }
    let min_pairwise_hamming = min_pairwise_hamming(&previous);
    Ok(DiverseSolutionSet {
        solutions,
        min_pairwise_hamming,
    })
}

/// Smallest Hamming distance over all pairs; 0 for fewer than two assignments.
pub fn min_pairwise_hamming(items: &[Assignment]) -> usize {
    let mut best = usize::MAX;
    for i in 0..items.len() {
        for j in i + 1..items.len() {
            best = best.min(items[i].hamming(&items[j]));
        }
    }
    if best == usize::MAX {
        0
    } else {
        best
    }
}

/// Best-scoring assignment (under `aug`) among the unseen configurations
/// closest in Hamming distance to `start`.
fn nearest_unseen(aug: &PairwiseMrf, start: &[usize], seen: &HashSet<Vec<usize>>) -> Vec<usize> {
    let cards = aug.cardinalities();
    let mut frontier: BTreeSet<Vec<usize>> = BTreeSet::from([start.to_vec()]);
    let mut visited: HashSet<Vec<usize>> = frontier.iter().cloned().collect();
    loop {
        let mut layer = BTreeSet::new();
        for s in &frontier {
            for (i, &c) in cards.iter().enumerate() {
                for l in 0..c {
                    if l == s[i] {
                        continue;
                    }
                    let mut t = s.clone();
                    t[i] = l;
                    if visited.insert(t.clone()) {
                        layer.insert(t);
                    }
                }
            }
        }
        let best = layer
            .iter()
            .filter(|t| !seen.contains(*t))
            .map(|t| (aug.score_unchecked(t), t))
            .fold(None::<(f64, &Vec<usize>)>, |acc, (s, t)| match acc {
                Some((bs, _)) if bs >= s => acc,
                _ => Some((s, t)),
            });
        if let Some((_, t)) = best {
            return t.clone();
        }
        // Caller guarantees m ≤ #configurations, so an unseen state exists.
        frontier = layer;
    }
}
