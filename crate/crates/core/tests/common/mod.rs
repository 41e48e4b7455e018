//! Random graph builders shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use udanas::mrf::{FactorTable, PairwiseMrf};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn table(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

/// Unary on every variable plus pairwise factors on `edges`.
pub fn with_edges(
    rng: &mut ChaCha8Rng,
    cards: &[usize],
    edges: &[(usize, usize)],
    unary_scale: f64,
    pair_scale: f64,
) -> PairwiseMrf {
    let mut m = PairwiseMrf::with_cardinalities(cards).unwrap();
    for (v, &c) in cards.iter().enumerate() {
        m.add_factor(FactorTable::unary(v, table(rng, c, unary_scale))).unwrap();
    }
    for &(a, b) in edges {
        m.add_factor(FactorTable::pairwise(a, b, table(rng, cards[a] * cards[b], pair_scale)))
            .unwrap();
    }
    m
}

pub fn random_cards(rng: &mut ChaCha8Rng, n: usize, max_card: usize) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(2..=max_card)).collect()
}

/// Random tree: each variable after the first links to an earlier one.
pub fn random_tree(rng: &mut ChaCha8Rng, max_n: usize, max_card: usize) -> PairwiseMrf {
    let n = rng.gen_range(2..=max_n);
    let cards = random_cards(rng, n, max_card);
    let edges: Vec<_> = (1..n).map(|v| (rng.gen_range(0..v), v)).collect();
    with_edges(rng, &cards, &edges, 2.0, 2.0)
}

/// Random graph with at least one cycle.
pub fn random_loopy(
    rng: &mut ChaCha8Rng,
    max_n: usize,
    max_card: usize,
    unary_scale: f64,
    pair_scale: f64,
) -> PairwiseMrf {
    let n = rng.gen_range(3..=max_n);
    let cards = random_cards(rng, n, max_card);
    let mut edges: Vec<_> = (0..n).map(|v| (v, (v + 1) % n)).map(|(a, b)| (a.min(b), a.max(b))).collect();
    for a in 0..n {
        for b in a + 2..n {
            if !edges.contains(&(a, b)) && rng.gen_bool(0.2) {
                edges.push((a, b));
            }
        }
    }
    with_edges(rng, &cards, &edges, unary_scale, pair_scale)
}

/// Every configuration with its score, by independent odometer enumeration.
pub fn enumerate(m: &PairwiseMrf) -> Vec<(Vec<usize>, f64)> {
    let cards = m.cardinalities();
    let mut out = Vec::new();
    let mut labels = vec![0; cards.len()];
    'outer: loop {
        let mut s = 0.0;
        for f in m.factors() {
            s += match f.scope[..] {
                [v] => f.values[labels[v]],
                [u, v] => f.values[labels[u] * cards[v] + labels[v]],
                _ => unreachable!(),
            };
        }
        out.push((labels.clone(), s));
        for i in (0..cards.len()).rev() {
            labels[i] += 1;
            if labels[i] < cards[i] {
                continue 'outer;
            }
            labels[i] = 0;
        }
        break;
    }
    out
}

/// Logits tensor `(n, c, h, w)` with entries uniform in `±scale`.
pub fn random_logits(rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize, scale: f64) -> udanas::nn::Tensor {
    let data = (0..n * c * h * w).map(|_| rng.gen_range(-scale..scale)).collect();
    udanas::nn::Tensor::new(vec![n, c, h, w], data).unwrap()
}

/// Logit vector of every pixel, image-major.
pub fn pixel_rows(t: &udanas::nn::Tensor) -> Vec<(usize, Vec<f64>)> {
    let s = t.shape();
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let d = t.data();
    let mut out = Vec::with_capacity(n * hw);
    for b in 0..n {
        for p in 0..hw {
            out.push((b, (0..c).map(|k| d[(b * c + k) * hw + p]).collect()));
        }
    }
    out
}

/// Compensated sum of ascending terms.
pub fn kahan(mut terms: Vec<f64>) -> f64 {
    terms.sort_by(f64::total_cmp);
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for t in terms {
        let y = t - comp;
        let s = sum + y;
        comp = (s - sum) - y;
        sum = s;
    }
    sum
}

/// `max softmax ≥ τ` as `Σ_i exp(l_i − l_max) ≤ 1/τ`; `None` when the two
/// sides are too close to call.
pub fn confident_oracle(row: &[f64], tau: f64) -> Option<bool> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z = kahan(row.iter().map(|l| (l - m).exp()).collect());
    let bound = 1.0 / tau;
    ((z - bound).abs() > 1e-12 * bound).then_some(z <= bound)
}

/// Free energy by the unshifted definition `−T·ln Σ exp(l/T)`.
pub fn energy_naive(row: &[f64], t: f64) -> f64 {
    -t * kahan(row.iter().map(|l| (l / t).exp()).collect()).ln()
}

/// MACs and parameters counted from the tensors of the extracted network:
/// every weight entry fires once per output pixel (once per input pixel for
/// transposed convolutions); every stored value is a parameter.
pub fn oracle_cost(
    spec: &udanas::space::SupernetSpec,
    arch: &udanas::space::ArchAssignment,
    hw: usize,
) -> (u64, u64) {
    use udanas::nn::{Supernet, SupernetOptions};
    use udanas::space::OpKind;
    let net = Supernet::new(spec, SupernetOptions::default(), 0).unwrap().extract(arch).unwrap();
    let (mut flops, mut params) = (0u64, 0u64);
    for p in net.store().iter() {
        let n = p.value.len() as u64;
        params += n;
        let (layer, kind) = p.name.rsplit_once('.').unwrap();
        if !kind.starts_with('w') {
            continue;
        }
        let pixels_at = |level: usize| ((hw >> level) * (hw >> level)) as u64;
        flops += match spec.nodes.iter().find(|nd| nd.name == layer) {
            None => n * pixels_at(0),
            Some(nd) if nd.kind == OpKind::Upsample => n * pixels_at(nd.level + 1),
            Some(nd) => n * pixels_at(nd.level),
        };
    }
    (flops, params)
}

/// Uniformly random architecture of `spec`.
pub fn random_arch(spec: &udanas::space::SupernetSpec, rng: &mut ChaCha8Rng) -> udanas::space::ArchAssignment {
    let labels = spec
        .build_search_mrf()
        .unwrap()
        .cardinalities()
        .iter()
        .map(|&c| rng.gen_range(0..c))
        .collect();
    spec.decode(&udanas::mrf::Assignment::new(labels)).unwrap()
}
