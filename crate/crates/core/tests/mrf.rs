mod common;

use common::{enumerate, random_loopy, rng, with_edges};
use proptest::prelude::*;
use rand::Rng;
use udanas::mrf::{
    gibbs_sample, relaxed_sample, Assignment, FactorBinding, FactorGradients, FactorTable,
    PairwiseMrf, RelaxedInit,
};
use udanas::nn::{Tape, Tensor};

fn frequency(m: &PairwiseMrf, runs: u64, pred: impl Fn(&[usize]) -> bool) -> f64 {
    let init = Assignment::zeros(m.num_variables());
    let hits = (0..runs)
        .filter(|&s| pred(&gibbs_sample(m, &init, 1, s).unwrap().labels))
        .count();
    hits as f64 / runs as f64
}

#[test]
fn gibbs_on_zero_factors_is_uniform() {
    let m = PairwiseMrf::with_cardinalities(&[2]).unwrap();
    let f = frequency(&m, 10_000, |l| l[0] == 1);
    assert!((f - 0.5).abs() <= 0.02, "{f}");
}

#[test]
fn strong_unary_dominates_gibbs() {
    let mut m = PairwiseMrf::with_cardinalities(&[2]).unwrap();
    m.add_factor(FactorTable::unary(0, vec![0.0, 10.0])).unwrap();
    let f = frequency(&m, 10_000, |l| l[0] == 1);
    assert!(f >= 0.999, "{f}");
}

#[test]
fn ferromagnetic_chain_matches_exact_agreement() {
    let mut m = PairwiseMrf::with_cardinalities(&[2, 2]).unwrap();
    m.add_factor(FactorTable::unary(0, vec![0.4, 0.0])).unwrap();
    m.add_factor(FactorTable::pairwise(0, 1, vec![2.0, 0.0, 0.0, 2.0])).unwrap();
    let log_z = m.partition_brute_force().unwrap();
    let exact: f64 = enumerate(&m)
        .iter()
        .filter(|(l, _)| l[0] == l[1])
        .map(|(_, s)| (s - log_z).exp())
        .sum();
    let marg = m.marginals_brute_force().unwrap();

    let mut state = Assignment::zeros(2);
    let (mut agree, mut first_zero) = (0usize, 0usize);
    let sweeps = 40_000;
    for s in 0..sweeps {
        state = gibbs_sample(&m, &state, 1, 1000 + s).unwrap();
        agree += usize::from(state.labels[0] == state.labels[1]);
        first_zero += usize::from(state.labels[0] == 0);
    }
    let agree = agree as f64 / sweeps as f64;
    let first_zero = first_zero as f64 / sweeps as f64;
    assert!((agree - exact).abs() <= 0.02, "{agree} vs {exact}");
    assert!((first_zero - marg[0][0]).abs() <= 0.02, "{first_zero} vs {}", marg[0][0]);
}

#[test]
fn gibbs_chain_visits_every_configuration() {
    let mut r = rng(3);
    let m = with_edges(&mut r, &[2, 2], &[(0, 1)], 1.0, 1.0);
    let mut seen = [false; 4];
    let mut state = Assignment::zeros(2);
    for s in 0..10_000 {
        state = gibbs_sample(&m, &state, 1, s).unwrap();
        seen[state.labels[0] * 2 + state.labels[1]] = true;
    }
    assert!(seen.iter().all(|&v| v));
}

#[test]
fn gibbs_is_deterministic_per_seed() {
    let mut r = rng(4);
    let m = random_loopy(&mut r, 5, 4, 1.0, 1.0);
    let init = Assignment::zeros(m.num_variables());
    assert_eq!(gibbs_sample(&m, &init, 3, 9).unwrap(), gibbs_sample(&m, &init, 3, 9).unwrap());
}

fn relaxed(m: &PairwiseMrf, init: RelaxedInit<'_>, temperature: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut tape = Tape::new();
    let binding = FactorBinding::new(&mut tape, m);
    relaxed_sample(&mut tape, m, &binding, init, temperature, 1, seed)
        .unwrap()
        .simplex
}

#[test]
fn hot_relaxation_is_nearly_uniform() {
    let m = PairwiseMrf::with_cardinalities(&[3, 4, 2]).unwrap();
    for seed in 0..20 {
        for s in relaxed(&m, RelaxedInit::Uniform, 100.0, seed) {
            let u = 1.0 / s.len() as f64;
            assert!(s.iter().all(|p| (p - u).abs() < 0.05), "{s:?}");
        }
    }
}

#[test]
fn cold_relaxation_hardens_to_the_gibbs_draw() {
    let mut r = rng(5);
    let trials = 1000;
    let mut same = 0;
    for t in 0..trials {
        let m = random_loopy(&mut r, 5, 4, 1.0, 1.0);
        let init = Assignment::new(m.cardinalities().iter().map(|&c| r.gen_range(0..c)).collect());
        let seed = 10_000 + t;
        let soft = relaxed(&m, RelaxedInit::OneHot(&init), 0.01, seed);
        let hard: Vec<usize> = soft
            .iter()
            .map(|s| (0..s.len()).fold(0, |b, i| if s[i] > s[b] { i } else { b }))
            .collect();
        let discrete = gibbs_sample(&m, &init, 1, seed).unwrap();
        same += usize::from(hard == discrete.labels);
    }
    assert!(same * 100 >= trials as usize * 95, "{same}/{trials}");
}

/// Relaxed sample contracted with fixed weights; value and factor gradients.
fn downstream(m: &PairwiseMrf, weights: &[Vec<f64>], seed: u64) -> (f64, FactorGradients) {
    let mut tape = Tape::new();
    let binding = FactorBinding::new(&mut tape, m);
    let s = relaxed_sample(&mut tape, m, &binding, RelaxedInit::Uniform, 1.0, 2, seed).unwrap();
    let mut total = None;
    for (v, w) in s.vars().iter().zip(weights) {
        let w = tape.leaf(Tensor::vector(w.clone()));
        let p = tape.mul(*v, w).unwrap();
        let p = tape.sum(p);
        total = Some(match total {
            None => p,
            Some(t) => tape.add(t, p).unwrap(),
        });
    }
    let loss = total.unwrap();
    let value = tape.value(loss).item();
    tape.backward(loss).unwrap();
    (value, binding.gradients(&tape, m))
}

#[test]
fn gumbel_factor_gradients_match_finite_differences() {
    let mut r = rng(6);
    let m = with_edges(&mut r, &[3, 2, 4], &[(0, 1), (1, 2), (0, 2)], 1.0, 1.0);
    let weights: Vec<Vec<f64>> = m
        .cardinalities()
        .iter()
        .map(|&c| (0..c).map(|_| r.gen_range(-1.0..1.0)).collect())
        .collect();
    let h = 1e-5;
    for seed in 0..3 {
        let (_, grads) = downstream(&m, &weights, seed);
        for (f, table) in m.factors().iter().enumerate() {
            for j in 0..table.values.len() {
                let bump = |d: f64| {
                    let mut g = FactorGradients::zeros_like(&m);
                    g.tables[f][j] = -d;
                    let mut p = m.clone();
                    p.update_factors(&g, 1.0).unwrap();
                    downstream(&p, &weights, seed).0
                };
                let numeric = (bump(h) - bump(-h)) / (2.0 * h);
                let analytic = grads.tables[f][j];
                let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
                assert!(err < 1e-3, "factor {f}[{j}]: {analytic} vs {numeric}");
            }
        }
    }
}

fn arb_mrf() -> impl Strategy<Value = PairwiseMrf> {
    (any::<u64>(), 2usize..=6).prop_map(|(seed, n)| {
        let mut r = rng(seed);
        let cards = common::random_cards(&mut r, n, 3);
        let mut edges = Vec::new();
        for a in 0..n {
            for b in a + 1..n {
                if r.gen_bool(0.4) {
                    edges.push((a, b));
                }
            }
        }
        with_edges(&mut r, &cards, &edges, 2.0, 2.0)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn score_ignores_factor_storage_order(m in arb_mrf(), rot in 0usize..16) {
        let mut factors = m.factors().to_vec();
        let k = rot % factors.len();
        factors.rotate_left(k);
        factors.reverse();
        let p = PairwiseMrf::new(m.variables().to_vec(), factors).unwrap();
        for (labels, _) in enumerate(&m) {
            let a = Assignment::new(labels);
            prop_assert!((m.score(&a).unwrap() - p.score(&a).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn probabilities_sum_to_one(m in arb_mrf()) {
        let log_z = m.partition_brute_force().unwrap();
        let total: f64 = enumerate(&m).iter().map(|(_, s)| (s - log_z).exp()).sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn score_order_is_probability_order(m in arb_mrf(), i in any::<prop::sample::Index>(), j in any::<prop::sample::Index>()) {
        let all = enumerate(&m);
        let (a, b) = (&all[i.index(all.len())], &all[j.index(all.len())]);
        let log_z = m.partition_brute_force().unwrap();
        let (sa, sb) = (m.score(&Assignment::new(a.0.clone())).unwrap(), m.score(&Assignment::new(b.0.clone())).unwrap());
        let (pa, pb) = ((sa - log_z).exp(), (sb - log_z).exp());
        prop_assert_eq!(sa >= sb, pa >= pb);
    }

    #[test]
    fn zero_gradient_or_rate_leaves_factors(m in arb_mrf(), lr in 0.0f64..2.0) {
        let mut p = m.clone();
        p.update_factors(&FactorGradients::zeros_like(&m), lr).unwrap();
        prop_assert_eq!(&p, &m);
        let mut g = FactorGradients::zeros_like(&m);
        for t in &mut g.tables { t.iter_mut().for_each(|v| *v = 1.0); }
        p.update_factors(&g, 0.0).unwrap();
        prop_assert_eq!(&p, &m);
    }
}
