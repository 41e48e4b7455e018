//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero when any criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use common::{
    confident_oracle, energy_naive, enumerate, oracle_cost, pixel_rows, random_arch,
    random_logits, random_loopy, random_tree, rng, with_edges,
};
use rand::Rng;
use udanas::data::DomainPair;
use udanas::infer::{augmented_score, diverse_m_best, map_brute_force, map_loopy};
use udanas::mrf::{relaxed_sample, Assignment, FactorBinding, FactorGradients, PairwiseMrf, RelaxedInit};
use udanas::nn::gradcheck::check;
use udanas::nn::{Supernet, SupernetOptions, Tape, Tensor, Var};
use udanas::pipeline::{cmd_report, dataset, Candidate, LoadedConfig, RunConfig};
use udanas::selftrain::{energy_score, pseudo_confidence, pseudo_energy, retrain, search_loop, SelfTrainConfig};
use udanas::space::{resource_cost, ArchAssignment, SupernetSpec};

const SEEDS: u64 = 5;
/// Shortened schedules that keep the behavioural criteria within budget.
const SEARCH_ITERATIONS: usize = 300;
const SEARCH_WARMUP: usize = 30;
const UDA_ITERATIONS: usize = 300;
const SIGNAL_ITERATIONS: usize = 150;
const RANDOM_ARCHS: usize = 8;

type Outcome = (bool, String);

fn main() {
    let mut failed = 0;
    let mut run = |name: &str, f: &dyn Fn() -> Outcome| {
        let t = Instant::now();
        let (ok, detail) = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            (false, format!("panicked: {msg}"))
        });
        failed += usize::from(!ok);
        println!(
            "{} {name}: {detail} [{:.1}s]",
            if ok { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64()
        );
    };
    run("map-oracle-equivalence", &map_oracle);
    run("diverse-m-best-exactness", &diverse_exactness);
    run("gumbel-gradient-fidelity", &gumbel_fidelity);
    run("autodiff-fidelity", &autodiff_fidelity);
    run("pseudo-label-formulas", &pseudo_label_formulas);
    let searched = Searched::run();
    run("uda-benefit", &|| uda_benefit(&searched));
    run("search-signal", &|| search_signal(&searched));
    run("budget-compliance", &|| budget_compliance(&searched));
    run("reproducibility", &reproducibility);
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}

fn map_oracle() -> Outcome {
    let t = Instant::now();
    let mut r = rng(101);
    let trees = (0..100)
        .filter(|_| {
            let m = random_tree(&mut r, 8, 4);
            map_loopy(&m, 500, 0.5).unwrap().assignment == map_brute_force(&m).unwrap().assignment
        })
        .count();
    let loopy = (0..100)
        .filter(|_| {
            let m = random_loopy(&mut r, 8, 4, 2.0, 0.2);
            map_loopy(&m, 500, 0.5).unwrap().assignment == map_brute_force(&m).unwrap().assignment
        })
        .count();
    let secs = t.elapsed().as_secs_f64();
    (
        trees == 100 && loopy >= 95 && secs < 30.0,
        format!("trees {trees}/100, loopy {loopy}/100, {secs:.2}s"),
    )
}

fn diverse_exactness() -> Outcome {
    let mut r = rng(102);
    let (mut ok, mut rounds) = (0, 0);
    for _ in 0..20 {
        let m = random_loopy(&mut r, 6, 4, 2.0, 2.0);
        let w = r.gen_range(0.1..3.0);
        let set = diverse_m_best(&m, 4, w, true).unwrap();
        let all = enumerate(&m);
        let mut previous: Vec<Assignment> = Vec::new();
        for sol in &set.solutions {
            let got = augmented_score(&m, &sol.assignment, &previous, w).unwrap();
            let best = all
                .iter()
                .map(|(l, _)| Assignment::new(l.clone()))
                .filter(|a| !previous.contains(a))
                .map(|a| augmented_score(&m, &a, &previous, w).unwrap())
                .fold(f64::NEG_INFINITY, f64::max);
            rounds += 1;
            ok += usize::from(got >= best - 1e-9);
            previous.push(sol.assignment.clone());
        }
    }
    (ok == rounds, format!("{ok}/{rounds} rounds optimal over 20 graphs"))
}

fn relaxed_loss(m: &PairwiseMrf, weights: &[Vec<f64>], seed: u64) -> (f64, FactorGradients) {
    let mut tape = Tape::new();
    let binding = FactorBinding::new(&mut tape, m);
    let s = relaxed_sample(&mut tape, m, &binding, RelaxedInit::Uniform, 1.0, 2, seed).unwrap();
    let mut total: Option<Var> = None;
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

fn gumbel_fidelity() -> Outcome {
    let mut r = rng(103);
    let m = with_edges(&mut r, &[3, 2, 4], &[(0, 1), (1, 2), (0, 2)], 1.0, 1.0);
    let weights: Vec<Vec<f64>> = m
        .cardinalities()
        .iter()
        .map(|&c| (0..c).map(|_| r.gen_range(-1.0..1.0)).collect())
        .collect();
    let h = 1e-5;
    let (mut worst, mut entries) = (0f64, 0);
    for seed in 0..3 {
        let (_, grads) = relaxed_loss(&m, &weights, seed);
        for (f, table) in m.factors().iter().enumerate() {
            for j in 0..table.values.len() {
                let bump = |d: f64| {
                    let mut g = FactorGradients::zeros_like(&m);
                    g.tables[f][j] = -d;
                    let mut p = m.clone();
                    p.update_factors(&g, 1.0).unwrap();
                    relaxed_loss(&p, &weights, seed).0
                };
                let numeric = (bump(h) - bump(-h)) / (2.0 * h);
                let analytic = grads.tables[f][j];
                worst = worst.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6));
                entries += 1;
            }
        }
    }
    (worst < 1e-3, format!("max rel err {worst:.2e} over {entries} factor entries"))
}

fn signed(r: &mut rand_chacha::ChaCha8Rng, shape: &[usize], lo: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = r.gen_range(lo..1.0);
            if r.gen_bool(0.5) { v } else { -v }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn autodiff_fidelity() -> Outcome {
    type Op = Box<dyn Fn(&mut Tape, &[Var]) -> udanas::Result<Var>>;
    let mut r = rng(104);
    let x4 = signed(&mut r, &[2, 3, 6, 6], 0.1);
    let pos = Tensor::new(vec![2, 3], (0..6).map(|_| r.gen_range(0.5..2.0)).collect()).unwrap();
    let (a, b) = (signed(&mut r, &[2, 3], 0.1), signed(&mut r, &[2, 3], 0.1));
    let (v5, mat, v4, v3) = (
        signed(&mut r, &[5], 0.1),
        signed(&mut r, &[3, 4], 0.1),
        signed(&mut r, &[4], 0.1),
        signed(&mut r, &[3], 0.1),
    );
    let conv_w = signed(&mut r, &[4, 3, 3, 3], 0.1);
    let up_w = signed(&mut r, &[3, 2, 2, 2], 0.1);
    let labels: Vec<usize> = (0..72).map(|i| (i * 7) % 3).collect();
    let weights: Vec<f64> = (0..72).map(|i| 0.2 + 0.01 * i as f64).collect();
    let cases: Vec<(&str, Vec<Tensor>, Op)> = vec![
        ("add", vec![a.clone(), b.clone()], Box::new(|t, v| t.add(v[0], v[1]))),
        ("sub", vec![a.clone(), b.clone()], Box::new(|t, v| t.sub(v[0], v[1]))),
        ("mul", vec![a.clone(), b.clone()], Box::new(|t, v| t.mul(v[0], v[1]))),
        ("scale", vec![a.clone()], Box::new(|t, v| Ok(t.scale(v[0], -2.5)))),
        ("shift", vec![a.clone()], Box::new(|t, v| t.shift(v[0], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]))),
        ("relu", vec![a.clone()], Box::new(|t, v| Ok(t.relu(v[0])))),
        ("exp", vec![a.clone()], Box::new(|t, v| Ok(t.exp(v[0])))),
        ("ln", vec![pos], Box::new(|t, v| Ok(t.ln(v[0])))),
        ("sum", vec![a], Box::new(|t, v| Ok(t.sum(v[0])))),
        ("softmax", vec![v5.clone()], Box::new(|t, v| t.softmax(v[0]))),
        ("matvec", vec![mat.clone(), v4], Box::new(|t, v| t.matvec(v[0], v[1], false))),
        ("matvec^T", vec![mat, v3.clone()], Box::new(|t, v| t.matvec(v[0], v[1], true))),
        ("slice", vec![v5], Box::new(|t, v| t.slice(v[0], 1, 3))),
        ("channel_scale", vec![x4.clone(), v3.clone()], Box::new(|t, v| t.channel_scale(v[0], v[1]))),
        (
            "conv2d",
            vec![x4.clone(), conv_w, signed(&mut r, &[4], 0.1)],
            Box::new(|t, v| t.conv2d(v[0], v[1], v[2], 2, 1)),
        ),
        ("up_conv", vec![x4.clone(), up_w, signed(&mut r, &[2], 0.1)], Box::new(|t, v| t.up_conv(v[0], v[1], v[2]))),
        ("instance_norm", vec![x4.clone()], Box::new(|t, v| t.instance_norm(v[0]))),
        ("cross_entropy", vec![x4], Box::new(move |t, v| t.cross_entropy(v[0], &labels, &weights))),
    ];
    let mut worst = (0f64, "");
    for (name, inputs, op) in &cases {
        let rep = check(inputs, 1e-4, 1e-6, |t, v| {
            let y = op(t, v)?;
            // Contract with a fixed random tensor so every output entry matters.
            let w = signed(&mut rng(7), t.value(y).shape(), 0.1);
            let w = t.leaf(w);
            let p = t.mul(y, w)?;
            Ok(t.sum(p))
        })
        .unwrap();
        if rep.max_rel_err >= worst.0 {
            worst = (rep.max_rel_err, name);
        }
    }

    let spec = SupernetSpec::desk_default();
    let net = Supernet::new(&spec, SupernetOptions::default(), 11).unwrap();
    let x = Tensor::new(
        vec![2, spec.in_channels, 8, 8],
        (0..2 * spec.in_channels * 64).map(|_| r.gen_range(0.0..1.0)).collect(),
    )
    .unwrap();
    let mut slice_diff = 0f64;
    for _ in 0..20 {
        let arch = random_arch(&spec, &mut r);
        let shared = net.predict(&arch, &x).unwrap();
        let alone = net.extract(&arch).unwrap().predict(&x).unwrap();
        slice_diff = slice_diff.max(shared.max_abs_diff(&alone));
    }
    (
        worst.0 < 1e-4 && slice_diff < 1e-7,
        format!(
            "{} ops, worst rel err {:.2e} ({}); slicing max diff {slice_diff:.1e} over 20 subnets",
            cases.len(),
            worst.0,
            worst.1
        ),
    )
}

fn pseudo_label_formulas() -> Outcome {
    let mut r = rng(105);
    let (mut conf_bad, mut mask_bad, mut max_err, mut ambiguous) = (0, 0, 0f64, 0);
    for _ in 0..1000 {
        let n = r.gen_range(1..3);
        let c = r.gen_range(2..7);
        let scale = r.gen_range(1.0..15.0);
        let logits = random_logits(&mut r, n, c, 3, 4, scale);
        let tau = r.gen_range(0.3..0.999);
        let tau_e = r.gen_range(-15.0..0.0);
        let temp = r.gen_range(0.5..3.0);
        let conf = pseudo_confidence(&logits, tau).unwrap();
        let en = pseudo_energy(&logits, tau_e, temp).unwrap();
        let scores = energy_score(&logits, temp).unwrap();
        let mut counts = vec![0usize; n];
        for (p, (b, row)) in pixel_rows(&logits).iter().enumerate() {
            match confident_oracle(row, tau) {
                Some(v) => counts[*b] += usize::from(v),
                None => ambiguous += 1,
            }
            let want = energy_naive(row, temp);
            max_err = max_err.max((scores.data()[p] - want).abs() / want.abs().max(1.0));
            if (want - tau_e).abs() > 1e-9 {
                mask_bad += usize::from(en.valid_mask[p] != (want < tau_e));
            }
        }
        for b in 0..n {
            conf_bad += usize::from(conf.quality[b] != counts[b] as f64 / 12.0);
        }
    }
    let cfg = RunConfig::profile("full").unwrap();
    let loaded = RunConfig::from_str_any("profile = \"full\"\n").unwrap();
    let defaults = [&cfg.search, &cfg.retrain, &loaded.search, &loaded.retrain]
        .iter()
        .all(|s| s.tau == 0.968 && s.tau_e == -8.0 && s.temperature == 1.0);
    (
        conf_bad == 0 && mask_bad == 0 && max_err <= 1e-9 && ambiguous == 0 && defaults,
        format!(
            "1000 tensors: quality mismatches {conf_bad}, mask mismatches {mask_bad}, energy rel err {max_err:.1e}; defaults loaded {defaults}"
        ),
    )
}

/// Search runs shared by the behavioural criteria.
struct Searched {
    runs: Vec<SeedRun>,
    secs: f64,
}

struct SeedRun {
    cfg: RunConfig,
    spec: SupernetSpec,
    data: DomainPair,
    mrf: PairwiseMrf,
    map: ArchAssignment,
}

impl Searched {
    fn run() -> Self {
        let t = Instant::now();
        let runs = (0..SEEDS)
            .map(|seed| {
                let mut cfg = RunConfig::toy();
                cfg.seed = seed;
                cfg.search.iterations = SEARCH_ITERATIONS;
                cfg.search.warmup_iterations = SEARCH_WARMUP;
                cfg.retrain.iterations = UDA_ITERATIONS;
                let cfg = cfg.finalize().unwrap();
                let spec = cfg.spec().unwrap();
                let data = dataset(&cfg).unwrap();
                let start = spec.build_search_mrf().unwrap();
                let out = search_loop(&spec, &start, &data, &cfg.search, cfg.net_options()).unwrap();
                let map = spec.decode(&map_brute_force(&out.mrf).unwrap().assignment).unwrap();
                SeedRun { cfg, spec, data, mrf: out.mrf, map }
            })
            .collect();
        Self { runs, secs: t.elapsed().as_secs_f64() }
    }
}

fn uda_benefit(s: &Searched) -> Outcome {
    let t = Instant::now();
    let mut gains = Vec::new();
    for run in &s.runs {
        let train = |cfg: &SelfTrainConfig| {
            retrain(&run.spec, &run.map, &run.data, cfg, run.cfg.net_options())
                .unwrap()
                .metrics
                .target_miou
        };
        let source_only = train(&SelfTrainConfig { lambda_t: 0.0, ..run.cfg.retrain.clone() });
        let adapted = train(&run.cfg.retrain);
        gains.push(adapted - source_only);
    }
    let wins = gains.iter().filter(|&&g| g >= 0.05).count();
    let minutes = (s.secs + t.elapsed().as_secs_f64()) / 60.0;
    let list: Vec<String> = gains.iter().map(|g| format!("{:+.1}", 100.0 * g)).collect();
    (
        wins >= 4 && minutes <= 30.0,
        format!("mIoU gain in points per seed [{}], {wins}/5 seeds >= 5, {minutes:.1} min incl. search", list.join(", ")),
    )
}

fn search_signal(s: &Searched) -> Outcome {
    let mut wins = 0;
    let mut detail = Vec::new();
    for (seed, run) in s.runs.iter().enumerate() {
        let cfg = SelfTrainConfig {
            lambda_t: 0.0,
            iterations: SIGNAL_ITERATIONS,
            ..run.cfg.retrain.clone()
        };
        let loss = |arch: &ArchAssignment| {
            retrain(&run.spec, arch, &run.data, &cfg, run.cfg.net_options())
                .unwrap()
                .metrics
                .source_val_loss
        };
        let map_loss = loss(&run.map);
        let mut r = rng(1000 + seed as u64);
        let random: f64 = (0..RANDOM_ARCHS)
            .map(|_| loss(&random_arch(&run.spec, &mut r)))
            .sum::<f64>()
            / RANDOM_ARCHS as f64;
        wins += usize::from(map_loss < random);
        detail.push(format!("{map_loss:.3}/{random:.3}"));
    }
    (
        wins >= 4,
        format!("MAP vs random mean source-val loss [{}], {wins}/5 seeds", detail.join(", ")),
    )
}

fn budget_compliance(s: &Searched) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let run = &s.runs[0];
    let search = dir.path().join("search");
    std::fs::create_dir_all(&search).unwrap();
    std::fs::write(search.join("confidence.mrf.json"), run.mrf.to_json().unwrap()).unwrap();
    let config = dir.path().join("run.toml");
    std::fs::write(&config, "profile = \"toy\"\n[infer]\nm = 8\n").unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_udanas"))
        .args(["--config", path_str(&config), "--out-dir", path_str(dir.path()), "--budget-flops", "2.5G", "infer"])
        .status()
        .unwrap();
    let listed: Vec<Candidate> =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("subnets.json")).unwrap()).unwrap();
    let hw = run.cfg.infer.budget_hw;
    let mut ok = status.success() && !listed.is_empty();
    for c in &listed {
        let cost = resource_cost(&run.spec, &c.arch, (hw, hw)).unwrap();
        ok &= cost.flops as f64 <= 2.5e9 && (c.flops, c.params) == (cost.flops, cost.params);
        ok &= oracle_cost(&run.spec, &c.arch, hw) == (cost.flops, cost.params);
    }
    let params: Vec<String> = listed.iter().map(|c| format!("{}", c.params)).collect();
    (
        ok,
        format!(
            "{} of 8 candidates under 2.5G MACs at {hw}x{hw}, params [{}] match recount",
            listed.len(),
            params.join(", ")
        ),
    )
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

const REPRO: &str = r#"
profile = "toy"
seed = 7
schemes = ["confidence", "energy"]

[data]
n_source = 12
n_target = 12
n_eval = 8
image_hw = 8

[search]
iterations = 10
warmup_iterations = 4
batch_size = 2

[retrain]
iterations = 8
batch_size = 2

[infer]
m = 3
"#;

fn reproducibility() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("repro.toml");
    std::fs::write(&path, REPRO).unwrap();
    let cfg = LoadedConfig::from_path(&path).unwrap();
    let out = dir.path().join("out");
    let a = cmd_report(&cfg, &out).unwrap();
    let b = cmd_report(&cfg, &out).unwrap();
    (
        a.same_results(&b),
        format!("{} subnets, reports identical apart from wall clock: {}", a.subnets.len(), a.same_results(&b)),
    )
}
