use approx::assert_relative_eq;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use udanas::nn::gradcheck::{check, rel_err};
use udanas::nn::{sandwich_step, AdamW, ParamStore, Supernet, SupernetOptions, Tape, Tensor, Var};
use udanas::space::{ArchAssignment, OpChoice, SupernetSpec};
use udanas::Error;

const H: f64 = 1e-4;
const TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    // Keep entries away from zero so relu kinks are not straddled by ±h.
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(0.5..2.0)).collect()).unwrap()
}

/// Contracts `y` with a fixed random tensor so every output entry matters.
fn probe(tape: &mut Tape, y: Var, seed: u64) -> udanas::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = rand_tensor(&mut rng, tape.value(y).shape());
    let r = tape.leaf(r);
    let p = tape.mul(y, r)?;
    Ok(tape.sum(p))
}

fn assert_fd<F>(name: &str, inputs: &[Tensor], f: F)
where
    F: Fn(&mut Tape, &[Var]) -> udanas::Result<Var>,
{
    let r = check(inputs, H, 1e-6, f).unwrap();
    assert!(r.checked > 0);
    assert!(r.max_rel_err < TOL, "{name}: rel err {} (abs {})", r.max_rel_err, r.max_abs_err);
}

#[test]
fn elementwise_ops_pass_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&mut rng, &[2, 3]);
    let b = rand_tensor(&mut rng, &[2, 3]);
    let p = positive(&mut rng, &[2, 3]);
    assert_fd("add", &[a.clone(), b.clone()], |t, v| {
        let y = t.add(v[0], v[1])?;
        probe(t, y, 7)
    });
    assert_fd("sub", &[a.clone(), b.clone()], |t, v| {
        let y = t.sub(v[0], v[1])?;
        probe(t, y, 7)
    });
    assert_fd("mul", &[a.clone(), b.clone()], |t, v| {
        let y = t.mul(v[0], v[1])?;
        probe(t, y, 7)
    });
    assert_fd("scale", &[a.clone()], |t, v| {
        let y = t.scale(v[0], -2.5);
        probe(t, y, 7)
    });
    assert_fd("shift", &[a.clone()], |t, v| {
        let y = t.shift(v[0], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])?;
        probe(t, y, 7)
    });
    assert_fd("relu", &[a.clone()], |t, v| {
        let y = t.relu(v[0]);
        probe(t, y, 7)
    });
    assert_fd("exp", &[a.clone()], |t, v| {
        let y = t.exp(v[0]);
        probe(t, y, 7)
    });
    assert_fd("ln", &[p], |t, v| {
        let y = t.ln(v[0]);
        probe(t, y, 7)
    });
    assert_fd("sum", &[a], |t, v| {
        let y = t.sum(v[0]);
        let y = t.mul(y, y)?;
        Ok(t.sum(y))
    });
}

#[test]
fn vector_ops_pass_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&mut rng, &[5]);
    let m = rand_tensor(&mut rng, &[3, 4]);
    let v4 = rand_tensor(&mut rng, &[4]);
    let v3 = rand_tensor(&mut rng, &[3]);
    assert_fd("softmax", &[x.clone()], |t, v| {
        let y = t.softmax(v[0])?;
        probe(t, y, 3)
    });
    assert_fd("matvec", &[m.clone(), v4], |t, v| {
        let y = t.matvec(v[0], v[1], false)?;
        probe(t, y, 3)
    });
    assert_fd("matvec^T", &[m, v3], |t, v| {
        let y = t.matvec(v[0], v[1], true)?;
        probe(t, y, 3)
    });
    assert_fd("slice", &[x], |t, v| {
        let y = t.slice(v[0], 1, 3)?;
        probe(t, y, 3)
    });
}

#[test]
fn spatial_ops_pass_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[2, 3, 6, 6]);
    let s = rand_tensor(&mut rng, &[3]);
    assert_fd("channel_scale", &[x.clone(), s], |t, v| {
        let y = t.channel_scale(v[0], v[1])?;
        probe(t, y, 4)
    });
    for (k, stride, pad) in [(3, 1, 1), (5, 1, 2), (3, 2, 1), (1, 1, 0)] {
        let w = rand_tensor(&mut rng, &[4, 3, k, k]);
        let b = rand_tensor(&mut rng, &[4]);
        assert_fd(
            &format!("conv2d k{k} s{stride} p{pad}"),
            &[x.clone(), w, b],
            |t, v| {
                let y = t.conv2d(v[0], v[1], v[2], stride, pad)?;
                probe(t, y, 4)
            },
        );
    }
    let w = rand_tensor(&mut rng, &[3, 2, 2, 2]);
    let b = rand_tensor(&mut rng, &[2]);
    assert_fd("up_conv", &[x.clone(), w, b], |t, v| {
        let y = t.up_conv(v[0], v[1], v[2])?;
        probe(t, y, 4)
    });
    assert_fd("instance_norm", &[x], |t, v| {
        let y = t.instance_norm(v[0])?;
        probe(t, y, 4)
    });
}

#[test]
fn cross_entropy_passes_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let logits = rand_tensor(&mut rng, &[2, 4, 3, 3]);
    let targets: Vec<usize> = (0..18).map(|i| (i * 7) % 4).collect();
    let weights: Vec<f64> = (0..18).map(|i| if i % 5 == 0 { 0.0 } else { 0.3 + 0.1 * i as f64 }).collect();
    assert_fd("cross_entropy", &[logits], |t, v| t.cross_entropy(v[0], &targets, &weights));
}

#[test]
fn cross_entropy_of_uniform_logits_is_log_classes() {
    let mut tape = Tape::new();
    let l = tape.leaf(Tensor::zeros(&[1, 4, 2, 2]));
    let ce = tape.cross_entropy(l, &[0, 1, 2, 3], &[1.0; 4]).unwrap();
    assert_relative_eq!(tape.value(ce).item(), 4f64.ln(), epsilon = 1e-15);
}

#[test]
fn bias_gradient_of_summed_conv_is_output_area() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (stride, pad, hw_out) in [(1, 1, 6), (2, 1, 3), (1, 0, 4)] {
        let mut tape = Tape::new();
        let x = tape.leaf(rand_tensor(&mut rng, &[1, 2, 6, 6]));
        let w = tape.leaf(rand_tensor(&mut rng, &[3, 2, 3, 3]));
        let b = tape.leaf(Tensor::zeros(&[3]));
        let y = tape.conv2d(x, w, b, stride, pad).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(b).unwrap(), &[(hw_out * hw_out) as f64; 3]);
    }
}

#[test]
fn zero_upstream_gradient_gives_zero_parameter_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut tape = Tape::new();
    let x = tape.leaf(rand_tensor(&mut rng, &[1, 2, 4, 4]));
    let w = tape.leaf(rand_tensor(&mut rng, &[3, 2, 3, 3]));
    let b = tape.leaf(rand_tensor(&mut rng, &[3]));
    let y = tape.conv2d(x, w, b, 1, 1).unwrap();
    let y = tape.scale(y, 0.0);
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    assert!(tape.grad(w).unwrap().iter().all(|&g| g == 0.0));
    assert!(tape.grad(b).unwrap().iter().all(|&g| g == 0.0));
}

#[test]
fn backward_without_a_recorded_forward_is_an_error() {
    let mut other = Tape::new();
    let a = other.leaf(Tensor::scalar(1.0));
    let mut empty = Tape::new();
    assert!(matches!(empty.backward(a), Err(Error::Tape(_))));
    let mut t = Tape::new();
    let v = t.leaf(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(t.backward(v), Err(Error::Tape(_))));
}

#[test]
fn backward_is_bit_repeatable() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_tensor(&mut rng, &[1, 3, 4, 4]);
    let w = rand_tensor(&mut rng, &[2, 3, 3, 3]);
    let run = || {
        let mut t = Tape::new();
        let xv = t.leaf(x.clone());
        let wv = t.leaf(w.clone());
        let b = t.leaf(Tensor::zeros(&[2]));
        let y = t.conv2d(xv, wv, b, 1, 1).unwrap();
        let y = t.relu(y);
        let s = t.sum(y);
        t.backward(s).unwrap();
        let first = t.grad(wv).unwrap().to_vec();
        t.backward(s).unwrap();
        assert_eq!(first, t.grad(wv).unwrap());
        first
    };
    assert_eq!(run(), run());
}

fn tiny_spec() -> SupernetSpec {
    SupernetSpec::unet(1, 2, 2, 3).unwrap()
}

fn images(spec: &SupernetSpec, n: usize, hw: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rand_tensor(&mut rng, &[n, spec.in_channels, hw, hw])
}

fn labels(n: usize, hw: usize, classes: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n * hw * hw).map(|_| rng.gen_range(0..classes)).collect()
}

fn arch_loss(net: &Supernet, store: &ParamStore, arch: &ArchAssignment, x: &Tensor, y: &[usize]) -> f64 {
    let mut n = net.clone();
    n.load_store(store.clone()).unwrap();
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let logits = n.forward(&mut tape, arch, xv).unwrap();
    let l = tape.cross_entropy(logits, y, &vec![1.0; y.len()]).unwrap();
    tape.value(l).item()
}

#[test]
fn sliced_subnet_parameters_pass_finite_differences() {
    let spec = tiny_spec();
    let mut net = Supernet::new(&spec, SupernetOptions::default(), 3).unwrap();
    // Zero biases put dead-input pixels exactly on the relu kink.
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    for p in net.store_mut().iter_mut().filter(|p| p.name.ends_with(".b")) {
        p.value = rand_tensor(&mut rng, p.value.shape());
    }
    let x = images(&spec, 1, 4, 1);
    let y = labels(1, 4, 3, 2);
    for arch in [spec.largest_arch(), spec.smallest_arch()] {
        let mut n = net.clone();
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let logits = n.forward(&mut tape, &arch, xv).unwrap();
        let l = tape.cross_entropy(logits, &y, &vec![1.0; y.len()]).unwrap();
        tape.backward(l).unwrap();
        tape.flush_param_grads(n.store_mut()).unwrap();
        let mut worst: f64 = 0.0;
        let (mut kinks, mut total) = (0, 0);
        let mut store = net.store().clone();
        let numeric = |store: &mut ParamStore, id, j, h: f64| {
            let p: &mut udanas::nn::Param = store.get_mut(id);
            let orig = p.value.data()[j];
            p.value.data_mut()[j] = orig + h;
            let plus = arch_loss(&net, store, &arch, &x, &y);
            store.get_mut(id).value.data_mut()[j] = orig - h;
            let minus = arch_loss(&net, store, &arch, &x, &y);
            store.get_mut(id).value.data_mut()[j] = orig;
            (plus - minus) / (2.0 * h)
        };
        for pi in 0..store.len() {
            let id = udanas::nn::ParamId(pi);
            for j in 0..store.get(id).value.len() {
                total += 1;
                let coarse = numeric(&mut store, id, j, H);
                let fine = numeric(&mut store, id, j, H / 10.0);
                // A relu kink inside [-h, h] makes the two estimates disagree.
                if rel_err(coarse, fine, 1e-6) > TOL {
                    kinks += 1;
                    continue;
                }
                worst = worst.max(rel_err(n.store().get(id).grad[j], coarse, 1e-6));
            }
        }
        assert!(kinks * 20 <= total, "{kinks} of {total} entries straddle a kink");
        assert!(worst < TOL, "{}: rel err {worst}", arch.describe(&spec));
    }
}

#[test]
fn width_slicing_matches_a_standalone_copy() {
    let spec = SupernetSpec::desk_default();
    let net = Supernet::new(&spec, SupernetOptions::default(), 11).unwrap();
    let x = images(&spec, 2, 8, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mrf = spec.build_search_mrf().unwrap();
    for _ in 0..10 {
        let a = udanas::mrf::Assignment::new(
            mrf.cardinalities().iter().map(|&c| rng.gen_range(0..c)).collect(),
        );
        let arch = spec.decode(&a).unwrap();
        let standalone = net.extract(&arch).unwrap();
        let shared = net.predict(&arch, &x).unwrap();
        let alone = standalone.predict(&x).unwrap();
        assert!(shared.max_abs_diff(&alone) < 1e-7);
    }
}

#[test]
fn centre_crop_of_large_kernel_matches_standalone_small_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut store = ParamStore::new();
    let id = store.add("w", rand_tensor(&mut rng, &[2, 3, 5, 5]));
    let x = rand_tensor(&mut rng, &[1, 3, 6, 6]);
    let stored = store.get(id).value.clone();
    let mut crop = Vec::new();
    for o in 0..2 {
        for i in 0..3 {
            for dy in 1..4 {
                for dx in 1..4 {
                    crop.push(stored.data()[((o * 3 + i) * 5 + dy) * 5 + dx]);
                }
            }
        }
    }
    let mut t = Tape::new();
    let xv = t.leaf(x.clone());
    let w = t.param(&store, id, &[2, 3, 3, 3]).unwrap();
    let b = t.leaf(Tensor::zeros(&[2]));
    let sliced = t.conv2d(xv, w, b, 1, 1).unwrap();
    let w2 = t.leaf(Tensor::new(vec![2, 3, 3, 3], crop).unwrap());
    let alone = t.conv2d(xv, w2, b, 1, 1).unwrap();
    assert!(t.value(sliced).max_abs_diff(t.value(alone)) < 1e-7);
}

#[test]
fn one_hot_relaxed_forward_equals_discrete() {
    for instance_norm in [false, true] {
        let spec = SupernetSpec::desk_default();
        let net = Supernet::new(&spec, SupernetOptions { instance_norm }, 21).unwrap();
        let x = images(&spec, 2, 8, 5);
        let mrf = spec.build_search_mrf().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..6 {
            let a = udanas::mrf::Assignment::new(
                mrf.cardinalities().iter().map(|&c| rng.gen_range(0..c)).collect(),
            );
            let arch = spec.decode(&a).unwrap();
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let oh = udanas::mrf::RelaxedAssignment::one_hot(&mut tape, &mrf.cardinalities(), &a);
            let soft = net.forward_relaxed(&mut tape, oh.vars(), xv).unwrap();
            let hard = net.forward(&mut tape, &arch, xv).unwrap();
            assert!(tape.value(soft).max_abs_diff(tape.value(hard)) < 1e-6);
        }
    }
}

#[test]
fn relaxed_forward_is_differentiable_in_the_simplex() {
    let spec = tiny_spec();
    let net = Supernet::new(&spec, SupernetOptions::default(), 2).unwrap();
    let x = images(&spec, 1, 4, 9);
    let y = labels(1, 4, 3, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mrf = spec.build_search_mrf().unwrap();
    let inputs: Vec<Tensor> = mrf.cardinalities().iter().map(|&c| positive(&mut rng, &[c])).collect();
    assert_fd("relaxed forward", &inputs, |t, v| {
        let xv = t.leaf(x.clone());
        let logits = net.forward_relaxed(t, v, xv)?;
        t.cross_entropy(logits, &y, &vec![1.0; y.len()])
    });
}

#[test]
fn sandwich_without_random_subnets_runs_two_passes() {
    let spec = tiny_spec();
    let mut net = Supernet::new(&spec, SupernetOptions::default(), 1).unwrap();
    let x = images(&spec, 2, 4, 1);
    let y = labels(2, 4, 3, 2);
    let mut opt = AdamW::new(0.003, 0.05);
    let mut calls = 0;
    let stats = sandwich_step(&mut net, &[], &mut opt, |t, n, a| {
        calls += 1;
        let xv = t.leaf(x.clone());
        let l = n.forward(t, a, xv)?;
        t.cross_entropy(l, &y, &vec![1.0; y.len()])
    })
    .unwrap();
    assert_eq!(calls, 2);
    assert_eq!(stats.passes(), 2);
}

#[test]
fn sandwich_gradients_are_the_sum_of_per_pass_gradients() {
    let spec = tiny_spec();
    let net = Supernet::new(&spec, SupernetOptions::default(), 4).unwrap();
    let x = images(&spec, 1, 4, 3);
    let y = labels(1, 4, 3, 4);
    let mid = ArchAssignment {
        choices: spec
            .nodes
            .iter()
            .map(|n| OpChoice {
                kind: n.kind,
                kernel: n.kind.kernels()[0],
                width_ratio: 1.0,
            })
            .collect(),
    };
    let loss = |t: &mut Tape, n: &Supernet, a: &ArchAssignment| {
        let xv = t.leaf(x.clone());
        let l = n.forward(t, a, xv)?;
        t.cross_entropy(l, &y, &vec![1.0; y.len()])
    };
    let mut expected: Vec<Vec<f64>> = net.store().iter().map(|p| vec![0.0; p.grad.len()]).collect();
    for arch in [spec.largest_arch(), spec.smallest_arch(), mid.clone()] {
        let mut single = net.clone();
        single.store_mut().zero_grad();
        let mut f = loss;
        udanas::nn::accumulate_pass(&mut single, &arch, &mut f).unwrap();
        for (e, p) in expected.iter_mut().zip(single.store().iter()) {
            for (a, b) in e.iter_mut().zip(&p.grad) {
                *a += b;
            }
        }
    }
    let mut net = net;
    // Zero learning rate leaves the weights alone so the raw grads can be read.
    let mut opt = AdamW::new(0.0, 0.0);
    let stats = sandwich_step(&mut net, &[mid], &mut opt, loss).unwrap();
    assert_eq!(stats.passes(), 3);
    for (e, p) in expected.iter().zip(net.store().iter()) {
        for (a, b) in e.iter().zip(&p.grad) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }
}

#[test]
fn identical_seeds_give_identical_trajectories() {
    let run = || {
        let spec = tiny_spec();
        let mut net = Supernet::new(&spec, SupernetOptions::default(), 5).unwrap();
        let mut opt = AdamW::new(0.01, 0.05);
        for step in 0..3 {
            let x = images(&spec, 2, 4, step);
            let y = labels(2, 4, 3, step + 100);
            sandwich_step(&mut net, &[], &mut opt, |t, n, a| {
                let xv = t.leaf(x.clone());
                let l = n.forward(t, a, xv)?;
                t.cross_entropy(l, &y, &vec![1.0; y.len()])
            })
            .unwrap();
        }
        net.store()
            .iter()
            .flat_map(|p| p.value.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
            .collect::<Vec<u64>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn widest_subnet_fits_a_separable_task_at_least_as_well_as_narrowest() {
    // Class is decided by the sign of the first channel at each pixel.
    let spec = SupernetSpec::unet(1, 4, 2, 2).unwrap();
    let mut net = Supernet::new(&spec, SupernetOptions::default(), 3).unwrap();
    let mut opt = AdamW::new(0.01, 0.0);
    let mut last = None;
    for it in 0..500 {
        let x = images(&spec, 2, 4, it);
        let y: Vec<usize> = (0..2)
            .flat_map(|b| (0..16).map(move |p| (b, p)))
            .map(|(b, p)| usize::from(x.data()[b * 32 + p] > 0.0))
            .collect();
        last = Some(
            sandwich_step(&mut net, &[], &mut opt, |t, n, a| {
                let xv = t.leaf(x.clone());
                let l = n.forward(t, a, xv)?;
                t.cross_entropy(l, &y, &vec![1.0; y.len()])
            })
            .unwrap(),
        );
    }
    let stats = last.unwrap();
    assert!(stats.max_width_loss() < 0.3, "{stats:?}");
    assert!(stats.max_width_loss() <= stats.min_width_loss() + 0.02, "{stats:?}");
}
