//! Reverse-mode gradients checked by finite differences, then a few AdamW
//! sandwich steps on a small supernet.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use udanas::nn::gradcheck::check;
use udanas::nn::{sandwich_step, AdamW, Supernet, SupernetOptions, Tensor};
use udanas::space::SupernetSpec;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn main() -> udanas::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&mut rng, &[1, 3, 6, 6]);
    let w = random(&mut rng, &[4, 3, 3, 3]);
    let b = random(&mut rng, &[4]);
    let probe = random(&mut rng, &[1, 4, 6, 6]);
    let r = check(&[x, w, b], 1e-4, 1e-6, |t, v| {
        let y = t.conv2d(v[0], v[1], v[2], 1, 1)?;
        let y = t.instance_norm(y)?;
        let p = t.leaf(probe.clone());
        let y = t.mul(y, p)?;
        Ok(t.sum(y))
    })?;
    println!("conv+norm: {} entries, max rel err {:.2e}", r.checked, r.max_rel_err);

    let spec = SupernetSpec::desk_default();
    let mut net = Supernet::new(&spec, SupernetOptions::default(), 3)?;
    let images = Tensor::new(vec![2, 3, 8, 8], (0..384).map(|_| rng.gen_range(0.0..1.0)).collect())?;
    // Class 1 wherever the red channel is bright.
    let labels: Vec<usize> = (0..128).map(|i| usize::from(images.data()[(i / 64) * 192 + i % 64] > 0.5)).collect();
    let weights = vec![1.0; labels.len()];
    let mut opt = AdamW::new(0.01, 0.0);
    for step in 0..30 {
        let losses = sandwich_step(&mut net, &[], &mut opt, |t, n, arch| {
            let x = t.leaf(images.clone());
            let logits = n.forward(t, arch, x)?;
            t.cross_entropy(logits, &labels, &weights)
        })?;
        if step % 10 == 0 || step == 29 {
            println!("step {step:2}: widest {:.4} narrowest {:.4}", losses.max_width_loss(), losses.min_width_loss());
        }
    }
    Ok(())
}
