//! Confidence- and energy-based pseudo-labels from teacher logits.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use udanas::nn::Tensor;
use udanas::selftrain::{energy_score, pseudo_confidence, pseudo_energy};

fn main() -> udanas::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (n, c, hw) = (2, 4, 3);
    // The second image is far more peaked than the first.
    let data: Vec<f64> = (0..n * c * hw * hw)
        .map(|i| rng.gen_range(-1.0..1.0) * if i < c * hw * hw { 2.0 } else { 12.0 })
        .collect();
    let logits = Tensor::new(vec![n, c, hw, hw], data)?;

    let conf = pseudo_confidence(&logits, 0.968)?;
    println!("labels  {:?}", conf.labels);
    println!("confidence quality per image {:?}", conf.quality);

    let energy = energy_score(&logits, 1.0)?;
    let e: Vec<String> = energy.data().iter().map(|v| format!("{v:.1}")).collect();
    println!("energy  [{}]", e.join(" "));
    let en = pseudo_energy(&logits, -8.0, 1.0)?;
    let kept = en.valid_mask.iter().filter(|&&v| v).count();
    println!("energy cutoff -8 keeps {kept} of {} pixels", en.valid_mask.len());
    Ok(())
}
