//! MAP and diverse M-best inference over the architecture search space,
//! filtered by a MAC budget.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use udanas::infer::{diverse_m_best, map_brute_force, map_loopy};
use udanas::mrf::FactorGradients;
use udanas::space::{budget_filter, format_si, SupernetSpec};

fn main() -> udanas::Result<()> {
    let spec = SupernetSpec::desk_default();
    let mut mrf = spec.build_search_mrf()?;
    // Random factors stand in for learned ones.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut g = FactorGradients::zeros_like(&mrf);
    for t in &mut g.tables {
        t.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
    }
    mrf.update_factors(&g, 1.0)?;

    let exact = map_brute_force(&mrf)?;
    let bp = map_loopy(&mrf, 200, 0.5)?;
    println!("exact MAP {:?} score {:.3}", exact.assignment.labels, exact.score);
    println!("loopy MAP {:?} score {:.3} converged {}", bp.assignment.labels, bp.score, bp.converged);

    let set = diverse_m_best(&mrf, 6, 1.0, true)?;
    println!("diverse 6-best, min Hamming {}", set.min_pairwise_hamming);
    for (i, s) in set.solutions.iter().enumerate() {
        println!("  {i}: {}  score {:.3}", spec.decode(&s.assignment)?.describe(&spec), s.score);
    }
    for b in budget_filter(&set, &spec, 2.5e9, (256, 256))? {
        println!("within 2.5G: #{} {} MACs, {} params", b.index, format_si(b.cost.flops as f64), b.cost.params);
    }
    Ok(())
}
