//! Gibbs sampling against exact marginals, then a Gumbel-Softmax relaxed
//! sample and the factor gradients it carries.

use udanas::mrf::{gibbs_sample, relaxed_sample, Assignment, FactorBinding, FactorTable, PairwiseMrf, RelaxedInit};
use udanas::nn::{Tape, Tensor};

fn main() -> udanas::Result<()> {
    let mut m = PairwiseMrf::with_cardinalities(&[2, 3, 2])?;
    m.add_factor(FactorTable::unary(0, vec![0.5, 0.0]))?;
    m.add_factor(FactorTable::unary(1, vec![0.0, 1.0, -0.5]))?;
    m.add_factor(FactorTable::pairwise(0, 1, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]))?;
    m.add_factor(FactorTable::pairwise(1, 2, vec![0.0, 0.5, 0.5, 0.0, 0.0, 1.0]))?;

    let exact = m.marginals_brute_force()?;
    let sweeps = 20_000;
    let mut counts: Vec<Vec<usize>> = m.cardinalities().iter().map(|&c| vec![0; c]).collect();
    let mut state = Assignment::zeros(m.num_variables());
    for s in 0..sweeps {
        state = gibbs_sample(&m, &state, 1, s)?;
        for (v, &l) in state.labels.iter().enumerate() {
            counts[v][l] += 1;
        }
    }
    for (v, p) in exact.iter().enumerate() {
        let est: Vec<String> = counts[v].iter().map(|&c| format!("{:.3}", c as f64 / sweeps as f64)).collect();
        let ex: Vec<String> = p.iter().map(|x| format!("{x:.3}")).collect();
        println!("var {v}: gibbs [{}]  exact [{}]", est.join(" "), ex.join(" "));
    }

    let mut tape = Tape::new();
    let binding = FactorBinding::new(&mut tape, &m);
    let sample = relaxed_sample(&mut tape, &m, &binding, RelaxedInit::Uniform, 0.5, 1, 7)?;
    println!("relaxed sample: {:?}", sample.simplex);
    // Reward label 1 of the middle variable and push it back to the factors.
    let w = tape.leaf(Tensor::vector(vec![0.0, 1.0, 0.0]));
    let p = tape.mul(sample.vars()[1], w)?;
    let loss = tape.sum(p);
    tape.backward(loss)?;
    let grads = binding.gradients(&tape, &m);
    println!("d loss / d unary(1) = {:?}", grads.tables[1]);
    Ok(())
}
