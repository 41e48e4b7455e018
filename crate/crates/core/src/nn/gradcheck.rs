//! Central finite-difference gradient checking.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Worst discrepancy between analytic and numeric gradients.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
}

/// Relative error with a floor on the denominator so that entries whose true
/// gradient is zero are judged on absolute error.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the tape gradient of `f` w.r.t. every entry of every input with
/// central differences of step `h`. `f` must build a scalar from the leaves it
/// is handed.
pub fn check<F>(inputs: &[Tensor], h: f64, floor: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;

    let mut report = GradCheck {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
    };
    let mut probe = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = tape
            .grad(*v)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        for j in 0..inputs[k].len() {
            let orig = inputs[k].data()[j];
            probe[k].data_mut()[j] = orig + h;
            let plus = eval(&probe)?;
            probe[k].data_mut()[j] = orig - h;
            let minus = eval(&probe)?;
            probe[k].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            report.max_abs_err = report.max_abs_err.max((analytic[j] - numeric).abs());
            report.max_rel_err = report
                .max_rel_err
                .max(rel_err(analytic[j], numeric, floor));
            report.checked += 1;
        }
    }
    Ok(report)
}
