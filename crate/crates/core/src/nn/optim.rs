//! AdamW and the sandwich training step.

use serde::{Deserialize, Serialize};

use super::{ParamStore, Supernet, Tape, Var};
use crate::error::{Error, Result};
use crate::space::ArchAssignment;

/// Adaptive-moment optimizer with decoupled weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub state: AdamState,
}

/// Moment estimates and step count, laid out like the parameter store.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            state: AdamState::default(),
        }
    }

    /// One update from the gradients accumulated in `store`.
    ///
    /// `p ← p − lr·wd·p − lr·m̂/(√v̂ + eps)` with bias-corrected moments.
    pub fn step(&mut self, store: &mut ParamStore) {
        let st = &mut self.state;
        if st.m.len() != store.len() {
            st.m = store.iter().map(|p| vec![0.0; p.grad.len()]).collect();
            st.v = st.m.clone();
            st.step = 0;
        }
        st.step += 1;
        let t = st.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, m), v) in store.iter_mut().zip(&mut st.m).zip(&mut st.v) {
            let grad = &p.grad;
            for (i, x) in p.value.data_mut().iter_mut().enumerate() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                *x -= self.lr * self.weight_decay * *x + self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Per-pass losses of one sandwich step, in pass order: widest subnet,
/// narrowest subnet, then the random ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandwichStats {
    pub losses: Vec<f64>,
}

impl SandwichStats {
    pub fn passes(&self) -> usize {
        self.losses.len()
    }

    pub fn max_width_loss(&self) -> f64 {
        self.losses[0]
    }

    pub fn min_width_loss(&self) -> f64 {
        self.losses[1]
    }

    pub fn mean(&self) -> f64 {
        self.losses.iter().sum::<f64>() / self.losses.len() as f64
    }
}

/// Runs one forward/backward pass of `arch` and adds its parameter gradients
/// to the supernet. `loss_fn` builds the loss from the network and subnet.
pub fn accumulate_pass<F>(net: &mut Supernet, arch: &ArchAssignment, loss_fn: &mut F) -> Result<f64>
where
    F: FnMut(&mut Tape, &Supernet, &ArchAssignment) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape, net, arch)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Numerical(format!("non-finite loss {value} for {}", arch.describe(net.spec()))));
    }
    tape.backward(loss)?;
    tape.flush_param_grads(net.store_mut())?;
    Ok(value)
}

/// Accumulates gradients of the widest, the narrowest and every subnet in
/// `random` on the same batch, then takes one optimizer step.
pub fn sandwich_step<F>(
    net: &mut Supernet,
    random: &[ArchAssignment],
    optimizer: &mut AdamW,
    mut loss_fn: F,
) -> Result<SandwichStats>
where
    F: FnMut(&mut Tape, &Supernet, &ArchAssignment) -> Result<Var>,
{
    net.store_mut().zero_grad();
    let spec = net.spec().clone();
    let mut losses = Vec::with_capacity(2 + random.len());
    for arch in [spec.largest_arch(), spec.smallest_arch()].iter().chain(random) {
        losses.push(accumulate_pass(net, arch, &mut loss_fn)?);
    }
    optimizer.step(net.store_mut());
    Ok(SandwichStats { losses })
}
