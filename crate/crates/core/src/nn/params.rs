//! Shared parameter storage.
//!
//! Every tensor is allocated at its largest shape. Subnets read *views*: the
//! leading entries along channel axes and, for rank-4 convolution kernels, the
//! centred window of the spatial axes. Gradients from any view are scattered
//! back into one shared buffer, so all subnets train the same storage.

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Vec<f64>,
}

/// Named, max-shape parameter tensors with gradient accumulators.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let grad = vec![0.0; value.len()];
        self.params.push(Param {
            name: name.into(),
            value,
            grad,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params
            .iter()
            .position(|p| p.name == name)
            .map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Total number of stored scalars.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape())
    }

    /// Copy of the slice described by `dims`.
    pub fn view(&self, id: ParamId, dims: &[usize]) -> Result<Tensor> {
        let p = &self.params[id.0];
        let stored = p.value.shape();
        check_view(&p.name, stored, dims)?;
        let mut out = Vec::with_capacity(dims.iter().product());
        for_each_view_offset(stored, dims, |src| out.push(p.value.data()[src]));
        Tensor::new(dims.to_vec(), out)
    }

    /// Adds `grad` (shaped `dims`) into the accumulator of the viewed region.
    pub fn scatter_grad(&mut self, id: ParamId, dims: &[usize], grad: &[f64]) -> Result<()> {
        let p = &mut self.params[id.0];
        let stored = p.value.shape().to_vec();
        check_view(&p.name, &stored, dims)?;
        let mut k = 0;
        for_each_view_offset(&stored, dims, |dst| {
            p.grad[dst] += grad[k];
            k += 1;
        });
        Ok(())
    }
}

fn check_view(name: &str, stored: &[usize], dims: &[usize]) -> Result<()> {
    let ok = stored.len() == dims.len()
        && stored.iter().zip(dims).enumerate().all(|(axis, (&s, &d))| {
            d <= s && (stored.len() != 4 || axis < 2 || (s - d) % 2 == 0)
        });
    if ok {
        Ok(())
    } else {
        Err(Error::Shape(format!(
            "view {dims:?} does not fit parameter `{name}` of shape {stored:?}"
        )))
    }
}

/// Visits the flat storage offset of every element of the view in row-major
/// view order. Channel axes take leading entries; the two spatial axes of a
/// rank-4 kernel take the centred window.
fn for_each_view_offset(stored: &[usize], dims: &[usize], mut f: impl FnMut(usize)) {
    let rank = stored.len();
    if dims.iter().any(|&d| d == 0) {
        return;
    }
    let offsets: Vec<usize> = (0..rank)
        .map(|a| {
            if rank == 4 && a >= 2 {
                (stored[a] - dims[a]) / 2
            } else {
                0
            }
        })
        .collect();
    let mut strides = vec![1usize; rank];
    for a in (0..rank.saturating_sub(1)).rev() {
        strides[a] = strides[a + 1] * stored[a + 1];
    }
    let mut idx = vec![0usize; rank];
    loop {
        let flat: usize = (0..rank).map(|a| (idx[a] + offsets[a]) * strides[a]).sum();
        f(flat);
        let mut a = rank;
        loop {
            if a == 0 {
                return;
            }
            a -= 1;
            idx[a] += 1;
            if idx[a] < dims[a] {
                break;
            }
            idx[a] = 0;
        }
    }
}
