//! Per-layer MAC and parameter counts.
//!
//! One multiply-accumulate counts as one FLOP. A convolution costs
//! `K·K·C_in·C_out·H_out·W_out` MACs; a 2×2 stride-2 transposed convolution
//! touches every input pixel once per tap and costs `K·K·C_in·C_out·H_in·W_in`.
//! Parameters are `K·K·C_in·C_out + C_out` (weights plus bias).

use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use super::{ArchAssignment, NodeInput, OpKind, SupernetSpec};
use crate::error::{Error, Result};
use crate::infer::DiverseSolutionSet;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceCost {
    /// Multiply-accumulate operations.
    pub flops: u64,
    pub params: u64,
}

impl Add for ResourceCost {
    type Output = ResourceCost;
    fn add(self, o: ResourceCost) -> ResourceCost {
        ResourceCost {
            flops: self.flops + o.flops,
            params: self.params + o.params,
        }
    }
}

impl AddAssign for ResourceCost {
    fn add_assign(&mut self, o: ResourceCost) {
        *self = *self + o;
    }
}

impl std::fmt::Display for ResourceCost {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} MACs, {} params",
            format_si(self.flops as f64),
            format_si(self.params as f64)
        )
    }
}

pub fn conv_cost(kernel: usize, c_in: usize, c_out: usize, h_out: usize, w_out: usize) -> ResourceCost {
    let (k, ci, co) = (kernel as u64, c_in as u64, c_out as u64);
    ResourceCost {
        flops: k * k * ci * co * h_out as u64 * w_out as u64,
        params: k * k * ci * co + co,
    }
}

pub fn up_conv_cost(kernel: usize, c_in: usize, c_out: usize, h_in: usize, w_in: usize) -> ResourceCost {
    let (k, ci, co) = (kernel as u64, c_in as u64, c_out as u64);
    ResourceCost {
        flops: k * k * ci * co * h_in as u64 * w_in as u64,
        params: k * k * ci * co + co,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Conv { kernel: usize, stride: usize },
    UpConv { kernel: usize },
}

/// Shape of one layer of a decoded network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub name: String,
    /// Searched node index; `None` for the fixed stem and head.
    pub node: Option<usize>,
    pub kind: LayerKind,
    /// Channel count of each concatenated input.
    pub in_channels: Vec<usize>,
    pub out_channels: usize,
    pub in_hw: (usize, usize),
    pub out_hw: (usize, usize),
}

impl LayerPlan {
    pub fn total_in_channels(&self) -> usize {
        self.in_channels.iter().sum()
    }

    pub fn cost(&self) -> ResourceCost {
        let ci = self.total_in_channels();
        match self.kind {
            LayerKind::Conv { kernel, .. } => {
                conv_cost(kernel, ci, self.out_channels, self.out_hw.0, self.out_hw.1)
            }
            LayerKind::UpConv { kernel } => {
                up_conv_cost(kernel, ci, self.out_channels, self.in_hw.0, self.in_hw.1)
            }
        }
    }
}

/// Layers of the decoded network in execution order: stem, searched nodes, head.
pub fn layer_plan(
    spec: &SupernetSpec,
    arch: &ArchAssignment,
    input_hw: (usize, usize),
) -> Result<Vec<LayerPlan>> {
    spec.check_arch(arch)?;
    spec.check_input_hw(input_hw)?;
    let at = |level: usize| (input_hw.0 >> level, input_hw.1 >> level);
    let stem_c = spec.stem_channels();
    let mut widths = Vec::with_capacity(spec.num_nodes());
    let mut layers = Vec::with_capacity(spec.num_nodes() + 2);
    layers.push(LayerPlan {
        name: "stem".into(),
        node: None,
        kind: LayerKind::Conv {
            kernel: 3,
            stride: 1,
        },
        in_channels: vec![spec.in_channels],
        out_channels: stem_c,
        in_hw: input_hw,
        out_hw: input_hw,
    });
    for (i, (node, choice)) in spec.nodes.iter().zip(&arch.choices).enumerate() {
        let in_channels: Vec<usize> = node
            .inputs
            .iter()
            .map(|inp| match *inp {
                NodeInput::Stem => stem_c,
                NodeInput::Node(j) => widths[j],
            })
            .collect();
        let out_channels = spec.width(node.level, choice.width_ratio);
        let (kind, in_level) = match node.kind {
            OpKind::Downsample => (
                LayerKind::Conv {
                    kernel: choice.kernel,
                    stride: 2,
                },
                node.level - 1,
            ),
            OpKind::Upsample => (
                LayerKind::UpConv {
                    kernel: choice.kernel,
                },
                node.level + 1,
            ),
            OpKind::Normal => (
                LayerKind::Conv {
                    kernel: choice.kernel,
                    stride: 1,
                },
                node.level,
            ),
        };
        layers.push(LayerPlan {
            name: node.name.clone(),
            node: Some(i),
            kind,
            in_channels,
            out_channels,
            in_hw: at(in_level),
            out_hw: at(node.level),
        });
        widths.push(out_channels);
    }
    let last = *widths
        .last()
        .ok_or_else(|| Error::InvalidModel("spec has no searched nodes".into()))?;
    layers.push(LayerPlan {
        name: "head".into(),
        node: None,
        kind: LayerKind::Conv {
            kernel: 1,
            stride: 1,
        },
        in_channels: vec![last],
        out_channels: spec.num_classes,
        in_hw: input_hw,
        out_hw: input_hw,
    });
    Ok(layers)
}

/// Total MACs and parameters of the decoded network at `input_hw`.
pub fn resource_cost(
    spec: &SupernetSpec,
    arch: &ArchAssignment,
    input_hw: (usize, usize),
) -> Result<ResourceCost> {
    Ok(layer_plan(spec, arch, input_hw)?
        .iter()
        .map(LayerPlan::cost)
        .fold(ResourceCost::default(), Add::add))
}

/// A candidate that passed the budget, with its position in the input set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetedArch {
    pub index: usize,
    pub arch: ArchAssignment,
    pub cost: ResourceCost,
}

/// Keeps, in order, the candidates whose MAC count is within `budget_flops`.
pub fn budget_filter(
    candidates: &DiverseSolutionSet,
    spec: &SupernetSpec,
    budget_flops: f64,
    input_hw: (usize, usize),
) -> Result<Vec<BudgetedArch>> {
    let mut kept = Vec::new();
    for (index, sol) in candidates.solutions.iter().enumerate() {
        let arch = spec.decode(&sol.assignment)?;
        let cost = resource_cost(spec, &arch, input_hw)?;
        if (cost.flops as f64) <= budget_flops {
            kept.push(BudgetedArch { index, arch, cost });
        }
    }
    Ok(kept)
}

/// Parses counts such as `2.5G`, `300M`, `12k`, `1e9` or `inf`.
pub fn parse_si(s: &str) -> Result<f64> {
    let t = s.trim();
    if t.eq_ignore_ascii_case("inf") || t.eq_ignore_ascii_case("infinity") {
        return Ok(f64::INFINITY);
    }
    let (num, mult) = match t.chars().last() {
        Some('k' | 'K') => (&t[..t.len() - 1], 1e3),
        Some('M') => (&t[..t.len() - 1], 1e6),
        Some('G' | 'g') => (&t[..t.len() - 1], 1e9),
        Some('T' | 't') => (&t[..t.len() - 1], 1e12),
        _ => (t, 1.0),
    };
    let v: f64 = num
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse `{s}` as a count (e.g. 2.5G)")))?;
    if !(v >= 0.0) {
        return Err(Error::Config(format!("count `{s}` must be non-negative")));
    }
    Ok(v * mult)
}

/// `2.5e9 → "2.50G"`, `1234 → "1.23k"`, `12 → "12"`.
pub fn format_si(v: f64) -> String {
    if !v.is_finite() {
        return "inf".into();
    }
    for (scale, suffix) in [(1e12, "T"), (1e9, "G"), (1e6, "M"), (1e3, "k")] {
        if v.abs() >= scale {
            return format!("{:.2}{suffix}", v / scale);
        }
    }
    format!("{v}")
}
