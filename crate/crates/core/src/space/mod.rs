//! U-Net search space, its MRF encoding, and FLOP/parameter accounting.
//!
//! Topology for encoder depth `D` (levels `0..=D`, level `l` has
//! `base·2^l` nominal channels):
//!
//! ```text
//! stem (fixed 3×3) ─ down_1 ─ … ─ down_D ─ up_{D-1} ─ dec_{D-1} ─ … ─ up_0 ─ dec_0 ─ head (fixed 1×1)
//!   │                  │                                  ▲                     ▲
//!   │                  └──────────── skip (level 1) ──────┘ (for D ≥ 2)         │
//!   └─────────────────────────────── skip (level 0) ────────────────────────────┘
//! ```
//!
//! `down_l` is a stride-2 3×3 convolution, `up_l` a 2×2 stride-2 transposed
//! convolution and `dec_l` a 3×3 or 5×5 convolution over the concatenation of
//! `up_l` and the level-`l` encoder feature. Only these `3D` nodes are searched.

mod cost;

use num_bigint::BigUint;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mrf::{Assignment, FactorTable, MrfVariable, PairwiseMrf};

pub use cost::{
    budget_filter, conv_cost, format_si, layer_plan, parse_si, resource_cost, up_conv_cost,
    BudgetedArch, LayerKind, LayerPlan, ResourceCost,
};

pub const WIDTH_RATIOS: [f64; 5] = [0.5, 0.75, 1.0, 1.25, 1.5];
pub const MAX_WIDTH_RATIO: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpKind {
    Normal,
    Downsample,
    Upsample,
}

impl OpKind {
    pub fn kernels(self) -> &'static [usize] {
        match self {
            OpKind::Normal => &[3, 5],
            OpKind::Downsample => &[3],
            OpKind::Upsample => &[2],
        }
    }

    pub fn max_kernel(self) -> usize {
        *self.kernels().last().expect("non-empty")
    }

    pub fn cardinality(self) -> usize {
        self.kernels().len() * WIDTH_RATIOS.len()
    }

    /// Label order: kernel-major, then ascending width ratio.
    pub fn choices(self) -> Vec<OpChoice> {
        self.kernels()
            .iter()
            .flat_map(|&kernel| {
                WIDTH_RATIOS.iter().map(move |&width_ratio| OpChoice {
                    kind: self,
                    kernel,
                    width_ratio,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpChoice {
    pub kind: OpKind,
    pub kernel: usize,
    pub width_ratio: f64,
}

impl OpChoice {
    pub fn validate(&self) -> Result<()> {
        if !self.kind.kernels().contains(&self.kernel) {
            return Err(Error::InvalidModel(format!(
                "kernel {} is not available for {:?}",
                self.kernel, self.kind
            )));
        }
        if !WIDTH_RATIOS.contains(&self.width_ratio) {
            return Err(Error::InvalidModel(format!(
                "width ratio {} is not in {WIDTH_RATIOS:?}",
                self.width_ratio
            )));
        }
        Ok(())
    }

    pub fn label(&self) -> Result<usize> {
        self.validate()?;
        let k = self
            .kind
            .kernels()
            .iter()
            .position(|&k| k == self.kernel)
            .expect("validated");
        let w = WIDTH_RATIOS
            .iter()
            .position(|&w| w == self.width_ratio)
            .expect("validated");
        Ok(k * WIDTH_RATIOS.len() + w)
    }

    pub fn name(&self) -> String {
        format!("k{}-w{:.2}", self.kernel, self.width_ratio)
    }
}

/// Where a node reads a feature map from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeInput {
    Stem,
    Node(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchNode {
    pub name: String,
    pub kind: OpKind,
    /// Resolution level of the node's output.
    pub level: usize,
    /// Feature maps consumed, concatenated in this order.
    pub inputs: Vec<NodeInput>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipConnection {
    pub level: usize,
    pub encoder: NodeInput,
    pub decoder: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupernetSpec {
    pub encoder_depth: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub nodes: Vec<SearchNode>,
    /// Consecutive data-flow pairs among searched nodes.
    pub edges: Vec<(usize, usize)>,
    pub skips: Vec<SkipConnection>,
}

impl SupernetSpec {
    /// Mirror-symmetric U-Net with `encoder_depth` downsampling stages.
    pub fn unet(
        encoder_depth: usize,
        base_channels: usize,
        in_channels: usize,
        num_classes: usize,
    ) -> Result<Self> {
        if encoder_depth == 0 || base_channels == 0 || in_channels == 0 || num_classes < 2 {
            return Err(Error::InvalidModel(format!(
                "unet needs depth ≥ 1, channels ≥ 1 and ≥ 2 classes \
                 (depth {encoder_depth}, base {base_channels}, in {in_channels}, classes {num_classes})"
            )));
        }
        let d = encoder_depth;
        let mut nodes = Vec::with_capacity(3 * d);
        for l in 1..=d {
            let input = if l == 1 {
                NodeInput::Stem
            } else {
                NodeInput::Node(l - 2)
            };
            nodes.push(SearchNode {
                name: format!("down_{l}"),
                kind: OpKind::Downsample,
                level: l,
                inputs: vec![input],
            });
        }
        let mut skips = Vec::with_capacity(d);
        for l in (0..d).rev() {
            let prev = nodes.len() - 1;
            nodes.push(SearchNode {
                name: format!("up_{l}"),
                kind: OpKind::Upsample,
                level: l,
                inputs: vec![NodeInput::Node(prev)],
            });
            let encoder = if l == 0 {
                NodeInput::Stem
            } else {
                NodeInput::Node(l - 1)
            };
            let up = nodes.len() - 1;
            nodes.push(SearchNode {
                name: format!("dec_{l}"),
                kind: OpKind::Normal,
                level: l,
                inputs: vec![NodeInput::Node(up), encoder],
            });
            skips.push(SkipConnection {
                level: l,
                encoder,
                decoder: nodes.len() - 1,
            });
        }
        let edges = (1..nodes.len()).map(|i| (i - 1, i)).collect();
        let spec = Self {
            encoder_depth: d,
            base_channels,
            in_channels,
            num_classes,
            nodes,
            edges,
            skips,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Encoder depth 2, 8 base channels, RGB input, 5 classes.
    pub fn desk_default() -> Self {
        Self::unet(2, 8, 3, 5).expect("valid default")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidModel(msg));
        let d = self.encoder_depth;
        if d == 0 || self.base_channels == 0 || self.in_channels == 0 || self.num_classes < 2 {
            return bad("degenerate spec dimensions".into());
        }
        let count = |k: OpKind| self.nodes.iter().filter(|n| n.kind == k).count();
        if count(OpKind::Downsample) != d || count(OpKind::Upsample) != d || count(OpKind::Normal) != d {
            return bad(format!(
                "encoder and decoder must mirror: expected {d} nodes of each kind"
            ));
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if n.level > d {
                return bad(format!("node {} at level {} beyond depth {d}", n.name, n.level));
            }
            for inp in &n.inputs {
                if let NodeInput::Node(j) = *inp {
                    if j >= i {
                        return bad(format!("node {} reads from a later node {j}", n.name));
                    }
                    let src = self.nodes[j].level;
                    let expect = match n.kind {
                        OpKind::Downsample => n.level.checked_sub(1),
                        OpKind::Upsample => Some(n.level + 1),
                        OpKind::Normal => Some(n.level),
                    };
                    if Some(src) != expect {
                        return bad(format!(
                            "node {} at level {} reads level {src}",
                            n.name, n.level
                        ));
                    }
                }
            }
        }
        let mut levels: Vec<usize> = self.skips.iter().map(|s| s.level).collect();
        levels.sort_unstable();
        if levels != (0..d).collect::<Vec<_>>() {
            return bad("exactly one skip connection per decoder level is required".into());
        }
        for s in &self.skips {
            let dec = self
                .nodes
                .get(s.decoder)
                .ok_or_else(|| Error::InvalidModel(format!("skip to unknown node {}", s.decoder)))?;
            if dec.kind != OpKind::Normal || dec.level != s.level || !dec.inputs.contains(&s.encoder) {
                return bad(format!("skip at level {} is not wired into {}", s.level, dec.name));
            }
        }
        for &(a, b) in &self.edges {
            if a >= self.nodes.len() || b >= self.nodes.len() || a == b {
                return bad(format!("edge ({a}, {b}) is invalid"));
            }
        }
        Ok(())
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Nominal channel count of a resolution level.
    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// `⌈ratio · base·2^level⌉`.
    pub fn width(&self, level: usize, ratio: f64) -> usize {
        (ratio * self.level_channels(level) as f64).ceil() as usize
    }

    pub fn max_width(&self, node: usize) -> usize {
        self.width(self.nodes[node].level, MAX_WIDTH_RATIO)
    }

    /// Channel count of the stem output (fixed, ratio 1).
    pub fn stem_channels(&self) -> usize {
        self.level_channels(0)
    }

    /// Input spatial size must be divisible by `2^encoder_depth`.
    pub fn check_input_hw(&self, hw: (usize, usize)) -> Result<()> {
        let f = 1usize << self.encoder_depth;
        if hw.0 == 0 || hw.1 == 0 || hw.0 % f != 0 || hw.1 % f != 0 {
            return Err(Error::Shape(format!(
                "input {}×{} is not divisible by 2^{} = {f}",
                hw.0, hw.1, self.encoder_depth
            )));
        }
        Ok(())
    }

    /// Searched-node pairs that receive a pairwise factor: data-flow
    /// neighbours plus encoder–decoder skip pairs.
    pub fn factor_pairs(&self) -> Vec<(usize, usize)> {
        let mut pairs: Vec<(usize, usize)> = self.edges.clone();
        for s in &self.skips {
            if let NodeInput::Node(e) = s.encoder {
                let p = (e.min(s.decoder), e.max(s.decoder));
                if !pairs.iter().any(|&(a, b)| (a.min(b), a.max(b)) == p) {
                    pairs.push(p);
                }
            }
        }
        pairs
    }

    /// Product of node cardinalities.
    pub fn count_configurations(&self) -> BigUint {
        self.nodes
            .iter()
            .fold(BigUint::from(1u32), |acc, n| acc * n.kind.cardinality())
    }

    /// Zero-initialised MRF with one variable per node.
    pub fn build_search_mrf(&self) -> Result<PairwiseMrf> {
        let variables = self
            .nodes
            .iter()
            .enumerate()
            .map(|(id, n)| MrfVariable {
                id,
                cardinality: n.kind.cardinality(),
                label_names: n.kind.choices().iter().map(OpChoice::name).collect(),
            })
            .collect();
        let mut factors: Vec<FactorTable> = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| FactorTable::unary(i, vec![0.0; n.kind.cardinality()]))
            .collect();
        for (a, b) in self.factor_pairs() {
            let size = self.nodes[a].kind.cardinality() * self.nodes[b].kind.cardinality();
            factors.push(FactorTable::pairwise(a, b, vec![0.0; size]));
        }
        PairwiseMrf::new(variables, factors)
    }

    pub fn decode(&self, a: &Assignment) -> Result<ArchAssignment> {
        if a.labels.len() != self.nodes.len() {
            return Err(Error::InvalidAssignment(format!(
                "{} labels for {} nodes",
                a.labels.len(),
                self.nodes.len()
            )));
        }
        let choices = self
            .nodes
            .iter()
            .zip(&a.labels)
            .map(|(n, &l)| {
                n.kind.choices().get(l).copied().ok_or_else(|| {
                    Error::InvalidAssignment(format!(
                        "label {l} out of range for node {} ({} choices)",
                        n.name,
                        n.kind.cardinality()
                    ))
                })
            })
            .collect::<Result<_>>()?;
        Ok(ArchAssignment { choices })
    }

    pub fn encode(&self, arch: &ArchAssignment) -> Result<Assignment> {
        self.check_arch(arch)?;
        Ok(Assignment::new(
            arch.choices.iter().map(|c| c.label()).collect::<Result<_>>()?,
        ))
    }

    pub fn check_arch(&self, arch: &ArchAssignment) -> Result<()> {
        if arch.choices.len() != self.nodes.len() {
            return Err(Error::InvalidAssignment(format!(
                "{} choices for {} nodes",
                arch.choices.len(),
                self.nodes.len()
            )));
        }
        for (n, c) in self.nodes.iter().zip(&arch.choices) {
            if c.kind != n.kind {
                return Err(Error::InvalidAssignment(format!(
                    "node {} is {:?} but choice is {:?}",
                    n.name, n.kind, c.kind
                )));
            }
            c.validate()?;
        }
        Ok(())
    }

    /// Every node at its widest ratio and largest kernel.
    pub fn largest_arch(&self) -> ArchAssignment {
        self.uniform_arch(|k| k.max_kernel(), MAX_WIDTH_RATIO)
    }

    /// Every node at its narrowest ratio and smallest kernel.
    pub fn smallest_arch(&self) -> ArchAssignment {
        self.uniform_arch(|k| k.kernels()[0], WIDTH_RATIOS[0])
    }

    fn uniform_arch(&self, kernel: impl Fn(OpKind) -> usize, ratio: f64) -> ArchAssignment {
        ArchAssignment {
            choices: self
                .nodes
                .iter()
                .map(|n| OpChoice {
                    kind: n.kind,
                    kernel: kernel(n.kind),
                    width_ratio: ratio,
                })
                .collect(),
        }
    }
}

/// One concrete subnet: an operation choice per searched node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchAssignment {
    pub choices: Vec<OpChoice>,
}

impl ArchAssignment {
    pub fn describe(&self, spec: &SupernetSpec) -> String {
        spec.nodes
            .iter()
            .zip(&self.choices)
            .map(|(n, c)| format!("{}:{}", n.name, c.name()))
            .collect::<Vec<_>>()
            .join(" ")
    }
}
