//! Width- and kernel-slimmable U-Net supernet.
//!
//! Every layer stores its weights once, at the widest channel count and the
//! largest kernel of its node. A concrete subnet reads the leading channels and
//! the centred kernel window of that storage, so all subnets share (and
//! accumulate gradients into) the same parameters.
//!
//! The relaxed forward evaluates each node once per kernel size at full width
//! and multiplies channel `c` by the probability mass of the width choices that
//! include `c`. With a one-hot simplex this reproduces the discrete subnet with
//! zero-filled trailing channels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::space::{ArchAssignment, NodeInput, OpKind, SupernetSpec};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupernetOptions {
    /// Per-sample, per-channel normalization after every hidden conv.
    #[serde(default)]
    pub instance_norm: bool,
}

#[derive(Debug, Clone)]
struct LayerParams {
    /// One weight block per concatenated input.
    weights: Vec<ParamId>,
    bias: ParamId,
}

/// Shared weights of every subnet in a search space.
#[derive(Debug, Clone)]
pub struct Supernet {
    spec: SupernetSpec,
    options: SupernetOptions,
    store: ParamStore,
    stem: LayerParams,
    nodes: Vec<LayerParams>,
    head: LayerParams,
}

impl Supernet {
    /// Allocates max-size weights with seeded uniform fan-in initialisation
    /// and zero biases.
    pub fn new(spec: &SupernetSpec, options: SupernetOptions, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut init = |store: &mut ParamStore, name: String, shape: Vec<usize>, fan_in: usize| {
            let bound = (6.0 / fan_in.max(1) as f64).sqrt();
            let n = shape.iter().product();
            let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
            store.add(name, Tensor::new(shape, data).expect("sized"))
        };
        let stem_c = spec.stem_channels();
        let stem = LayerParams {
            weights: vec![init(
                &mut store,
                "stem.w".into(),
                vec![stem_c, spec.in_channels, 3, 3],
                spec.in_channels * 9,
            )],
            bias: store.add("stem.b", Tensor::zeros(&[stem_c])),
        };
        let mut nodes = Vec::with_capacity(spec.num_nodes());
        for (i, node) in spec.nodes.iter().enumerate() {
            let out = spec.max_width(i);
            let kmax = node.kind.max_kernel();
            let nominal: usize = node
                .inputs
                .iter()
                .map(|inp| match *inp {
                    NodeInput::Stem => stem_c,
                    NodeInput::Node(j) => spec.width(spec.nodes[j].level, 1.0),
                })
                .sum();
            let fan_in = match node.kind {
                OpKind::Upsample => nominal,
                _ => nominal * 9,
            };
            let mut weights = Vec::with_capacity(node.inputs.len());
            for (j, inp) in node.inputs.iter().enumerate() {
                let cin = match *inp {
                    NodeInput::Stem => stem_c,
                    NodeInput::Node(j) => spec.max_width(j),
                };
                let shape = match node.kind {
                    OpKind::Upsample => vec![cin, out, kmax, kmax],
                    _ => vec![out, cin, kmax, kmax],
                };
                weights.push(init(&mut store, format!("{}.w{j}", node.name), shape, fan_in));
            }
            let bias = store.add(format!("{}.b", node.name), Tensor::zeros(&[out]));
            nodes.push(LayerParams { weights, bias });
        }
        let last = spec.max_width(spec.num_nodes() - 1);
        let head = LayerParams {
            weights: vec![init(
                &mut store,
                "head.w".into(),
                vec![spec.num_classes, last, 1, 1],
                spec.width(0, 1.0),
            )],
            bias: store.add("head.b", Tensor::zeros(&[spec.num_classes])),
        };
        Ok(Self {
            spec: spec.clone(),
            options,
            store,
            stem,
            nodes,
            head,
        })
    }

    pub fn spec(&self) -> &SupernetSpec {
        &self.spec
    }

    pub fn options(&self) -> SupernetOptions {
        self.options
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Replaces the weights with a store of identical layout.
    pub fn load_store(&mut self, store: ParamStore) -> Result<()> {
        if !self.store.same_layout(&store) {
            return Err(Error::Shape("checkpoint layout does not match the supernet".into()));
        }
        self.store = store;
        Ok(())
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<()> {
        let (_, c, h, w) = tape.value(x).dims4()?;
        if c != self.spec.in_channels {
            return Err(Error::Shape(format!(
                "input has {c} channels, network expects {}",
                self.spec.in_channels
            )));
        }
        self.spec.check_input_hw((h, w))
    }

    fn hidden(&self, tape: &mut Tape, y: Var) -> Result<Var> {
        let y = if self.options.instance_norm {
            tape.instance_norm(y)?
        } else {
            y
        };
        Ok(tape.relu(y))
    }

    fn stem(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let c = self.spec.stem_channels();
        let w = tape.param(&self.store, self.stem.weights[0], &[c, self.spec.in_channels, 3, 3])?;
        let b = tape.param(&self.store, self.stem.bias, &[c])?;
        let y = tape.conv2d(x, w, b, 1, 1)?;
        self.hidden(tape, y)
    }

    fn head(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let c = tape.value(x).dims4()?.1;
        let k = self.spec.num_classes;
        let w = tape.param(&self.store, self.head.weights[0], &[k, c, 1, 1])?;
        let b = tape.param(&self.store, self.head.bias, &[k])?;
        tape.conv2d(x, w, b, 1, 0)
    }

    /// Pre-activation output of node `i` with `out` channels and kernel `k`.
    fn node_linear(&self, tape: &mut Tape, i: usize, inputs: &[Var], out: usize, k: usize) -> Result<Var> {
        let kind = self.spec.nodes[i].kind;
        let params = &self.nodes[i];
        let mut acc: Option<Var> = None;
        for (j, &x) in inputs.iter().enumerate() {
            let cin = tape.value(x).dims4()?.1;
            let b = if j == 0 {
                tape.param(&self.store, params.bias, &[out])?
            } else {
                tape.leaf(Tensor::zeros(&[out]))
            };
            let y = match kind {
                OpKind::Upsample => {
                    let w = tape.param(&self.store, params.weights[j], &[cin, out, k, k])?;
                    tape.up_conv(x, w, b)?
                }
                OpKind::Downsample => {
                    let w = tape.param(&self.store, params.weights[j], &[out, cin, k, k])?;
                    tape.conv2d(x, w, b, 2, k / 2)?
                }
                OpKind::Normal => {
                    let w = tape.param(&self.store, params.weights[j], &[out, cin, k, k])?;
                    tape.conv2d(x, w, b, 1, k / 2)?
                }
            };
            acc = Some(match acc {
                None => y,
                Some(a) => tape.add(a, y)?,
            });
        }
        acc.ok_or_else(|| Error::InvalidModel(format!("node {i} has no inputs")))
    }

    fn gather(&self, i: usize, stem: Var, outs: &[Var]) -> Vec<Var> {
        self.spec.nodes[i]
            .inputs
            .iter()
            .map(|inp| match *inp {
                NodeInput::Stem => stem,
                NodeInput::Node(j) => outs[j],
            })
            .collect()
    }

    /// Logits `(N, classes, H, W)` of the subnet `arch`.
    pub fn forward(&self, tape: &mut Tape, arch: &ArchAssignment, x: Var) -> Result<Var> {
        self.spec.check_arch(arch)?;
        self.check_input(tape, x)?;
        let stem = self.stem(tape, x)?;
        let mut outs = Vec::with_capacity(self.nodes.len());
        for (i, choice) in arch.choices.iter().enumerate() {
            let inputs = self.gather(i, stem, &outs);
            let out = self.spec.width(self.spec.nodes[i].level, choice.width_ratio);
            let y = self.node_linear(tape, i, &inputs, out, choice.kernel)?;
            outs.push(self.hidden(tape, y)?);
        }
        let last = *outs.last().expect("validated spec has nodes");
        self.head(tape, last)
    }

    /// Logits of the simplex-weighted mixture. `simplex[i]` is a tape vector
    /// over the labels of node `i`.
    pub fn forward_relaxed(&self, tape: &mut Tape, simplex: &[Var], x: Var) -> Result<Var> {
        if simplex.len() != self.nodes.len() {
            return Err(Error::Shape(format!(
                "{} simplex vectors for {} nodes",
                simplex.len(),
                self.nodes.len()
            )));
        }
        self.check_input(tape, x)?;
        let stem = self.stem(tape, x)?;
        let mut outs = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.spec.nodes.iter().enumerate() {
            let choices = node.kind.choices();
            if tape.value(simplex[i]).len() != choices.len() {
                return Err(Error::Shape(format!(
                    "node {i}: simplex of length {} for {} labels",
                    tape.value(simplex[i]).len(),
                    choices.len()
                )));
            }
            let inputs = self.gather(i, stem, &outs);
            let max_out = self.spec.max_width(i);
            let mut acc: Option<Var> = None;
            for &k in node.kind.kernels() {
                // mask[c] = Σ_l s[l] over labels with kernel k whose width covers c.
                let mut m = vec![0.0; max_out * choices.len()];
                for (l, ch) in choices.iter().enumerate() {
                    if ch.kernel == k {
                        let w = self.spec.width(node.level, ch.width_ratio);
                        for c in 0..w {
                            m[c * choices.len() + l] = 1.0;
                        }
                    }
                }
                let m = tape.leaf(Tensor::new(vec![max_out, choices.len()], m)?);
                let mask = tape.matvec(m, simplex[i], false)?;
                let y = self.node_linear(tape, i, &inputs, max_out, k)?;
                let y = self.hidden(tape, y)?;
                let y = tape.channel_scale(y, mask)?;
                acc = Some(match acc {
                    None => y,
                    Some(a) => tape.add(a, y)?,
                });
            }
            outs.push(acc.expect("every kind has a kernel"));
        }
        let last = *outs.last().expect("validated spec has nodes");
        self.head(tape, last)
    }

    /// Forward pass on a private tape, returning only the logits.
    pub fn predict(&self, arch: &ArchAssignment, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.leaf(images.clone());
        let y = self.forward(&mut tape, arch, x)?;
        Ok(tape.value(y).clone())
    }

    /// Copies `arch`'s slice of the shared weights into a standalone network
    /// whose maximal subnet is exactly `arch`.
    pub fn extract(&self, arch: &ArchAssignment) -> Result<StandaloneNet> {
        self.spec.check_arch(arch)?;
        let mut store = ParamStore::new();
        let stem_c = self.spec.stem_channels();
        let copy = |store: &mut ParamStore, src: ParamId, dims: Vec<usize>| -> Result<ParamId> {
            let v = self.store.view(src, &dims)?;
            Ok(store.add(self.store.get(src).name.clone(), v))
        };
        let stem_w = copy(&mut store, self.stem.weights[0], vec![stem_c, self.spec.in_channels, 3, 3])?;
        let stem_b = copy(&mut store, self.stem.bias, vec![stem_c])?;
        let mut widths = Vec::with_capacity(arch.choices.len());
        let mut nodes = Vec::with_capacity(arch.choices.len());
        for (i, choice) in arch.choices.iter().enumerate() {
            let node = &self.spec.nodes[i];
            let out = self.spec.width(node.level, choice.width_ratio);
            let k = choice.kernel;
            let mut weights = Vec::new();
            for (j, inp) in node.inputs.iter().enumerate() {
                let cin = match *inp {
                    NodeInput::Stem => stem_c,
                    NodeInput::Node(n) => widths[n],
                };
                let dims = match node.kind {
                    OpKind::Upsample => vec![cin, out, k, k],
                    _ => vec![out, cin, k, k],
                };
                weights.push(copy(&mut store, self.nodes[i].weights[j], dims)?);
            }
            let bias = copy(&mut store, self.nodes[i].bias, vec![out])?;
            nodes.push(LayerParams { weights, bias });
            widths.push(out);
        }
        let last = *widths.last().expect("validated spec has nodes");
        let head_w = copy(&mut store, self.head.weights[0], vec![self.spec.num_classes, last, 1, 1])?;
        let head_b = copy(&mut store, self.head.bias, vec![self.spec.num_classes])?;
        Ok(StandaloneNet {
            net: Supernet {
                spec: self.spec.clone(),
                options: self.options,
                store,
                stem: LayerParams {
                    weights: vec![stem_w],
                    bias: stem_b,
                },
                nodes,
                head: LayerParams {
                    weights: vec![head_w],
                    bias: head_b,
                },
            },
            arch: arch.clone(),
        })
    }
}

/// A single architecture with its own (unshared) weights.
#[derive(Debug, Clone)]
pub struct StandaloneNet {
    net: Supernet,
    arch: ArchAssignment,
}

impl StandaloneNet {
    /// Rebuilds a network of `arch` around previously saved weights.
    pub fn from_store(
        spec: &SupernetSpec,
        options: SupernetOptions,
        arch: &ArchAssignment,
        store: ParamStore,
    ) -> Result<Self> {
        let mut net = Supernet::new(spec, options, 0)?.extract(arch)?;
        net.net.load_store(store)?;
        Ok(net)
    }

    pub fn spec(&self) -> &SupernetSpec {
        &self.net.spec
    }

    pub fn arch(&self) -> &ArchAssignment {
        &self.arch
    }

    pub fn store(&self) -> &ParamStore {
        &self.net.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.net.store
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.net.forward(tape, &self.arch, x)
    }

    pub fn predict(&self, images: &Tensor) -> Result<Tensor> {
        self.net.predict(&self.arch, images)
    }
}
