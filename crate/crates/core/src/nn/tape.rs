//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its value and enough context to
//! push gradients back to its inputs. Nodes are only ever appended, so inputs
//! always precede outputs and a single reverse sweep suffices.

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param {
        id: ParamId,
        dims: Vec<usize>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    Sum(Var),
    MatVec {
        mat: Var,
        vec: Var,
        transpose: bool,
    },
    Slice {
        src: Var,
        start: usize,
    },
    ChannelScale {
        x: Var,
        scale: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    UpConv {
        x: Var,
        w: Var,
        b: Var,
    },
    InstanceNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
}

/// Recording of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    values: Vec<Tensor>,
    grads: Vec<Option<Vec<f64>>>,
    ops: Vec<Op>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.values.push(value);
        self.grads.push(None);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    /// Gradient of the last `backward` target w.r.t. `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Records a view of a shared parameter (see [`ParamStore::view`]).
    pub fn param(&mut self, store: &ParamStore, id: ParamId, dims: &[usize]) -> Result<Var> {
        let value = store.view(id, dims)?;
        Ok(self.push(
            value,
            Op::Param {
                id,
                dims: dims.to_vec(),
            },
        ))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.values[a.0].shape() != self.values[b.0].shape() {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.values[a.0].shape(),
                self.values[b.0].shape()
            )));
        }
        Ok(())
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = &self.values[a.0];
        let data = t.data().iter().map(|&x| f(x)).collect();
        Tensor::new(t.shape().to_vec(), data).expect("same length")
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same length")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.zip(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.zip(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.zip(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.map(a, |x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    /// `a + offset` for a constant `offset` of the same shape.
    pub fn shift(&mut self, a: Var, offset: &[f64]) -> Result<Var> {
        let t = &self.values[a.0];
        if t.len() != offset.len() {
            return Err(Error::Shape(format!(
                "shift: {} values vs {} offsets",
                t.len(),
                offset.len()
            )));
        }
        let data = t.data().iter().zip(offset).map(|(x, o)| x + o).collect();
        let v = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(v, Op::Shift(a)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.map(a, |x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.map(a, f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.map(a, f64::ln);
        self.push(v, Op::Log(a))
    }

    /// Softmax over all entries of a rank-1 tensor.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = &self.values[a.0];
        if t.rank() != 1 || t.is_empty() {
            return Err(Error::Shape(format!(
                "softmax expects a non-empty vector, got {:?}",
                t.shape()
            )));
        }
        let v = Tensor::vector(softmax(t.data()));
        Ok(self.push(v, Op::Softmax(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.values[a.0].data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// `mat · vec`, or `matᵀ · vec` when `transpose` is set. `mat` is `[m, n]`.
    pub fn matvec(&mut self, mat: Var, vec: Var, transpose: bool) -> Result<Var> {
        let (m, n) = match self.values[mat.0].shape() {
            &[m, n] => (m, n),
            s => return Err(Error::Shape(format!("matvec: matrix shape {s:?}"))),
        };
        let a = self.values[mat.0].data();
        let x = self.values[vec.0].data();
        let expect = if transpose { m } else { n };
        if self.values[vec.0].rank() != 1 || x.len() != expect {
            return Err(Error::Shape(format!(
                "matvec: vector of length {} against [{m}, {n}] (transpose = {transpose})",
                x.len()
            )));
        }
        let out = if transpose {
            let mut out = vec![0.0; n];
            for i in 0..m {
                for j in 0..n {
                    out[j] += a[i * n + j] * x[i];
                }
            }
            out
        } else {
            (0..m)
                .map(|i| (0..n).map(|j| a[i * n + j] * x[j]).sum())
                .collect()
        };
        Ok(self.push(
            Tensor::vector(out),
            Op::MatVec {
                mat,
                vec,
                transpose,
            },
        ))
    }

    /// Contiguous sub-range `[start, start + len)` of a vector.
    pub fn slice(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let t = &self.values[src.0];
        if t.rank() != 1 || start + len > t.len() {
            return Err(Error::Shape(format!(
                "slice [{start}, {}) of {:?}",
                start + len,
                t.shape()
            )));
        }
        let v = Tensor::vector(t.data()[start..start + len].to_vec());
        Ok(self.push(v, Op::Slice { src, start }))
    }

    /// Multiplies channel `c` of an `(N, C, H, W)` tensor by `scale[c]`.
    pub fn channel_scale(&mut self, x: Var, scale: Var) -> Result<Var> {
        let (n, c, h, w) = self.values[x.0].dims4()?;
        let s = self.values[scale.0].data();
        if s.len() != c {
            return Err(Error::Shape(format!(
                "channel_scale: {c} channels, {} scales",
                s.len()
            )));
        }
        let xs = self.values[x.0].data();
        let hw = h * w;
        let mut out = vec![0.0; xs.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * hw;
                let k = s[ch];
                for (o, &v) in out[off..off + hw].iter_mut().zip(&xs[off..off + hw]) {
                    *o = v * k;
                }
            }
        }
        let v = Tensor::new(vec![n, c, h, w], out)?;
        Ok(self.push(v, Op::ChannelScale { x, scale }))
    }

    /// 2-D convolution. `x` is `(N, C_in, H, W)`, `w` is `(C_out, C_in, K, K)`,
    /// `b` is `(C_out)`. Output is `((H + 2p - K)/s + 1)` square per side.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (n, ci, h, wd) = self.values[x.0].dims4()?;
        let (co, wci, kh, kw) = self.values[w.0].dims4()?;
        if wci != ci || kh != kw || self.values[b.0].len() != co || stride == 0 {
            return Err(Error::Shape(format!(
                "conv2d: input {:?}, weight {:?}, bias {:?}, stride {stride}",
                self.values[x.0].shape(),
                self.values[w.0].shape(),
                self.values[b.0].shape()
            )));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kh {
            return Err(Error::Shape("conv2d: kernel larger than padded input".into()));
        }
        let geo = ConvGeom {
            n,
            ci,
            h,
            w: wd,
            co,
            k: kh,
            s: stride,
            p: pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (wd + 2 * pad - kh) / stride + 1,
        };
        let out = conv_forward(
            &geo,
            self.values[x.0].data(),
            self.values[w.0].data(),
            self.values[b.0].data(),
        );
        let v = Tensor::new(vec![n, co, geo.ho, geo.wo], out)?;
        Ok(self.push(
            v,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
        ))
    }

    /// Transposed convolution with kernel 2 and stride 2. `w` is `(C_in, C_out, 2, 2)`.
    pub fn up_conv(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, ci, h, wd) = self.values[x.0].dims4()?;
        let (wci, co, kh, kw) = self.values[w.0].dims4()?;
        if wci != ci || kh != 2 || kw != 2 || self.values[b.0].len() != co {
            return Err(Error::Shape(format!(
                "up_conv: input {:?}, weight {:?}",
                self.values[x.0].shape(),
                self.values[w.0].shape()
            )));
        }
        let xs = self.values[x.0].data();
        let ws = self.values[w.0].data();
        let bs = self.values[b.0].data();
        let (ho, wo) = (2 * h, 2 * wd);
        let mut out = vec![0.0; n * co * ho * wo];
        for bi in 0..n {
            for o in 0..co {
                let plane = &mut out[(bi * co + o) * ho * wo..(bi * co + o + 1) * ho * wo];
                plane.iter_mut().for_each(|v| *v = bs[o]);
                for i in 0..ci {
                    let inp = &xs[(bi * ci + i) * h * wd..(bi * ci + i + 1) * h * wd];
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let wv = ws[((i * co + o) * 2 + dy) * 2 + dx];
                            for y in 0..h {
                                let row = &mut plane[(2 * y + dy) * wo..(2 * y + dy + 1) * wo];
                                let irow = &inp[y * wd..(y + 1) * wd];
                                for (xx, &iv) in irow.iter().enumerate() {
                                    row[2 * xx + dx] += wv * iv;
                                }
                            }
                        }
                    }
                }
            }
        }
        let v = Tensor::new(vec![n, co, ho, wo], out)?;
        Ok(self.push(v, Op::UpConv { x, w, b }))
    }

    /// Per-sample, per-channel standardisation without affine parameters.
    pub fn instance_norm(&mut self, x: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let (n, c, h, w) = self.values[x.0].dims4()?;
        let hw = h * w;
        let xs = self.values[x.0].data();
        let mut out = vec![0.0; xs.len()];
        let mut inv_std = Vec::with_capacity(n * c);
        for plane in 0..n * c {
            let src = &xs[plane * hw..(plane + 1) * hw];
            let mean = src.iter().sum::<f64>() / hw as f64;
            let var = src.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / hw as f64;
            let is = 1.0 / (var + EPS).sqrt();
            for (o, v) in out[plane * hw..(plane + 1) * hw].iter_mut().zip(src) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let v = Tensor::new(vec![n, c, h, w], out)?;
        Ok(self.push(v, Op::InstanceNorm { x, inv_std }))
    }

    /// Weighted pixel-averaged softmax cross-entropy.
    ///
    /// `logits` is `(N, C, H, W)`; `targets` and `weights` have one entry per
    /// pixel in `(N, H, W)` order. The result is
    /// `Σ_p weights[p] · CE_p / (N·H·W)`; zero-weight pixels still count in the
    /// denominator.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let (n, c, h, w) = self.values[logits.0].dims4()?;
        let hw = h * w;
        let pixels = n * hw;
        if targets.len() != pixels || weights.len() != pixels {
            return Err(Error::Shape(format!(
                "cross_entropy: {pixels} pixels, {} targets, {} weights",
                targets.len(),
                weights.len()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Shape(format!("cross_entropy: class {t} with {c} logits")));
        }
        let ls = self.values[logits.0].data();
        let mut probs = vec![0.0; ls.len()];
        let mut total = 0.0;
        let mut row = vec![0.0; c];
        for b in 0..n {
            for p in 0..hw {
                for (k, r) in row.iter_mut().enumerate() {
                    *r = ls[(b * c + k) * hw + p];
                }
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
                let lse = m + z.ln();
                let q = b * hw + p;
                total += weights[q] * (lse - row[targets[q]]);
                for k in 0..c {
                    probs[(b * c + k) * hw + p] = (row[k] - lse).exp();
                }
            }
        }
        let v = Tensor::scalar(total / pixels as f64);
        Ok(self.push(
            v,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
        ))
    }

    /// Back-propagates from a scalar node. Gradients of every reachable node
    /// are left readable through [`Tape::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.0 >= self.values.len() {
            return Err(Error::Tape(
                "backward called on a node that is not on this tape".into(),
            ));
        }
        if self.values[loss.0].len() != 1 {
            return Err(Error::Tape(format!(
                "backward needs a scalar, got shape {:?}",
                self.values[loss.0].shape()
            )));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var) -> &mut Vec<f64> {
        let len = self.values[v.0].len();
        self.grads[v.0].get_or_insert_with(|| vec![0.0; len])
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        // Split borrows: ops and values are read, grads are written.
        let op = std::mem::replace(&mut self.ops[i], Op::Leaf);
        match &op {
            Op::Leaf | Op::Param { .. } => {}
            Op::Add(a, b) => {
                add_into(self.acc(*a), g);
                add_into(self.acc(*b), g);
            }
            Op::Sub(a, b) => {
                add_into(self.acc(*a), g);
                let gb = self.acc(*b);
                for (d, s) in gb.iter_mut().zip(g) {
                    *d -= s;
                }
            }
            Op::Mul(a, b) => {
                let bv = self.values[b.0].data().to_vec();
                let av = self.values[a.0].data().to_vec();
                let ga = self.acc(*a);
                for k in 0..g.len() {
                    ga[k] += g[k] * bv[k];
                }
                let gb = self.acc(*b);
                for k in 0..g.len() {
                    gb[k] += g[k] * av[k];
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                let ga = self.acc(*a);
                for (d, s) in ga.iter_mut().zip(g) {
                    *d += s * c;
                }
            }
            Op::Shift(a) => add_into(self.acc(*a), g),
            Op::Relu(a) => {
                let av = self.values[a.0].data().to_vec();
                let ga = self.acc(*a);
                for k in 0..g.len() {
                    if av[k] > 0.0 {
                        ga[k] += g[k];
                    }
                }
            }
            Op::Exp(a) => {
                let out = self.values[i].data().to_vec();
                let ga = self.acc(*a);
                for k in 0..g.len() {
                    ga[k] += g[k] * out[k];
                }
            }
            Op::Log(a) => {
                let av = self.values[a.0].data().to_vec();
                let ga = self.acc(*a);
                for k in 0..g.len() {
                    ga[k] += g[k] / av[k];
                }
            }
            Op::Softmax(a) => {
                let y = self.values[i].data().to_vec();
                let dot: f64 = y.iter().zip(g).map(|(y, g)| y * g).sum();
                let ga = self.acc(*a);
                for k in 0..g.len() {
                    ga[k] += y[k] * (g[k] - dot);
                }
            }
            Op::Sum(a) => {
                let ga = self.acc(*a);
                ga.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::MatVec {
                mat,
                vec,
                transpose,
            } => {
                let (m, n) = {
                    let s = self.values[mat.0].shape();
                    (s[0], s[1])
                };
                let av = self.values[mat.0].data().to_vec();
                let xv = self.values[vec.0].data().to_vec();
                let gm = self.acc(*mat);
                for r in 0..m {
                    for c in 0..n {
                        gm[r * n + c] += if *transpose {
                            g[c] * xv[r]
                        } else {
                            g[r] * xv[c]
                        };
                    }
                }
                let gx = self.acc(*vec);
                for r in 0..m {
                    for c in 0..n {
                        if *transpose {
                            gx[r] += av[r * n + c] * g[c];
                        } else {
                            gx[c] += av[r * n + c] * g[r];
                        }
                    }
                }
            }
            Op::Slice { src, start } => {
                let start = *start;
                let gs = self.acc(*src);
                for (k, v) in g.iter().enumerate() {
                    gs[start + k] += v;
                }
            }
            Op::ChannelScale { x, scale } => {
                let (n, c, h, w) = self.values[x.0].dims4().expect("rank 4");
                let hw = h * w;
                let xv = self.values[x.0].data().to_vec();
                let sv = self.values[scale.0].data().to_vec();
                let gx = self.acc(*x);
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * hw;
                        for k in off..off + hw {
                            gx[k] += g[k] * sv[ch];
                        }
                    }
                }
                let gs = self.acc(*scale);
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * hw;
                        gs[ch] += (off..off + hw).map(|k| g[k] * xv[k]).sum::<f64>();
                    }
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let (n, ci, h, wd) = self.values[x.0].dims4().expect("rank 4");
                let (co, _, k, _) = self.values[w.0].dims4().expect("rank 4");
                let (_, _, ho, wo) = self.values[i].dims4().expect("rank 4");
                let geo = ConvGeom {
                    n,
                    ci,
                    h,
                    w: wd,
                    co,
                    k,
                    s: *stride,
                    p: *pad,
                    ho,
                    wo,
                };
                let xv = std::mem::take(&mut self.values[x.0]);
                let wv = std::mem::take(&mut self.values[w.0]);
                {
                    let gx = self.acc_len(*x, xv.len());
                    conv_backward_input(&geo, g, wv.data(), gx);
                }
                {
                    let gw = self.acc_len(*w, wv.len());
                    conv_backward_weight(&geo, g, xv.data(), gw);
                }
                {
                    let gb = self.acc(*b);
                    for bi in 0..n {
                        for o in 0..co {
                            let off = (bi * co + o) * ho * wo;
                            gb[o] += g[off..off + ho * wo].iter().sum::<f64>();
                        }
                    }
                }
                self.values[x.0] = xv;
                self.values[w.0] = wv;
            }
            Op::UpConv { x, w, b } => {
                let (n, ci, h, wd) = self.values[x.0].dims4().expect("rank 4");
                let (_, co, _, _) = self.values[w.0].dims4().expect("rank 4");
                let (ho, wo) = (2 * h, 2 * wd);
                let xv = std::mem::take(&mut self.values[x.0]);
                let wv = std::mem::take(&mut self.values[w.0]);
                {
                    let gx = self.acc_len(*x, xv.len());
                    for bi in 0..n {
                        for o in 0..co {
                            let gp = &g[(bi * co + o) * ho * wo..(bi * co + o + 1) * ho * wo];
                            for ic in 0..ci {
                                let gin = &mut gx[(bi * ci + ic) * h * wd..(bi * ci + ic + 1) * h * wd];
                                for dy in 0..2 {
                                    for dx in 0..2 {
                                        let wk = wv.data()[((ic * co + o) * 2 + dy) * 2 + dx];
                                        for y in 0..h {
                                            let grow = &gp[(2 * y + dy) * wo..(2 * y + dy + 1) * wo];
                                            for xx in 0..wd {
                                                gin[y * wd + xx] += wk * grow[2 * xx + dx];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                {
                    let gw = self.acc_len(*w, wv.len());
                    for bi in 0..n {
                        for o in 0..co {
                            let gp = &g[(bi * co + o) * ho * wo..(bi * co + o + 1) * ho * wo];
                            for ic in 0..ci {
                                let inp = &xv.data()[(bi * ci + ic) * h * wd..(bi * ci + ic + 1) * h * wd];
                                for dy in 0..2 {
                                    for dx in 0..2 {
                                        let mut s = 0.0;
                                        for y in 0..h {
                                            let grow = &gp[(2 * y + dy) * wo..(2 * y + dy + 1) * wo];
                                            for xx in 0..wd {
                                                s += inp[y * wd + xx] * grow[2 * xx + dx];
                                            }
                                        }
                                        gw[((ic * co + o) * 2 + dy) * 2 + dx] += s;
                                    }
                                }
                            }
                        }
                    }
                }
                {
                    let gb = self.acc(*b);
                    for bi in 0..n {
                        for o in 0..co {
                            let off = (bi * co + o) * ho * wo;
                            gb[o] += g[off..off + ho * wo].iter().sum::<f64>();
                        }
                    }
                }
                self.values[x.0] = xv;
                self.values[w.0] = wv;
            }
            Op::InstanceNorm { x, inv_std } => {
                let (n, c, h, w) = self.values[x.0].dims4().expect("rank 4");
                let hw = h * w;
                let y = self.values[i].data().to_vec();
                let gx = self.acc(*x);
                for plane in 0..n * c {
                    let r = plane * hw..(plane + 1) * hw;
                    let mg = g[r.clone()].iter().sum::<f64>() / hw as f64;
                    let mgy = g[r.clone()]
                        .iter()
                        .zip(&y[r.clone()])
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        / hw as f64;
                    for k in r {
                        gx[k] += inv_std[plane] * (g[k] - mg - y[k] * mgy);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let (n, c, h, w) = self.values[logits.0].dims4().expect("rank 4");
                let hw = h * w;
                let scale = g[0] / (n * hw) as f64;
                let gl = self.acc(*logits);
                for b in 0..n {
                    for p in 0..hw {
                        let q = b * hw + p;
                        let wq = weights[q] * scale;
                        if wq == 0.0 {
                            continue;
                        }
                        for k in 0..c {
                            let idx = (b * c + k) * hw + p;
                            let onehot = if k == targets[q] { 1.0 } else { 0.0 };
                            gl[idx] += wq * (probs[idx] - onehot);
                        }
                    }
                }
            }
        }
        self.ops[i] = op;
    }

    fn acc_len(&mut self, v: Var, len: usize) -> &mut Vec<f64> {
        self.grads[v.0].get_or_insert_with(|| vec![0.0; len])
    }

    /// Scatters the gradients of every parameter view into `store`.
    pub fn flush_param_grads(&self, store: &mut ParamStore) -> Result<()> {
        for (op, grad) in self.ops.iter().zip(&self.grads) {
            if let (Op::Param { id, dims }, Some(g)) = (op, grad) {
                store.scatter_grad(*id, dims, g)?;
            }
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Numerically stable softmax of a slice.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

struct ConvGeom {
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    k: usize,
    s: usize,
    p: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    /// Output index range along one axis for kernel tap `t` such that the
    /// input coordinate `o·s + t - p` lies in `[0, len)`.
    fn valid(&self, t: usize, len: usize, out_len: usize) -> (usize, usize) {
        let lo = if t >= self.p {
            0
        } else {
            (self.p - t).div_ceil(self.s)
        };
        let hi = if len + self.p > t {
            ((len - 1 + self.p - t) / self.s + 1).min(out_len)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

fn conv_forward(g: &ConvGeom, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let (hw, ohw, kk) = (g.h * g.w, g.ho * g.wo, g.k * g.k);
    let mut out = vec![0.0; g.n * g.co * ohw];
    for bi in 0..g.n {
        for o in 0..g.co {
            let plane = &mut out[(bi * g.co + o) * ohw..(bi * g.co + o + 1) * ohw];
            plane.iter_mut().for_each(|v| *v = b[o]);
            for i in 0..g.ci {
                let inp = &x[(bi * g.ci + i) * hw..(bi * g.ci + i + 1) * hw];
                let wk = &w[(o * g.ci + i) * kk..(o * g.ci + i + 1) * kk];
                for ky in 0..g.k {
                    let (ylo, yhi) = g.valid(ky, g.h, g.ho);
                    for kx in 0..g.k {
                        let wv = wk[ky * g.k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (xlo, xhi) = g.valid(kx, g.w, g.wo);
                        for y in ylo..yhi {
                            let iy = y * g.s + ky - g.p;
                            let orow = &mut plane[y * g.wo..(y + 1) * g.wo];
                            let irow = &inp[iy * g.w..(iy + 1) * g.w];
                            if g.s == 1 {
                                let ix0 = xlo + kx - g.p;
                                for (o, &v) in orow[xlo..xhi]
                                    .iter_mut()
                                    .zip(&irow[ix0..ix0 + (xhi - xlo)])
                                {
                                    *o += wv * v;
                                }
                            } else {
                                for xx in xlo..xhi {
                                    orow[xx] += wv * irow[xx * g.s + kx - g.p];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_backward_input(g: &ConvGeom, gout: &[f64], w: &[f64], gx: &mut [f64]) {
    let (hw, ohw, kk) = (g.h * g.w, g.ho * g.wo, g.k * g.k);
    for bi in 0..g.n {
        for o in 0..g.co {
            let gp = &gout[(bi * g.co + o) * ohw..(bi * g.co + o + 1) * ohw];
            for i in 0..g.ci {
                let gin = &mut gx[(bi * g.ci + i) * hw..(bi * g.ci + i + 1) * hw];
                let wk = &w[(o * g.ci + i) * kk..(o * g.ci + i + 1) * kk];
                for ky in 0..g.k {
                    let (ylo, yhi) = g.valid(ky, g.h, g.ho);
                    for kx in 0..g.k {
                        let wv = wk[ky * g.k + kx];
                        let (xlo, xhi) = g.valid(kx, g.w, g.wo);
                        for y in ylo..yhi {
                            let iy = y * g.s + ky - g.p;
                            let grow = &gp[y * g.wo..(y + 1) * g.wo];
                            let irow = &mut gin[iy * g.w..(iy + 1) * g.w];
                            if g.s == 1 {
                                let ix0 = xlo + kx - g.p;
                                for (d, &v) in irow[ix0..ix0 + (xhi - xlo)]
                                    .iter_mut()
                                    .zip(&grow[xlo..xhi])
                                {
                                    *d += wv * v;
                                }
                            } else {
                                for xx in xlo..xhi {
                                    irow[xx * g.s + kx - g.p] += wv * grow[xx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_backward_weight(g: &ConvGeom, gout: &[f64], x: &[f64], gw: &mut [f64]) {
    let (hw, ohw, kk) = (g.h * g.w, g.ho * g.wo, g.k * g.k);
    for bi in 0..g.n {
        for o in 0..g.co {
            let gp = &gout[(bi * g.co + o) * ohw..(bi * g.co + o + 1) * ohw];
            for i in 0..g.ci {
                let inp = &x[(bi * g.ci + i) * hw..(bi * g.ci + i + 1) * hw];
                let gk = &mut gw[(o * g.ci + i) * kk..(o * g.ci + i + 1) * kk];
                for ky in 0..g.k {
                    let (ylo, yhi) = g.valid(ky, g.h, g.ho);
                    for kx in 0..g.k {
                        let (xlo, xhi) = g.valid(kx, g.w, g.wo);
                        let mut s = 0.0;
                        for y in ylo..yhi {
                            let iy = y * g.s + ky - g.p;
                            let grow = &gp[y * g.wo..(y + 1) * g.wo];
                            let irow = &inp[iy * g.w..(iy + 1) * g.w];
                            if g.s == 1 {
                                let ix0 = xlo + kx - g.p;
                                s += grow[xlo..xhi]
                                    .iter()
                                    .zip(&irow[ix0..ix0 + (xhi - xlo)])
                                    .map(|(a, b)| a * b)
                                    .sum::<f64>();
                            } else {
                                for xx in xlo..xhi {
                                    s += grow[xx] * irow[xx * g.s + kx - g.p];
                                }
                            }
                        }
                        gk[ky * g.k + kx] += s;
                    }
                }
            }
        }
    }
}
