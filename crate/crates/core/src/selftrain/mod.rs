//! Teacher–student self-training around a supernet (search) or a fixed
//! subnet (retraining).
//!
//! Each iteration the EMA teacher labels a target batch, ClassMix pastes
//! source classes into it, and the student minimises the source loss plus the
//! weighted target loss. During search the student update is a sandwich step
//! over subnets drawn from the MRF, and after warmup a relaxed Gumbel-Softmax
//! sample carries the same loss back into the factor tables.

mod loss;
mod mix;
mod pseudo;

pub use loss::{combined_loss, recall_ce, recall_weights, LossTerm};
pub use mix::{augment, classmix, AugmentParams, MixedBatch};
pub use pseudo::{
    energy, energy_score, max_softmax, pseudo_confidence, pseudo_energy, PseudoLabelBatch,
};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{miou, stack_images, stack_samples, Batch, DomainPair, MiouReport, Sample};
use crate::error::{Error, Result};
use crate::mrf::{gibbs_sample, relaxed_sample, Assignment, FactorBinding, PairwiseMrf, RelaxedInit};
use crate::nn::{accumulate_pass, AdamW, ParamStore, StandaloneNet, Supernet, SupernetOptions, Tape, Tensor, Var};
use crate::space::{resource_cost, ArchAssignment, SupernetSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Confidence,
    Energy,
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scheme::Confidence => "confidence",
            Scheme::Energy => "energy",
        })
    }
}

impl std::str::FromStr for Scheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "confidence" => Ok(Scheme::Confidence),
            "energy" => Ok(Scheme::Energy),
            _ => Err(Error::Config(format!("unknown scheme `{s}` (confidence|energy)"))),
        }
    }
}

/// Hyperparameters of the self-training loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelfTrainConfig {
    /// Confidence threshold on the largest softmax probability.
    pub tau: f64,
    /// Energy cutoff; pixels with lower energy are kept.
    pub tau_e: f64,
    /// Energy temperature.
    pub temperature: f64,
    /// Weight of the target loss.
    pub lambda_t: f64,
    /// Teacher EMA decay, applied every iteration.
    pub ema_decay: f64,
    pub scheme: Scheme,
    pub iterations: usize,
    /// Iterations before the factor tables start learning.
    pub warmup_iterations: usize,
    pub seed: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Subnets drawn from the MRF per sandwich step, besides widest and narrowest.
    pub k_random: usize,
    pub gibbs_sweeps: usize,
    /// Step size of the factor-table descent.
    pub factor_lr: f64,
    pub gumbel_temperature: f64,
    pub classmix: bool,
    /// Weight source pixels by `1 − recall` of their class.
    pub recall_ce: bool,
    pub augment: AugmentParams,
    /// Share of the source set held out for validation.
    pub source_val_fraction: f64,
    pub eval_batch: usize,
}

impl Default for SelfTrainConfig {
    fn default() -> Self {
        Self {
            tau: 0.968,
            tau_e: -8.0,
            temperature: 1.0,
            lambda_t: 1.0,
            ema_decay: 0.999,
            scheme: Scheme::Confidence,
            iterations: 40_000,
            warmup_iterations: 1_500,
            seed: 0,
            lr: 0.003,
            weight_decay: 0.05,
            batch_size: 4,
            k_random: 2,
            gibbs_sweeps: 1,
            factor_lr: 1.0,
            gumbel_temperature: 1.0,
            classmix: true,
            recall_ce: true,
            augment: AugmentParams::default(),
            source_val_fraction: 0.2,
            eval_batch: 16,
        }
    }
}

impl SelfTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return bad(format!("tau must lie in (0, 1), got {}", self.tau));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if !(self.gumbel_temperature > 0.0 && self.gumbel_temperature.is_finite()) {
            return bad(format!("gumbel_temperature must be positive, got {}", self.gumbel_temperature));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return bad(format!("ema_decay must lie in [0, 1], got {}", self.ema_decay));
        }
        if self.tau_e.is_nan() {
            return bad("tau_e is NaN".into());
        }
        for (name, v) in [
            ("lambda_t", self.lambda_t),
            ("lr", self.lr),
            ("weight_decay", self.weight_decay),
            ("factor_lr", self.factor_lr),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if self.batch_size == 0 || self.eval_batch == 0 || self.gibbs_sweeps == 0 {
            return bad("batch_size, eval_batch and gibbs_sweeps must be positive".into());
        }
        if !(0.0..1.0).contains(&self.source_val_fraction) {
            return bad(format!(
                "source_val_fraction must lie in [0, 1), got {}",
                self.source_val_fraction
            ));
        }
        Ok(())
    }
}

/// Seed of the named random substream under `root`.
pub fn substream(root: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(name.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// `teacher ← decay·teacher + (1 − decay)·student` over every stored weight.
pub fn ema_update(teacher: &mut ParamStore, student: &ParamStore, decay: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&decay) {
        return Err(Error::Domain(format!("EMA decay must lie in [0, 1], got {decay}")));
    }
    if !teacher.same_layout(student) {
        return Err(Error::Shape("teacher and student layouts differ".into()));
    }
    for (t, s) in teacher.iter_mut().zip(student.iter()) {
        for (tv, sv) in t.value.data_mut().iter_mut().zip(s.value.data()) {
            *tv = decay * *tv + (1.0 - decay) * sv;
        }
    }
    Ok(())
}

/// EMA copy of the student used to produce pseudo-labels. Never optimised.
#[derive(Debug, Clone)]
pub struct TeacherState {
    pub net: Supernet,
    pub ema_decay: f64,
}

impl TeacherState {
    pub fn new(student: &Supernet, ema_decay: f64) -> Self {
        Self {
            net: student.clone(),
            ema_decay,
        }
    }

    pub fn update(&mut self, student: &Supernet) -> Result<()> {
        ema_update(self.net.store_mut(), student.store(), self.ema_decay)
    }

    pub fn pseudo_labels(&self, arch: &ArchAssignment, images: &Tensor, cfg: &SelfTrainConfig) -> Result<PseudoLabelBatch> {
        let logits = self.net.predict(arch, images)?;
        match cfg.scheme {
            Scheme::Confidence => pseudo_confidence(&logits, cfg.tau),
            Scheme::Energy => pseudo_energy(&logits, cfg.tau_e, cfg.temperature),
        }
    }
}

/// Endless reshuffled passes over `0..len`.
#[derive(Debug, Clone)]
struct Cycler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Cycler {
    fn new(len: usize, seed: u64) -> Self {
        Self {
            order: (0..len).collect(),
            pos: len,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn take(&mut self, n: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        if self.order.is_empty() {
            return out;
        }
        while out.len() < n {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// One JSON-lines record of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub iteration: usize,
    /// Source loss averaged over the passes of the step.
    pub loss_src: f64,
    /// Unweighted-by-λ target loss averaged over the passes (0 when unused).
    pub loss_tgt: f64,
    pub quality_mean: f64,
    pub valid_frac: f64,
    pub factor_l2: f64,
    pub ema_decay: f64,
    /// Loss of the relaxed sample that updated the factors, after warmup.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub relaxed_loss: Option<f64>,
    /// MACs of the subnets trained this step.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub sampled_macs: Vec<u64>,
}

/// Per-iteration inputs shared by every pass of a step.
struct StepBatch {
    source: Batch,
    target: Option<MixedBatch>,
    quality_mean: f64,
    valid_frac: f64,
}

/// Data, teacher and randomness bookkeeping common to search and retraining.
struct Loop<'a> {
    cfg: &'a SelfTrainConfig,
    source: &'a [Sample],
    target: &'a [Tensor],
    src_cycle: Cycler,
    tgt_cycle: Cycler,
    aug_rng: ChaCha8Rng,
    mix_rng: ChaCha8Rng,
}

impl<'a> Loop<'a> {
    fn new(cfg: &'a SelfTrainConfig, data: &'a DomainPair) -> Result<Self> {
        cfg.validate()?;
        let (source, _) = data.source_split(cfg.source_val_fraction);
        if source.is_empty() {
            return Err(Error::Config("no source training samples".into()));
        }
        Ok(Self {
            cfg,
            source,
            target: &data.target_train,
            src_cycle: Cycler::new(source.len(), substream(cfg.seed, "data/source")),
            tgt_cycle: Cycler::new(data.target_train.len(), substream(cfg.seed, "data/target")),
            aug_rng: ChaCha8Rng::seed_from_u64(substream(cfg.seed, "augment")),
            mix_rng: ChaCha8Rng::seed_from_u64(substream(cfg.seed, "mix")),
        })
    }

    fn uses_target(&self) -> bool {
        self.cfg.lambda_t > 0.0 && !self.target.is_empty()
    }

    fn next_batch(&mut self, teacher: &TeacherState, teacher_arch: &ArchAssignment) -> Result<StepBatch> {
        let idx = self.src_cycle.take(self.cfg.batch_size);
        let mut source = stack_samples(&idx.iter().map(|&i| &self.source[i]).collect::<Vec<_>>())?;
        augment(&mut source.images, &mut source.labels, &self.cfg.augment, &mut self.aug_rng)?;
        let mut step = StepBatch {
            source,
            target: None,
            quality_mean: 0.0,
            valid_frac: 0.0,
        };
        if !self.uses_target() {
            return Ok(step);
        }
        let tidx = self.tgt_cycle.take(self.cfg.batch_size);
        let timgs = stack_images(&tidx.iter().map(|&i| &self.target[i]).collect::<Vec<_>>())?;
        let pl = teacher.pseudo_labels(teacher_arch, &timgs, self.cfg)?;
        step.quality_mean = pl.mean_quality();
        step.valid_frac = pl.valid_fraction();
        let mut mixed = if self.cfg.classmix {
            let seed = self.mix_rng.gen();
            // Pasted source pixels come from the un-augmented source images.
            let raw = stack_samples(&idx.iter().map(|&i| &self.source[i]).collect::<Vec<_>>())?;
            classmix(&raw.images, &raw.labels, &timgs, &pl, seed)?
        } else {
            let n = pl.labels.len();
            MixedBatch {
                weights: pl.pixel_weights(),
                labels: pl.labels,
                images: timgs,
                pasted: vec![false; n],
                classes: Vec::new(),
            }
        };
        // Photometric only: the weights and labels stay aligned.
        let photometric = AugmentParams {
            max_shift: 0,
            ..self.cfg.augment
        };
        augment(&mut mixed.images, &mut [], &photometric, &mut self.aug_rng)?;
        step.target = Some(mixed);
        Ok(step)
    }
}

/// Source and target losses of one pass, recorded on `tape`.
fn step_loss(
    tape: &mut Tape,
    step: &StepBatch,
    lambda_t: f64,
    recall: bool,
    mut logits_of: impl FnMut(&mut Tape, &Tensor) -> Result<Var>,
) -> Result<(Var, f64, f64)> {
    let xs = logits_of(tape, &step.source.images)?;
    let src_w = if recall {
        let w = recall_weights(tape.value(xs), &step.source.labels)?;
        step.source.labels.iter().map(|&t| w[t]).collect::<Vec<_>>()
    } else {
        vec![1.0; step.source.labels.len()]
    };
    let source = LossTerm::new(xs, &step.source.labels, Some(&src_w));
    match &step.target {
        Some(t) if lambda_t > 0.0 => {
            let xt = logits_of(tape, &t.images)?;
            let target = LossTerm::new(xt, &t.labels, Some(&t.weights));
            let total = combined_loss(tape, source, target, lambda_t)?;
            // Logged separately; these nodes sit after `total` and are not back-propagated.
            let ls = source.loss(tape)?;
            let lt = target.loss(tape)?;
            Ok((total, tape.value(ls).item(), tape.value(lt).item()))
        }
        _ => {
            let total = source.loss(tape)?;
            let v = tape.value(total).item();
            Ok((total, v, 0.0))
        }
    }
}

fn numerical(iteration: usize, e: Error) -> Error {
    match e {
        Error::Numerical(m) => Error::Numerical(format!("iteration {iteration}: {m}")),
        other => other,
    }
}

/// Result of a search run.
#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub mrf: PairwiseMrf,
    pub supernet: Supernet,
    pub log: Vec<LogEntry>,
}

/// Trains the supernet weights by sandwich steps and, after warmup, the MRF
/// factors through relaxed samples.
pub fn search_loop(
    spec: &SupernetSpec,
    mrf: &PairwiseMrf,
    data: &DomainPair,
    cfg: &SelfTrainConfig,
    options: SupernetOptions,
) -> Result<SearchOutcome> {
    if mrf.cardinalities() != spec.build_search_mrf()?.cardinalities() {
        return Err(Error::InvalidModel("MRF does not match the search space".into()));
    }
    let mut lp = Loop::new(cfg, data)?;
    let hw = (data.image_hw, data.image_hw);
    spec.check_input_hw(hw)?;
    let mut net = Supernet::new(spec, options, substream(cfg.seed, "init"))?;
    let mut teacher = TeacherState::new(&net, cfg.ema_decay);
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut mrf = mrf.clone();
    let mut gumbel = ChaCha8Rng::seed_from_u64(substream(cfg.seed, "gumbel"));
    let mut chain = Assignment::zeros(mrf.num_variables());
    let (largest, smallest) = (spec.largest_arch(), spec.smallest_arch());
    let mut log = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let step = lp.next_batch(&teacher, &largest)?;
        let mut archs = vec![largest.clone(), smallest.clone()];
        for _ in 0..cfg.k_random {
            chain = gibbs_sample(&mrf, &chain, cfg.gibbs_sweeps, gumbel.gen())?;
            archs.push(spec.decode(&chain)?);
        }
        net.store_mut().zero_grad();
        let (mut src_sum, mut tgt_sum) = (0.0, 0.0);
        for arch in &archs {
            let mut pass = |tape: &mut Tape, n: &Supernet, a: &ArchAssignment| {
                let (loss, ls, lt) = step_loss(tape, &step, cfg.lambda_t, cfg.recall_ce, |t, x| {
                    let v = t.leaf(x.clone());
                    n.forward(t, a, v)
                })?;
                src_sum += ls;
                tgt_sum += lt;
                Ok(loss)
            };
            accumulate_pass(&mut net, arch, &mut pass).map_err(|e| numerical(it, e))?;
        }
        opt.step(net.store_mut());

        let mut relaxed_loss = None;
        if it >= cfg.warmup_iterations {
            let mut tape = Tape::new();
            let binding = FactorBinding::new(&mut tape, &mrf);
            let sample = relaxed_sample(
                &mut tape,
                &mrf,
                &binding,
                RelaxedInit::Uniform,
                cfg.gumbel_temperature,
                1,
                gumbel.gen(),
            )?;
            let (loss, _, _) = step_loss(&mut tape, &step, cfg.lambda_t, cfg.recall_ce, |t, x| {
                let v = t.leaf(x.clone());
                net.forward_relaxed(t, sample.vars(), v)
            })?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Numerical(format!("iteration {it}: relaxed loss {value}")));
            }
            tape.backward(loss)?;
            mrf.update_factors(&binding.gradients(&tape, &mrf), cfg.factor_lr)
                .map_err(|e| numerical(it, e))?;
            relaxed_loss = Some(value);
        }
        teacher.update(&net)?;

        let passes = archs.len() as f64;
        log.push(LogEntry {
            iteration: it,
            loss_src: src_sum / passes,
            loss_tgt: tgt_sum / passes,
            quality_mean: step.quality_mean,
            valid_frac: step.valid_frac,
            factor_l2: mrf.factor_l2(),
            ema_decay: cfg.ema_decay,
            relaxed_loss,
            sampled_macs: archs
                .iter()
                .map(|a| resource_cost(spec, a, hw).map(|c| c.flops))
                .collect::<Result<_>>()?,
        });
    }
    Ok(SearchOutcome {
        mrf,
        supernet: net,
        log,
    })
}

/// Evaluation numbers of a trained subnet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainMetrics {
    /// Mean IoU on the labelled target evaluation set.
    pub target_miou: f64,
    pub per_class_iou: Vec<Option<f64>>,
    /// Mean cross-entropy on the held-out source split.
    pub source_val_loss: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub struct RetrainOutcome {
    pub net: StandaloneNet,
    pub metrics: RetrainMetrics,
    pub log: Vec<LogEntry>,
}

/// Trains `arch` from a fresh initialisation with the same self-training
/// loop, minus sandwich sampling and factor learning. `lambda_t = 0` gives
/// source-only training.
pub fn retrain(
    spec: &SupernetSpec,
    arch: &ArchAssignment,
    data: &DomainPair,
    cfg: &SelfTrainConfig,
    options: SupernetOptions,
) -> Result<RetrainOutcome> {
    spec.check_arch(arch)?;
    let mut lp = Loop::new(cfg, data)?;
    spec.check_input_hw((data.image_hw, data.image_hw))?;
    let mut net = Supernet::new(spec, options, substream(cfg.seed, "init"))?;
    let mut teacher = TeacherState::new(&net, cfg.ema_decay);
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut log = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let step = lp.next_batch(&teacher, arch)?;
        net.store_mut().zero_grad();
        let (mut ls, mut lt) = (0.0, 0.0);
        let mut pass = |tape: &mut Tape, n: &Supernet, a: &ArchAssignment| {
            let (loss, s, t) = step_loss(tape, &step, cfg.lambda_t, cfg.recall_ce, |tp, x| {
                let v = tp.leaf(x.clone());
                n.forward(tp, a, v)
            })?;
            ls = s;
            lt = t;
            Ok(loss)
        };
        accumulate_pass(&mut net, arch, &mut pass).map_err(|e| numerical(it, e))?;
        opt.step(net.store_mut());
        teacher.update(&net)?;
        log.push(LogEntry {
            iteration: it,
            loss_src: ls,
            loss_tgt: lt,
            quality_mean: step.quality_mean,
            valid_frac: step.valid_frac,
            factor_l2: 0.0,
            ema_decay: cfg.ema_decay,
            relaxed_loss: None,
            sampled_macs: Vec::new(),
        });
    }
    let standalone = net.extract(arch)?;
    let (_, val) = data.source_split(cfg.source_val_fraction);
    let report = evaluate_miou(&standalone, &data.target_eval, data.num_classes, cfg.eval_batch)?;
    let metrics = RetrainMetrics {
        target_miou: report.mean,
        per_class_iou: report.per_class,
        source_val_loss: mean_loss(&standalone, val, cfg.eval_batch)?,
        iterations: cfg.iterations,
    };
    Ok(RetrainOutcome {
        net: standalone,
        metrics,
        log,
    })
}

/// Per-pixel argmax of `(N, C, H, W)` logits.
pub fn argmax_labels(logits: &Tensor) -> Result<Vec<usize>> {
    let (n, c, h, w) = logits.dims4()?;
    let hw = h * w;
    let d = logits.data();
    let mut out = Vec::with_capacity(n * hw);
    for b in 0..n {
        for p in 0..hw {
            let mut best = 0;
            for k in 1..c {
                if d[(b * c + k) * hw + p] > d[(b * c + best) * hw + p] {
                    best = k;
                }
            }
            out.push(best);
        }
    }
    Ok(out)
}

/// Predicted label maps for `samples`, in order.
pub fn predict_labels(net: &StandaloneNet, samples: &[Sample], batch: usize) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for chunk in samples.chunks(batch.max(1)) {
        let imgs = stack_images(&chunk.iter().map(|s| &s.image).collect::<Vec<_>>())?;
        out.extend(argmax_labels(&net.predict(&imgs)?)?);
    }
    Ok(out)
}

pub fn evaluate_miou(net: &StandaloneNet, samples: &[Sample], num_classes: usize, batch: usize) -> Result<MiouReport> {
    let pred = predict_labels(net, samples, batch)?;
    let truth: Vec<usize> = samples.iter().flat_map(|s| s.label.iter().copied()).collect();
    miou(&pred, &truth, num_classes)
}

/// Pixel-averaged cross-entropy over `samples` (0 for an empty set).
pub fn mean_loss(net: &StandaloneNet, samples: &[Sample], batch: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut pixels = 0usize;
    for chunk in samples.chunks(batch.max(1)) {
        let b = stack_samples(&chunk.iter().collect::<Vec<_>>())?;
        let mut tape = Tape::new();
        let x = tape.leaf(b.images);
        let logits = net.forward(&mut tape, x)?;
        let l = tape.cross_entropy(logits, &b.labels, &vec![1.0; b.labels.len()])?;
        total += tape.value(l).item() * b.labels.len() as f64;
        pixels += b.labels.len();
    }
    Ok(if pixels == 0 { 0.0 } else { total / pixels as f64 })
}
