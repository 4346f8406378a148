//! Losses, the optimiser, and the epoch loop with validation-based model
//! selection.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::encoder::{mmd, FeatureEmbedding, MmdKernel};
use crate::error::{Error, Result};
use crate::evaluation::{confusion, report_from_counts, DatasetReport};
use crate::graph::Gradients;
use crate::ingestion::{load_mask, load_pair, ImagePair, PairRecord};
use crate::mask::Mask;
use crate::maskgen::{predict_mask, resize_nearest, ProbMap, DEFAULT_THRESHOLD};
use crate::model::{forward, Model, ModelConfig, QuerySet};
use crate::params::ParamStore;
use crate::superres::ScaleSpec;
use crate::tensor::Tensor;

/// Floor applied inside the logarithm of the cross-entropy.
pub const LOG_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Epochs over which the learning rate decays linearly to zero.
    pub lr_decay_iters: usize,
    pub batch_size: usize,
    pub lambda_mmd: f64,
    pub seed: u64,
    pub momentum: f64,
    pub optimizer: OptimizerKind,
    /// Per-batch query scale is drawn uniformly from this range.
    pub r_min: f64,
    pub r_max: f64,
    /// HR pixels sampled per pair and step; 0 uses every pixel.
    pub train_queries: usize,
    /// Validate after every `val_every` epochs and after the last one.
    pub val_every: usize,
    /// Stop after this many optimiser steps, if set.
    pub max_steps: Option<usize>,
    pub threshold: f64,
    /// Apply a random flip/rotation to each training pair and its mask.
    pub augment: bool,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            max_epochs: 100,
            lr_decay_iters: 100,
            batch_size: 4,
            lambda_mmd: 0.01,
            seed: 0,
            momentum: 0.9,
            optimizer: OptimizerKind::Sgd,
            r_min: 1.0,
            r_max: 2.0,
            train_queries: 1024,
            val_every: 1,
            max_steps: None,
            threshold: DEFAULT_THRESHOLD,
            augment: false,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1");
        }
        if !(self.lambda_mmd >= 0.0 && self.lambda_mmd.is_finite()) {
            return bad("lambda_mmd must be non-negative");
        }
        if self.batch_size == 0 || self.val_every == 0 {
            return bad("batch_size and val_every must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(1.0 <= self.r_min && self.r_min <= self.r_max && self.r_max <= crate::superres::MAX_SCALE) {
            return bad("scale range must satisfy 1 <= r_min <= r_max <= 4");
        }
        if self.max_steps == Some(0) {
            return bad("max_steps must be positive when set");
        }
        self.model.validate()
    }

    /// Learning rate used during `epoch` (zero based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.lr_decay_iters == 0 {
            return self.learning_rate;
        }
        let frac = 1.0 - epoch as f64 / self.lr_decay_iters as f64;
        self.learning_rate * frac.max(0.0)
    }
}

/// Mean per-pixel cross-entropy of `probs` against `mask`.
pub fn cross_entropy(probs: &ProbMap, mask: &Mask) -> Result<f64> {
    if (probs.height, probs.width) != (mask.height() as usize, mask.width() as usize) {
        return Err(Error::shape(
            "cross_entropy",
            format!("probs {}x{} vs mask {:?}", probs.height, probs.width, mask.dims()),
        ));
    }
    let labels = mask.labels();
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| -probs.data[2 * i + l as usize].max(LOG_EPS).ln())
        .sum();
    Ok(total / labels.len() as f64)
}

/// Cross-entropy plus `lambda` times the MMD between branch embeddings.
pub fn total_loss(
    probs: &ProbMap,
    mask: &Mask,
    z1: &FeatureEmbedding,
    z2: &FeatureEmbedding,
    lambda: f64,
    kernel: MmdKernel,
) -> Result<f64> {
    let ce = cross_entropy(probs, mask)?;
    if lambda == 0.0 {
        return Ok(ce);
    }
    Ok(ce + lambda * mmd(z1, z2, kernel)?)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub ce: f64,
    pub mmd: f64,
    pub total: f64,
}

/// Labels of `mask` at the queried HR pixels.
pub fn query_labels(mask: &Mask, queries: &QuerySet) -> Vec<u8> {
    let (hh, hw) = queries.scale.hr_size;
    let hr = resize_nearest(mask, hw as u32, hh as u32).labels();
    match &queries.indices {
        Some(ix) => ix.iter().map(|&i| hr[i]).collect(),
        None => hr,
    }
}

/// Loss of one pair together with its parameter gradients.
pub fn loss_and_grads(
    model: &Model,
    pair: &ImagePair,
    mask: &Mask,
    queries: &QuerySet,
    lambda: f64,
) -> Result<(LossParts, Gradients)> {
    let (mut fwd, labels) = prepare(model, pair, mask, queries)?;
    let g = &mut fwd.graph;
    let ce = g.cross_entropy(fwd.probs, Arc::new(labels));
    let m = g.mmd(fwd.z1, fwd.z2, model.config.mmd_kernel);
    let total = g.add_scaled(ce, m, lambda);
    let parts = LossParts { ce: g.value(ce).item(), mmd: g.value(m).item(), total: g.value(total).item() };
    Ok((parts, g.backward(total)))
}

/// Loss of one pair without building gradients.
pub fn loss_value(model: &Model, pair: &ImagePair, mask: &Mask, queries: &QuerySet, lambda: f64) -> Result<LossParts> {
    let (mut fwd, labels) = prepare(model, pair, mask, queries)?;
    let g = &mut fwd.graph;
    let ce = g.cross_entropy(fwd.probs, Arc::new(labels));
    let m = g.mmd(fwd.z1, fwd.z2, model.config.mmd_kernel);
    let total = g.add_scaled(ce, m, lambda);
    Ok(LossParts { ce: g.value(ce).item(), mmd: g.value(m).item(), total: g.value(total).item() })
}

fn prepare(model: &Model, pair: &ImagePair, mask: &Mask, queries: &QuerySet) -> Result<(crate::model::Forward, Vec<u8>)> {
    if mask.dims() != pair.dims() {
        return Err(Error::shape("total_loss", format!("mask {:?} vs pair {:?}", mask.dims(), pair.dims())));
    }
    let fwd = forward(model, &pair.original, &pair.tampered, queries)?;
    Ok((fwd, query_labels(mask, queries)))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// SGD with classical momentum.
    #[default]
    Sgd,
    /// Adam with the usual betas (0.9, 0.999).
    Adam,
}

/// Either optimiser, behind one `step` call.
#[derive(Clone, Debug)]
pub enum Optimizer {
    Sgd(Sgd),
    Adam(Adam),
}

impl Optimizer {
    pub fn new(config: &TrainConfig) -> Self {
        match config.optimizer {
            OptimizerKind::Sgd => Optimizer::Sgd(Sgd::new(config.momentum)),
            OptimizerKind::Adam => Optimizer::Adam(Adam::new()),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients, lr: f64) -> Result<()> {
        match self {
            Optimizer::Sgd(o) => o.step(params, grads, lr),
            Optimizer::Adam(o) => o.step(params, grads, lr),
        }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, moments: BTreeMap::new() }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients, lr: f64) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            for (((pv, mv), vv), gv) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                *pv -= lr * (*mv / c1) / ((*vv / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

impl Default for Adam {
    fn default() -> Self {
        Self::new()
    }
}

/// SGD with classical momentum.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    pub momentum: f64,
    velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Self { momentum, velocity: BTreeMap::new() }
    }

    /// `v = momentum * v + g; p -= lr * v` for every parameter with a gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients, lr: f64) -> Result<()> {
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            let v = self.velocity.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vv = self.momentum * *vv + gv;
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }
}

/// One row of the per-epoch training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub ce: f64,
    pub mmd: f64,
    /// `None` on epochs without validation.
    pub val_f1: Option<f64>,
    pub lr: f64,
    pub steps: usize,
}

pub struct TrainOutcome {
    /// The checkpoint with the best validation F1.
    pub best: Checkpoint,
    pub history: Vec<EpochLog>,
}

/// A pair held in memory with its ground truth.
#[derive(Clone, Debug)]
pub struct Sample {
    pub pair: ImagePair,
    pub mask: Mask,
}

pub fn load_samples(records: &[&PairRecord]) -> Result<Vec<Sample>> {
    records
        .iter()
        .map(|r| Ok(Sample { pair: load_pair(r)?, mask: load_mask(r)? }))
        .collect()
}

/// One of the eight flips and right-angle rotations, applied alike to both
/// images and the mask. `t` bit 0 transposes, bit 1 mirrors x, bit 2
/// mirrors y; 0 is the identity.
pub fn dihedral(sample: &Sample, t: u8) -> Result<Sample> {
    let (w, h) = sample.pair.dims();
    let (ow, oh) = if t & 1 == 1 { (h, w) } else { (w, h) };
    // source pixel for output pixel (x, y)
    let src = |x: u32, y: u32| {
        let x = if t & 2 != 0 { ow - 1 - x } else { x };
        let y = if t & 4 != 0 { oh - 1 - y } else { y };
        if t & 1 == 1 {
            (y, x)
        } else {
            (x, y)
        }
    };
    let map = |img: &image::RgbImage| {
        image::RgbImage::from_fn(ow, oh, |x, y| {
            let (sx, sy) = src(x, y);
            *img.get_pixel(sx, sy)
        })
    };
    let pair = ImagePair::new(sample.pair.pair_id.clone(), map(&sample.pair.original), map(&sample.pair.tampered))?;
    let mask = Mask::from_fn(ow, oh, sample.mask.provenance, |x, y| {
        let (sx, sy) = src(x, y);
        sample.mask.is_white(sx, sy)
    });
    Ok(Sample { pair, mask })
}

/// Random subset of HR pixels, or all of them.
fn sample_queries(scale: ScaleSpec, n: usize, rng: &mut ChaCha8Rng) -> QuerySet {
    let total = scale.hr_size.0 * scale.hr_size.1;
    if n == 0 || n >= total {
        return QuerySet::full(scale);
    }
    let mut ix = rand::seq::index::sample(rng, total, n).into_vec();
    ix.sort_unstable();
    QuerySet { scale, indices: Some(ix) }
}

/// Train from manifest records.
pub fn train(
    config: &TrainConfig,
    train_records: &[&PairRecord],
    val_records: &[&PairRecord],
    log: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_records.is_empty() || val_records.is_empty() {
        return Err(Error::InvalidArgument("train and val splits must both be non-empty".into()));
    }
    let train_set = load_samples(train_records)?;
    let val_set = load_samples(val_records)?;
    train_samples(config, &train_set, &val_set, log)
}

/// Train on in-memory samples.
pub fn train_samples(
    config: &TrainConfig,
    train_set: &[Sample],
    val_set: &[Sample],
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::InvalidArgument("train and val splits must both be non-empty".into()));
    }
    let mut model = Model::init(config.model.clone(), config.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_7a11);
    let mut opt = Optimizer::new(config);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<Checkpoint> = None;
    let mut steps = 0usize;

    'epochs: for epoch in 0..config.max_epochs {
        let lr = config.lr_at(epoch);
        order.shuffle(&mut rng);
        let (mut ce_sum, mut mmd_sum, mut seen) = (0.0, 0.0, 0usize);
        for (batch, chunk) in order.chunks(config.batch_size).enumerate() {
            let r = rng.gen_range(config.r_min..=config.r_max);
            let mut acc: Gradients = BTreeMap::new();
            for &i in chunk {
                let augmented;
                let s = if config.augment {
                    augmented = dihedral(&train_set[i], rng.gen_range(0..8))?;
                    &augmented
                } else {
                    &train_set[i]
                };
                let native = (s.pair.original.height() as usize, s.pair.original.width() as usize);
                let queries = sample_queries(ScaleSpec::new(native, r, r)?, config.train_queries, &mut rng);
                let (parts, grads) = loss_and_grads(&model, &s.pair, &s.mask, &queries, config.lambda_mmd)?;
                if !parts.ce.is_finite() || !parts.mmd.is_finite() {
                    return Err(Error::Diverged { epoch, batch, ce: parts.ce, mmd: parts.mmd });
                }
                ce_sum += parts.ce;
                mmd_sum += parts.mmd;
                seen += 1;
                for (name, g) in grads {
                    match acc.get_mut(&name) {
                        Some(a) => a.add_assign(&g),
                        None => {
                            acc.insert(name, g);
                        }
                    }
                }
            }
            let scale = 1.0 / chunk.len() as f64;
            for g in acc.values_mut() {
                g.scale(scale);
            }
            opt.step(&mut model.params, &acc, lr)?;
            if !model.params.all_finite() {
                return Err(Error::Diverged { epoch, batch, ce: f64::NAN, mmd: f64::NAN });
            }
            steps += 1;
            if config.max_steps.is_some_and(|m| steps >= m) {
                let row = finish_epoch(config, &model, val_set, epoch, lr, steps, ce_sum, mmd_sum, seen, true, &mut best)?;
                write_log(&mut log, &row)?;
                history.push(row);
                break 'epochs;
            }
        }
        let last = epoch + 1 == config.max_epochs;
        let validate_now = last || (epoch + 1) % config.val_every == 0;
        let row = finish_epoch(config, &model, val_set, epoch, lr, steps, ce_sum, mmd_sum, seen, validate_now, &mut best)?;
        write_log(&mut log, &row)?;
        history.push(row);
    }
    let best = best.expect("the final epoch always validates");
    Ok(TrainOutcome { best, history })
}

#[allow(clippy::too_many_arguments)]
fn finish_epoch(
    config: &TrainConfig,
    model: &Model,
    val_set: &[Sample],
    epoch: usize,
    lr: f64,
    steps: usize,
    ce_sum: f64,
    mmd_sum: f64,
    seen: usize,
    validate_now: bool,
    best: &mut Option<Checkpoint>,
) -> Result<EpochLog> {
    let n = seen.max(1) as f64;
    let mut row = EpochLog { epoch, ce: ce_sum / n, mmd: mmd_sum / n, val_f1: None, lr, steps };
    if validate_now {
        let f1 = validate_samples(model, val_set, config.threshold)?.micro.f1;
        row.val_f1 = Some(f1);
        if best.as_ref().is_none_or(|b| f1 > b.best_val_f1) {
            *best = Some(Checkpoint { model: model.clone(), config: config.clone(), epoch, best_val_f1: f1 });
        }
    }
    Ok(row)
}

fn write_log(log: &mut Option<&mut dyn Write>, row: &EpochLog) -> Result<()> {
    if let Some(w) = log.as_deref_mut() {
        let line = serde_json::to_string(row).map_err(|e| Error::Encode(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io("training log", e))?;
    }
    Ok(())
}

/// Micro-averaged metrics of `model` on in-memory samples at `r = 1`.
pub fn validate_samples(model: &Model, samples: &[Sample], threshold: f64) -> Result<DatasetReport> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("empty validation split".into()));
    }
    let items = samples
        .iter()
        .map(|s| {
            let pred = predict_mask(model, &s.pair, (1.0, 1.0), threshold)?;
            Ok((s.pair.pair_id.clone(), confusion(&pred, &s.mask)?))
        })
        .collect::<Result<Vec<_>>>()?;
    report_from_counts(items)
}

/// Micro-averaged metrics of a checkpoint on manifest records.
pub fn validate(checkpoint: &Checkpoint, records: &[&PairRecord]) -> Result<DatasetReport> {
    let samples = load_samples(records)?;
    validate_samples(&checkpoint.model, &samples, checkpoint.config.threshold)
}
