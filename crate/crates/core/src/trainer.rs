//! Training regimes (unified pretraining, supervised co-training, prompt
//! tuning), the optimizer and learning-rate schedules.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::data::{block_mask, Batch, BatchIter, BatchTarget, TimeSeriesDataset, repetition_factors};
use crate::error::{Error, Result};
use crate::model::{Model, CLASS_PREFIX, PRETRAIN_HEAD_PREFIX, TOKENS_PREFIX};
use crate::nn::Session;
use crate::registry::{has_prefix, ParameterRegistry};
use crate::rng::{self, Rng};
use crate::tasks::{missing_tokens, NormStats, TaskKind, TaskSpec};
use crate::tensor::{Scalar, Tensor, Var};
use crate::tokenizer::{draw_mask_plan, draw_truncation, token_count, truncated_tokens};
use crate::towers::{average_class_embeddings, EmbeddingMode};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Regime {
    Pretrain,
    #[default]
    Supervised,
    PromptTune,
    SingleTask,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Schedule {
    Multistep,
    Cosine,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum OptimizerKind {
    #[default]
    Adam,
    /// Plain gradient descent without moments.
    Sgd,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct TrainingConfig {
    pub regime: Regime,
    pub steps: usize,
    pub batch_size: usize,
    /// Samples per optimizer step; a multiple of `batch_size`.
    pub effective_batch: usize,
    pub lr: Scalar,
    pub schedule: Schedule,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Loss weight per dataset name, overriding the task's own weight.
    pub weights: BTreeMap<String, Scalar>,
}

/// Batch 32 with a multistep schedule from 3.2e-2.
impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig::new(Regime::Supervised, 1000, 32, 3.2e-2)
    }
}

impl TrainingConfig {
    pub fn new(regime: Regime, steps: usize, batch_size: usize, lr: Scalar) -> Self {
        TrainingConfig {
            regime,
            steps,
            batch_size,
            effective_batch: batch_size,
            lr,
            schedule: Schedule::Multistep,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            weights: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be positive".into()));
        }
        if self.effective_batch == 0 || self.effective_batch % self.batch_size != 0 {
            return Err(Error::Config(format!(
                "effective batch {} is not a multiple of batch size {}",
                self.effective_batch, self.batch_size
            )));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if let Some((k, w)) = self.weights.iter().find(|(_, w)| !(w.is_finite() && **w >= 0.0)) {
            return Err(Error::Config(format!("loss weight {w} for `{k}` must be non-negative")));
        }
        Ok(())
    }

    pub fn micro_batches(&self) -> usize {
        self.effective_batch / self.batch_size
    }

    pub fn weight_for(&self, task: &TaskSpec) -> Scalar {
        self.weights.get(&task.name).copied().unwrap_or(task.weight)
    }
}

/// Learning rate at `step` (0-based) of `cfg.steps`.
pub fn lr_at(cfg: &TrainingConfig, step: usize) -> Scalar {
    let frac = step as Scalar / cfg.steps as Scalar;
    match cfg.schedule {
        Schedule::Multistep => {
            if frac >= 0.75 {
                cfg.lr * 0.01
            } else if frac >= 0.5 {
                cfg.lr * 0.1
            } else {
                cfg.lr
            }
        }
        Schedule::Cosine => cfg.lr * (1.0 + (core::f64::consts::PI as Scalar * frac).cos()) / 2.0,
    }
}

pub const BETA1: Scalar = 0.9;
pub const BETA2: Scalar = 0.999;
pub const ADAM_EPS: Scalar = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<Scalar>,
    pub v: Vec<Scalar>,
}

/// Adaptive-moment optimizer state keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub step: u64,
    pub state: BTreeMap<String, Moments>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Optimizer {
            kind,
            step: 0,
            state: BTreeMap::new(),
        }
    }

    /// Applies accumulated gradients to trainable parameters, then clears
    /// all gradients. Parameters that received no gradient this step keep
    /// their value and moments. Returns how many tensors were updated.
    pub fn apply(&mut self, reg: &mut ParameterRegistry, lr: Scalar) -> Result<usize> {
        let frozen: Vec<String> = reg.iter().filter(|(_, p)| p.frozen).map(|(k, _)| k.into()).collect();
        for k in frozen {
            self.state.remove(&k);
        }
        let any = reg.iter().any(|(_, p)| !p.frozen && p.grad.is_some());
        if !any {
            reg.zero_grads();
            return Err(Error::Contract("optimizer step without any gradient on trainable parameters".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - BETA1.powi(t), 1.0 - BETA2.powi(t));
        let mut updated = 0;
        for (name, p) in reg.iter_mut() {
            if p.frozen {
                continue;
            }
            let Some(g) = p.grad.take() else { continue };
            updated += 1;
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, g) in p.value.data_mut().iter_mut().zip(g.data()) {
                        *w -= lr * g;
                    }
                }
                OptimizerKind::Adam => {
                    let n = g.numel();
                    let st = self.state.entry(name.into()).or_insert_with(|| Moments {
                        m: vec![0.0; n],
                        v: vec![0.0; n],
                    });
                    for (((w, g), m), v) in p.value.data_mut().iter_mut().zip(g.data()).zip(&mut st.m).zip(&mut st.v) {
                        *m = BETA1 * *m + (1.0 - BETA1) * g;
                        *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                        *w -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        reg.zero_grads();
        Ok(updated)
    }
}

/// Uniform choice among `n` datasets.
pub fn sample_dataset(n: usize, rng: &mut Rng) -> Result<usize> {
    if n == 0 {
        return Err(Error::Config("no datasets to sample from".into()));
    }
    Ok(rng::index(rng, n))
}

/// Sets frozen flags for `regime` and returns the trainable names.
///
/// * pretrain: everything except class embeddings
/// * supervised / single-task: everything except the pretraining head and
///   averaged class embeddings
/// * prompt tuning: only the token sets of `tasks` plus trained class
///   embeddings of their classification tasks
pub fn apply_regime(model: &mut Model, regime: Regime, tasks: &[TaskSpec]) -> Result<Vec<String>> {
    let averaged: Vec<String> = model
        .classifiers()
        .filter(|c| c.mode == EmbeddingMode::Averaged)
        .map(|c| c.name.clone())
        .collect();
    let reg = &mut model.registry;
    match regime {
        Regime::Pretrain => {
            reg.unfreeze_all();
            reg.set_frozen_where(true, |n| has_prefix(n, CLASS_PREFIX));
        }
        Regime::Supervised | Regime::SingleTask => {
            reg.unfreeze_all();
            reg.set_frozen_where(true, |n| has_prefix(n, PRETRAIN_HEAD_PREFIX) || averaged.iter().any(|a| a == n));
        }
        Regime::PromptTune => {
            reg.freeze_all();
            for t in tasks {
                let tokens = format!("{TOKENS_PREFIX}.{}", t.source);
                let class = format!("{CLASS_PREFIX}.{}", t.name);
                let class_trained = t.kind == TaskKind::Classify && !averaged.contains(&class);
                reg.set_frozen_where(false, |n| has_prefix(n, &tokens) || (class_trained && n == class));
            }
        }
    }
    let names: Vec<String> = reg.trainable_names().into_iter().map(String::from).collect();
    if names.is_empty() {
        return Err(Error::Config(format!("regime {regime:?} leaves no trainable parameters")));
    }
    Ok(names)
}

/// Normalized input and (for forecasting) target of a batch.
fn prepare(spec: &TaskSpec, batch: &Batch, observed: Option<&[Vec<bool>]>) -> Result<(Tensor, Option<NormStats>)> {
    if !spec.normalized() {
        return Ok((batch.x.clone(), None));
    }
    let st = NormStats::fit(&batch.x, observed)?;
    Ok((st.apply(&batch.x)?, Some(st)))
}

/// `mean((a − b)²)` over the entries where `mask` is true.
fn masked_mse(s: &mut Session, a: Var, b: Var, mask: &[bool]) -> Result<Var> {
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::Contract("masked loss over an empty mask".into()));
    }
    let shape = s.tape.shape(a).to_vec();
    let m = Tensor::new(&shape, mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect())?;
    let m = s.constant(m);
    let d = s.tape.sub(a, b)?;
    let d = s.tape.mul(d, m)?;
    let sq = s.tape.mul(d, d)?;
    let total = s.tape.sum(sq);
    Ok(s.tape.scale(total, 1.0 / count as Scalar))
}

/// Supervised loss of one batch for its task.
///
/// Forecasting: MSE on the horizon in the context's normalized units.
/// Classification: cross-entropy over negative squared class distances.
/// Imputation: a fresh block mask per sample, MSE on the hidden steps.
/// Anomaly: plain reconstruction MSE.
pub fn task_loss(s: &mut Session, model: &Model, spec: &TaskSpec, batch: &Batch, rng: &mut Rng) -> Result<Var> {
    match (&batch.target, spec.kind) {
        (BatchTarget::Horizon(y), TaskKind::Forecast) => {
            let f = spec.horizon_tokens.unwrap_or(1);
            let h = y.shape()[1];
            if h > f * model.config.patch {
                return Err(Error::Config(format!(
                    "task `{}`: horizon of {h} steps exceeds {f} GEN tokens of {} steps",
                    spec.name, model.config.patch
                )));
            }
            let (x, st) = prepare(spec, batch, None)?;
            let y = match &st {
                Some(st) => st.apply(y)?,
                None => y.clone(),
            };
            let xv = s.constant(x);
            let yv = s.constant(y);
            let pred = model.forecast_forward(s, &spec.source, xv, f, Some(h))?;
            s.tape.mse(pred, yv)
        }
        (BatchTarget::Labels(labels), TaskKind::Classify) => {
            let (x, _) = prepare(spec, batch, None)?;
            let xv = s.constant(x);
            let (_, logits) = model.classify_forward(s, &spec.source, &spec.name, xv)?;
            s.tape.cross_entropy(logits, labels)
        }
        (BatchTarget::Masks(masks), TaskKind::Impute) => {
            let (b, t, v) = (batch.x.shape()[0], batch.x.shape()[1], batch.x.shape()[2]);
            let fresh: Vec<Vec<bool>> = masks
                .iter()
                .map(|m| {
                    let frac = m.iter().filter(|&&a| a).count() as Scalar / t as Scalar;
                    block_mask(rng, t, frac)
                })
                .collect();
            let (mut x, st) = prepare(spec, batch, Some(&fresh))?;
            let target = match &st {
                Some(st) => st.apply(&batch.x)?,
                None => batch.x.clone(),
            };
            let mut flat = vec![false; b * t * v];
            for (bi, m) in fresh.iter().enumerate() {
                for (ti, _) in m.iter().enumerate().filter(|(_, &a)| a) {
                    let r = (bi * t + ti) * v..(bi * t + ti + 1) * v;
                    x.data_mut()[r.clone()].fill(0.0);
                    flat[r].fill(true);
                }
            }
            let missing: Vec<Vec<usize>> = fresh.iter().map(|m| missing_tokens(m, model.config.patch)).collect();
            let xv = s.constant(x);
            let yv = s.constant(target);
            let rec = model.reconstruct_forward(s, &spec.source, xv, &missing)?;
            masked_mse(s, rec, yv, &flat)
        }
        (BatchTarget::Anomalies(_), TaskKind::Anomaly) => {
            let (x, _) = prepare(spec, batch, None)?;
            let b = x.shape()[0];
            let xv = s.constant(x);
            let rec = model.reconstruct_forward(s, &spec.source, xv, &vec![Vec::new(); b])?;
            s.tape.mse(rec, xv)
        }
        _ => Err(Error::Contract(format!("batch target does not fit task `{}`", spec.name))),
    }
}

/// Unified masked-reconstruction loss: both towers reconstruct the full
/// (truncated) sample from prompt + masked sample tokens. The truncation is
/// drawn once per batch and a mask plan per sample.
pub fn pretrain_loss(s: &mut Session, model: &Model, spec: &TaskSpec, batch: &Batch, rng: &mut Rng) -> Result<(Var, [Scalar; 2])> {
    let (x, _) = prepare(spec, batch, None)?;
    let (b, t) = (x.shape()[0], x.shape()[1]);
    let k = model.config.patch;
    let n_full = token_count(t, k);
    if n_full < 2 {
        return Err(Error::Contract(format!("pretraining needs at least 2 tokens, `{}` has {n_full}", spec.name)));
    }
    let n = truncated_tokens(n_full, draw_truncation(rng));
    let keep = (n * k).min(t);
    let x = if keep < t {
        let v = x.shape()[2];
        let data = x.data().chunks(t * v).flat_map(|one| &one[..keep * v]).copied().collect();
        Tensor::new(&[b, keep, v], data)?
    } else {
        x
    };
    let masked: Vec<Vec<usize>> = (0..b)
        .map(|_| draw_mask_plan(n, rng).map(|p| p.masked))
        .collect::<Result<_>>()?;
    if masked.iter().any(Vec::is_empty) {
        return Err(Error::Contract("empty mask plan".into()));
    }
    pretrain_loss_with(s, model, &spec.source, x, &masked)
}

/// Pretraining loss for an already prepared `x: [B, t, v]` and explicit
/// per-sample masked token indices. Returns the loss and its two terms.
pub fn pretrain_loss_with(s: &mut Session, model: &Model, source: &str, x: Tensor, masked: &[Vec<usize>]) -> Result<(Var, [Scalar; 2])> {
    let xv = s.constant(x);
    let (rec, rec_cls) = model.pretrain_forward(s, source, xv, masked)?;
    let l1 = s.tape.mse(rec, xv)?;
    let l2 = s.tape.mse(rec_cls, xv)?;
    let terms = [s.value(l1).item(), s.value(l2).item()];
    Ok((s.tape.add(l1, l2)?, terms))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub dataset: String,
    pub loss: Scalar,
    pub lr: Scalar,
}

/// Outcome of one optimizer step; `total` is `Σ λ·(n_j/N)·L_j` over its
/// micro-batches.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub total: Scalar,
    pub rows: Vec<MetricRow>,
}

/// Runs one regime over a set of training datasets.
#[derive(Debug)]
pub struct Trainer {
    pub config: TrainingConfig,
    pub optimizer: Optimizer,
    datasets: Vec<TimeSeriesDataset>,
    iters: Vec<BatchIter>,
    pick: Rng,
    noise: Rng,
    step: usize,
    frozen_digest: Option<u64>,
}

impl Trainer {
    /// Registers any missing token sets and class embeddings, applies the
    /// regime's freeze set and prepares per-dataset batch streams.
    pub fn new(model: &mut Model, config: TrainingConfig, datasets: Vec<TimeSeriesDataset>) -> Result<Self> {
        config.validate()?;
        if datasets.is_empty() {
            return Err(Error::Config("no training datasets".into()));
        }
        let mut names: Vec<&str> = datasets.iter().map(TimeSeriesDataset::name).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("dataset names must be unique".into()));
        }
        for ds in &datasets {
            let (_, v) = ds
                .dims()
                .ok_or_else(|| Error::Data(format!("dataset `{}` is empty", ds.name())))?;
            model.add_source(&ds.task.source, v)?;
            if let Some(n) = ds.task.n_classes {
                if model.classifier(&ds.task.name).is_err() {
                    model.add_classifier(&ds.task.name, n, v, EmbeddingMode::Trained)?;
                }
            }
        }
        if config.regime == Regime::Pretrain {
            model.enable_pretrain_head()?;
        }
        let tasks: Vec<TaskSpec> = datasets.iter().map(|d| d.task.clone()).collect();
        apply_regime(model, config.regime, &tasks)?;
        let reps = repetition_factors(&datasets.iter().map(TimeSeriesDataset::len).collect::<Vec<_>>());
        let iters = datasets
            .iter()
            .zip(reps)
            .enumerate()
            .map(|(i, (d, r))| BatchIter::new(d.len(), config.batch_size, r, dataset_seed(config.seed, i)))
            .collect::<Result<_>>()?;
        let frozen_digest = (config.regime == Regime::PromptTune).then(|| frozen_checksum(&model.registry));
        Ok(Trainer {
            pick: rng::stream(config.seed, 100),
            noise: rng::stream(config.seed, 101),
            optimizer: Optimizer::new(config.optimizer),
            config,
            datasets,
            iters,
            step: 0,
            frozen_digest,
        })
    }

    pub fn datasets(&self) -> &[TimeSeriesDataset] {
        &self.datasets
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// One optimizer step over `effective_batch / batch_size` micro-batches,
    /// each from a uniformly sampled dataset. Micro-batch gradients are
    /// weighted by `λ · size / total` so the step equals one step on the
    /// concatenated batch.
    pub fn step(&mut self, model: &mut Model) -> Result<StepReport> {
        let lr = lr_at(&self.config, self.step.min(self.config.steps));
        let mut draws = Vec::with_capacity(self.config.micro_batches());
        for _ in 0..self.config.micro_batches() {
            let d = sample_dataset(self.datasets.len(), &mut self.pick)?;
            let idx = self.iters[d].next().ok_or_else(|| Error::State("batch stream ended".into()))?;
            draws.push((d, idx));
        }
        let total: usize = draws.iter().map(|(_, i)| i.len()).sum();
        let mut rows = Vec::with_capacity(draws.len());
        let mut total_loss = 0.0;
        for (d, idx) in draws {
            let ds = &self.datasets[d];
            let batch = ds.batch(&idx)?;
            let weight = self.config.weight_for(&ds.task) * idx.len() as Scalar / total as Scalar;
            let (loss, grads) = {
                let mut s = Session::new(&model.registry);
                let loss = match self.config.regime {
                    Regime::Pretrain => pretrain_loss(&mut s, model, &ds.task, &batch, &mut self.noise)?.0,
                    _ => task_loss(&mut s, model, &ds.task, &batch, &mut self.noise)?,
                };
                let value = s.value(loss).item();
                s.backward(loss)?;
                (value, s.gradients())
            };
            if !loss.is_finite() {
                return Err(Error::State(format!("non-finite loss on `{}` at step {}", ds.name(), self.step)));
            }
            total_loss += weight * loss;
            for (name, mut g) in grads {
                g.iter_mut().for_each(|x| *x *= weight);
                model.registry.accumulate_grad(&name, &g)?;
            }
            rows.push(MetricRow {
                step: self.step,
                dataset: ds.name().into(),
                loss,
                lr,
            });
        }
        self.optimizer.apply(&mut model.registry, lr)?;
        if let Some(digest) = self.frozen_digest {
            if frozen_checksum(&model.registry) != digest {
                return Err(Error::State("a frozen parameter changed during prompt tuning".into()));
            }
        }
        self.step += 1;
        Ok(StepReport { total: total_loss, rows })
    }

    /// Runs the remaining steps and refreshes averaged class embeddings.
    pub fn run(&mut self, model: &mut Model) -> Result<Vec<MetricRow>> {
        let mut rows = Vec::new();
        while self.step < self.config.steps {
            rows.extend(self.step(model)?.rows);
        }
        for ds in &self.datasets {
            if let Ok(ce) = model.classifier(&ds.task.name) {
                if ce.mode == EmbeddingMode::Averaged {
                    refresh_averaged_embeddings(model, ds)?;
                }
            }
        }
        Ok(rows)
    }
}

/// Digest of every frozen tensor.
pub fn frozen_checksum(reg: &ParameterRegistry) -> u64 {
    reg.checksum(|_, p| p.frozen)
}

/// Replaces a task's class embeddings by the mean output CLS token per class.
pub fn refresh_averaged_embeddings(model: &mut Model, ds: &TimeSeriesDataset) -> Result<()> {
    let spec = &ds.task;
    let n = spec.n_classes.ok_or_else(|| Error::Config(format!("`{}` is not a classification task", spec.name)))?;
    let batch = ds.all()?;
    let BatchTarget::Labels(labels) = &batch.target else {
        return Err(Error::Data(format!("`{}` has no labels", spec.name)));
    };
    let tokens = crate::tasks::cls_tokens(model, &spec.source, &spec.name, &batch.x, spec.normalized())?;
    let emb = average_class_embeddings(&tokens, labels, n)?;
    let name = model.classifier(&spec.name)?.name.clone();
    model.registry.set_value(&name, emb)
}

/// Seed of the batch stream for the `i`-th dataset.
fn dataset_seed(seed: u64, i: usize) -> u64 {
    rand::RngCore::next_u64(&mut rng::stream(seed, 200 + i as u64))
}
