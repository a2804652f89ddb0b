//! Datasets, split-disjoint windowing, batching and the synthetic generators.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

#[allow(unused_imports)]
use num_traits::Float;
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tasks::{TaskKind, TaskSpec};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    /// Future values `[h, v]` following the context window.
    Horizon(Tensor),
    Label(usize),
    /// Timesteps hidden from the model during imputation.
    Mask(Vec<bool>),
    /// Ground-truth anomalous timesteps.
    Anomalies(Vec<bool>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[t, v]`
    pub series: Tensor,
    pub target: Target,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeriesDataset {
    pub task: TaskSpec,
    pub split: Split,
    samples: Vec<Sample>,
}

/// Stacked inputs `x: [B, t, v]` with matching targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub target: BatchTarget,
}

#[derive(Clone, Debug, PartialEq)]
pub enum BatchTarget {
    Horizon(Tensor),
    Labels(Vec<usize>),
    Masks(Vec<Vec<bool>>),
    Anomalies(Vec<Vec<bool>>),
}

impl TimeSeriesDataset {
    /// Checks that every sample has the same shape and a target of the
    /// kind the task calls for.
    pub fn new(task: TaskSpec, split: Split, samples: Vec<Sample>) -> Result<Self> {
        task.validate()?;
        let name = &task.name;
        if let Some(first) = samples.first() {
            let shape = first.series.shape().to_vec();
            if shape.len() != 2 {
                return Err(Error::Data(format!("dataset `{name}`: series must be [t, v], got {shape:?}")));
            }
            let tlen = target_len(&first.target);
            for (i, s) in samples.iter().enumerate() {
                if s.series.shape() != shape.as_slice() {
                    return Err(Error::Data(format!(
                        "dataset `{name}`: sample {i} has shape {:?}, expected {shape:?}",
                        s.series.shape()
                    )));
                }
                let ok = match (&s.target, task.kind) {
                    (Target::Horizon(h), TaskKind::Forecast) => h.shape().len() == 2 && h.shape()[1] == shape[1],
                    (Target::Label(y), TaskKind::Classify) => *y < task.n_classes.unwrap_or(0),
                    (Target::Mask(m), TaskKind::Impute) => m.len() == shape[0] && !m.iter().all(|&a| a),
                    (Target::Anomalies(a), TaskKind::Anomaly) => a.len() == shape[0],
                    _ => false,
                };
                if !ok || target_len(&s.target) != tlen {
                    return Err(Error::Data(format!("dataset `{name}`: sample {i} has an invalid target")));
                }
            }
        }
        Ok(TimeSeriesDataset { task, split, samples })
    }

    pub fn name(&self) -> &str {
        &self.task.name
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `(t, v)` of every sample.
    pub fn dims(&self) -> Option<(usize, usize)> {
        self.samples.first().map(|s| (s.series.shape()[0], s.series.shape()[1]))
    }

    pub fn vars(&self) -> Option<usize> {
        self.dims().map(|d| d.1)
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        if indices.is_empty() {
            return Err(Error::Data(format!("empty batch from `{}`", self.name())));
        }
        let picked: Vec<&Sample> = indices
            .iter()
            .map(|&i| {
                self.samples
                    .get(i)
                    .ok_or_else(|| Error::Data(format!("sample {i} outside `{}`", self.name())))
            })
            .collect::<Result<_>>()?;
        let x = Tensor::stack(&picked.iter().map(|s| &s.series).collect::<Vec<_>>())?;
        let target = match &picked[0].target {
            Target::Horizon(_) => BatchTarget::Horizon(Tensor::stack(
                &picked
                    .iter()
                    .map(|s| match &s.target {
                        Target::Horizon(h) => h,
                        _ => unreachable!("validated at construction"),
                    })
                    .collect::<Vec<_>>(),
            )?),
            Target::Label(_) => BatchTarget::Labels(picked.iter().map(|s| match s.target {
                Target::Label(y) => y,
                _ => unreachable!("validated at construction"),
            }).collect()),
            Target::Mask(_) => BatchTarget::Masks(picked.iter().map(|s| match &s.target {
                Target::Mask(m) => m.clone(),
                _ => unreachable!("validated at construction"),
            }).collect()),
            Target::Anomalies(_) => BatchTarget::Anomalies(picked.iter().map(|s| match &s.target {
                Target::Anomalies(a) => a.clone(),
                _ => unreachable!("validated at construction"),
            }).collect()),
        };
        Ok(Batch { x, target })
    }

    pub fn all(&self) -> Result<Batch> {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }
}

fn target_len(t: &Target) -> usize {
    match t {
        Target::Horizon(h) => h.shape()[0],
        Target::Label(_) => 0,
        Target::Mask(m) => m.len(),
        Target::Anomalies(a) => a.len(),
    }
}

// ---- splits and windows ----------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SplitFractions {
    pub train: Scalar,
    pub val: Scalar,
    pub test: Scalar,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|f| !(*f >= 0.0)) || (parts.iter().sum::<Scalar>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions {parts:?} must be non-negative and sum to 1")));
        }
        Ok(())
    }

    /// Contiguous, disjoint row ranges for train, val and test.
    pub fn bounds(&self, rows: usize) -> Result<[Range<usize>; 3]> {
        self.validate()?;
        let a = ((self.train * rows as Scalar).round() as usize).min(rows);
        let b = (((self.train + self.val) * rows as Scalar).round() as usize).clamp(a, rows);
        Ok([0..a, a..b, b..rows])
    }
}

/// Start offsets of every `window`-row window lying entirely inside `range`.
pub fn window_starts(range: Range<usize>, window: usize, stride: usize) -> Vec<usize> {
    if window == 0 || stride == 0 || range.len() < window {
        return Vec::new();
    }
    (range.start..=range.end - window).step_by(stride).collect()
}

/// How a long table is cut into samples.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Windowing {
    /// Context length `t`.
    pub length: usize,
    /// Future steps per forecast sample.
    #[cfg_attr(feature = "serde", serde(default))]
    pub horizon: usize,
    pub stride: usize,
    #[cfg_attr(feature = "serde", serde(default))]
    pub splits: SplitFractions,
    /// Fraction of each impute window hidden as one block.
    #[cfg_attr(feature = "serde", serde(default = "default_mask_fraction"))]
    pub mask_fraction: Scalar,
}

#[cfg(feature = "serde")]
fn default_mask_fraction() -> Scalar {
    0.25
}

/// Cuts a `[T, v]` table into train/val/test datasets whose windows never
/// cross a split boundary. Classification windows take the label of their
/// first row; anomaly windows take per-row labels (non-zero = anomalous).
pub fn windowed_datasets(
    values: &Tensor,
    labels: Option<&[usize]>,
    task: &TaskSpec,
    win: &Windowing,
    seed: u64,
) -> Result<[TimeSeriesDataset; 3]> {
    let rows = match *values.shape() {
        [r, _] => r,
        _ => return Err(Error::dim("windowed_datasets", values.shape(), &[2])),
    };
    if let Some(l) = labels {
        if l.len() != rows {
            return Err(Error::Data(format!("{} labels for {rows} rows", l.len())));
        }
    }
    if task.kind == TaskKind::Classify && labels.is_none() {
        return Err(Error::Data(format!("classification dataset `{}` needs a label column", task.name)));
    }
    let horizon = if task.kind == TaskKind::Forecast { win.horizon } else { 0 };
    if task.kind == TaskKind::Forecast && horizon == 0 {
        return Err(Error::Config(format!("forecast dataset `{}` needs a positive horizon", task.name)));
    }
    let span = win.length + horizon;
    let bounds = win.splits.bounds(rows)?;
    let mut r = rng::stream(seed, 0x1a7e);
    let splits = [Split::Train, Split::Val, Split::Test];
    let mut out = Vec::with_capacity(3);
    for (range, split) in bounds.into_iter().zip(splits) {
        let mut samples = Vec::new();
        for start in window_starts(range, span, win.stride) {
            let series = values.narrow_first(start, win.length)?;
            let target = match task.kind {
                TaskKind::Forecast => Target::Horizon(values.narrow_first(start + win.length, horizon)?),
                TaskKind::Classify => Target::Label(labels.expect("checked above")[start]),
                TaskKind::Anomaly => Target::Anomalies(
                    (start..start + win.length)
                        .map(|i| labels.is_some_and(|l| l[i] != 0))
                        .collect(),
                ),
                TaskKind::Impute => Target::Mask(block_mask(&mut r, win.length, win.mask_fraction)),
            };
            samples.push(Sample { series, target });
        }
        out.push(TimeSeriesDataset::new(task.clone(), split, samples)?);
    }
    let [a, b, c]: [TimeSeriesDataset; 3] = out.try_into().map_err(|_| Error::State("split count".into()))?;
    Ok([a, b, c])
}

/// One contiguous block of `round(fraction·t)` masked steps at a random offset.
pub fn block_mask(r: &mut Rng, t: usize, fraction: Scalar) -> Vec<bool> {
    let n = ((fraction * t as Scalar).round() as usize).clamp(1, t.saturating_sub(1).max(1));
    let start = rng::index(r, t - n + 1);
    (0..t).map(|i| i >= start && i < start + n).collect()
}

// ---- batching --------------------------------------------------------------

/// Per-dataset repetition so each epoch matches the largest dataset.
pub fn repetition_factors(sizes: &[usize]) -> Vec<usize> {
    let max = sizes.iter().copied().max().unwrap_or(0);
    sizes.iter().map(|&n| if n == 0 { 0 } else { max.div_ceil(n) }).collect()
}

/// Index batches for one epoch: every index `repetition` times, shuffled
/// with a stream keyed by `(seed, epoch)`, last partial batch kept.
pub fn epoch_batches(n: usize, batch_size: usize, repetition: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(Error::Data("cannot batch an empty dataset".into()));
    }
    if batch_size == 0 || repetition == 0 {
        return Err(Error::Config("batch size and repetition must be positive".into()));
    }
    let mut order: Vec<usize> = (0..repetition).flat_map(|_| 0..n).collect();
    order.shuffle(&mut rng::stream(seed, epoch));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Endless stream of index batches rolling over epochs.
#[derive(Clone, Debug)]
pub struct BatchIter {
    n: usize,
    batch_size: usize,
    repetition: usize,
    seed: u64,
    epoch: u64,
    queue: Vec<Vec<usize>>,
    pos: usize,
}

impl BatchIter {
    pub fn new(n: usize, batch_size: usize, repetition: usize, seed: u64) -> Result<Self> {
        let queue = epoch_batches(n, batch_size, repetition, seed, 0)?;
        Ok(BatchIter {
            n,
            batch_size,
            repetition,
            seed,
            epoch: 0,
            queue,
            pos: 0,
        })
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }
}

impl Iterator for BatchIter {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.pos == self.queue.len() {
            self.epoch += 1;
            self.queue = epoch_batches(self.n, self.batch_size, self.repetition, self.seed, self.epoch).ok()?;
            self.pos = 0;
        }
        self.pos += 1;
        Some(self.queue[self.pos - 1].clone())
    }
}

// ---- synthetic generators --------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum SyntheticKind {
    SineForecast,
    TwoClass,
    SpikeAnomaly,
    ImputeSine,
}

impl SyntheticKind {
    pub fn task_kind(self) -> TaskKind {
        match self {
            SyntheticKind::SineForecast => TaskKind::Forecast,
            SyntheticKind::TwoClass => TaskKind::Classify,
            SyntheticKind::SpikeAnomaly => TaskKind::Anomaly,
            SyntheticKind::ImputeSine => TaskKind::Impute,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct SyntheticParams {
    pub samples: usize,
    /// Context length `t`.
    pub length: usize,
    pub vars: usize,
    /// Future steps for forecasting samples.
    pub horizon: usize,
    pub noise: Scalar,
    /// Period range (in steps) the per-dataset sinusoid family is drawn from.
    pub min_period: Scalar,
    pub max_period: Scalar,
    pub anomaly_rate: Scalar,
    /// Spike height in units of the clean signal's standard deviation.
    pub spike_scale: Scalar,
    pub mask_fraction: Scalar,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        SyntheticParams {
            samples: 64,
            length: 64,
            vars: 1,
            horizon: 16,
            noise: 0.05,
            min_period: 8.0,
            max_period: 32.0,
            anomaly_rate: 0.05,
            spike_scale: 5.0,
            mask_fraction: 0.25,
        }
    }
}

const TAU: Scalar = 2.0 * core::f64::consts::PI as Scalar;

/// Periods shared by every sample of one sinusoid family.
fn family(r: &mut Rng, p: &SyntheticParams) -> Vec<Scalar> {
    let n = 2 + rng::index(r, 2);
    (0..n).map(|_| rng::uniform(r, p.min_period, p.max_period)).collect()
}

/// `[len, vars]` mixture with per-sample phases and amplitudes.
fn mixture(r: &mut Rng, periods: &[Scalar], len: usize, vars: usize) -> Vec<Scalar> {
    let comps: Vec<(Scalar, Scalar, Scalar)> = (0..vars)
        .flat_map(|_| periods.to_vec())
        .map(|per| (per, rng::uniform(r, 0.0, TAU), rng::uniform(r, 0.5, 1.0)))
        .collect();
    let k = periods.len();
    let mut out = vec![0.0; len * vars];
    for t in 0..len {
        for v in 0..vars {
            out[t * vars + v] = comps[v * k..(v + 1) * k]
                .iter()
                .map(|(per, ph, amp)| amp * (TAU * t as Scalar / per + ph).sin())
                .sum();
        }
    }
    out
}

fn add_noise(r: &mut Rng, xs: &mut [Scalar], std: Scalar) {
    if std > 0.0 {
        xs.iter_mut().for_each(|x| *x += rng::normal(r, std));
    }
}

fn std_of(xs: &[Scalar]) -> Scalar {
    let n = xs.len() as Scalar;
    let m = xs.iter().sum::<Scalar>() / n;
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<Scalar>() / n).sqrt()
}

/// Deterministic synthetic training set for `task`; `kind` must agree with
/// the task kind.
pub fn make_synthetic(task: TaskSpec, kind: SyntheticKind, seed: u64, p: &SyntheticParams) -> Result<TimeSeriesDataset> {
    make_synthetic_split(task, kind, seed, Split::Train, p)
}

/// The periods of a family depend only on `seed`; the samples of each split
/// come from their own stream, so splits share dynamics but not windows.
pub fn make_synthetic_split(
    task: TaskSpec,
    kind: SyntheticKind,
    seed: u64,
    split: Split,
    p: &SyntheticParams,
) -> Result<TimeSeriesDataset> {
    if kind.task_kind() != task.kind {
        return Err(Error::Config(format!(
            "generator {kind:?} cannot produce a {:?} task",
            task.kind
        )));
    }
    if p.samples == 0 || p.length < 2 || p.vars == 0 || !(p.min_period > 0.0 && p.max_period >= p.min_period) {
        return Err(Error::Config(format!("invalid synthetic parameters {p:?}")));
    }
    let (t, v) = (p.length, p.vars);
    let periods = family(&mut rng::stream(seed, 0x5e7), p);
    let mut r = rng::stream(seed, 0x5e8 + split as u64);
    let mut samples = Vec::with_capacity(p.samples);
    for i in 0..p.samples {
        let sample = match kind {
            SyntheticKind::SineForecast => {
                if p.horizon == 0 {
                    return Err(Error::Config("sine_forecast needs a positive horizon".into()));
                }
                let mut xs = mixture(&mut r, &periods, t + p.horizon, v);
                add_noise(&mut r, &mut xs, p.noise);
                let future = xs.split_off(t * v);
                Sample {
                    series: Tensor::new(&[t, v], xs)?,
                    target: Target::Horizon(Tensor::new(&[p.horizon, v], future)?),
                }
            }
            SyntheticKind::TwoClass => {
                let label = i % 2;
                // low band for class 0, a band four times faster for class 1
                let (lo, hi) = if label == 0 { (p.max_period, 2.0 * p.max_period) } else { (p.min_period / 2.0, p.min_period) };
                let per = rng::uniform(&mut r, lo, hi);
                let mut xs = mixture(&mut r, &[per], t, v);
                add_noise(&mut r, &mut xs, p.noise);
                Sample {
                    series: Tensor::new(&[t, v], xs)?,
                    target: Target::Label(label),
                }
            }
            SyntheticKind::SpikeAnomaly => {
                let mut xs = mixture(&mut r, &periods, t, v);
                let sigma = std_of(&xs);
                add_noise(&mut r, &mut xs, p.noise);
                let n = ((p.anomaly_rate * t as Scalar).round() as usize).min(t);
                let mut flags = vec![false; t];
                for pos in rand::seq::index::sample(&mut r, t, n).into_iter() {
                    flags[pos] = true;
                    let sign = if rng::coin(&mut r) { 1.0 } else { -1.0 };
                    for vi in 0..v {
                        xs[pos * v + vi] += sign * p.spike_scale * sigma;
                    }
                }
                Sample {
                    series: Tensor::new(&[t, v], xs)?,
                    target: Target::Anomalies(flags),
                }
            }
            SyntheticKind::ImputeSine => {
                let mut xs = mixture(&mut r, &periods, t, v);
                add_noise(&mut r, &mut xs, p.noise);
                Sample {
                    series: Tensor::new(&[t, v], xs)?,
                    target: Target::Mask(block_mask(&mut r, t, p.mask_fraction)),
                }
            }
        };
        samples.push(sample);
    }
    TimeSeriesDataset::new(task, split, samples)
}
