//! Inference pipelines for the four task kinds and the anomaly threshold.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::Session;
use crate::tensor::{Scalar, Tensor};
use crate::towers::match_class;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum TaskKind {
    Forecast,
    Classify,
    Impute,
    Anomaly,
}

impl TaskKind {
    /// Whether inputs are z-scored per sample unless a task says otherwise.
    pub fn normalizes_by_default(self) -> bool {
        matches!(self, TaskKind::Forecast | TaskKind::Impute)
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TaskSpec {
    pub name: String,
    /// Token-sharing key: tasks with the same source share prompt/GEN/CLS tokens.
    pub source: String,
    pub kind: TaskKind,
    #[cfg_attr(feature = "serde", serde(default))]
    pub horizon_tokens: Option<usize>,
    #[cfg_attr(feature = "serde", serde(default))]
    pub n_classes: Option<usize>,
    #[cfg_attr(feature = "serde", serde(default))]
    pub anomaly_ratio: Option<Scalar>,
    #[cfg_attr(feature = "serde", serde(default = "unit_weight"))]
    pub weight: Scalar,
    #[cfg_attr(feature = "serde", serde(default))]
    pub normalize: Option<bool>,
}

#[cfg(feature = "serde")]
fn unit_weight() -> Scalar {
    1.0
}

impl TaskSpec {
    fn base(name: &str, source: &str, kind: TaskKind) -> Self {
        TaskSpec {
            name: name.into(),
            source: source.into(),
            kind,
            horizon_tokens: None,
            n_classes: None,
            anomaly_ratio: None,
            weight: 1.0,
            normalize: None,
        }
    }

    pub fn forecast(name: &str, source: &str, f: usize) -> Self {
        TaskSpec {
            horizon_tokens: Some(f),
            ..Self::base(name, source, TaskKind::Forecast)
        }
    }

    pub fn classify(name: &str, source: &str, n_classes: usize) -> Self {
        TaskSpec {
            n_classes: Some(n_classes),
            ..Self::base(name, source, TaskKind::Classify)
        }
    }

    pub fn impute(name: &str, source: &str) -> Self {
        Self::base(name, source, TaskKind::Impute)
    }

    pub fn anomaly(name: &str, source: &str, ratio: Scalar) -> Self {
        TaskSpec {
            anomaly_ratio: Some(ratio),
            ..Self::base(name, source, TaskKind::Anomaly)
        }
    }

    pub fn normalized(&self) -> bool {
        self.normalize.unwrap_or(self.kind.normalizes_by_default())
    }

    pub fn horizon_steps(&self, patch: usize) -> Option<usize> {
        self.horizon_tokens.map(|f| f * patch)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("task `{}`: {what}", self.name)));
        let k = self.kind;
        if self.horizon_tokens.is_some() != (k == TaskKind::Forecast) {
            return bad("horizon_tokens is required for forecasting and only there");
        }
        if self.n_classes.is_some() != (k == TaskKind::Classify) {
            return bad("n_classes is required for classification and only there");
        }
        if self.anomaly_ratio.is_some() != (k == TaskKind::Anomaly) {
            return bad("anomaly_ratio is required for anomaly detection and only there");
        }
        if self.horizon_tokens == Some(0) {
            return bad("horizon_tokens must be at least 1");
        }
        if self.n_classes.is_some_and(|n| n < 2) {
            return bad("n_classes must be at least 2");
        }
        if self.anomaly_ratio.is_some_and(|r| !(r > 0.0 && r < 1.0)) {
            return bad("anomaly_ratio must lie in (0, 1)");
        }
        if !(self.weight.is_finite() && self.weight >= 0.0) {
            return bad("loss weight must be finite and non-negative");
        }
        Ok(())
    }
}

pub const NORM_EPS: Scalar = 1e-5;

/// Per-sample, per-variable mean and standard deviation of a `[B, t, v]` batch.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub vars: usize,
    pub mean: Vec<Scalar>,
    pub std: Vec<Scalar>,
}

impl NormStats {
    /// Statistics over the timesteps where `observed` is true (all when `None`).
    pub fn fit(x: &Tensor, observed: Option<&[Vec<bool>]>) -> Result<Self> {
        let (b, t, v) = dims3(x)?;
        let mut mean = vec![0.0; b * v];
        let mut std = vec![0.0; b * v];
        for bi in 0..b {
            let keep = |ti: usize| observed.map_or(true, |m| !m[bi][ti]);
            let n = (0..t).filter(|&ti| keep(ti)).count();
            if n == 0 {
                return Err(Error::Contract(format!("sample {bi} has no observed timesteps")));
            }
            for vi in 0..v {
                let vals = (0..t).filter(|&ti| keep(ti)).map(|ti| x.data()[(bi * t + ti) * v + vi]);
                let mu = vals.clone().sum::<Scalar>() / n as Scalar;
                let var = vals.map(|a| (a - mu) * (a - mu)).sum::<Scalar>() / n as Scalar;
                mean[bi * v + vi] = mu;
                std[bi * v + vi] = (var + NORM_EPS).sqrt();
            }
        }
        Ok(NormStats { vars: v, mean, std })
    }

    fn map(&self, y: &Tensor, f: impl Fn(Scalar, Scalar, Scalar) -> Scalar) -> Result<Tensor> {
        let (b, t, v) = dims3(y)?;
        if v != self.vars || b * v != self.mean.len() {
            return Err(Error::dim("normalize", y.shape(), &[self.mean.len() / self.vars, self.vars]));
        }
        Ok(Tensor::from_fn(y.shape(), |i| {
            let (bi, vi) = (i / (t * v), i % v);
            f(y.data()[i], self.mean[bi * v + vi], self.std[bi * v + vi])
        }))
    }

    pub fn apply(&self, y: &Tensor) -> Result<Tensor> {
        self.map(y, |a, m, s| (a - m) / s)
    }

    pub fn restore(&self, y: &Tensor) -> Result<Tensor> {
        self.map(y, |a, m, s| a * s + m)
    }
}

fn dims3(x: &Tensor) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [b, t, v] => Ok((b, t, v)),
        _ => Err(Error::dim("series batch", x.shape(), &[3])),
    }
}

/// Promotes a single `[t, v]` series to a batch of one.
pub fn as_batch(x: &Tensor) -> Result<Tensor> {
    match *x.shape() {
        [t, v] => x.clone().reshape(&[1, t, v]),
        [_, _, _] => Ok(x.clone()),
        _ => Err(Error::dim("series", x.shape(), &[2])),
    }
}

fn first_of(batch: Tensor) -> Result<Tensor> {
    let s = batch.shape()[1..].to_vec();
    batch.reshape(&s)
}

/// Direct multi-step forecast of `f·k` steps (or `horizon`) for a `[B, t, v]`
/// batch in one forward pass.
pub fn forecast_batch(model: &Model, source: &str, x: &Tensor, f: usize, horizon: Option<usize>, normalize: bool) -> Result<Tensor> {
    let stats = normalize.then(|| NormStats::fit(x, None)).transpose()?;
    let input = match &stats {
        Some(st) => st.apply(x)?,
        None => x.clone(),
    };
    let mut s = Session::new(&model.registry);
    let xv = s.constant(input);
    let y = model.forecast_forward(&mut s, source, xv, f, horizon)?;
    let y = s.value(y).clone();
    match &stats {
        Some(st) => st.restore(&y),
        None => Ok(y),
    }
}

/// Forecast for one `[t, v]` series, returning `[(f·k), v]`.
pub fn forecast(model: &Model, source: &str, x: &Tensor, f: usize, normalize: bool) -> Result<Tensor> {
    first_of(forecast_batch(model, source, &as_batch(x)?, f, None, normalize)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classification {
    pub class: usize,
    pub distances: Vec<Scalar>,
}

pub fn classify_batch(model: &Model, source: &str, task: &str, x: &Tensor, normalize: bool) -> Result<Vec<Classification>> {
    let input = if normalize { NormStats::fit(x, None)?.apply(x)? } else { x.clone() };
    let b = input.shape()[0];
    let mut s = Session::new(&model.registry);
    let xv = s.constant(input);
    let (cls, _) = model.classify_forward(&mut s, source, task, xv)?;
    let cls = s.value(cls).clone();
    let emb = model.registry.value(&model.classifier(task)?.name)?;
    (0..b)
        .map(|i| {
            let (class, distances) = match_class(&cls.narrow_first(i, 1)?, emb)?;
            Ok(Classification { class, distances })
        })
        .collect()
}

pub fn classify(model: &Model, source: &str, task: &str, x: &Tensor, normalize: bool) -> Result<Classification> {
    Ok(classify_batch(model, source, task, &as_batch(x)?, normalize)?.remove(0))
}

/// Output CLS tokens `[v, d]` for each element of a batch.
pub fn cls_tokens(model: &Model, source: &str, task: &str, x: &Tensor, normalize: bool) -> Result<Vec<Tensor>> {
    let input = if normalize { NormStats::fit(x, None)?.apply(x)? } else { x.clone() };
    let b = input.shape()[0];
    let mut s = Session::new(&model.registry);
    let xv = s.constant(input);
    let (cls, _) = model.classify_forward(&mut s, source, task, xv)?;
    let cls = s.value(cls).clone();
    (0..b)
        .map(|i| {
            let t = cls.narrow_first(i, 1)?;
            let shape = t.shape()[2..].to_vec();
            t.reshape(&shape)
        })
        .collect()
}

/// Token indices touched by any masked timestep.
pub fn missing_tokens(mask: &[bool], patch: usize) -> Vec<usize> {
    let mut out: Vec<usize> = mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i / patch).collect();
    out.dedup();
    out
}

/// Fills masked timesteps (`masks[b][t] == true`) from the GEN tower's
/// sample-segment reconstruction; observed timesteps are copied verbatim.
pub fn impute_batch(model: &Model, source: &str, x: &Tensor, masks: &[Vec<bool>], normalize: bool) -> Result<Tensor> {
    let (b, t, v) = dims3(x)?;
    if masks.len() != b || masks.iter().any(|m| m.len() != t) {
        return Err(Error::Contract(format!("expected {b} masks of {t} timesteps")));
    }
    if let Some(i) = masks.iter().position(|m| m.iter().all(|&a| a)) {
        return Err(Error::Contract(format!("sample {i} is entirely missing")));
    }
    if masks.iter().all(|m| !m.iter().any(|&a| a)) {
        return Ok(x.clone());
    }
    let stats = normalize.then(|| NormStats::fit(x, Some(masks))).transpose()?;
    let mut input = match &stats {
        Some(st) => st.apply(x)?,
        None => x.clone(),
    };
    for (bi, m) in masks.iter().enumerate() {
        for (ti, _) in m.iter().enumerate().filter(|(_, &a)| a) {
            input.data_mut()[(bi * t + ti) * v..(bi * t + ti + 1) * v].fill(0.0);
        }
    }
    let missing: Vec<Vec<usize>> = masks.iter().map(|m| missing_tokens(m, model.config.patch)).collect();
    let mut s = Session::new(&model.registry);
    let xv = s.constant(input);
    let y = model.reconstruct_forward(&mut s, source, xv, &missing)?;
    let y = s.value(y).clone();
    let y = match &stats {
        Some(st) => st.restore(&y)?,
        None => y,
    };
    let mut out = x.clone();
    for (bi, m) in masks.iter().enumerate() {
        for (ti, _) in m.iter().enumerate().filter(|(_, &a)| a) {
            let r = (bi * t + ti) * v..(bi * t + ti + 1) * v;
            out.data_mut()[r.clone()].copy_from_slice(&y.data()[r]);
        }
    }
    Ok(out)
}

pub fn impute(model: &Model, source: &str, x: &Tensor, mask: &[bool], normalize: bool) -> Result<Tensor> {
    first_of(impute_batch(model, source, &as_batch(x)?, &[mask.to_vec()], normalize)?)
}

/// Per-timestep reconstruction error (mean over variables of the squared
/// difference) for each element of a batch.
pub fn reconstruction_errors(model: &Model, source: &str, x: &Tensor, normalize: bool) -> Result<Vec<Vec<Scalar>>> {
    let (b, t, v) = dims3(x)?;
    let input = if normalize { NormStats::fit(x, None)?.apply(x)? } else { x.clone() };
    let mut s = Session::new(&model.registry);
    let xv = s.constant(input.clone());
    let y = model.reconstruct_forward(&mut s, source, xv, &vec![Vec::new(); b])?;
    let y = s.value(y);
    Ok((0..b)
        .map(|bi| {
            (0..t)
                .map(|ti| {
                    let r = (bi * t + ti) * v..(bi * t + ti + 1) * v;
                    let e: Scalar = input.data()[r.clone()].iter().zip(&y.data()[r]).map(|(a, c)| (a - c) * (a - c)).sum();
                    e / v as Scalar
                })
                .collect()
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnomalyThreshold {
    pub threshold: Scalar,
    pub ratio: Scalar,
}

impl AnomalyThreshold {
    /// Strictly greater than the threshold.
    pub fn flag(&self, errors: &[Scalar]) -> Vec<bool> {
        errors.iter().map(|&e| e > self.threshold).collect()
    }
}

/// Nearest-rank `(1 − ratio)` quantile: the value at index
/// `ceil((1 − ratio)·n) − 1` of the ascending-sorted errors.
pub fn fit_anomaly_threshold(errors: &[Scalar], ratio: Scalar) -> Result<AnomalyThreshold> {
    if errors.is_empty() {
        return Err(Error::Data("no reconstruction errors to fit a threshold on".into()));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("anomaly ratio {ratio} outside (0, 1)")));
    }
    if errors.iter().any(|e| e.is_nan()) {
        return Err(Error::Data("reconstruction errors contain NaN".into()));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(core::cmp::Ordering::Equal));
    let n = sorted.len();
    let rank = ((1.0 - ratio) * n as Scalar).ceil() as usize;
    Ok(AnomalyThreshold {
        threshold: sorted[rank.clamp(1, n) - 1],
        ratio,
    })
}

pub fn detect_anomalies(model: &Model, source: &str, x: &Tensor, threshold: &AnomalyThreshold, normalize: bool) -> Result<Vec<Vec<bool>>> {
    Ok(reconstruction_errors(model, source, &as_batch(x)?, normalize)?
        .iter()
        .map(|e| threshold.flag(e))
        .collect())
}

/// Cosine similarity between mean-pooled prompt tokens of every source, in
/// source-name order.
pub fn prompt_similarity(model: &Model) -> Result<(Vec<String>, Vec<Vec<Scalar>>)> {
    let mut names = Vec::new();
    let mut means: Vec<Vec<Scalar>> = Vec::new();
    for ts in model.sources() {
        let Some(p) = &ts.prompt else {
            return Err(Error::Config(format!("source `{}` has no prompt tokens", ts.source)));
        };
        let t = model.registry.value(p)?;
        let (p_len, width) = (t.shape()[0], model.config.d);
        let mut m = vec![0.0; width];
        for row in t.data().chunks(width) {
            m.iter_mut().zip(row).for_each(|(a, b)| *a += b / (p_len * ts.vars) as Scalar);
        }
        names.push(ts.source.clone());
        means.push(m);
    }
    if names.len() < 2 {
        return Err(Error::Config(format!("prompt similarity needs at least 2 sources, model has {}", names.len())));
    }
    Ok((names, cosine_matrix(&means)))
}

pub fn cosine_matrix(vectors: &[Vec<Scalar>]) -> Vec<Vec<Scalar>> {
    let norm = |a: &[Scalar]| a.iter().map(|x| x * x).sum::<Scalar>().sqrt();
    let n = vectors.len();
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        out[i][i] = 1.0;
        for j in i + 1..n {
            let dot: Scalar = vectors[i].iter().zip(&vectors[j]).map(|(a, b)| a * b).sum();
            let den = norm(&vectors[i]) * norm(&vectors[j]);
            let c = if den > 0.0 { dot / den } else { 0.0 };
            out[i][j] = c;
            out[j][i] = c;
        }
    }
    out
}
