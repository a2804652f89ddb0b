//! Held-out evaluation of a trained model, one metric set per task kind.
//!
//! Forecast and imputation errors are measured in the units the model
//! works in: z-scored with the input's own statistics when the task
//! normalizes, raw otherwise.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::data::{BatchTarget, TimeSeriesDataset};
use crate::error::{Error, Result};
use crate::metrics::{accuracy, mae, mse, Confusion};
use crate::model::Model;
use crate::tasks::{classify_batch, fit_anomaly_threshold, forecast_batch, impute_batch, reconstruction_errors, AnomalyThreshold, NormStats, TaskKind};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Metric {
    pub dataset: String,
    pub name: &'static str,
    pub value: Scalar,
}

fn in_model_units(stats: &Option<NormStats>, t: &Tensor) -> Result<Tensor> {
    match stats {
        Some(st) => st.apply(t),
        None => Ok(t.clone()),
    }
}

/// `(mse, mae)` of direct forecasts against the true horizon.
pub fn forecast_errors(model: &Model, ds: &TimeSeriesDataset) -> Result<(Scalar, Scalar)> {
    let spec = &ds.task;
    let b = ds.all()?;
    let BatchTarget::Horizon(y) = &b.target else {
        return Err(Error::Contract(format!("`{}` is not a forecast dataset", spec.name)));
    };
    let f = spec.horizon_tokens.unwrap_or(1);
    let pred = forecast_batch(model, &spec.source, &b.x, f, Some(y.shape()[1]), spec.normalized())?;
    let stats = spec.normalized().then(|| NormStats::fit(&b.x, None)).transpose()?;
    let (p, t) = (in_model_units(&stats, &pred)?, in_model_units(&stats, y)?);
    Ok((mse(p.data(), t.data())?, mae(p.data(), t.data())?))
}

pub fn classification_accuracy(model: &Model, ds: &TimeSeriesDataset) -> Result<Scalar> {
    let spec = &ds.task;
    let b = ds.all()?;
    let BatchTarget::Labels(labels) = &b.target else {
        return Err(Error::Contract(format!("`{}` is not a classification dataset", spec.name)));
    };
    let pred: Vec<usize> = classify_batch(model, &spec.source, &spec.name, &b.x, spec.normalized())?
        .into_iter()
        .map(|c| c.class)
        .collect();
    accuracy(&pred, labels)
}

/// `(mse, mae)` over the masked timesteps only.
pub fn imputation_errors(model: &Model, ds: &TimeSeriesDataset) -> Result<(Scalar, Scalar)> {
    let spec = &ds.task;
    let b = ds.all()?;
    let BatchTarget::Masks(masks) = &b.target else {
        return Err(Error::Contract(format!("`{}` is not an imputation dataset", spec.name)));
    };
    let out = impute_batch(model, &spec.source, &b.x, masks, spec.normalized())?;
    let stats = spec.normalized().then(|| NormStats::fit(&b.x, Some(masks))).transpose()?;
    let (p, t) = (in_model_units(&stats, &out)?, in_model_units(&stats, &b.x)?);
    let v = b.x.shape()[2];
    let (mut pv, mut tv) = (Vec::new(), Vec::new());
    for (row, hidden) in masks.iter().flatten().enumerate() {
        if *hidden {
            pv.extend_from_slice(&p.data()[row * v..(row + 1) * v]);
            tv.extend_from_slice(&t.data()[row * v..(row + 1) * v]);
        }
    }
    Ok((mse(&pv, &tv)?, mae(&pv, &tv)?))
}

/// Fits the threshold on reconstruction errors pooled over `fit` and `test`,
/// then scores pointwise flags on `test`.
pub fn anomaly_scores(model: &Model, fit: &TimeSeriesDataset, test: &TimeSeriesDataset, ratio: Scalar) -> Result<(AnomalyThreshold, Confusion)> {
    let spec = &test.task;
    let tb = test.all()?;
    let BatchTarget::Anomalies(labels) = &tb.target else {
        return Err(Error::Contract(format!("`{}` is not an anomaly dataset", spec.name)));
    };
    let test_err = reconstruction_errors(model, &spec.source, &tb.x, spec.normalized())?;
    let mut pooled: Vec<Scalar> = test_err.iter().flatten().copied().collect();
    if !fit.is_empty() {
        let fb = fit.all()?;
        pooled.extend(reconstruction_errors(model, &spec.source, &fb.x, spec.normalized())?.into_iter().flatten());
    }
    let thr = fit_anomaly_threshold(&pooled, ratio)?;
    let mut c = Confusion::default();
    for (e, l) in test_err.iter().zip(labels) {
        c = c.merge(Confusion::from_flags(&thr.flag(e), l)?);
    }
    Ok((thr, c))
}

/// Every metric for one task: forecast and impute give `mse` and `mae`,
/// classify gives `accuracy`, anomaly gives `precision`, `recall`, `f1`
/// and the fitted `threshold`.
pub fn evaluate(model: &Model, train: &TimeSeriesDataset, test: &TimeSeriesDataset, anomaly_ratio: Option<Scalar>) -> Result<Vec<Metric>> {
    let dataset = test.name();
    let m = |name, value| Metric {
        dataset: dataset.into(),
        name,
        value,
    };
    if test.is_empty() {
        return Err(Error::Data(format!("`{dataset}` has no held-out samples")));
    }
    Ok(match test.task.kind {
        TaskKind::Forecast => {
            let (a, b) = forecast_errors(model, test)?;
            alloc::vec![m("mse", a), m("mae", b)]
        }
        TaskKind::Impute => {
            let (a, b) = imputation_errors(model, test)?;
            alloc::vec![m("mse", a), m("mae", b)]
        }
        TaskKind::Classify => alloc::vec![m("accuracy", classification_accuracy(model, test)?)],
        TaskKind::Anomaly => {
            let ratio = anomaly_ratio
                .or(test.task.anomaly_ratio)
                .ok_or_else(|| Error::Config(format!("`{dataset}` needs an anomaly ratio")))?;
            let (thr, c) = anomaly_scores(model, train, test, ratio)?;
            alloc::vec![
                m("precision", c.precision()),
                m("recall", c.recall()),
                m("f1", c.f1()),
                m("threshold", thr.threshold),
            ]
        }
    })
}
