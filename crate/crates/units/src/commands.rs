//! One function per subcommand. Each validates its inputs before writing
//! anything and is deterministic given its config, seed and files.

use std::path::{Path, PathBuf};

use log::{debug, info};
use units_core::eval::{evaluate, Metric};
use units_core::tasks::{fit_anomaly_threshold, forecast, impute, prompt_similarity, reconstruction_errors, as_batch, AnomalyThreshold, TaskKind};
use units_core::trainer::{MetricRow, Regime, Trainer};
use units_core::{Model, Scalar, Tensor};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::csvio::{read_mask, read_table, write_bytes, write_rows, write_table, Table};
use crate::error::{Result, UnitsError};
use crate::manifest::{load_all, LoadedData};

pub const CHECKPOINT_FILE: &str = "checkpoint.unts";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.toml";
pub const EVAL_FILE: &str = "eval.csv";
pub const FORECAST_FILE: &str = "forecast.csv";
pub const IMPUTED_FILE: &str = "imputed.csv";
pub const ANOMALY_FILE: &str = "anomalies.csv";
pub const SIMILARITY_FILE: &str = "prompt_similarity.csv";

/// Options shared by the config-driven commands.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub config: PathBuf,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub from_checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub out: PathBuf,
    pub rows: Vec<MetricRow>,
}

fn prepare(opts: &RunOptions, regime: Option<Regime>) -> Result<(RunConfig, LoadedData)> {
    let cfg = RunConfig::read(&opts.config)?.resolve(opts.seed, opts.out.as_deref(), regime);
    cfg.validate()?;
    let manifest = cfg.manifest()?;
    let data = load_all(&manifest, cfg.manifest_dir(), cfg.seed)?;
    Ok((cfg, data))
}

fn load_or_init(cfg: &RunConfig, from: Option<&Path>) -> Result<Model> {
    match from {
        Some(p) => checkpoint::load(p, Some(&cfg.model)),
        None => Ok(Model::new(cfg.model, cfg.seed)?),
    }
}

pub fn format_metrics(rows: &[MetricRow]) -> Vec<[String; 4]> {
    rows.iter()
        .map(|r| [r.step.to_string(), r.dataset.clone(), r.loss.to_string(), r.lr.to_string()])
        .collect()
}

fn train_with(opts: &RunOptions, regime: Regime) -> Result<TrainOutcome> {
    let mut explicit = Some(regime);
    let (cfg, data) = prepare(opts, None)?;
    if regime == Regime::Supervised && cfg.training.regime == Regime::SingleTask {
        explicit = Some(Regime::SingleTask);
    }
    let cfg = cfg.resolve(None, None, explicit);
    if cfg.training.regime == Regime::SingleTask && data.train.len() != 1 {
        return Err(UnitsError::Usage(format!(
            "single_task training takes exactly one dataset, the manifest has {}",
            data.train.len()
        )));
    }
    if regime == Regime::PromptTune && opts.from_checkpoint.is_none() {
        return Err(UnitsError::Usage("prompt-tune requires --from-checkpoint".into()));
    }
    let mut model = load_or_init(&cfg, opts.from_checkpoint.as_deref())?;
    info!(
        "{:?}: {} datasets, {} steps, seed {}",
        cfg.training.regime,
        data.train.len(),
        cfg.training.steps,
        cfg.seed
    );

    let mut trainer = Trainer::new(&mut model, cfg.training.clone(), data.train)?;
    let every = (cfg.training.steps / 10).max(1);
    let mut rows = Vec::new();
    while trainer.steps_done() < cfg.training.steps {
        let report = trainer.step(&mut model)?;
        if trainer.steps_done() % every == 0 {
            info!("step {} loss {:.6}", trainer.steps_done(), report.total);
        }
        for r in &report.rows {
            debug!("step {} {} loss {} lr {}", r.step, r.dataset, r.loss, r.lr);
        }
        rows.extend(report.rows);
    }
    trainer.run(&mut model)?;
    if regime == Regime::Pretrain {
        let n = model.finish_pretraining();
        debug!("dropped {n} pretraining-head tensors");
    }

    let out = cfg.out.clone();
    checkpoint::save(&out.join(CHECKPOINT_FILE), &model)?;
    write_rows(&out.join(METRICS_FILE), &["step", "dataset", "loss", "lr"], &format_metrics(&rows))?;
    write_bytes(&out.join(CONFIG_FILE), cfg.to_toml()?.as_bytes())?;
    info!("wrote {}", out.display());
    Ok(TrainOutcome { out, rows })
}

pub fn cmd_pretrain(opts: &RunOptions) -> Result<TrainOutcome> {
    train_with(opts, Regime::Pretrain)
}

pub fn cmd_train(opts: &RunOptions) -> Result<TrainOutcome> {
    train_with(opts, Regime::Supervised)
}

pub fn cmd_prompt_tune(opts: &RunOptions) -> Result<TrainOutcome> {
    train_with(opts, Regime::PromptTune)
}

/// Test-split metrics for every manifest task, written as
/// `dataset,metric,value`.
pub fn cmd_eval(opts: &RunOptions, anomaly_ratio: Option<Scalar>) -> Result<Vec<Metric>> {
    let ckpt = opts
        .from_checkpoint
        .as_deref()
        .ok_or_else(|| UnitsError::Usage("eval requires --from-checkpoint".into()))?;
    let (cfg, data) = prepare(opts, None)?;
    let model = checkpoint::load(ckpt, Some(&cfg.model))?;
    for ds in &data.test {
        let spec = &ds.task;
        let ts = model.source(&spec.source).map_err(|_| {
            UnitsError::Usage(format!("checkpoint has no tokens for source `{}` of task `{}`", spec.source, spec.name))
        })?;
        if ds.vars().is_some_and(|v| v != ts.vars) {
            return Err(UnitsError::Usage(format!(
                "task `{}` has {} variables, the checkpoint's source `{}` expects {}",
                spec.name,
                ds.vars().unwrap_or(0),
                spec.source,
                ts.vars
            )));
        }
        if spec.kind == TaskKind::Classify && model.classifier(&spec.name).is_err() {
            return Err(UnitsError::Usage(format!("checkpoint has no class embeddings for task `{}`", spec.name)));
        }
    }
    let mut metrics = Vec::new();
    for (train, test) in data.train.iter().zip(&data.test) {
        metrics.extend(evaluate(&model, train, test, anomaly_ratio)?);
    }
    let rows: Vec<[String; 3]> = metrics
        .iter()
        .map(|m| [m.dataset.clone(), m.name.to_string(), m.value.to_string()])
        .collect();
    write_rows(&cfg.out.join(EVAL_FILE), &["dataset", "metric", "value"], &rows)?;
    Ok(metrics)
}

/// Options for the per-file inference commands.
#[derive(Clone, Debug, Default)]
pub struct InferOptions {
    pub checkpoint: PathBuf,
    pub input: PathBuf,
    pub source: Option<String>,
    pub out: PathBuf,
    /// Overrides the task kind's default normalization.
    pub normalize: Option<bool>,
}

fn infer_setup(o: &InferOptions) -> Result<(Model, String, Table)> {
    let model = checkpoint::load(&o.checkpoint, None)?;
    let source = match &o.source {
        Some(s) => s.clone(),
        None => {
            let all: Vec<&str> = model.sources().map(|t| t.source.as_str()).collect();
            match all[..] {
                [one] => one.to_string(),
                _ => return Err(UnitsError::Usage(format!("--source is required; the checkpoint has sources {all:?}"))),
            }
        }
    };
    let ts = model
        .source(&source)
        .map_err(|_| UnitsError::Usage(format!("checkpoint has no source `{source}`")))?;
    let table = read_table(&o.input, None, None)?;
    if table.columns.len() != ts.vars {
        return Err(UnitsError::Usage(format!(
            "{} has {} variables, source `{source}` expects {}",
            o.input.display(),
            table.columns.len(),
            ts.vars
        )));
    }
    Ok((model, source, table))
}

/// Writes `f·k` forecast rows following the input window.
pub fn cmd_forecast(o: &InferOptions, horizon_tokens: usize) -> Result<Tensor> {
    if horizon_tokens == 0 {
        return Err(UnitsError::Usage("--horizon-tokens must be positive".into()));
    }
    let (model, source, table) = infer_setup(o)?;
    let norm = o.normalize.unwrap_or(TaskKind::Forecast.normalizes_by_default());
    let y = forecast(&model, &source, &table.values, horizon_tokens, norm)?;
    write_table(
        &o.out.join(FORECAST_FILE),
        &Table {
            columns: table.columns,
            values: y.clone(),
            labels: None,
        },
    )?;
    Ok(y)
}

/// Fills the rows flagged in `mask_csv`; without a mask the input is echoed.
pub fn cmd_impute(o: &InferOptions, mask_csv: Option<&Path>) -> Result<Tensor> {
    let (model, source, table) = infer_setup(o)?;
    let rows = table.rows();
    let mask = match mask_csv {
        Some(p) => read_mask(p, rows)?,
        None => vec![false; rows],
    };
    let norm = o.normalize.unwrap_or(TaskKind::Impute.normalizes_by_default());
    let y = impute(&model, &source, &table.values, &mask, norm)?;
    write_table(
        &o.out.join(IMPUTED_FILE),
        &Table {
            columns: table.columns,
            values: y.clone(),
            labels: None,
        },
    )?;
    Ok(y)
}

/// Per-timestep `error,anomaly` rows. The threshold is either given or fit
/// to the input's own errors at `anomaly_ratio`.
pub fn cmd_detect(o: &InferOptions, anomaly_ratio: Option<Scalar>, threshold: Option<Scalar>) -> Result<Vec<bool>> {
    let (model, source, table) = infer_setup(o)?;
    let norm = o.normalize.unwrap_or(TaskKind::Anomaly.normalizes_by_default());
    let errors = reconstruction_errors(&model, &source, &as_batch(&table.values)?, norm)?.remove(0);
    let thr = match (threshold, anomaly_ratio) {
        (Some(t), _) => AnomalyThreshold {
            threshold: t,
            ratio: anomaly_ratio.unwrap_or(0.0),
        },
        (None, Some(r)) => fit_anomaly_threshold(&errors, r)?,
        (None, None) => return Err(UnitsError::Usage("detect needs --anomaly-ratio or --threshold".into())),
    };
    let flags = thr.flag(&errors);
    let rows: Vec<[String; 2]> = errors
        .iter()
        .zip(&flags)
        .map(|(e, f)| [e.to_string(), u8::from(*f).to_string()])
        .collect();
    write_rows(&o.out.join(ANOMALY_FILE), &["error", "anomaly"], &rows)?;
    Ok(flags)
}

/// Square cosine-similarity matrix of mean prompt tokens per source.
pub fn cmd_analyze_prompts(checkpoint_path: &Path, out: &Path) -> Result<(Vec<String>, Vec<Vec<Scalar>>)> {
    let model = checkpoint::load(checkpoint_path, None)?;
    let (names, sim) = prompt_similarity(&model)?;
    let mut header = vec!["source"];
    header.extend(names.iter().map(String::as_str));
    let rows: Vec<Vec<String>> = names
        .iter()
        .zip(&sim)
        .map(|(n, row)| std::iter::once(n.clone()).chain(row.iter().map(|x| x.to_string())).collect())
        .collect();
    write_rows(&out.join(SIMILARITY_FILE), &header, &rows)?;
    Ok((names, sim))
}
