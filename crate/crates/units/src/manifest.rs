//! Dataset manifests (TOML). Each `[[dataset]]` names a task and either a
//! CSV file with a windowing rule or a synthetic generator:
//!
//! ```toml
//! [[dataset]]
//! name = "sine_a"
//! kind = "forecast"          # forecast | classify | impute | anomaly
//! source = "sine"            # token-sharing key, defaults to name
//! horizon_tokens = 2
//! [dataset.generator]
//! kind = "sine_forecast"     # sine_forecast | two_class | spike_anomaly | impute_sine
//! seed = 1
//! samples = 128
//! length = 64
//! horizon = 16
//!
//! [[dataset]]
//! name = "plant"
//! kind = "anomaly"
//! anomaly_ratio = 0.02
//! file = "plant.csv"         # relative to the manifest
//! columns = ["a", "b"]       # variable columns, default all but `label`
//! label_column = "label"
//! [dataset.windows]
//! length = 64
//! stride = 16
//! splits = { train = 0.7, val = 0.1, test = 0.2 }
//! ```

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use units_core::data::{make_synthetic_split, windowed_datasets, Split, SyntheticKind, SyntheticParams, TimeSeriesDataset, Windowing};
use units_core::tasks::{TaskKind, TaskSpec};
use units_core::Scalar;

use crate::csvio::read_table;
use crate::error::{Result, UnitsError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub kind: SyntheticKind,
    #[serde(default)]
    pub seed: u64,
    /// Samples in each of val and test; defaults to a quarter of `samples`.
    #[serde(default)]
    pub eval_samples: Option<usize>,
    #[serde(flatten)]
    pub params: SyntheticParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetEntry {
    pub name: String,
    pub kind: TaskKind,
    #[serde(default)]
    pub source: Option<String>,
    #[serde(default)]
    pub horizon_tokens: Option<usize>,
    #[serde(default)]
    pub n_classes: Option<usize>,
    #[serde(default)]
    pub anomaly_ratio: Option<Scalar>,
    #[serde(default)]
    pub weight: Option<Scalar>,
    #[serde(default)]
    pub normalize: Option<bool>,
    #[serde(default)]
    pub file: Option<PathBuf>,
    #[serde(default)]
    pub columns: Option<Vec<String>>,
    #[serde(default)]
    pub label_column: Option<String>,
    #[serde(default)]
    pub windows: Option<Windowing>,
    #[serde(default)]
    pub generator: Option<GeneratorSpec>,
}

impl DatasetEntry {
    pub fn task(&self) -> TaskSpec {
        TaskSpec {
            name: self.name.clone(),
            source: self.source.clone().unwrap_or_else(|| self.name.clone()),
            kind: self.kind,
            horizon_tokens: self.horizon_tokens,
            n_classes: self.n_classes,
            anomaly_ratio: self.anomaly_ratio,
            weight: self.weight.unwrap_or(1.0),
            normalize: self.normalize,
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| UnitsError::Usage(format!("dataset `{}`: {m}", self.name));
        self.task().validate()?;
        match (&self.file, &self.generator) {
            (Some(_), None) => {
                let w = self.windows.as_ref().ok_or_else(|| bad("a file dataset needs [windows]".into()))?;
                w.splits.validate()?;
            }
            (None, Some(g)) => {
                if g.kind.task_kind() != self.kind {
                    return Err(bad(format!("generator {:?} does not produce {:?} data", g.kind, self.kind)));
                }
            }
            _ => return Err(bad("exactly one of `file` and `generator` must be set".into())),
        }
        Ok(())
    }

    /// Train, val and test datasets. File paths resolve against `base`.
    pub fn load(&self, base: &Path, seed: u64) -> Result<[TimeSeriesDataset; 3]> {
        let task = self.task();
        if let Some(g) = &self.generator {
            let eval = SyntheticParams {
                samples: g.eval_samples.unwrap_or((g.params.samples / 4).max(1)),
                ..g.params
            };
            let split = |s, p: &SyntheticParams| make_synthetic_split(task.clone(), g.kind, g.seed, s, p);
            return Ok([split(Split::Train, &g.params)?, split(Split::Val, &eval)?, split(Split::Test, &eval)?]);
        }
        let file = self.file.as_ref().expect("validated");
        let path = base.join(file);
        let table = read_table(&path, self.columns.as_deref(), self.label_column.as_deref())?;
        let win = self.windows.as_ref().expect("validated");
        Ok(windowed_datasets(&table.values, table.labels.as_deref(), &task, win, seed)?)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    #[serde(rename = "dataset", default)]
    pub datasets: Vec<DatasetEntry>,
}

impl DatasetManifest {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let m: DatasetManifest = toml::from_str(text).map_err(|e| UnitsError::Toml {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        m.validate()?;
        Ok(m)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| UnitsError::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        if self.datasets.is_empty() {
            return Err(UnitsError::Usage("manifest lists no datasets".into()));
        }
        let mut seen = BTreeSet::new();
        for d in &self.datasets {
            if !seen.insert(d.name.as_str()) {
                return Err(UnitsError::Usage(format!("dataset name `{}` appears twice", d.name)));
            }
            d.validate()?;
        }
        Ok(())
    }

    pub fn tasks(&self) -> Vec<TaskSpec> {
        self.datasets.iter().map(DatasetEntry::task).collect()
    }
}

/// Loaded splits of every manifest entry, in manifest order.
#[derive(Clone, Debug)]
pub struct LoadedData {
    pub train: Vec<TimeSeriesDataset>,
    pub val: Vec<TimeSeriesDataset>,
    pub test: Vec<TimeSeriesDataset>,
}

pub fn load_all(manifest: &DatasetManifest, base: &Path, seed: u64) -> Result<LoadedData> {
    let mut out = LoadedData {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for d in &manifest.datasets {
        let [tr, va, te] = d.load(base, seed)?;
        if tr.is_empty() {
            return Err(units_core::Error::Data(format!("dataset `{}` has no training windows", d.name)).into());
        }
        out.train.push(tr);
        out.val.push(va);
        out.test.push(te);
    }
    Ok(out)
}
