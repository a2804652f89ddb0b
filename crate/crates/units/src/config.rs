//! Run configuration (TOML):
//!
//! ```toml
//! manifest = "manifest.toml"   # relative to this file
//! out = "runs/sup"
//! seed = 7
//!
//! [model]                      # defaults: 3 blocks, d = 64, patch 16, 4 heads, 10 prompt tokens
//! d = 32
//! patch = 8
//!
//! [training]                   # defaults: 1000 steps, batch 32, lr 3.2e-2, multistep
//! steps = 500
//! lr = 5e-3
//! schedule = "cosine"
//! [training.weights]
//! sine_a = 2.0
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use units_core::trainer::{Regime, TrainingConfig};
use units_core::ModelConfig;

use crate::error::{Result, UnitsError};
use crate::manifest::DatasetManifest;

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub manifest: PathBuf,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub training: TrainingConfig,
}

impl RunConfig {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| UnitsError::Toml {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    /// Reads a config and resolves the manifest path against the config's
    /// directory.
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| UnitsError::io(path, e))?;
        let mut c = Self::parse(&text, path)?;
        if c.manifest.is_relative() {
            if let Some(dir) = path.parent() {
                c.manifest = dir.join(&c.manifest);
            }
        }
        Ok(c)
    }

    /// Applies command-line overrides; the training seed follows the run seed.
    pub fn resolve(mut self, seed: Option<u64>, out: Option<&Path>, regime: Option<Regime>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(o) = out {
            self.out = o.to_path_buf();
        }
        if let Some(r) = regime {
            self.training.regime = r;
        }
        self.training.seed = self.seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.training.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| UnitsError::Usage(format!("cannot serialize config: {e}")))
    }

    pub fn manifest(&self) -> Result<DatasetManifest> {
        DatasetManifest::read(&self.manifest)
    }

    pub fn manifest_dir(&self) -> &Path {
        self.manifest.parent().unwrap_or(Path::new("."))
    }
}
