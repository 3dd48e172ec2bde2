//! Batch orchestration: configuration, pre-training, experiment grids and
//! post-hoc analysis.

mod analyze;
mod io;
mod run;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use analyze::{cmd_analyze, AnalysisSummary, DriftRow, RecallRow};
pub use io::write_atomic;
pub use run::{aggregate, aggregate_csv, cmd_pretrain, cmd_run, load_base, AggregateRow, RunSummary};

use crate::error::{config_err, Error, Result};
use crate::harness::{Framework, ModelVariant, TrainConfig};
use crate::tasks::{Formulation, SuiteConfig};
use crate::transformer::{MlmConfig, ModelConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub out: PathBuf,
    /// Base checkpoint; `<out>/base.ncla` when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    pub seeds: Vec<u64>,
    pub models: Vec<ModelVariant>,
    pub frameworks: Vec<Framework>,
    pub jobs: usize,
    pub suite_seed: u64,
    pub suite: SuiteConfig,
    pub model: ModelConfig,
    pub pretrain: MlmConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            out: PathBuf::from("runs"),
            checkpoint: None,
            seeds: vec![0, 1, 2, 3, 4],
            models: vec![ModelVariant::Ft, ModelVariant::NeiAttn],
            frameworks: vec![Framework::Vanilla],
            jobs: 1,
            suite_seed: 0,
            suite: SuiteConfig::default(),
            model: ModelConfig::default(),
            pretrain: MlmConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

/// Command-line values that take precedence over the configuration file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seeds: Vec<u64>,
    pub out: Option<PathBuf>,
    pub jobs: Option<usize>,
    pub frameworks: Vec<Framework>,
    pub models: Vec<ModelVariant>,
    pub formulation: Option<Formulation>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Reads `path`, or returns the defaults when there is none.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| config_err(format!("cannot read {}: {e}", p.display())))?;
                Self::from_toml(&text)
            }
            None => Ok(Self::default()),
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        if !o.seeds.is_empty() {
            self.seeds = o.seeds.clone();
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        if let Some(jobs) = o.jobs {
            self.jobs = jobs;
        }
        if !o.frameworks.is_empty() {
            self.frameworks = o.frameworks.clone();
        }
        if !o.models.is_empty() {
            self.models = o.models.clone();
        }
        if let Some(f) = o.formulation {
            self.train.formulation = f;
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.jobs == 0 {
            return Err(config_err("jobs must be at least 1"));
        }
        if self.seeds.is_empty() || self.models.is_empty() || self.frameworks.is_empty() {
            return Err(config_err("seeds, models and frameworks must be nonempty"));
        }
        self.suite.validate()?;
        self.model.validate()?;
        self.train.validate()
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out.join("base.ncla"))
    }

    /// The vocabulary file next to the checkpoint.
    pub fn vocab_path(&self) -> PathBuf {
        self.checkpoint_path().with_extension("vocab")
    }
}
