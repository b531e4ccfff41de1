//! The JSON run configuration shared by every command.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{DatasetConfig, Split};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::metrics::MetricsOptions;
use crate::model::ArchConfig;
use crate::train::{AblationSpec, TrainConfig};

pub const SEED_ENV: &str = "CGMM_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub execution: Execution,
    pub dataset: DatasetConfig,
    pub model: ArchConfig,
    pub train: TrainConfig,
    /// Variant trained by `train` and applied by `eval`.
    pub ablation: AblationSpec,
    /// Variants run by `ablate`.
    pub grid: Vec<AblationSpec>,
    /// Seeds run by `ablate`; empty means just `seed`.
    pub seeds: Vec<u64>,
    pub metrics: MetricsOptions,
    /// Splits scored by `eval`.
    pub splits: Vec<Split>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            execution: Execution::default(),
            dataset: DatasetConfig::default(),
            model: ArchConfig::default(),
            train: TrainConfig::default(),
            ablation: AblationSpec::full(),
            grid: AblationSpec::default_grid(),
            seeds: Vec::new(),
            metrics: MetricsOptions::default(),
            splits: vec![Split::Standard, Split::Generalization],
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Load {
            path: origin.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    /// Applies overrides (explicit flag first, then the environment) and
    /// materializes derived defaults, so the echoed config is self-contained.
    pub fn resolve(mut self, seed_flag: Option<u64>, env_seed: Option<&str>) -> Result<Self> {
        if let Some(s) = seed_flag {
            self.seed = s;
        } else if let Some(text) = env_seed {
            self.seed = text
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}='{text}' is not an unsigned integer")))?;
        }
        if self.seeds.is_empty() {
            self.seeds = vec![self.seed];
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.train.validate()?;
        self.model.roi.validate()?;
        if self.grid.is_empty() {
            return Err(Error::Config("ablation grid is empty".into()));
        }
        let mut names: Vec<&str> = self.grid.iter().map(|s| s.name.as_str()).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Config(format!("ablation name '{}' is used twice", w[0])));
        }
        if self.splits.is_empty() {
            return Err(Error::Config("no evaluation splits".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
