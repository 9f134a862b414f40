//! Run configuration read from JSON.
//!
//! Every field has a default and unknown keys are rejected, so a misspelt
//! key fails instead of silently falling back to a default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{generate_synthetic_pairs, load_image_directory, Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objective::LossConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub output: OutputConfig,
}

/// Where pairs come from. Give at most one of `synthetic` and `directory`;
/// with neither, the default synthetic source is used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub directory: Option<PathBuf>,
    /// Leading fraction of locations used for training; the rest is held out.
    pub train_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            synthetic: None,
            directory: None,
            train_fraction: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Directory(PathBuf),
}

impl DataConfig {
    pub fn source(&self) -> Result<DataSource> {
        match (&self.synthetic, &self.directory) {
            (Some(_), Some(_)) => Err(Error::Config(
                "data: give either \"synthetic\" or \"directory\", not both".into(),
            )),
            (_, Some(dir)) => Ok(DataSource::Directory(dir.clone())),
            (spec, None) => Ok(DataSource::Synthetic(spec.clone().unwrap_or_default())),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.source()?;
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "train_fraction must be in (0, 1), got {}",
                self.train_fraction
            )));
        }
        Ok(())
    }

    /// All pairs, in location order. Relative directories resolve against
    /// `base`.
    pub fn load(&self, base: &Path) -> Result<Dataset> {
        match self.source()? {
            DataSource::Synthetic(spec) => generate_synthetic_pairs(&spec),
            DataSource::Directory(dir) => load_image_directory(&base.join(dir)),
        }
    }

    /// Number of training locations out of `n`.
    pub fn n_train(&self, n: usize) -> usize {
        (self.train_fraction * n as f64).floor() as usize
    }

    /// Training and held-out splits, by disjoint location ranges.
    pub fn load_split(&self, base: &Path) -> Result<(Dataset, Dataset)> {
        let all = self.load(base)?;
        let n_train = self.n_train(all.len());
        all.split(n_train)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub k_list: Vec<usize>,
    /// Extra top-p% levels; 1% and 10% are always reported.
    pub percent_list: Vec<f64>,
    /// Images embedded per forward pass.
    pub embed_batch: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            k_list: vec![1, 5, 10, 20, 40, 80],
            percent_list: vec![1.0, 10.0],
            embed_batch: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// Per-epoch loss CSV; defaults to the checkpoint path with a
    /// `.loss.csv` extension.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_log: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        self.data.validate()?;
        if self.eval.k_list.contains(&0) {
            return Err(Error::Config("eval k_list entries must be >= 1".into()));
        }
        if let Some(p) = self.eval.percent_list.iter().find(|&&p| !(p > 0.0 && p <= 100.0)) {
            return Err(Error::Config(format!("eval percent {p} is outside (0, 100]")));
        }
        if self.eval.embed_batch == 0 {
            return Err(Error::Config("eval embed_batch must be >= 1".into()));
        }
        Ok(())
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }
}
