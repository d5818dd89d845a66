//! TOML experiment configuration with validation and stable hashing.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{ModelSpec, Optimizer, TrainConfig};
use crate::runner::{AcquisitionKind, AspestConfig, MetricTargets};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Sr,
    De,
    Aspest,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Method::Sr => write!(f, "sr"),
            Method::De => write!(f, "de"),
            Method::Aspest => write!(f, "aspest"),
        }
    }
}

/// How the per-metric std over seeds is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StdMode {
    #[default]
    Population,
    Sample,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Gaussian-mixture benchmark with a controlled source/target shift.
    Synthetic {
        classes: usize,
        features: usize,
        n_source: usize,
        n_target: usize,
        shift_magnitude: f64,
        #[serde(default = "default_synth_val_fraction")]
        val_fraction: f64,
    },
    /// Labeled CSV carved into source/target splits by LOF outlier score.
    Csv {
        path: PathBuf,
        label_column: String,
        #[serde(default)]
        ignore_columns: Vec<String>,
        #[serde(default = "default_delimiter")]
        delimiter: char,
        #[serde(default = "default_contamination")]
        contamination: f64,
        #[serde(default = "default_lof_k")]
        lof_k: usize,
        #[serde(default = "default_csv_val_fraction")]
        val_fraction: f64,
    },
}

fn default_synth_val_fraction() -> f64 {
    0.1
}

fn default_contamination() -> f64 {
    0.2
}

fn default_lof_k() -> usize {
    20
}

fn default_csv_val_fraction() -> f64 {
    0.125
}

fn default_delimiter() -> char {
    ','
}

/// Source training plus the shared fine-tuning protocol.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainProtocol {
    pub source_epochs: usize,
    pub source_learning_rate: f64,
    pub fine_tune_learning_rate: f64,
    pub batch_size: usize,
    #[serde(default = "default_min_epochs")]
    pub min_epochs: usize,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default)]
    pub optimizer: Optimizer,
}

fn default_min_epochs() -> usize {
    50
}

fn default_max_epochs() -> usize {
    200
}

fn default_patience() -> usize {
    10
}

impl TrainProtocol {
    pub fn fine_tune_config(&self, lambda: f64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.fine_tune_learning_rate,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            min_epochs: self.min_epochs,
            patience: self.patience,
            lambda,
            optimizer: self.optimizer,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    pub method: Method,
    /// Ignored (with a warning) for the checkpoint-ensemble method, whose
    /// selection is fixed to the ensemble margin.
    #[serde(default)]
    pub acquisition: Option<AcquisitionKind>,
    pub budgets: Vec<usize>,
    pub seeds: Vec<u64>,
    #[serde(default = "default_target")]
    pub target_accuracy: f64,
    #[serde(default = "default_target")]
    pub target_coverage: f64,
    #[serde(default = "default_clue_temperature")]
    pub clue_temperature: f64,
    #[serde(default)]
    pub std_mode: StdMode,
    pub dataset: DatasetConfig,
    pub model: ModelSpec,
    pub train: TrainProtocol,
    #[serde(default)]
    pub aspest: AspestConfig,
}

fn default_target() -> f64 {
    0.8
}

fn default_clue_temperature() -> f64 {
    1.0
}

impl ExperimentConfig {
    /// Parse and validate a TOML config file. Unknown keys, invalid enums
    /// and inconsistent budget/round combinations are rejected; unset
    /// ASPEST fields fall back to the reference defaults.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        cfg.validate()?;
        cfg.normalize();
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.budgets.is_empty() {
            return Err(Error::Config("budgets must be non-empty".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must be non-empty".into()));
        }
        for &m in &self.budgets {
            if m > 0 && m < self.aspest.rounds {
                return Err(Error::Config(format!(
                    "budget {m} is smaller than the number of rounds {}",
                    self.aspest.rounds
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.target_accuracy)
            || !(0.0..=1.0).contains(&self.target_coverage)
        {
            return Err(Error::Config("metric targets must lie in [0,1]".into()));
        }
        if self.clue_temperature.is_nan() || self.clue_temperature <= 0.0 {
            return Err(Error::Config("clue_temperature must be positive".into()));
        }
        self.aspest.validate()?;
        self.train.fine_tune_config(self.aspest.lambda).validate()?;
        match &self.dataset {
            DatasetConfig::Synthetic {
                classes, features, ..
            } => {
                if *classes < 2 || *features == 0 {
                    return Err(Error::Config("synthetic dataset needs >=2 classes, >=1 feature".into()));
                }
            }
            DatasetConfig::Csv {
                contamination,
                lof_k,
                val_fraction,
                ..
            } => {
                if !(*contamination > 0.0 && *contamination < 1.0) {
                    return Err(Error::Config("contamination must be in (0,1)".into()));
                }
                if *lof_k == 0 {
                    return Err(Error::Config("lof_k must be >= 1".into()));
                }
                if !(*val_fraction > 0.0 && *val_fraction < 1.0) {
                    return Err(Error::Config("val_fraction must be in (0,1)".into()));
                }
            }
        }
        Ok(())
    }

    fn normalize(&mut self) {
        if self.method == Method::Aspest && self.acquisition.is_some() {
            log::warn!(
                "method 'aspest' selects by ensemble margin; ignoring acquisition = {:?}",
                self.acquisition
            );
            self.acquisition = None;
        }
    }

    /// Effective acquisition: the configured one, margin by default, and
    /// always margin for the checkpoint-ensemble method.
    pub fn effective_acquisition(&self) -> AcquisitionKind {
        if self.method == Method::Aspest {
            AcquisitionKind::Margin
        } else {
            self.acquisition.unwrap_or(AcquisitionKind::Margin)
        }
    }

    pub fn metric_targets(&self) -> MetricTargets {
        MetricTargets {
            accuracy: self.target_accuracy,
            coverage: self.target_coverage,
        }
    }

    /// Stable hash over every semantically meaningful field (the display
    /// name is excluded).
    pub fn config_hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = value.as_object_mut() {
            map.remove("name");
        }
        sha_hex(&value.to_string())
    }

    /// Hash of the dataset portion only, used to reject aggregation across
    /// different datasets.
    pub fn dataset_hash(&self) -> String {
        let value = serde_json::to_value(&self.dataset).expect("dataset config serializes");
        sha_hex(&value.to_string())
    }
}

fn sha_hex(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
