//! Config-file schemas for the pipeline commands. All structures reject
//! unknown keys, so a typo in a config file is an error rather than a
//! silently ignored setting.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::model::ModelKind;
use crate::report::BenchmarkConfig;
use crate::sim::SimConfig;
use crate::train::TrainConfig;

/// `train` command config: where the dataset lives plus the training
/// hyperparameters. A missing seed falls back to `--seed` or the
/// `SYMPTOM_BENCH_SEED` environment variable.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFileConfig {
    pub model_kind: ModelKind,
    pub dataset: PathBuf,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub beta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<BTreeMap<String, Vec<f64>>>,
    /// Optional override of the two stack channel widths.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channels: Option<(usize, usize)>,
    /// Epochs over which the KL weight ramps from 0 to `beta`.
    #[serde(default = "default_kl_warmup")]
    pub kl_warmup_epochs: usize,
}

fn default_kl_warmup() -> usize {
    10
}

impl TrainFileConfig {
    pub fn to_train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            model_kind: self.model_kind,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            beta: self.beta,
            seed,
            grid: self.grid.clone(),
            channels: self.channels,
            kl_warmup_epochs: self.kl_warmup_epochs,
        }
    }
}

/// `evaluate` command config.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalFileConfig {
    pub dataset: PathBuf,
    pub checkpoint: PathBuf,
    /// Optional kind check against the checkpoint.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_kind: Option<ModelKind>,
}

/// `export-observations` command config.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportFileConfig {
    pub dataset: PathBuf,
    pub scores: PathBuf,
    pub thresholds: PathBuf,
}

/// `benchmark` command config: the simulated dataset plus the benchmark
/// budgets.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkFileConfig {
    pub benchmark: BenchmarkConfig,
    pub simulator: SimConfig,
}

impl Default for BenchmarkFileConfig {
    fn default() -> Self {
        BenchmarkFileConfig {
            benchmark: BenchmarkConfig::default(),
            simulator: SimConfig::default(),
        }
    }
}

/// Parse a TOML config, mapping syntax or schema problems to a validation
/// error naming the file.
pub fn parse_toml<T: serde::de::DeserializeOwned>(text: &str, file: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| CoreError::Schema {
        file: file.to_string(),
        message: e.to_string(),
    })
}

/// Extract an optional top-level `seed` (or `simulator.seed` for benchmark
/// configs) without fully deserializing.
pub fn seed_in_toml(text: &str) -> Option<u64> {
    let value: toml::Value = text.parse().ok()?;
    if let Some(seed) = value.get("seed").and_then(|v| v.as_integer()) {
        return Some(seed as u64);
    }
    value
        .get("simulator")
        .and_then(|s| s.get("seed"))
        .and_then(|v| v.as_integer())
        .map(|s| s as u64)
}

/// Inject a resolved seed into a raw TOML document before deserialization
/// (top-level `seed`, or `simulator.seed` when a simulator table exists).
pub fn override_seed_in_toml(text: &str, seed: u64, file: &str) -> Result<String> {
    let mut value: toml::Value = text.parse().map_err(|e: toml::de::Error| CoreError::Schema {
        file: file.to_string(),
        message: e.to_string(),
    })?;
    match &mut value {
        toml::Value::Table(table) => {
            if let Some(toml::Value::Table(sim)) = table.get_mut("simulator") {
                sim.insert("seed".into(), toml::Value::Integer(seed as i64));
            } else {
                table.insert("seed".into(), toml::Value::Integer(seed as i64));
            }
        }
        _ => {
            return Err(CoreError::Schema {
                file: file.to_string(),
                message: "config root must be a table".into(),
            })
        }
    }
    toml::to_string(&value).map_err(|e| CoreError::Schema {
        file: file.to_string(),
        message: e.to_string(),
    })
}
