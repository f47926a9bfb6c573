//! Experiment configuration: one JSON document, optionally patched by
//! dotted-path overrides such as `pretrain.epochs=5`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::net::ArchConfig;
use crate::optim::TrainConfig;
use crate::rng::sha256_hex;
use crate::robust::{EpisodeConfig, SvmConfig};
use crate::shapes::{DatasetConfig, ShiftConfig};
use crate::wise::{check_grid, AccReference, SweepMode};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config does not parse: {0}")]
    Parse(String),
    #[error("bad override {0:?}: expected key.path=value")]
    Override(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub classes: Vec<usize>,
    pub per_class_train: usize,
    pub per_class_test: usize,
    pub shift: ShiftConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub alphas: Vec<f64>,
    pub modes: Vec<SweepMode>,
    #[serde(default = "default_drop_tol")]
    pub drop_tol: f64,
    #[serde(default)]
    pub acc_reference: AccReference,
}

fn default_drop_tol() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub arch: ArchConfig,
    pub source_data: DataSpec,
    pub target_data: DataSpec,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub probe: TrainConfig,
    #[serde(default)]
    pub svm: SvmConfig,
    #[serde(default)]
    pub fewshot: Option<EpisodeConfig>,
    pub sweep: SweepSpec,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

/// The configuration shipped as `configs/default.json`.
pub const DEFAULT_CONFIG: &str = include_str!("../../../configs/default.json");

/// Sets `path` (dot separated) inside a JSON object, creating objects as needed.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<(), ConfigError> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| ConfigError::Override(assignment.to_string()))?;
    if path.is_empty() || path.split('.').any(str::is_empty) {
        return Err(ConfigError::Override(assignment.to_string()));
    }
    let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = doc;
    let keys: Vec<&str> = path.split('.').collect();
    for key in &keys[..keys.len() - 1] {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| ConfigError::Override(assignment.to_string()))?;
        cur = obj.entry(key.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    let obj = cur
        .as_object_mut()
        .ok_or_else(|| ConfigError::Override(assignment.to_string()))?;
    obj.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

impl ExperimentConfig {
    pub fn from_json(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut doc: Value = serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: ExperimentConfig =
            serde_json::from_value(doc).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text, overrides)
    }

    pub fn shipped_default() -> Self {
        Self::from_json(DEFAULT_CONFIG, &[]).expect("shipped default config is valid")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.arch.validate().map_err(|e| invalid(&e))?;
        for (name, spec) in [("source_data", &self.source_data), ("target_data", &self.target_data)] {
            self.dataset_config(spec, 0)
                .validate()
                .map_err(|e| ConfigError::Invalid(format!("{name}: {e}")))?;
        }
        if self.source_data.classes.len() != self.arch.n_classes() {
            return Err(ConfigError::Invalid(format!(
                "arch has {} outputs but source_data has {} classes",
                self.arch.n_classes(),
                self.source_data.classes.len()
            )));
        }
        for (name, t) in [("pretrain", &self.pretrain), ("finetune", &self.finetune), ("probe", &self.probe)] {
            t.validate().map_err(|e| ConfigError::Invalid(format!("{name}: {e}")))?;
        }
        self.svm.validate().map_err(|e| invalid(&e))?;
        check_grid(&self.sweep.alphas).map_err(|e| invalid(&e))?;
        if self.sweep.modes.is_empty()
            || self.sweep.modes.iter().any(|m| !matches!(m, SweepMode::WiseFt | SweepMode::WiseFtLp))
        {
            return Err(ConfigError::Invalid("sweep.modes must list wise_ft and/or wise_ft_lp".into()));
        }
        if !(self.sweep.drop_tol >= 0.0) {
            return Err(ConfigError::Invalid("sweep.drop_tol must be >= 0".into()));
        }
        if self.seeds.is_empty() {
            return Err(ConfigError::Invalid("seeds must not be empty".into()));
        }
        Ok(())
    }

    pub fn dataset_config(&self, spec: &DataSpec, seed: u64) -> DatasetConfig {
        DatasetConfig {
            classes: spec.classes.clone(),
            per_class_train: spec.per_class_train,
            per_class_test: spec.per_class_test,
            n_points: self.arch.n_points,
            shift: spec.shift.clone(),
            seed,
        }
    }
}

/// Per-stage seed derived from the run seed, so that stages never share streams.
pub fn derive_seed(run_seed: u64, stage: &str) -> u64 {
    let h = sha256_hex(format!("{stage}/{run_seed}").as_bytes());
    u64::from_str_radix(&h[..16], 16).expect("hex digest")
}
