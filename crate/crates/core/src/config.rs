//! Experiment configuration files (TOML) and dotted-path overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{BiasSpec, DEFAULT_BACKGROUND_THRESHOLD};
use crate::incremental::{ClassOrder, IncrementalConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid value for {field}: {message}")]
    Invalid { field: String, message: String },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

fn invalid(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.to_string(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// One class group per stage, as given by `plan`.
    #[default]
    Incremental,
    /// A single stage holding every class.
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxSpec {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    pub correlation: f64,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    /// Keep only the first `n` samples of every class in each split.
    #[serde(default)]
    pub samples_per_class: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

fn default_threshold() -> f64 {
    DEFAULT_BACKGROUND_THRESHOLD
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSpec {
    pub train: PathBuf,
    pub test: PathBuf,
    pub y_col: String,
    pub g_col: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Synthetic(BiasSpec),
    Idx(IdxSpec),
    Csv(CsvSpec),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanSpec {
    #[serde(default = "default_classes_per_stage")]
    pub classes_per_stage: usize,
    #[serde(default)]
    pub order: ClassOrder,
}

fn default_classes_per_stage() -> usize {
    2
}

impl Default for PlanSpec {
    fn default() -> Self {
        PlanSpec {
            classes_per_stage: default_classes_per_stage(),
            order: ClassOrder::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Training seed; copied into `model.train.seed`.
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub mode: Mode,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub plan: PlanSpec,
    pub model: IncrementalConfig,
    /// Directory that relative input paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.model.train.seed = cfg.seed;
        Ok(cfg)
    }

    pub fn from_value(value: toml::Value) -> Result<Self> {
        let mut cfg: ExperimentConfig = value.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.model.train.seed = cfg.seed;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut cfg = ExperimentConfig::from_toml_str(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn to_value(&self) -> toml::Value {
        toml::Value::try_from(self).expect("config serializes to TOML")
    }

    /// Resolves an input path against the config file's directory.
    pub fn input_path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.output_dir.as_os_str().is_empty() {
            return Err(invalid("output_dir", "must not be empty"));
        }
        if self.seed > i64::MAX as u64 {
            return Err(invalid("seed", "must fit in a signed 64-bit integer"));
        }
        if self.mode == Mode::Incremental && self.plan.classes_per_stage == 0 {
            return Err(invalid("plan.classes_per_stage", "must be positive"));
        }
        self.model.validate().map_err(|e| invalid("model", e.to_string()))?;
        match &self.dataset {
            DatasetSpec::Synthetic(spec) => spec.validate().map_err(|e| invalid("dataset", e.to_string()))?,
            DatasetSpec::Idx(spec) => {
                if !(0.0..=1.0).contains(&spec.correlation) {
                    return Err(invalid("dataset.correlation", "must lie in [0, 1]"));
                }
                if !(0.0..=1.0).contains(&spec.threshold) {
                    return Err(invalid("dataset.threshold", "must lie in [0, 1]"));
                }
                for (name, p) in [
                    ("dataset.train_images", &spec.train_images),
                    ("dataset.train_labels", &spec.train_labels),
                    ("dataset.test_images", &spec.test_images),
                    ("dataset.test_labels", &spec.test_labels),
                ] {
                    self.require_file(name, p)?;
                }
            }
            DatasetSpec::Csv(spec) => {
                self.require_file("dataset.train", &spec.train)?;
                self.require_file("dataset.test", &spec.test)?;
            }
        }
        Ok(())
    }

    fn require_file(&self, field: &str, p: &Path) -> Result<()> {
        let full = self.input_path(p);
        if full.is_file() {
            Ok(())
        } else {
            Err(invalid(field, format!("file {} does not exist", full.display())))
        }
    }
}

/// Parses an override literal: integer, float, boolean, or bare string.
pub fn parse_literal(raw: &str) -> toml::Value {
    let raw = raw.trim();
    if let Ok(i) = raw.parse::<i64>() {
        toml::Value::Integer(i)
    } else if let Ok(f) = raw.parse::<f64>() {
        toml::Value::Float(f)
    } else if let Ok(b) = raw.parse::<bool>() {
        toml::Value::Boolean(b)
    } else {
        toml::Value::String(raw.to_string())
    }
}

/// Replaces the value at a dotted `path`, which must already exist. Integers
/// written into float fields are widened.
pub fn set_path(root: &mut toml::Value, path: &str, value: toml::Value) -> Result<()> {
    let mut node = root;
    for key in path.split('.') {
        node = node
            .as_table_mut()
            .and_then(|t| t.get_mut(key))
            .ok_or_else(|| ConfigError::UnknownKey(path.to_string()))?;
    }
    *node = match (&*node, value) {
        (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
        (_, v) => v,
    };
    Ok(())
}

/// One axis of an ablation grid: `path=v1,v2,...`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridAxis {
    pub path: String,
    pub values: Vec<String>,
}

impl std::str::FromStr for GridAxis {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self> {
        let (path, values) = s
            .split_once('=')
            .ok_or_else(|| ConfigError::Parse(format!("grid axis {s:?} is not path=v1,v2")))?;
        let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
        if path.trim().is_empty() || values.is_empty() {
            return Err(ConfigError::Parse(format!("grid axis {s:?} needs a path and values")));
        }
        Ok(GridAxis {
            path: path.trim().to_string(),
            values,
        })
    }
}

/// Cross product of the axes, first axis varying slowest. An empty grid
/// yields a single empty cell.
pub fn grid_cells(axes: &[GridAxis]) -> Vec<Vec<(String, String)>> {
    let mut cells = vec![Vec::new()];
    for axis in axes {
        let mut next = Vec::with_capacity(cells.len() * axis.values.len());
        for cell in &cells {
            for v in &axis.values {
                let mut c = cell.clone();
                c.push((axis.path.clone(), v.clone()));
                next.push(c);
            }
        }
        cells = next;
    }
    cells
}
