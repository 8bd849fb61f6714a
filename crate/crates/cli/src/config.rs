//! TOML config loading with defaults, unknown-key rejection and
//! environment overrides.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use esma_core::evaluation::{default_desk_architectures, default_desk_training, DatasetSpec, EsmaSetup, WatermarkScenario, WatermarkSweepConfig};
use esma_core::nn::{ArchSpec, TrainConfig};
use esma_core::toy_lab::{default_toy_training, ToyTask};
use esma_core::watermark::HiddenConfig;

pub const ENV_CACHE_DIR: &str = "ESMA_CACHE_DIR";
pub const ENV_SEED: &str = "ESMA_SEED";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("config syntax error: {0}")]
    Syntax(String),
    #[error("unknown config keys: {}", .0.join(", "))]
    UnknownKeys(Vec<String>),
    #[error("invalid config value at `{path}`: {message}")]
    Invalid { path: String, message: String },
    #[error("invalid config: {0}")]
    Semantic(String),
}

fn unknown_field(message: &str) -> Option<String> {
    let rest = message.split("unknown field `").nth(1)?;
    Some(rest.split('`').next()?.to_string())
}

/// Removes the first `field` key found under `path` (depth first) and
/// returns its full dotted path.
fn remove_key(root: &mut toml::Table, path: &[String], field: &str) -> Option<String> {
    fn walk(table: &mut toml::Table, prefix: &str, field: &str) -> Option<String> {
        if table.remove(field).is_some() {
            return Some(if prefix.is_empty() { field.to_string() } else { format!("{prefix}.{field}") });
        }
        for (k, v) in table.iter_mut() {
            let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            match v {
                toml::Value::Table(t) => {
                    if let Some(found) = walk(t, &p, field) {
                        return Some(found);
                    }
                }
                toml::Value::Array(items) => {
                    for (i, item) in items.iter_mut().enumerate() {
                        if let toml::Value::Table(t) = item {
                            if let Some(found) = walk(t, &format!("{p}[{i}]"), field) {
                                return Some(found);
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        None
    }
    let mut depth = 0;
    let mut probe: &toml::Table = root;
    for seg in path {
        match probe.get(seg.as_str()) {
            Some(toml::Value::Table(t)) if seg != field => {
                probe = t;
                depth += 1;
            }
            _ => break,
        }
    }
    let mut node = root;
    for seg in &path[..depth] {
        node = node.get_mut(seg.as_str()).and_then(toml::Value::as_table_mut).expect("checked above");
    }
    let prefix = path[..depth].join(".");
    walk(node, &prefix, field)
}

/// Parses `text` into `T`, filling defaults. Every unknown key is collected
/// before failing.
pub fn parse_config<T: DeserializeOwned>(text: &str) -> Result<T, ConfigError> {
    let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Syntax(e.to_string()))?;
    let mut unknown = Vec::new();
    loop {
        match serde_path_to_error::deserialize::<_, T>(toml::Value::Table(table.clone())) {
            Ok(v) if unknown.is_empty() => return Ok(v),
            Ok(_) => return Err(ConfigError::UnknownKeys(unknown)),
            Err(e) => {
                let message = e.inner().to_string();
                let segments: Vec<String> = e.path().iter().map(|s| s.to_string()).collect();
                match unknown_field(&message).and_then(|f| remove_key(&mut table, &segments, &f)) {
                    Some(key) => unknown.push(key),
                    None if !unknown.is_empty() => return Err(ConfigError::UnknownKeys(unknown)),
                    None => {
                        return Err(ConfigError::Invalid {
                            path: e.path().to_string(),
                            message,
                        })
                    }
                }
            }
        }
    }
}

pub fn load_config<T: DeserializeOwned>(path: &Path) -> Result<T, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_config(&text)
}

pub fn to_toml<T: Serialize>(config: &T) -> Result<String, ConfigError> {
    toml::to_string_pretty(config).map_err(|e| ConfigError::Semantic(e.to_string()))
}

/// Seed from the flag, else from `ESMA_SEED`.
pub fn seed_override(flag: Option<u64>) -> Result<Option<u64>, ConfigError> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var(ENV_SEED) {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| ConfigError::Semantic(format!("{ENV_SEED}={s} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

/// Config of the `toy-density` subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyDensityConfig {
    pub task: ToyTask,
    pub radius: f64,
    pub n_bins: usize,
    /// Points per side of the output-difference grid.
    pub grid_resolution: usize,
    pub training: TrainConfig,
}

impl Default for ToyDensityConfig {
    fn default() -> Self {
        Self {
            task: ToyTask::default(),
            radius: 0.4,
            n_bins: 10,
            grid_resolution: 40,
            training: default_toy_training(),
        }
    }
}

impl ToyDensityConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.task.validate().map_err(|e| ConfigError::Semantic(e.to_string()))?;
        if !(self.radius > 0.0) || self.n_bins < 2 || self.grid_resolution < 2 {
            return Err(ConfigError::Semantic("radius must be positive, n_bins and grid_resolution at least 2".into()));
        }
        Ok(())
    }
}

fn semantic(e: impl std::fmt::Display) -> ConfigError {
    ConfigError::Semantic(e.to_string())
}

/// Config shared by `screen-anchors`, `pretrain-embeddings`, `train-esma`,
/// `train-bem-esma` and `attack`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackPipelineConfig {
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub surrogate: ArchSpec,
    pub training: TrainConfig,
    pub validation_fraction: f64,
    pub esma: EsmaSetup,
    /// Fixed target class for `attack`; random per image when absent.
    pub target: Option<usize>,
}

impl Default for AttackPipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: DatasetSpec::default(),
            surrogate: default_desk_architectures().remove(0),
            training: default_desk_training(),
            validation_fraction: 0.2,
            esma: EsmaSetup::default(),
            target: None,
        }
    }
}

impl AttackPipelineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(semantic("validation_fraction must lie in (0, 1)"));
        }
        if self.esma.q == 0 {
            return Err(semantic("esma.q must be at least 1"));
        }
        self.esma.generator.validate().map_err(semantic)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WatermarkTrainConfig {
    pub seed: u64,
    pub hidden: HiddenConfig,
    pub covers: usize,
    pub validation_covers: usize,
    pub image_size: usize,
}

impl Default for WatermarkTrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            hidden: HiddenConfig {
                epochs: 30,
                ..HiddenConfig::default()
            },
            covers: 600,
            validation_covers: 100,
            image_size: 16,
        }
    }
}

impl WatermarkTrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.covers == 0 || self.validation_covers == 0 || self.image_size < 8 {
            return Err(semantic("need covers, validation covers and an image size of at least 8"));
        }
        self.hidden.validate().map_err(semantic)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolsConfig {
    pub seed: u64,
    pub enterprises: usize,
    pub pool_size: usize,
    pub active_messages: usize,
    pub message_length: usize,
}

impl Default for PoolsConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            enterprises: 4,
            pool_size: 1,
            active_messages: 1,
            message_length: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WatermarkEvalConfig {
    pub scenario: WatermarkScenario,
    pub sweep: WatermarkSweepConfig,
}

impl Default for WatermarkEvalConfig {
    fn default() -> Self {
        Self {
            scenario: WatermarkScenario::Exp1,
            sweep: WatermarkSweepConfig::default(),
        }
    }
}

impl WatermarkEvalConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.sweep.validate().map_err(semantic)
    }
}
