//! Layered run configuration: TOML file defaults, environment overrides
//! (prefix `ONOMA_`, path segments separated by `__`), then CLI flags.
//! The resolved config is echoed into every output directory.

use crate::data::DatasetConfig;
use crate::dsp::StftConfig;
use crate::model::ModelConfig;
use crate::training::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config file {path}: {message}")]
    File { path: String, message: String },
    #[error("environment override {var}: {message}")]
    Env { var: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

pub const ENV_PREFIX: &str = "ONOMA_";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Master seed; propagated to dataset and training unless those set
    /// their own in the config file.
    pub seed: u64,
    /// Root for all relative paths.
    pub workdir: PathBuf,
    /// Dataset tree location, relative to workdir.
    pub dataset_dir: PathBuf,
    /// Internal parallelism for rendering and evaluation; 0 = all cores.
    pub workers: usize,
    /// Griffin-Lim iterations when `--phase griffinlim` is selected.
    pub griffin_lim_iterations: usize,
    pub stft: StftConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub dataset: DatasetConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let seed = 0;
        Self {
            seed,
            workdir: PathBuf::from("."),
            dataset_dir: PathBuf::from("dataset"),
            workers: 0,
            griffin_lim_iterations: 100,
            stft: StftConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            dataset: DatasetConfig::toy(seed),
        }
    }
}

fn merge_toml(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge_toml(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn parse_env_value(raw: &str) -> toml::Value {
    if let Ok(i) = raw.parse::<i64>() {
        return toml::Value::Integer(i);
    }
    if let Ok(f) = raw.parse::<f64>() {
        return toml::Value::Float(f);
    }
    if let Ok(b) = raw.parse::<bool>() {
        return toml::Value::Boolean(b);
    }
    toml::Value::String(raw.to_string())
}

fn env_overrides(vars: impl Iterator<Item = (String, String)>) -> Result<toml::Value> {
    let mut table = toml::Value::Table(Default::default());
    for (key, raw) in vars {
        let Some(rest) = key.strip_prefix(ENV_PREFIX) else {
            continue;
        };
        let segments: Vec<String> = rest.split("__").map(|s| s.to_lowercase()).collect();
        if segments.iter().any(|s| s.is_empty()) {
            return Err(ConfigError::Env {
                var: key.clone(),
                message: "empty path segment".into(),
            });
        }
        // Build the nested single-path table and merge it in.
        let mut leaf = parse_env_value(&raw);
        for seg in segments.iter().rev() {
            let mut t = toml::map::Map::new();
            t.insert(seg.clone(), leaf);
            leaf = toml::Value::Table(t);
        }
        merge_toml(&mut table, leaf);
    }
    Ok(table)
}

impl RunConfig {
    /// Layered load: built-in defaults <- optional TOML file <- environment.
    /// CLI flag overrides are applied by the caller afterwards.
    pub fn load(file: Option<&Path>) -> Result<Self> {
        Self::load_with_env(file, std::env::vars())
    }

    pub fn load_with_env(
        file: Option<&Path>,
        vars: impl Iterator<Item = (String, String)>,
    ) -> Result<Self> {
        let mut merged = toml::Value::try_from(RunConfig::default()).expect("default serializes");
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| ConfigError::File {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
            let file_val: toml::Value = text.parse().map_err(|e| ConfigError::File {
                path: path.display().to_string(),
                message: format!("{e}"),
            })?;
            merge_toml(&mut merged, file_val);
        }
        merge_toml(&mut merged, env_overrides(vars)?);
        let cfg: RunConfig = merged
            .try_into()
            .map_err(|e| ConfigError::Invalid(format!("{e}")))?;
        Ok(cfg)
    }

    /// Copies the master seed into subsystem seeds and syncs the model's
    /// condition mode into training. Call after all override layers.
    pub fn finalize(&mut self) {
        self.dataset.seed = self.seed;
        self.train.seed = self.seed;
        self.train.condition_mode = self.model.condition_mode;
    }

    pub fn validate(&self) -> Result<()> {
        self.stft
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.model
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.dataset
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    pub fn dataset_root(&self) -> PathBuf {
        self.workdir.join(&self.dataset_dir)
    }

    /// Writes the fully resolved config into an output directory.
    pub fn echo_to(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("config.toml");
        let text =
            toml::to_string_pretty(self).map_err(|e| ConfigError::Invalid(format!("{e}")))?;
        std::fs::write(&path, text)?;
        Ok(path)
    }

    /// JSON form stored inside checkpoints for provenance.
    pub fn echo_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}
