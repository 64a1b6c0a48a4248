//! Top-level TOML configuration shared by every subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::auction_env::EnvConfig;
use crate::controllers::ControllerConfig;
use crate::dpo::DpoConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::model::ModelConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub episodes: usize,
    /// Episode seeds are `seed_base + i`.
    pub seed_base: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            episodes: 200,
            seed_base: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Root for datasets, checkpoints and reports.
    pub out: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self { out: "runs".into() }
    }
}

impl PathsConfig {
    pub fn data(&self) -> PathBuf {
        self.out.join("data")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.out.join("checkpoints")
    }

    pub fn reports(&self) -> PathBuf {
        self.out.join("reports")
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    /// Worker threads; unset means all available cores. Results do not
    /// depend on it.
    pub workers: Option<usize>,
    pub env: EnvConfig,
    pub controllers: ControllerConfig,
    pub gen: GenConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub dpo: DpoConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        if self.workers == Some(0) {
            return Err(Error::config("workers", "must be positive"));
        }
        self.env.validate()?;
        self.controllers.validate()?;
        if self.gen.episodes == 0 {
            return Err(Error::config("gen.episodes", "must be positive"));
        }
        self.model.validate()?;
        if self.model.a_max != self.env.a_max {
            return Err(Error::config("model.a_max", "must equal env.a_max"));
        }
        if self.model.p_max != self.env.p_max {
            return Err(Error::config("model.p_max", "must equal env.p_max"));
        }
        self.train.validate()?;
        self.dpo.validate()?;
        self.eval.validate()
    }

    pub fn workers(&self) -> usize {
        self.workers
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
    }

    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        let config: Config = toml::from_str(text).map_err(|e| {
            let line = e.span().map_or(0, |s| text[..s.start].matches('\n').count() + 1);
            Error::Parse {
                path: path.to_path_buf(),
                line,
                message: e.message().to_string(),
            }
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Reads and validates a config file; defaults fill absent keys.
pub fn parse_config(path: &Path) -> Result<Config> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Config::from_toml(&text, path)
}
