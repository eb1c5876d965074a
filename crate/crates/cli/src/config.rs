//! The TOML configuration file.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use refnet::dataset::DataConfig;
use refnet::eval::EvalOptions;
use refnet::train::TrainConfig;
use serde::{Deserialize, Serialize};

/// Every section and key is optional; missing values take their defaults.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfig {
    /// Synthetic dataset generation.
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalOptions,
    pub paths: Paths,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Dataset directory used when `--data` is not given.
    pub data: Option<PathBuf>,
}

impl CliConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}
