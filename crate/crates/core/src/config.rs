//! Experiment configuration: one TOML document, `key=value` overrides and an
//! environment override for the output root.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::dataset::DatasetConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::perception::{Architecture, NetConfig};
use crate::scene::{GridConfig, SceneConfig, SensorConfig};
use crate::trainer::{LossConfig, OptimConfig, TrainConfig};

/// Replaces `output_dir` unless a command-line override sets it.
pub const OUTPUT_ENV: &str = "COPERCEPTION_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Exponents `n` of the compression ratios `1/2^n`.
    pub compression_exponents: Vec<u32>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            compression_exponents: (0..=8).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    /// Training seeds; every subcommand runs once per seed unless told
    /// otherwise.
    pub seeds: Vec<u64>,
    pub scene: SceneConfig,
    pub sensor: SensorConfig,
    pub grid: GridConfig,
    pub dataset: DatasetConfig,
    pub net: NetConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("out"),
            seeds: (0..5).collect(),
            scene: SceneConfig::default(),
            sensor: SensorConfig::default(),
            grid: GridConfig::default(),
            dataset: DatasetConfig::default(),
            net: NetConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.output_dir.as_os_str().is_empty() {
            return Err(Error::config("output_dir", "must not be empty"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "must list at least one seed"));
        }
        self.scene.validate()?;
        if self.sensor.rays == 0 {
            return Err(Error::config("sensor.rays", "must be positive"));
        }
        if !(self.sensor.max_range > 0.0) {
            return Err(Error::config("sensor.max_range", "must be positive"));
        }
        self.grid.validate()?;
        self.dataset.validate()?;
        self.net.validate()?;
        Architecture::new(self.net.clone(), self.grid.clone())?;
        self.loss.validate()?;
        self.optim.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        if let Some(&n) = self.sweep.compression_exponents.iter().find(|&&n| n > 8) {
            return Err(Error::config("sweep.compression_exponents", format!("exponent {n} is outside 0..=8")));
        }
        Ok(())
    }
}

fn from_table(table: toml::Table) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
        let path = e.path().to_string();
        Error::config(if path == "." { String::new() } else { path }, e.into_inner().to_string())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

fn parse_table(text: &str) -> Result<toml::Table> {
    text.parse::<toml::Table>()
        .map_err(|e| Error::config("", e.message().to_string()))
}

/// Parses a TOML document; absent keys take their defaults.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    from_table(parse_table(text)?)
}

pub fn emit_config(config: &ExperimentConfig) -> Result<String> {
    toml::to_string_pretty(config).map_err(|e| Error::Format(format!("config: {e}")))
}

/// Sets a dotted `path` in `table`, creating intermediate tables. `raw` is
/// read as a TOML value, falling back to a bare string.
pub fn apply_override(table: &mut toml::Table, path: &str, raw: &str) -> Result<()> {
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::config(path, "malformed key"));
    }
    let (last, parents) = keys.split_last().expect("split yields at least one key");
    let mut node = table;
    for key in parents {
        let entry = node
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(path, format!("`{key}` is not a table")))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}

/// Splits `key=value`.
pub fn parse_override(arg: &str) -> Result<(&str, &str)> {
    arg.split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .filter(|(k, _)| !k.is_empty())
        .ok_or_else(|| Error::config(arg, "override must have the form key=value"))
}

/// Resolves the effective configuration. Precedence, highest first:
/// `overrides`, the output environment override, `file_text`, defaults.
pub fn resolve_config(file_text: Option<&str>, env_output: Option<&str>, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut table = match file_text {
        Some(text) => parse_table(text)?,
        None => toml::Table::new(),
    };
    if let Some(dir) = env_output.filter(|d| !d.is_empty()) {
        table.insert("output_dir".into(), toml::Value::String(dir.to_string()));
    }
    for arg in overrides {
        let (key, value) = parse_override(arg)?;
        apply_override(&mut table, key, value)?;
    }
    from_table(table)
}
