//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Every key must be one of
//! [`KEYS`]; later assignments (including command-line overrides applied with
//! [`RunConfig::set`]) replace earlier ones.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::data::LogChannel;
use crate::evaluation::DEFAULT_TOLERANCES_FT;
use crate::inference::PredictConfig;
use crate::net::{AblationMode, NetConfig};
use crate::training::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, found `{text}`")]
    Syntax { line: usize, text: String },
    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),
    #[error("invalid value `{value}` for `{key}`: {reason}")]
    Value { key: String, value: String, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Every accepted key, in the order [`RunConfig::to_text`] writes them.
pub const KEYS: &[&str] = &[
    "seed",
    "channels",
    "mode",
    "smoothing",
    "sigma",
    "learning_rate",
    "max_epochs",
    "patience",
    "test_fraction",
    "val_fraction",
    "encoder_depth",
    "stage_channels",
    "global_kernels",
    "local_layers",
    "local_channels",
    "local_kernel",
    "local_dilations",
    "fusion_channels",
    "dropout",
    "mc_passes",
    "prob_threshold",
    "uncertainty_threshold_ft",
    "tolerances",
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub net: NetConfig,
    pub predict: PredictConfig,
    pub tolerances: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            net: NetConfig::default(),
            predict: PredictConfig::default(),
            tolerances: DEFAULT_TOLERANCES_FT.to_vec(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::Value {
        key: key.into(),
        value: value.into(),
        reason: e.to_string(),
    })
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn parse_switch(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "on" | "true" => Ok(true),
        "off" | "false" => Ok(false),
        _ => Err(ConfigError::Value {
            key: key.into(),
            value: value.into(),
            reason: "expected on or off".into(),
        }),
    }
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Defaults overridden by `text`.
    pub fn parse_text(text: &str) -> Result<RunConfig, ConfigError> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<RunConfig, ConfigError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        RunConfig::parse_text(&text)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Assigns one key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let t = &mut self.train;
        let n = &mut self.net;
        match key {
            "seed" => {
                t.seed = parse(key, value)?;
                self.predict.seed = t.seed;
            }
            "channels" => {
                t.channels = LogChannel::parse_list(value).map_err(|e| ConfigError::Value {
                    key: key.into(),
                    value: value.into(),
                    reason: e.to_string(),
                })?;
                n.input_channels = t.channels.len();
            }
            "mode" => t.mode = parse::<AblationMode>(key, value)?,
            "smoothing" => t.smoothing = parse_switch(key, value)?,
            "sigma" => t.sigma = parse(key, value)?,
            "learning_rate" => t.learning_rate = parse(key, value)?,
            "max_epochs" => t.max_epochs = parse(key, value)?,
            "patience" => t.patience = parse(key, value)?,
            "test_fraction" => t.test_fraction = parse(key, value)?,
            "val_fraction" => t.val_fraction = parse(key, value)?,
            "encoder_depth" => n.encoder_depth = parse(key, value)?,
            "stage_channels" => n.stage_channels = parse_list(key, value)?,
            "global_kernels" => n.global_kernels = parse_list(key, value)?,
            "local_layers" => n.local_layers = parse(key, value)?,
            "local_channels" => n.local_channels = parse(key, value)?,
            "local_kernel" => n.local_kernel = parse(key, value)?,
            "local_dilations" => n.local_dilations = parse_list(key, value)?,
            "fusion_channels" => n.fusion_channels = parse(key, value)?,
            "dropout" => n.dropout = parse(key, value)?,
            "mc_passes" => self.predict.mc_passes = parse(key, value)?,
            "prob_threshold" => self.predict.prob_threshold = parse(key, value)?,
            "uncertainty_threshold_ft" => self.predict.uncertainty_threshold_ft = parse(key, value)?,
            "tolerances" => self.tolerances = parse_list(key, value)?,
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Writes every key; parsing the result gives back `self`.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let n = &self.net;
        let values = [
            t.seed.to_string(),
            t.channels.iter().map(|c| c.as_str()).collect::<Vec<_>>().join(","),
            t.mode.to_string(),
            if t.smoothing { "on" } else { "off" }.to_string(),
            t.sigma.to_string(),
            t.learning_rate.to_string(),
            t.max_epochs.to_string(),
            t.patience.to_string(),
            t.test_fraction.to_string(),
            t.val_fraction.to_string(),
            n.encoder_depth.to_string(),
            join(&n.stage_channels),
            join(&n.global_kernels),
            n.local_layers.to_string(),
            n.local_channels.to_string(),
            n.local_kernel.to_string(),
            join(&n.local_dilations),
            n.fusion_channels.to_string(),
            n.dropout.to_string(),
            self.predict.mc_passes.to_string(),
            self.predict.prob_threshold.to_string(),
            self.predict.uncertainty_threshold_ft.to_string(),
            join(&self.tolerances),
        ];
        let mut out = String::new();
        for (k, v) in KEYS.iter().zip(values) {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}
