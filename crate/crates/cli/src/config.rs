//! Run configuration for `splatnet train`.
//!
//! The file is line-based `key = value` text. `#` starts a comment, blank
//! lines are skipped, and every key may appear at most once. Relative paths
//! are resolved against the directory holding the config file.
//!
//! | key | default |
//! |---|---|
//! | `arch` | required |
//! | `lambda0` | required; one value or one per lattice channel |
//! | `data_dir` | required |
//! | `output_dir` | required |
//! | `feature_channels` | `xyz` |
//! | `lattice_channels` | `xyz` |
//! | `num_classes` | largest training label + 1 |
//! | `gravity_axis` | `1` (y) |
//! | `normalize` | `true` |
//! | `val_fraction` | `0` |
//! | `resume` | none |
//!
//! Every training key accepted by `TrainConfig::set` is also allowed.

use std::path::{Path, PathBuf};

use splatnet::data::{expand_channels, ChannelSelection};
use splatnet::lattice::LatticeConfig;
use splatnet::train::TrainConfig;
use splatnet::{Error, Result};

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub arch: String,
    pub lambda0: Vec<f64>,
    pub feature_channels: Vec<String>,
    pub lattice_channels: Vec<String>,
    pub num_classes: Option<usize>,
    pub gravity_axis: usize,
    pub normalize: bool,
    pub data_dir: PathBuf,
    pub output_dir: PathBuf,
    pub val_fraction: f64,
    /// Checkpoint to continue training from.
    pub resume: Option<PathBuf>,
    pub train: TrainConfig,
}

fn required<T>(value: Option<T>, key: &str) -> Result<T> {
    value.ok_or_else(|| Error::Config(format!("missing required key '{key}'")))
}

fn config_error(key: &str, value: &str, why: &str) -> Error {
    Error::Config(format!("{key} = {value}: {why}"))
}

/// Parses a comma- or whitespace-separated list of floats.
pub fn parse_lambda(key: &str, value: &str) -> Result<Vec<f64>> {
    let values: Vec<f64> = value
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| config_error(key, value, "not a number")))
        .collect::<Result<_>>()?;
    if values.is_empty() {
        return Err(config_error(key, value, "no values"));
    }
    if values.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(config_error(key, value, "must be positive"));
    }
    Ok(values)
}

/// Splits a comma-separated channel list and expands group aliases.
pub fn parse_channels(value: &str) -> Vec<String> {
    expand_channels(&value.split(',').collect::<Vec<_>>())
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::parse(&text, base)
    }

    /// Parses config text, resolving relative paths against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut arch = None;
        let mut lambda0 = None;
        let mut data_dir = None;
        let mut output_dir = None;
        let mut config = RunConfig {
            arch: String::new(),
            lambda0: Vec::new(),
            feature_channels: parse_channels("xyz"),
            lattice_channels: parse_channels("xyz"),
            num_classes: None,
            gravity_axis: 1,
            normalize: true,
            data_dir: PathBuf::new(),
            output_dir: PathBuf::new(),
            val_fraction: 0.0,
            resume: None,
            train: TrainConfig::default(),
        };
        let mut seen: Vec<String> = Vec::new();
        for (number, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value', got '{line}'", number + 1)))?;
            if seen.iter().any(|k| k == key) {
                return Err(Error::Config(format!("line {}: duplicate key '{key}'", number + 1)));
            }
            seen.push(key.to_string());
            let path = || base.join(value);
            match key {
                "arch" => arch = Some(value.to_string()),
                "lambda0" => lambda0 = Some(parse_lambda(key, value)?),
                "data_dir" => data_dir = Some(path()),
                "output_dir" => output_dir = Some(path()),
                "feature_channels" => config.feature_channels = parse_channels(value),
                "lattice_channels" => config.lattice_channels = parse_channels(value),
                "num_classes" => {
                    let n: usize = value.parse().map_err(|_| config_error(key, value, "not an integer"))?;
                    if n == 0 {
                        return Err(config_error(key, value, "must be positive"));
                    }
                    config.num_classes = Some(n);
                }
                "gravity_axis" => {
                    config.gravity_axis = match value.parse() {
                        Ok(a @ 0..=2) => a,
                        _ => return Err(config_error(key, value, "must be 0, 1 or 2")),
                    }
                }
                "normalize" => {
                    config.normalize = value.parse().map_err(|_| config_error(key, value, "expected true or false"))?
                }
                "val_fraction" => {
                    config.val_fraction = match value.parse::<f64>() {
                        Ok(f) if (0.0..1.0).contains(&f) => f,
                        _ => return Err(config_error(key, value, "must lie in [0, 1)")),
                    }
                }
                "resume" => config.resume = Some(path()),
                _ => config.train.set(key, value).map_err(|e| match e {
                    Error::Config(msg) => Error::Config(format!("line {}: {msg}", number + 1)),
                    other => other,
                })?,
            }
        }
        config.arch = required(arch, "arch")?;
        config.lambda0 = required(lambda0, "lambda0")?;
        config.data_dir = required(data_dir, "data_dir")?;
        config.output_dir = required(output_dir, "output_dir")?;
        config.train.validate()?;
        Ok(config)
    }

    /// Initial lattice scale; a single value is used for every lattice channel.
    pub fn lattice_config(&self) -> Result<LatticeConfig> {
        let d = self.lattice_channels.len();
        let scale = match self.lambda0.as_slice() {
            [v] => vec![*v; d],
            s if s.len() == d => s.to_vec(),
            s => {
                return Err(Error::Config(format!(
                    "lambda0 has {} values but {d} lattice channels are selected",
                    s.len()
                )))
            }
        };
        LatticeConfig::new(scale)
    }

    pub fn channels(&self) -> ChannelSelection {
        let mut sel = ChannelSelection::new(&self.feature_channels, &self.lattice_channels);
        sel.gravity_axis = self.gravity_axis;
        sel
    }
}
