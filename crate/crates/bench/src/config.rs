//! Experiment configuration and the flat `key = value` file format.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use coordmatch::data::LabelColumn;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("invalid value {value:?} for {key}")]
    BadValue { key: String, value: String },
    #[error("{0}")]
    Invalid(String),
}

/// Batch selection strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Simulate the max-entropy policy and match its trajectories.
    SimMatch,
    /// Top-k most uncertain examples.
    MaxUncertain,
    /// Uniform random batch.
    Random,
    /// The max-entropy policy itself, one query at a time.
    Sequential,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::SimMatch,
        Method::MaxUncertain,
        Method::Random,
        Method::Sequential,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::SimMatch => "sim_match",
            Method::MaxUncertain => "max_uncertain",
            Method::Random => "random",
            Method::Sequential => "sequential",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| ConfigError::BadValue {
                key: "method".into(),
                value: s.into(),
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: PathBuf,
    pub label_col: String,
    /// Keep only these two raw classes of a multiclass file.
    pub keep_classes: Option<(String, String)>,
    pub normalize: bool,
    pub method: Method,
    pub k: usize,
    pub trajectories: usize,
    pub kernel_width: f64,
    pub ridge: f64,
    pub train_frac: f64,
    pub seeds_per_class: usize,
    pub runs: usize,
    pub budget: usize,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub per_run_out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::new(),
            label_col: "last".into(),
            keep_classes: None,
            normalize: true,
            method: Method::SimMatch,
            k: 20,
            trajectories: 20,
            kernel_width: 0.05,
            ridge: 1e-4,
            train_frac: 0.7,
            seeds_per_class: 5,
            runs: 50,
            budget: 100,
            seed: 0,
            out: None,
            per_run_out: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue {
        key: key.into(),
        value: value.into(),
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(ConfigError::BadValue {
            key: key.into(),
            value: value.into(),
        }),
    }
}

/// Parses `A,B` into a class pair.
pub fn parse_class_pair(value: &str) -> Result<(String, String), ConfigError> {
    match value.split_once(',') {
        Some((a, b)) if !a.trim().is_empty() && !b.trim().is_empty() => {
            Ok((a.trim().to_string(), b.trim().to_string()))
        }
        _ => Err(ConfigError::BadValue {
            key: "keep_classes".into(),
            value: value.into(),
        }),
    }
}

impl ExperimentConfig {
    /// Sets one field by its config-file key. Dashes and underscores are
    /// interchangeable.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let key = key.trim().replace('-', "_");
        let value = value.trim();
        match key.as_str() {
            "dataset" => self.dataset = PathBuf::from(value),
            "label_col" => self.label_col = value.to_string(),
            "keep_classes" => self.keep_classes = Some(parse_class_pair(value)?),
            "normalize" => self.normalize = parse_bool(&key, value)?,
            "method" => self.method = value.parse()?,
            "k" => self.k = parse(&key, value)?,
            "trajectories" => self.trajectories = parse(&key, value)?,
            "kernel_width" => self.kernel_width = parse(&key, value)?,
            "ridge" => self.ridge = parse(&key, value)?,
            "train_frac" => self.train_frac = parse(&key, value)?,
            "seeds_per_class" => self.seeds_per_class = parse(&key, value)?,
            "runs" => self.runs = parse(&key, value)?,
            "budget" => self.budget = parse(&key, value)?,
            "seed" => self.seed = parse(&key, value)?,
            "out" => self.out = Some(PathBuf::from(value)),
            "per_run_out" => self.per_run_out = Some(PathBuf::from(value)),
            _ => return Err(ConfigError::UnknownKey(key)),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and lines
    /// starting with `#` are ignored.
    pub fn apply_str(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or(ConfigError::Syntax { line: i + 1 })?;
            self.set(key, value)?;
        }
        Ok(())
    }

    pub fn from_file<P: AsRef<Path>>(path: P) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut config = Self::default();
        config.apply_str(&text)?;
        Ok(config)
    }

    pub fn label_column(&self) -> LabelColumn {
        self.label_col.parse().unwrap_or(LabelColumn::Last)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |msg: String| Err(ConfigError::Invalid(msg));
        if self.dataset.as_os_str().is_empty() {
            return invalid("a dataset path is required".into());
        }
        if self.k == 0 {
            return invalid("k must be at least 1".into());
        }
        if self.trajectories == 0 {
            return invalid("trajectories must be at least 1".into());
        }
        if self.runs == 0 {
            return invalid("runs must be at least 1".into());
        }
        if self.budget == 0 || self.budget % self.k != 0 {
            return invalid(format!(
                "budget {} must be a positive multiple of k = {}",
                self.budget, self.k
            ));
        }
        if !(self.kernel_width > 0.0 && self.kernel_width.is_finite()) {
            return invalid(format!("kernel width must be positive, got {}", self.kernel_width));
        }
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return invalid(format!("ridge must be non-negative, got {}", self.ridge));
        }
        if !(self.train_frac > 0.0 && self.train_frac <= 1.0) {
            return invalid(format!("train fraction must lie in (0, 1], got {}", self.train_frac));
        }
        if self.seeds_per_class == 0 {
            return invalid("seeds_per_class must be at least 1".into());
        }
        Ok(())
    }
}
