//! Run configuration: a flat `key = value` text file with documented
//! defaults; CLI flags override file values.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gradcore::TrainAttentionMode;
use crate::prototypes::AverageMode;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed config line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("bad value for {key}: {value:?}")]
    BadValue { key: String, value: String },
}

pub type Result<T> = std::result::Result<T, ConfigError>;

/// All run parameters. Serialized into every metrics report so runs are
/// self-describing.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunConfig {
    /// Master seed; every stream in a run derives from it.
    pub seed: u64,
    /// Scene edge length in pixels.
    pub size: usize,
    /// Number of synthetic scenes.
    pub n_scenes: usize,
    /// Optimization steps.
    pub steps: usize,
    /// SGD learning rate.
    pub lr: f64,
    /// SGD momentum.
    pub momentum: f64,
    /// Weight of the attention invariance loss.
    pub lambda1: f64,
    /// Weight of the prototype loss.
    pub lambda2: f64,
    /// Proposal confidence threshold `t` (strictly-greater filter).
    pub conf_threshold: f64,
    /// Contrastive temperature.
    pub tau: f64,
    /// Attention loss used for training: `dice_soft` or `mse`.
    pub attention_mode: String,
    /// Prototype averaging: `cumulative` or `ema`.
    pub proto_mode: String,
    /// EMA momentum when `proto_mode = ema`.
    pub ema_momentum: f64,
    /// Band-pass radius range for sampled plans; `r_max = 0` means
    /// `max(1, size / 8)`.
    pub r_min: usize,
    pub r_max: usize,
    /// Backbone widths.
    pub hidden_channels: usize,
    pub feat_channels: usize,
    /// Augmented views per scene in the post-training evaluation pass.
    pub eval_plans: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            size: 64,
            n_scenes: 8,
            steps: 300,
            lr: 0.005,
            momentum: 0.9,
            lambda1: 0.1,
            lambda2: 0.1,
            conf_threshold: 0.7,
            tau: 0.2,
            attention_mode: "dice_soft".into(),
            proto_mode: "cumulative".into(),
            ema_momentum: 0.9,
            r_min: 1,
            r_max: 0,
            hidden_channels: 8,
            feat_channels: 8,
            eval_plans: 3,
        }
    }
}

impl RunConfig {
    pub fn effective_r_max(&self) -> usize {
        if self.r_max == 0 {
            (self.size / 8).max(1)
        } else {
            self.r_max
        }
    }

    pub fn attention_mode(&self) -> Result<TrainAttentionMode> {
        match self.attention_mode.as_str() {
            "dice_soft" => Ok(TrainAttentionMode::DiceSoft),
            "mse" => Ok(TrainAttentionMode::Mse),
            other => Err(ConfigError::BadValue {
                key: "attention_mode".into(),
                value: other.into(),
            }),
        }
    }

    pub fn proto_mode(&self) -> Result<AverageMode> {
        match self.proto_mode.as_str() {
            "cumulative" => Ok(AverageMode::Cumulative),
            "ema" => Ok(AverageMode::Ema {
                momentum: self.ema_momentum,
            }),
            other => Err(ConfigError::BadValue {
                key: "proto_mode".into(),
                value: other.into(),
            }),
        }
    }

    /// Parses a `key = value` file over the defaults. `#` starts a comment;
    /// unknown keys are errors.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(&fs::read_to_string(path)?)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Malformed {
                line: idx + 1,
                msg: "expected `key = value`".into(),
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value.parse().map_err(|_| ConfigError::BadValue {
                key: key.into(),
                value: value.into(),
            })
        }
        match key {
            "seed" => self.seed = parse(key, value)?,
            "size" => self.size = parse(key, value)?,
            "n_scenes" => self.n_scenes = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "lambda1" => self.lambda1 = parse(key, value)?,
            "lambda2" => self.lambda2 = parse(key, value)?,
            "conf_threshold" => self.conf_threshold = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "attention_mode" => self.attention_mode = value.into(),
            "proto_mode" => self.proto_mode = value.into(),
            "ema_momentum" => self.ema_momentum = parse(key, value)?,
            "r_min" => self.r_min = parse(key, value)?,
            "r_max" => self.r_max = parse(key, value)?,
            "hidden_channels" => self.hidden_channels = parse(key, value)?,
            "feat_channels" => self.feat_channels = parse(key, value)?,
            "eval_plans" => self.eval_plans = parse(key, value)?,
            other => return Err(ConfigError::UnknownKey(other.into())),
        }
        // validate enum-like keys eagerly
        self.attention_mode()?;
        self.proto_mode()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_the_published_hyperparameters() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.lambda1, 0.1);
        assert_eq!(cfg.lambda2, 0.1);
        assert_eq!(cfg.conf_threshold, 0.7);
        assert_eq!(cfg.tau, 0.2);
        assert_eq!(cfg.momentum, 0.9);
        assert_eq!(cfg.effective_r_max(), 8);
    }

    #[test]
    fn file_overrides_and_comments() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        fs::write(&path, "# comment\nsteps = 5\nlambda1 = 0.0 # trailing\nattention_mode = mse\n").unwrap();
        let cfg = RunConfig::from_file(&path).unwrap();
        assert_eq!(cfg.steps, 5);
        assert_eq!(cfg.lambda1, 0.0);
        assert_eq!(cfg.attention_mode().unwrap(), TrainAttentionMode::Mse);
        assert_eq!(cfg.lambda2, 0.1); // untouched default
    }

    #[test]
    fn unknown_keys_and_bad_values_error() {
        let mut cfg = RunConfig::default();
        assert!(matches!(cfg.set("nope", "1"), Err(ConfigError::UnknownKey(_))));
        assert!(matches!(cfg.set("steps", "many"), Err(ConfigError::BadValue { .. })));
        assert!(matches!(cfg.set("attention_mode", "hard"), Err(ConfigError::BadValue { .. })));
    }
}
