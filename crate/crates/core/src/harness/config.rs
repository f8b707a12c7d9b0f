use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::mdo::Strategy;
use crate::policy::{OptimizerKind, PolicyShape, PretrainConfig};
use crate::ppo::Hyperparams;
use crate::toyenv::{EpisodeConfig, Vocabulary};
use crate::{Error, Result};

/// Everything one training run needs. Hyperparameters sit at the top level
/// of the JSON form, next to the run settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub vocab_size: u32,
    pub embed_dim: usize,
    pub max_summary_len: usize,
    #[serde(flatten)]
    pub hyper: Hyperparams,
    pub strategy: Strategy,
    pub optimizer: OptimizerKind,
    pub iterations: usize,
    pub docs_pool_size: usize,
    pub eval_docs: usize,
    pub eval_interval: usize,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub pretrain_batch_size: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Load the frozen reference from here instead of pretraining one.
    pub reference_checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            vocab_size: 64,
            embed_dim: 32,
            max_summary_len: 16,
            hyper: Hyperparams::default(),
            strategy: Strategy::Min,
            optimizer: OptimizerKind::Adam,
            iterations: 300,
            docs_pool_size: 200,
            eval_docs: 64,
            eval_interval: 10,
            pretrain_epochs: 30,
            pretrain_lr: 1e-2,
            pretrain_batch_size: 8,
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            reference_checkpoint: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        self.vocabulary()?;
        self.episode_config().validate()?;
        let checks = [
            (self.embed_dim >= 1, "embed_dim must be at least 1"),
            (self.iterations >= 1, "iterations must be at least 1"),
            (
                self.docs_pool_size >= 1,
                "docs_pool_size must be at least 1",
            ),
            (self.eval_docs >= 1, "eval_docs must be at least 1"),
            (self.eval_interval >= 1, "eval_interval must be at least 1"),
            (self.pretrain_lr > 0.0, "pretrain_lr must be positive"),
            (
                self.pretrain_batch_size >= 1,
                "pretrain_batch_size must be at least 1",
            ),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::config(*msg)),
            None => Ok(()),
        }
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::new(self.vocab_size)
    }

    pub fn shape(&self) -> PolicyShape {
        PolicyShape::new(self.vocab_size as usize, self.embed_dim, 4)
    }

    pub fn episode_config(&self) -> EpisodeConfig {
        EpisodeConfig {
            max_summary_len: self.max_summary_len,
            seed: self.seed,
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.pretrain_epochs,
            learning_rate: self.pretrain_lr,
            batch_size: self.pretrain_batch_size,
            seed: self.seed,
        }
    }

    /// Every accepted key, hyperparameters included.
    pub fn known_keys() -> Vec<String> {
        match serde_json::to_value(TrainConfig::default()) {
            Ok(Value::Object(map)) => map.keys().cloned().collect(),
            _ => Vec::new(),
        }
    }

    /// Builds a config from a JSON object, rejecting unknown keys.
    pub fn from_value(value: Value) -> Result<Self> {
        let Value::Object(map) = value else {
            return Err(Error::config("config must be a JSON object"));
        };
        let known = Self::known_keys();
        if let Some(bad) = map.keys().find(|k| !known.contains(k)) {
            return Err(Error::config(format!("unknown config key {bad:?}")));
        }
        let cfg: TrainConfig = serde_json::from_value(Value::Object(map))?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_value(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json(j) => Error::Parse {
                path: path.to_path_buf(),
                line: j.line() as u64,
                message: j.to_string(),
            },
            other => other,
        })
    }

    /// Applies `key=value` overrides. Values are read as JSON when they
    /// parse, and as plain strings otherwise.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut map = match serde_json::to_value(self)? {
            Value::Object(map) => map,
            _ => Map::new(),
        };
        for item in overrides {
            let item = item.as_ref();
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::config(format!("override {item:?} is not key=value")))?;
            let value =
                serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            map.insert(key.trim().to_string(), value);
        }
        Self::from_value(Value::Object(map))
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
