//! Run configuration: a TOML file with one table per stage.
//!
//! ```toml
//! [model]
//! p = 30
//! k = 64
//!
//! [train]
//! epochs = 5
//! seeds = [0, 1]
//!
//! [data]
//! train = "toy/train.mrg"
//! dev = "toy/dev.mrg"
//! ```
//!
//! Unknown keys are rejected. Relative data paths resolve against the
//! directory holding the config file. Without `data.train`, the corpus is
//! sampled from a random grammar described by `[synthetic]`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tdpcfg::corpus::DEFAULT_PUNCT_TAGS;
use tdpcfg::evaluator::{EmptyGold, DEFAULT_RECALL_LABELS};
use tdpcfg::model::{default_rank, parse_activation, ModelConfig};
use tdpcfg::trainer::TrainConfig;

use crate::error::{CliError, IoContext, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub model: ModelSection,
    pub train: TrainSection,
    pub data: DataSection,
    pub synthetic: SyntheticSection,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub p: usize,
    /// Defaults to `p / 2`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    /// Defaults to `p` above 200 preterminals, else 200.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d: Option<usize>,
    pub k: usize,
    pub activation: String,
    pub precision: String,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { p: 500, n: None, d: None, k: 256, activation: "relu".into(), precision: "f64".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seeds: Vec<u64>,
    pub bucket_width: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_grad_norm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_train_len: Option<usize>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            learning_rate: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
            epsilon: t.epsilon,
            batch_size: t.batch_size,
            epochs: t.epochs,
            seeds: t.seeds,
            bucket_width: t.bucket_width,
            max_grad_norm: t.max_grad_norm,
            max_train_len: t.max_train_len,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test: Option<PathBuf>,
    /// Most frequent training words kept; the rest map to `<unk>`.
    pub vocab_size: usize,
    pub punct_tags: Vec<String>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            train: None,
            dev: None,
            test: None,
            vocab_size: 10_000,
            punct_tags: DEFAULT_PUNCT_TAGS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// Generating grammar and split sizes for sampled corpora.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSection {
    pub n: usize,
    pub p: usize,
    pub q: usize,
    pub d: usize,
    /// Concentration of the generating distributions; larger is peakier.
    pub sharpness: f64,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub max_length: usize,
    pub seed: u64,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        Self { n: 8, p: 16, q: 40, d: 16, sharpness: 2.0, train: 500, dev: 100, test: 100, max_length: 20, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// `exclude` or `score`: how sentences without nontrivial gold spans
    /// enter the mean F1.
    pub empty_gold: String,
    pub recall_labels: Vec<String>,
    /// Predicted nonterminals shown in the correspondence matrix.
    pub top_k: usize,
    /// Phrases listed per nonterminal in cluster reports.
    pub cluster_size: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            empty_gold: "exclude".into(),
            recall_labels: DEFAULT_RECALL_LABELS.iter().map(|s| s.to_string()).collect(),
            top_k: 30,
            cluster_size: 10,
        }
    }
}

pub fn parse_empty_gold(name: &str) -> Result<EmptyGold> {
    match name {
        "exclude" => Ok(EmptyGold::Exclude),
        "score" => Ok(EmptyGold::Score),
        other => Err(CliError::Usage(format!("empty_gold must be \"exclude\" or \"score\", got {other:?}"))),
    }
}

impl Config {
    /// Reads `path`, rejecting unknown keys, and resolves data paths
    /// against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        let mut config = Self::from_toml(&text).map_err(|message| CliError::Config { path: path.into(), message })?;
        let base = path.parent().unwrap_or(Path::new("."));
        for slot in [&mut config.data.train, &mut config.data.dev, &mut config.data.test] {
            if let Some(p) = slot.as_mut() {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        config.validate().map_err(|e| CliError::Config { path: path.into(), message: e.to_string() })?;
        Ok(config)
    }

    pub fn from_toml(text: &str) -> std::result::Result<Self, String> {
        toml::from_str(text).map_err(|e| e.message().to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.model.precision != "f64" {
            return Err(CliError::Usage(format!(
                "precision {:?} is not supported; only \"f64\" is implemented",
                self.model.precision
            )));
        }
        parse_activation(&self.model.activation)?;
        parse_empty_gold(&self.eval.empty_gold)?;
        self.train_config().validate()?;
        Ok(())
    }

    /// Model dimensions for a vocabulary of `q` words.
    pub fn model_config(&self, q: usize) -> ModelConfig {
        let p = self.model.p;
        ModelConfig {
            n: self.model.n.unwrap_or((p / 2).max(1)),
            p,
            q,
            d: self.model.d.unwrap_or_else(|| default_rank(p)),
            k: self.model.k,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            learning_rate: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
            epsilon: t.epsilon,
            batch_size: t.batch_size,
            epochs: t.epochs,
            seeds: t.seeds.clone(),
            bucket_width: t.bucket_width,
            max_grad_norm: t.max_grad_norm,
            max_train_len: t.max_train_len,
        }
    }

    pub fn punct_tags(&self) -> Vec<&str> {
        self.data.punct_tags.iter().map(String::as_str).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_training_protocol() {
        let c = Config::default();
        let m = c.model_config(10_000);
        assert_eq!((m.n, m.p, m.d, m.k), (250, 500, 500, 256));
        let t = c.train_config();
        assert_eq!(t, TrainConfig::default());
    }

    #[test]
    fn unknown_key_is_named() {
        let err = Config::from_toml("[train]\nlearning_rat = 0.1\n").unwrap_err();
        assert!(err.contains("learning_rat"), "{err}");
        let err = Config::from_toml("[modle]\np = 3\n").unwrap_err();
        assert!(err.contains("modle"), "{err}");
    }

    #[test]
    fn snapshot_round_trips() {
        let mut c = Config::default();
        c.model.d = Some(12);
        c.train.max_grad_norm = Some(5.0);
        c.data.train = Some("a.mrg".into());
        assert_eq!(Config::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn only_double_precision() {
        let mut c = Config::default();
        c.model.precision = "f32".into();
        assert!(c.validate().unwrap_err().to_string().contains("f32"));
        c.model.precision = "f64".into();
        c.model.activation = "tanh".into();
        assert!(c.validate().is_err());
    }
}
