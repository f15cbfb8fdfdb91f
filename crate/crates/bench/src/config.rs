//! Benchmark configuration: one JSON document covering corpus generation,
//! model shape, training, and enhancement settings. Every field has a
//! default, so a config file may specify only what it changes.

use std::path::Path;

use lime_core::lime::LimeConfig;
use lime_core::model::{ModelConfig, Normalization, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::corpus::CorpusConfig;
use crate::{BenchError, Result};

/// Environment variable consulted for the default seed when no `--seed`
/// flag is given.
pub const SEED_ENV_VAR: &str = "LIME_SEED";

/// Training hyperparameters as stored in config files. The run seed is
/// injected separately so one seed flag drives the whole pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Probability that a training presentation withholds the perceptual
    /// rows, teaching the model to answer from text priors alone.
    pub bias_rate: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let base = TrainConfig::default();
        TrainSettings {
            epochs: base.epochs,
            batch_size: base.batch_size,
            learning_rate: base.learning_rate,
            bias_rate: base.bias_rate,
        }
    }
}

impl TrainSettings {
    pub fn to_train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            bias_rate: self.bias_rate,
            seed,
        }
    }
}

/// Independent deterministic streams derived from the one run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seeds {
    pub corpus: u64,
    pub model: u64,
    pub train: u64,
}

pub fn derive_seeds(seed: u64) -> Seeds {
    // Golden-ratio increments keep the streams distinct even for adjacent
    // user seeds.
    const STRIDE: u64 = 0x9E37_79B9_7F4A_7C15;
    Seeds {
        corpus: seed,
        model: seed.wrapping_add(STRIDE),
        train: seed.wrapping_add(STRIDE.wrapping_mul(2)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub train: TrainSettings,
    pub lime: LimeConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        let corpus = CorpusConfig::default();
        let model = ModelConfig {
            num_layers: 2,
            num_heads: 4,
            model_dim: 32,
            vocab_size: corpus.vocab_size(),
            max_sequence: 64,
            normalization: Normalization::RmsNorm,
            patch_dim: corpus.patch_width(),
            norm_epsilon: 1e-6,
        };
        BenchConfig {
            corpus,
            model,
            train: TrainSettings::default(),
            lime: LimeConfig::default(),
        }
    }
}

impl BenchConfig {
    /// Check internal consistency: the model must speak the corpus's
    /// vocabulary and consume its patch width, and must have room for a QA
    /// prompt plus at least one generated token.
    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        if self.model.vocab_size != self.corpus.vocab_size() {
            return Err(BenchError::Config(format!(
                "model vocabulary {} does not match the corpus ({})",
                self.model.vocab_size,
                self.corpus.vocab_size()
            )));
        }
        if self.model.patch_dim != self.corpus.patch_width() {
            return Err(BenchError::Config(format!(
                "model patch width {} does not match the corpus ({})",
                self.model.patch_dim,
                self.corpus.patch_width()
            )));
        }
        let prompt = self.corpus.dimensionality.cell_count() + 3;
        if self.model.max_sequence < prompt + 1 {
            return Err(BenchError::Config(format!(
                "max sequence {} cannot hold a {prompt}-token prompt plus an answer",
                self.model.max_sequence
            )));
        }
        self.lime
            .validate()
            .map_err(|e| BenchError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<BenchConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BenchError::Io(format!("{}: {e}", path.display())))?;
        let config: BenchConfig =
            serde_json::from_str(&text).map_err(|e| BenchError::Serde(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s =
            serde_json::to_string_pretty(self).map_err(|e| BenchError::Serde(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_internally_consistent() {
        BenchConfig::default().validate().unwrap();
    }

    #[test]
    fn partial_config_files_fill_in_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        std::fs::write(&path, r#"{"train": {"epochs": 3}}"#).unwrap();
        let config = BenchConfig::load(&path).unwrap();
        assert_eq!(config.train.epochs, 3);
        assert_eq!(config.train.batch_size, TrainSettings::default().batch_size);
        assert_eq!(config.model, BenchConfig::default().model);
    }

    #[test]
    fn mismatched_model_and_corpus_are_rejected() {
        let mut config = BenchConfig::default();
        config.model.vocab_size += 1;
        assert!(config.validate().is_err());
        let mut config = BenchConfig::default();
        config.model.patch_dim = 7;
        assert!(config.validate().is_err());
        let mut config = BenchConfig::default();
        config.model.max_sequence = 12;
        assert!(config.validate().is_err());
    }

    #[test]
    fn config_json_round_trips() {
        let config = BenchConfig::default();
        let json = config.to_json().unwrap();
        let back: BenchConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(config, back);
    }

    #[test]
    fn seed_streams_are_distinct() {
        let s = derive_seeds(0);
        assert_ne!(s.corpus, s.model);
        assert_ne!(s.model, s.train);
        assert_ne!(s.corpus, s.train);
        let t = derive_seeds(1);
        assert_ne!(s.model, t.model);
    }
}
