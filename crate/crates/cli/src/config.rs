//! TOML run configuration covering every module. Unknown keys are rejected
//! and every key has a default; see `docs/config.md`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use musc_core::confidence::CalibrationConfig;
use musc_core::constraint_lang::{SamplerConfig, Vocab};
use musc_core::datagen::DropoutConfig;
use musc_core::eval::EvalConfig;
use musc_core::lm::sft::SftConfig;
use musc_core::lm::ModelConfig;
use musc_core::trainer::TrainConfig;
use musc_llm_client::EndpointConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VocabConfig {
    pub n_letters: u32,
    pub max_len: u32,
}

impl Default for VocabConfig {
    fn default() -> Self {
        let v = Vocab::default();
        Self { n_letters: v.n_letters, max_len: v.max_len }
    }
}

/// Sizes of the generated corpora.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Oracle (instruction, solved response) examples for SFT.
    pub n_sft_examples: usize,
    pub sft_min_constraints: usize,
    pub sft_max_constraints: usize,
    /// Preference pairs to generate.
    pub n_pairs: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { n_sft_examples: 2000, sft_min_constraints: 1, sft_max_constraints: 10, n_pairs: 500 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeldoutConfig {
    pub n_instructions: usize,
    pub min_constraints: usize,
    pub max_constraints: usize,
    /// Stream the held-out instructions are drawn from; kept apart from every
    /// training stream.
    pub seed: u64,
}

impl Default for HeldoutConfig {
    fn default() -> Self {
        Self { n_instructions: 300, min_constraints: 3, max_constraints: 10, seed: 0x5eed_e7a1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root seed; every stage derives its own seed from it.
    pub seed: u64,
    pub vocab: VocabConfig,
    pub sampler: SamplerConfig,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub sft: SftConfig,
    pub dropout: DropoutConfig,
    pub calibration: CalibrationConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub heldout: HeldoutConfig,
    pub endpoint: EndpointConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            vocab: VocabConfig::default(),
            sampler: SamplerConfig::default(),
            model: ModelConfig::default(),
            data: DataConfig::default(),
            sft: SftConfig::default(),
            dropout: DropoutConfig::default(),
            calibration: CalibrationConfig::default(),
            train: TrainConfig::paper(),
            eval: EvalConfig::default(),
            heldout: HeldoutConfig::default(),
            endpoint: EndpointConfig::default(),
        }
    }
}

impl RunConfig {
    /// Defaults with the desk training preset, a model sized for CPU runs and
    /// a longer, faster SFT bootstrap.
    pub fn desk() -> Self {
        Self {
            model: ModelConfig { embed_dim: 64, context_len: 128, ..ModelConfig::default() },
            sft: SftConfig { lr: 3e-3, epochs: 20, ..SftConfig::default() },
            train: TrainConfig::desk(),
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Read { path: path.display().to_string(), source })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn vocab(&self) -> Result<Vocab, ConfigError> {
        Vocab::new(self.vocab.n_letters, self.vocab.max_len).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |e: String| ConfigError::Invalid(e);
        let vocab = self.vocab()?;
        if self.model.vocab_size != vocab.size() {
            return Err(inv(format!(
                "model.vocab_size is {} but the vocabulary has {} tokens",
                self.model.vocab_size,
                vocab.size()
            )));
        }
        self.model.validate().map_err(|e| inv(e.to_string()))?;
        self.dropout.validate().map_err(|e| inv(e.to_string()))?;
        self.calibration.validate().map_err(|e| inv(e.to_string()))?;
        self.train.validate().map_err(|e| inv(e.to_string()))?;
        self.endpoint.validate().map_err(|e| inv(e.to_string()))?;
        if self.dropout.max_response_len as u32 > vocab.max_len {
            return Err(inv(format!(
                "dropout.max_response_len {} exceeds vocab.max_len {}",
                self.dropout.max_response_len, vocab.max_len
            )));
        }
        let d = &self.data;
        if d.sft_min_constraints == 0 || d.sft_max_constraints < d.sft_min_constraints {
            return Err(inv("data.sft_min_constraints must be in [1, sft_max_constraints]".into()));
        }
        let h = &self.heldout;
        if h.min_constraints == 0 || h.max_constraints < h.min_constraints {
            return Err(inv("heldout.min_constraints must be in [1, max_constraints]".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        assert_eq!(RunConfig::from_toml("").unwrap(), cfg);
        let desk = RunConfig::desk();
        assert_eq!(RunConfig::from_toml(&desk.to_toml()).unwrap(), desk);
    }

    #[test]
    fn defaults_match_paper_preset() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.train, TrainConfig::paper());
        assert_eq!(cfg.dropout.alpha, 0.3);
        assert_eq!(cfg.dropout.temperature, 0.5);
        assert_eq!((cfg.dropout.min_constraints, cfg.dropout.max_constraints), (3, 10));
        assert_eq!(cfg.calibration.gamma, 2.0);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::from_toml("[train]\nlearning_rate = 1.0\n").unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
        assert!(RunConfig::from_toml("bogus = 1\n").is_err());
    }

    #[test]
    fn partial_sections_keep_defaults() {
        let cfg = RunConfig::from_toml("[train]\nlr = 0.001\n[train.loss]\nmethod = \"ipo\"\nbeta = 1.0\n")
            .unwrap();
        assert_eq!(cfg.train.lr, 1e-3);
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.train.loss.sft_mix, 0.1);
    }

    #[test]
    fn inconsistent_vocab_rejected() {
        let err = RunConfig::from_toml("[vocab]\nn_letters = 4\n").unwrap_err();
        assert!(err.to_string().contains("vocab_size"), "{err}");
    }
}
