use std::path::Path;

use anyhow::Context;
use lemma_htr::augment::{AugmentConfig, Preset};
use lemma_htr::decode::GenerationConfig;
use lemma_htr::models::ModelConfig;
use lemma_htr::train::{Regime, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataprepSection {
    pub train_fraction: f64,
    /// Box-width validation flags a set whose Pearson r falls below this.
    pub flag_threshold: f64,
}

impl Default for DataprepSection {
    fn default() -> Self {
        Self {
            train_fraction: 0.85,
            flag_threshold: lemma_htr::dataprep::DEFAULT_FLAG_THRESHOLD,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSection {
    pub preset: Preset,
    pub settings: AugmentConfig,
}

impl AugmentSection {
    /// The settings with the preset's toggles applied.
    pub fn resolved(&self) -> AugmentConfig {
        let mut cfg = self.settings.clone();
        cfg.apply_preset(self.preset);
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerSection {
    pub vocab_size: usize,
}

impl Default for TokenizerSection {
    fn default() -> Self {
        Self {
            vocab_size: lemma_htr::tokenizer::DEFAULT_VOCAB_SIZE,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Apply the external-system normalizer in `compare`.
    pub normalize_external: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            normalize_external: true,
        }
    }
}

/// Everything a run needs, read from one TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Used for splitting, initialization, shuffling and augmentation.
    pub seed: u64,
    pub dataprep: DataprepSection,
    pub augment: AugmentSection,
    pub tokenizer: TokenizerSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub pretrain: TrainConfig,
    pub generation: GenerationConfig,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            dataprep: DataprepSection::default(),
            augment: AugmentSection::default(),
            tokenizer: TokenizerSection::default(),
            model: ModelConfig::default(),
            train: TrainConfig::for_regime(Regime::Standard),
            pretrain: TrainConfig::for_regime(Regime::PretrainDecoder),
            generation: GenerationConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

/// A config problem that is the user's to fix; exits with status 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError(e.to_string()))
    }

    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                Ok(Self::from_toml(&text).map_err(|e| ConfigError(format!("config {}: {e}", p.display())))?)
            }
        }
    }

    /// Pushes the global seed and the augment section into the training
    /// sections, then validates every section.
    pub fn resolve(mut self, seed: Option<u64>, preset: Option<Preset>) -> anyhow::Result<Self> {
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(p) = preset {
            self.augment.preset = p;
        }
        self.train.seed = self.seed;
        self.pretrain.seed = self.seed;
        self.train.augment = (self.train.regime == Regime::Augmented).then(|| self.augment.resolved());
        self.pretrain.regime = Regime::PretrainDecoder;
        self.pretrain.augment = None;
        self.model.validate()?;
        self.train.validate()?;
        self.pretrain.validate()?;
        self.generation.validate()?;
        self.augment.resolved().validate()?;
        if !(self.dataprep.train_fraction > 0.0 && self.dataprep.train_fraction < 1.0) {
            return Err(ConfigError(format!(
                "configuration error in [dataprep] train_fraction: must lie in (0, 1), got {}",
                self.dataprep.train_fraction
            ))
            .into());
        }
        Ok(self)
    }
}
