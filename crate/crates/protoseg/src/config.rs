//! Experiment configuration: a strict TOML schema (unknown keys are
//! errors), semantic validation, and a stable content hash used to pair
//! checkpoints with the config that produced them.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{AugConfig, NUM_SHAPE_FAMILIES};
use crate::encoder::EncoderConfig;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub name: String,
    pub max_iterations: u64,
    pub checkpoint_every: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { name: "default".into(), max_iterations: 2000, checkpoint_every: 500 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub seed: u64,
    pub num_classes: usize,
    pub images_per_class: usize,
    pub resolution: usize,
    pub folds: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { seed: 1, num_classes: 8, images_per_class: 50, resolution: 64, folds: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeConfig {
    pub n_way: usize,
    pub k_shot: usize,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig { n_way: 1, k_shot: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatcherConfig {
    /// Cosine-logit scale of the prototype softmax.
    pub alpha: f64,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        MatcherConfig { alpha: 20.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DictConfig {
    pub capacity: usize,
}

impl Default for DictConfig {
    fn default() -> Self {
        DictConfig { capacity: 512 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NceConfig {
    pub temperature: f64,
}

impl Default for NceConfig {
    fn default() -> Self {
        NceConfig { temperature: 0.05 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CsclConfig {
    pub enabled: bool,
    /// Loss weight (lambda_1 in the total loss).
    pub lambda: f64,
    /// Max negatives drawn from the dictionary per anchor.
    pub num_negatives: usize,
}

impl Default for CsclConfig {
    fn default() -> Self {
        CsclConfig { enabled: true, lambda: 0.02, num_negatives: 256 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CaclConfig {
    pub enabled: bool,
    /// Loss weight (lambda_2 in the total loss).
    pub lambda: f64,
    /// Negative keys sampled per anchor.
    pub num_negatives: usize,
    /// Pixels pooled per negative key.
    pub group_size: usize,
}

impl Default for CaclConfig {
    fn default() -> Self {
        CaclConfig { enabled: true, lambda: 0.015, num_negatives: 64, group_size: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub ema_momentum: f64,
    /// Episodes per optimization step (gradients averaged).
    pub batch_size: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            ema_momentum: 0.999,
            batch_size: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub num_episodes: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { num_episodes: 100, seed: 7777 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub run: RunConfig,
    pub data: DataConfig,
    pub episode: EpisodeConfig,
    pub aug: AugConfig,
    pub encoder: EncoderConfig,
    pub matcher: MatcherConfig,
    pub dict: DictConfig,
    pub nce: NceConfig,
    pub cscl: CsclConfig,
    pub cacl: CaclConfig,
    pub trainer: TrainerConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.num_classes < 4 || d.num_classes > NUM_SHAPE_FAMILIES {
            return Err(Error::Config(format!(
                "data.num_classes must be in [4, {NUM_SHAPE_FAMILIES}], got {}",
                d.num_classes
            )));
        }
        if d.resolution < 32 {
            return Err(Error::Config(format!(
                "data.resolution must be >= 32, got {}",
                d.resolution
            )));
        }
        self.encoder.validate()?;
        let stride = self.encoder.total_stride();
        if d.resolution % stride != 0 {
            return Err(Error::Config(format!(
                "data.resolution {} not divisible by encoder total stride {stride}",
                d.resolution
            )));
        }
        if d.folds == 0 || d.folds > d.num_classes {
            return Err(Error::Config(format!(
                "data.folds must be in [1, num_classes], got {}",
                d.folds
            )));
        }
        if d.images_per_class < self.episode.k_shot + 1 {
            return Err(Error::Config(format!(
                "data.images_per_class {} cannot supply {}-shot episodes",
                d.images_per_class, self.episode.k_shot
            )));
        }
        if self.episode.n_way == 0 || self.episode.k_shot == 0 {
            return Err(Error::Config("episode.n_way and episode.k_shot must be positive".into()));
        }
        for (name, p) in [
            ("aug.crop_prob", self.aug.crop_prob),
            ("aug.flip_prob", self.aug.flip_prob),
            ("aug.jitter_prob", self.aug.jitter_prob),
            ("aug.grayscale_prob", self.aug.grayscale_prob),
            ("aug.blur_prob", self.aug.blur_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0,1], got {p}")));
            }
        }
        if !(self.aug.crop_min_scale > 0.0 && self.aug.crop_min_scale <= 1.0) {
            return Err(Error::Config(format!(
                "aug.crop_min_scale must be in (0,1], got {}",
                self.aug.crop_min_scale
            )));
        }
        if self.matcher.alpha <= 0.0 {
            return Err(Error::Config(format!(
                "matcher.alpha must be positive, got {}",
                self.matcher.alpha
            )));
        }
        if self.dict.capacity == 0 {
            return Err(Error::Config("dict.capacity must be positive".into()));
        }
        if self.nce.temperature <= 0.0 {
            return Err(Error::Config(format!(
                "nce.temperature must be positive, got {}",
                self.nce.temperature
            )));
        }
        if self.cscl.num_negatives == 0 || self.cacl.num_negatives == 0 {
            return Err(Error::Config("contrastive num_negatives must be positive".into()));
        }
        if self.cacl.group_size == 0 {
            return Err(Error::Config("cacl.group_size must be positive".into()));
        }
        if !self.cscl.lambda.is_finite()
            || !self.cacl.lambda.is_finite()
            || self.cscl.lambda < 0.0
            || self.cacl.lambda < 0.0
        {
            return Err(Error::Config("contrastive lambdas must be finite and >= 0".into()));
        }
        let t = &self.trainer;
        if t.lr <= 0.0 || !t.lr.is_finite() {
            return Err(Error::Config(format!("trainer.lr must be positive, got {}", t.lr)));
        }
        if !(0.0..1.0).contains(&t.momentum) {
            return Err(Error::Config(format!(
                "trainer.momentum must be in [0,1), got {}",
                t.momentum
            )));
        }
        if t.weight_decay < 0.0 {
            return Err(Error::Config("trainer.weight_decay must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&t.ema_momentum) {
            return Err(Error::Config(format!(
                "trainer.ema_momentum must be in [0,1), got {}",
                t.ema_momentum
            )));
        }
        if t.batch_size == 0 {
            return Err(Error::Config("trainer.batch_size must be positive".into()));
        }
        if self.run.max_iterations == 0 || self.run.checkpoint_every == 0 {
            return Err(Error::Config(
                "run.max_iterations and run.checkpoint_every must be positive".into(),
            ));
        }
        if self.eval.num_episodes == 0 {
            return Err(Error::Config("eval.num_episodes must be positive".into()));
        }
        Ok(())
    }

    /// CSCL runs only when enabled with a positive weight.
    pub fn cscl_active(&self) -> bool {
        self.cscl.enabled && self.cscl.lambda > 0.0
    }

    pub fn cacl_active(&self) -> bool {
        self.cacl.enabled && self.cacl.lambda > 0.0
    }

    /// Stable content hash over the canonical TOML serialization.
    pub fn hash(&self) -> String {
        let text = toml::to_string(self).expect("config serialization");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_errors() {
        let err = ExperimentConfig::from_toml_str("[data]\nbogus_key = 3\n");
        assert!(matches!(err, Err(Error::Config(_))));
        let err = ExperimentConfig::from_toml_str("[not_a_section]\nx = 1\n");
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg = ExperimentConfig::from_toml_str("[data]\nseed = 9\n").unwrap();
        assert_eq!(cfg.data.seed, 9);
        assert_eq!(cfg.data.num_classes, 8);
        assert_eq!(cfg.trainer.lr, 1e-3);
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = ExperimentConfig::default();
        let mut b = ExperimentConfig::default();
        assert_eq!(a.hash(), b.hash());
        b.trainer.lr = 2e-3;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn rejects_indivisible_resolution() {
        let mut cfg = ExperimentConfig::default();
        cfg.data.resolution = 60; // not divisible by total stride 8
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        let mut cfg = ExperimentConfig::default();
        cfg.trainer.momentum = 1.0;
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::default();
        cfg.nce.temperature = 0.0;
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::default();
        cfg.aug.flip_prob = 1.5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn lambda_zero_disables_branch() {
        let mut cfg = ExperimentConfig::default();
        assert!(cfg.cscl_active());
        cfg.cscl.lambda = 0.0;
        assert!(!cfg.cscl_active());
        cfg.cscl.lambda = 0.02;
        cfg.cscl.enabled = false;
        assert!(!cfg.cscl_active());
    }
}
