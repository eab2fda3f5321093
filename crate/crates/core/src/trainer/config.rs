use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoders::{Pooling, PoolingHeadConfig};
use crate::error::{Error, Result};
use crate::model::{ModelDims, ModelSpec};
use crate::objectives::{SupportSimilarity, Variant, DEFAULT_LAMBDA, DEFAULT_MARGIN, DEFAULT_TEMPERATURE};

/// Where the support pool for captioning comes from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SupportSource {
    /// The current batch only.
    #[default]
    Batch,
    /// The current batch plus a FIFO of past video embeddings.
    MemoryBank { capacity: usize },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastiveLoss {
    None,
    #[default]
    Triplet,
    Infonce,
}

/// Which negatives the contrastive loss sees.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastiveMode {
    /// Cross-modal negatives only.
    #[default]
    Inter,
    /// Cross-modal plus same-modality negatives.
    InterIntra,
}

/// What the support weights mix.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixLevel {
    /// One pooled vector per video.
    #[default]
    Pooled,
    /// Whole contextualized frame sequences, position by position.
    Sequence,
}

/// Training configuration. Read from JSON; unknown keys are rejected and
/// missing keys take the defaults below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Triplet margin.
    pub alpha: f64,
    /// Softmax temperature for support weights and InfoNCE.
    pub temperature: f64,
    /// Weight of the captioning term.
    pub lambda: f64,
    pub learning_rate: f64,
    /// Global L2 norm the gradient is clipped to.
    pub grad_clip_norm: f64,
    pub dropout: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub variant: Variant,
    pub support_source: SupportSource,
    pub contrastive: ContrastiveLoss,
    pub contrastive_mode: ContrastiveMode,
    pub pooling: Pooling,
    pub model: PoolingHeadConfig,
    pub support_sim: SupportSimilarity,
    pub mix_level: MixLevel,
    pub tie_embeddings: bool,
    /// Fraction of each class held out for retrieval evaluation.
    pub holdout_fraction: f64,
    pub eval_ks: Vec<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_MARGIN,
            temperature: DEFAULT_TEMPERATURE,
            lambda: DEFAULT_LAMBDA,
            learning_rate: 5e-5,
            grad_clip_norm: 0.2,
            dropout: 0.3,
            batch_size: 64,
            epochs: 20,
            variant: Variant::Cross,
            support_source: SupportSource::Batch,
            contrastive: ContrastiveLoss::Triplet,
            contrastive_mode: ContrastiveMode::Inter,
            pooling: Pooling::Transformer,
            model: PoolingHeadConfig::default(),
            support_sim: SupportSimilarity::Cosine,
            mix_level: MixLevel::Pooled,
            tie_embeddings: false,
            holdout_fraction: 0.1,
            eval_ks: vec![1, 5, 10],
            seed: 0,
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be a positive number, got {v}")))
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn contrastive_enabled(&self) -> bool {
        self.contrastive != ContrastiveLoss::None
    }

    /// The captioning branch exists only for a captioning variant with a
    /// non-zero weight.
    pub fn captioning_enabled(&self) -> bool {
        self.variant != Variant::None && self.lambda != 0.0
    }

    /// Smallest batch a training step can use.
    pub fn min_batch(&self) -> usize {
        if self.contrastive_enabled() || (self.captioning_enabled() && self.variant == Variant::Cross) {
            2
        } else {
            1
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::Config(format!("alpha must be non-negative, got {}", self.alpha)));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        positive("temperature", self.temperature)?;
        positive("learning_rate", self.learning_rate)?;
        positive("grad_clip_norm", self.grad_clip_norm)?;
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Config(format!("holdout_fraction must lie in [0, 1), got {}", self.holdout_fraction)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.eval_ks.is_empty() || self.eval_ks.contains(&0) {
            return Err(Error::Config("eval_ks must be a non-empty list of positive cutoffs".into()));
        }
        if !self.contrastive_enabled() && !self.captioning_enabled() {
            return Err(Error::Config(
                "nothing to train: contrastive loss is none and the captioning branch is disabled".into(),
            ));
        }
        if self.batch_size < self.min_batch() {
            let why = if self.contrastive_enabled() {
                "a contrastive loss needs at least one negative"
            } else {
                "the cross variant would have an empty support set"
            };
            return Err(Error::Config(format!("batch_size {} is too small: {why} (need at least 2)", self.batch_size)));
        }
        if let SupportSource::MemoryBank { capacity: 0 } = self.support_source {
            return Err(Error::Config("memory bank capacity must be positive".into()));
        }
        self.model.validate()
    }

    pub fn model_spec(&self, dims: ModelDims) -> ModelSpec {
        ModelSpec { head: self.model.clone(), pooling: self.pooling, tie_embeddings: self.tie_embeddings, dims }
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_reference_setup() {
        let c = TrainConfig::default();
        assert_eq!(c.alpha, 0.2);
        assert_eq!(c.temperature, 0.1);
        assert_eq!(c.lambda, 10.0);
        assert_eq!(c.learning_rate, 5e-5);
        assert_eq!(c.grad_clip_norm, 0.2);
        assert_eq!(c.dropout, 0.3);
        c.validate().unwrap();
    }

    #[test]
    fn json_accepts_partial_and_rejects_unknown() {
        let c = TrainConfig::from_json(r#"{"batch_size": 8, "support_source": {"memory_bank": {"capacity": 32}}}"#)
            .unwrap();
        assert_eq!(c.batch_size, 8);
        assert_eq!(c.support_source, SupportSource::MemoryBank { capacity: 32 });
        assert!(matches!(TrainConfig::from_json(r#"{"batchsize": 8}"#), Err(Error::Config(_))));
        assert!(TrainConfig::from_json(r#"{"model": {"embed_dim": 8, "depth": 2}}"#).is_err());
    }

    #[test]
    fn cross_with_single_sample_batches_is_rejected() {
        let c = TrainConfig {
            variant: Variant::Cross,
            batch_size: 1,
            contrastive: ContrastiveLoss::None,
            ..Default::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let ok = TrainConfig { variant: Variant::Identity, ..c };
        ok.validate().unwrap();
    }

    #[test]
    fn hash_tracks_content() {
        let a = TrainConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
