//! Finite-difference verification of the training loss gradient.
//!
//! The analytic gradient from one backward pass is compared, entry by entry,
//! with a five-point central difference
//! `(-f(w+2h) + 8 f(w+h) - 8 f(w-h) + f(w-2h)) / 12h` on randomly chosen
//! trainable scalars. Dropout is off so the loss is a deterministic function
//! of the weights; normalization runs in training mode.
//!
//! The loss is only piecewise smooth (ReLU, hinge, hardest-negative max). A
//! stencil straddling a kink measures a blend of two slopes, so the step is
//! shrunk geometrically until two consecutive estimates agree, and the
//! larger step of the agreeing pair is used.
//!
//! Relative error is `|a - n| / max(|a|, |n|, floor)`: gradients below the
//! floor are effectively compared on an absolute scale, where rounding noise
//! of the difference quotient (about `1e-14 / h` here) would otherwise
//! dominate.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::corpus::{generate_corpus, CorpusSample, CorpusSpec};
use crate::encoders::PoolingHeadConfig;
use crate::error::{Error, Result};
use crate::model::{Model, ModelDims};
use crate::nn::NormKind;
use crate::objectives::Variant;
use crate::params::ParamId;
use crate::trainer::{batch_loss, ContrastiveLoss, ContrastiveMode, MixLevel, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckSettings {
    pub embed_dim: usize,
    pub batch_size: usize,
    pub vocab_size: usize,
    /// Scalars checked among those with a non-zero analytic gradient.
    pub nonzero_samples: usize,
    /// Scalars checked among those whose analytic gradient is exactly zero.
    pub zero_samples: usize,
    /// Largest finite-difference step tried.
    pub step: f64,
    /// Successive steps shrink by this factor.
    pub step_shrink: f64,
    pub max_refinements: usize,
    /// Relative agreement required between consecutive estimates.
    pub agreement: f64,
    /// Absolute slack in that agreement, covering rounding noise.
    pub agreement_abs: f64,
    /// Gradients smaller than this are compared on an absolute scale.
    pub magnitude_floor: f64,
    pub variant: Variant,
    pub contrastive: ContrastiveLoss,
    pub contrastive_mode: ContrastiveMode,
    pub mix_level: MixLevel,
    pub norm: NormKind,
    pub seed: u64,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        Self {
            embed_dim: 8,
            batch_size: 4,
            vocab_size: 16,
            nonzero_samples: 128,
            zero_samples: 32,
            step: 1e-4,
            step_shrink: 0.25,
            max_refinements: 4,
            agreement: 1e-6,
            agreement_abs: 1e-9,
            magnitude_floor: 1e-5,
            variant: Variant::Cross,
            contrastive: ContrastiveLoss::Triplet,
            contrastive_mode: ContrastiveMode::Inter,
            mix_level: MixLevel::Pooled,
            norm: NormKind::Batch,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Step the reported numeric estimate used.
    pub step: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub loss: f64,
    pub trainable_scalars: usize,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    pub fn nonzero_checked(&self) -> usize {
        self.entries.iter().filter(|e| e.analytic != 0.0).count()
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// The tiny model, corpus batch and config the check runs on.
pub fn gradcheck_setup(s: &GradCheckSettings) -> Result<(Model, Vec<CorpusSample>, TrainConfig)> {
    let corpus = generate_corpus(&CorpusSpec {
        num_classes: s.batch_size.div_ceil(2),
        samples_per_class: 2,
        video_len: 5,
        caption_len_max: 6,
        feature_dim: 6,
        vocab_size: s.vocab_size,
        intra_class_noise: 0.5,
        seed: s.seed,
    })?;
    let cfg = TrainConfig {
        dropout: 0.0,
        variant: s.variant,
        contrastive: s.contrastive,
        contrastive_mode: s.contrastive_mode,
        mix_level: s.mix_level,
        batch_size: s.batch_size,
        model: PoolingHeadConfig {
            embed_dim: s.embed_dim,
            num_heads: 2,
            ffn_hidden: 2 * s.embed_dim,
            num_layers: 2,
            conv_kernel_sizes: vec![2, 3],
            norm: s.norm,
        },
        seed: s.seed,
        ..Default::default()
    };
    cfg.validate()?;
    let model = Model::new(cfg.model_spec(ModelDims::from_header(&corpus.header)), s.seed)?;
    let batch = corpus.samples.into_iter().take(s.batch_size).collect();
    Ok((model, batch, cfg))
}

fn loss_value(model: &Model, batch: &[&CorpusSample], cfg: &TrainConfig) -> Result<f64> {
    let mut g = Graph::training(model.store(), ChaCha8Rng::seed_from_u64(0), 0.0);
    let l = batch_loss(&mut g, model, cfg, batch, None)?;
    Ok(g.scalar(l.total))
}

/// Runs the check described in the module documentation.
pub fn check_gradients(s: &GradCheckSettings) -> Result<GradCheckReport> {
    let (mut model, samples, cfg) = gradcheck_setup(s)?;
    let batch: Vec<&CorpusSample> = samples.iter().collect();

    let (loss, grads) = {
        let mut g = Graph::training(model.store(), ChaCha8Rng::seed_from_u64(0), 0.0);
        let l = batch_loss(&mut g, &model, &cfg, &batch, None)?;
        (g.scalar(l.total), g.backward(l.total))
    };

    // every trainable scalar as (param, flat index, analytic gradient)
    let mut nonzero = Vec::new();
    let mut zero = Vec::new();
    let trainable: Vec<ParamId> = model.store().trainable_ids().collect();
    for &id in &trainable {
        let n = model.store().get(id).len();
        let g = grads.param(id);
        for k in 0..n {
            let a = g.map_or(0.0, |m| m.data()[k]);
            if a != 0.0 {
                nonzero.push((id, k, a));
            } else {
                zero.push((id, k, a));
            }
        }
    }
    if nonzero.len() < s.nonzero_samples {
        return Err(Error::Input(format!(
            "only {} scalars have a non-zero gradient; {} requested",
            nonzero.len(),
            s.nonzero_samples
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed ^ 0x9e37_79b9);
    let mut chosen: Vec<(ParamId, usize, f64)> =
        sample(&mut rng, nonzero.len(), s.nonzero_samples).into_iter().map(|i| nonzero[i]).collect();
    let z = s.zero_samples.min(zero.len());
    chosen.extend(sample(&mut rng, zero.len(), z).into_iter().map(|i| zero[i]));

    let mut entries = Vec::with_capacity(chosen.len());
    for (id, k, analytic) in chosen {
        let w0 = model.store().get(id).data()[k];
        let mut stencil = |h: f64| -> Result<f64> {
            let mut at = |delta: f64| -> Result<f64> {
                model.store_mut().get_mut(id).data_mut()[k] = w0 + delta;
                loss_value(&model, &batch, &cfg)
            };
            let (p2, p1, m1, m2) = (at(2.0 * h)?, at(h)?, at(-h)?, at(-2.0 * h)?);
            Ok((-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * h))
        };
        let mut h = s.step;
        let mut numeric = stencil(h)?;
        for _ in 0..s.max_refinements {
            let next = stencil(h * s.step_shrink)?;
            let gap = (numeric - next).abs();
            if gap <= s.agreement * numeric.abs().max(next.abs()) + s.agreement_abs {
                break;
            }
            h *= s.step_shrink;
            numeric = next;
        }
        model.store_mut().get_mut(id).data_mut()[k] = w0;
        entries.push(GradCheckEntry {
            param: model.store().entry(id).name.clone(),
            index: k,
            analytic,
            numeric,
            step: h,
            rel_error: relative_error(analytic, numeric, s.magnitude_floor),
        });
    }
    Ok(GradCheckReport { loss, trainable_scalars: nonzero.len() + zero.len(), entries })
}
