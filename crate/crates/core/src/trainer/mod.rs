//! Optimization loop, configuration, checkpoints and ablation grids.

mod ablate;
mod checkpoint;
mod config;

pub use ablate::{ablate, AblationGrid, AblationRow, AblationTable, Axis, GridCell, RowMetrics, RowStatus};
pub use checkpoint::{
    checkpoint_bytes, load_checkpoint, parse_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use config::{ContrastiveLoss, ContrastiveMode, MixLevel, SupportSource, TrainConfig};

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::corpus::{Corpus, CorpusSample};
use crate::error::{Error, Result};
use crate::evaluation::{retrieval_metrics, RetrievalMetrics};
use crate::model::{Model, ModelDims};
use crate::objectives::{combined_loss, graph, LossBreakdown, MemoryBank, SimilarityMatrix, Variant};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Matrix;

// Independent random streams derived from the one configured seed.
const STREAM_INIT: u64 = 0;
const STREAM_SPLIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_DROPOUT_BASE: u64 = 1 << 32;

pub(crate) fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Per-epoch training record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    /// Mean loss terms over the epoch's steps.
    pub loss: LossBreakdown,
    /// Global gradient norm of every step, before clipping.
    pub grad_norms: Vec<f64>,
    /// Global gradient norm of every step, after clipping.
    pub clipped_grad_norms: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    pub config_hash: String,
    pub config: TrainConfig,
    pub train_samples: usize,
    pub heldout_ids: Vec<String>,
    pub epochs: Vec<EpochRecord>,
    /// Retrieval on the held-out split; absent when nothing is held out.
    pub heldout: Option<RetrievalMetrics>,
    pub wall_clock_seconds: f64,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<&LossBreakdown> {
        self.epochs.last().map(|e| &e.loss)
    }
}

pub struct TrainOutcome {
    pub model: Model,
    pub report: TrainReport,
}

/// Class-stratified split: `round(fraction * n_c)` samples of every class go
/// to the held-out side. Returns (train, held-out) indices in corpus order.
pub fn split_indices(corpus: &Corpus, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in corpus.samples.iter().enumerate() {
        by_class.entry(s.class_id).or_default().push(i);
    }
    let mut rng = seeded(seed, STREAM_SPLIT);
    let mut held = vec![false; corpus.samples.len()];
    for members in by_class.values_mut() {
        members.shuffle(&mut rng);
        let k = (fraction * members.len() as f64).round() as usize;
        for &i in members.iter().take(k) {
            held[i] = true;
        }
    }
    let (mut train, mut heldout) = (Vec::new(), Vec::new());
    for (i, h) in held.into_iter().enumerate() {
        if h {
            heldout.push(i)
        } else {
            train.push(i)
        }
    }
    (train, heldout)
}

/// Text-to-video and video-to-text retrieval over `samples`.
pub fn evaluate(model: &Model, samples: &[&CorpusSample], ks: &[usize]) -> Result<RetrievalMetrics> {
    let e = model.embed(samples)?;
    retrieval_metrics(&SimilarityMatrix::from_embeddings(&e.text, &e.video), ks)
}

struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Option<Matrix>>,
    v: Vec<Option<Matrix>>,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: vec![None; n], v: vec![None; n] }
    }

    fn update(&mut self, store: &mut ParamStore, grads: &[(ParamId, Matrix)], lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for (id, g) in grads {
            let k = id.index();
            let m = self.m[k].get_or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
            let v = self.v[k].get_or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
            let w = store.get_mut(*id);
            for (((w, m), v), g) in w.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *w -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

fn global_norm(grads: &[(ParamId, Matrix)]) -> f64 {
    grads.iter().map(|(_, g)| g.frobenius_sq()).sum::<f64>().sqrt()
}

/// Loss nodes for one batch.
pub struct BatchLoss {
    pub contrast: Option<Var>,
    pub caption: Option<Var>,
    /// `contrast + lambda * caption`.
    pub total: Var,
    /// `B x d` video embeddings.
    pub video_embeddings: Var,
    /// Per-sample decoder conditioning before mixing.
    pub conditioning: Vec<Var>,
}

/// Builds the training loss for `batch` on `g`. `bank` extends the support
/// pool with stored entries.
pub fn batch_loss(
    g: &mut Graph<'_>,
    model: &Model,
    cfg: &TrainConfig,
    batch: &[&CorpusSample],
    bank: Option<&MemoryBank>,
) -> Result<BatchLoss> {
    let vars = model.forward_batch(g, batch)?;
    let text_rows: Vec<Var> = vars.text.iter().map(|e| e.embedding).collect();
    let video_rows: Vec<Var> = vars.video.iter().map(|e| e.embedding).collect();
    let c_t = g.concat_rows(&text_rows);
    let c_v = g.concat_rows(&video_rows);
    let intra = cfg.contrastive_mode == ContrastiveMode::InterIntra;

    let contrast = match cfg.contrastive {
        ContrastiveLoss::None => None,
        ContrastiveLoss::Triplet => Some(graph::triplet(g, c_t, c_v, cfg.alpha, intra)),
        ContrastiveLoss::Infonce => Some(graph::infonce(g, c_t, c_v, cfg.temperature, intra)),
    };

    let conditioning: Vec<Var> = vars
        .video
        .iter()
        .map(|e| match cfg.mix_level {
            MixLevel::Pooled => e.pooled,
            MixLevel::Sequence => e.context,
        })
        .collect();

    let caption = if cfg.captioning_enabled() {
        let mixed = if cfg.variant == Variant::Identity {
            conditioning.clone()
        } else {
            let (pool_emb, pool_cond) = match bank.filter(|b| !b.is_empty()) {
                None => (c_v, conditioning.clone()),
                Some(b) => {
                    let entries = b.entries();
                    let rows: Vec<&[f64]> = entries.iter().map(|e| e.embedding.as_slice()).collect();
                    let stored = g.constant(Matrix::from_rows(&rows));
                    let mut cond = conditioning.clone();
                    cond.extend(entries.iter().map(|e| g.constant(e.conditioning.clone())));
                    (g.concat_rows(&[c_v, stored]), cond)
                }
            };
            let shape = g.shape(pool_cond[0]);
            if pool_cond.iter().any(|&c| g.shape(c) != shape) {
                return Err(Error::Input(
                    "mix_level sequence needs every video in the support pool to have the same number of valid frames"
                        .into(),
                ));
            }
            let w = graph::support_weights(g, c_t, pool_emb, cfg.variant, cfg.temperature, cfg.support_sim)?;
            graph::mix(g, w, &pool_cond)
        };
        let mut terms = Vec::with_capacity(batch.len());
        for (s, &cond) in batch.iter().zip(&mixed) {
            terms.push(model.decoder().nll(g, cond, &s.caption_tokens, s.caption_true_len)?);
        }
        let stacked = g.concat_rows(&terms);
        Some(g.mean_all(stacked))
    } else {
        None
    };

    let total = match (contrast, caption) {
        (Some(c), Some(x)) => {
            let weighted = g.scale(x, cfg.lambda);
            g.add(c, weighted)
        }
        (Some(c), None) => c,
        (None, Some(x)) => g.scale(x, cfg.lambda),
        (None, None) => unreachable!("validated config trains at least one term"),
    };
    Ok(BatchLoss { contrast, caption, total, video_embeddings: c_v, conditioning })
}

/// Trains a fresh model on the corpus's training split.
pub fn train(cfg: &TrainConfig, corpus: &Corpus) -> Result<TrainOutcome> {
    train_with(cfg, corpus, |_| {})
}

/// Like [`train`], calling `on_epoch` after every epoch.
pub fn train_with(cfg: &TrainConfig, corpus: &Corpus, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<TrainOutcome> {
    let started = Instant::now();
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Input("cannot train on an empty corpus".into()));
    }
    let dims = ModelDims::from_header(&corpus.header);
    let mut model = Model::new(cfg.model_spec(dims), init_seed(cfg.seed))?;

    let (train_idx, held_idx) = split_indices(corpus, cfg.holdout_fraction, cfg.seed);
    let batch_size = cfg.batch_size.min(train_idx.len());
    if batch_size < cfg.min_batch() {
        return Err(Error::Config(format!(
            "the training split has {} samples; this configuration needs batches of at least {}",
            train_idx.len(),
            cfg.min_batch()
        )));
    }
    let drop_short = cfg.min_batch() > 1;

    let mut bank = match cfg.support_source {
        SupportSource::MemoryBank { capacity } if cfg.captioning_enabled() => Some(MemoryBank::new(capacity)?),
        _ => None,
    };
    let mut adam = Adam::new(model.store().len());
    let trainable: Vec<ParamId> = model.store().trainable_ids().collect();
    let mut shuffle_rng = seeded(cfg.seed, STREAM_SHUFFLE);
    let mut order = train_idx.clone();
    let mut global_step = 0u64;
    let mut epochs = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut sum_contrast, mut sum_caption) = (0.0, 0.0);
        let mut grad_norms = Vec::new();
        let mut clipped_norms = Vec::new();
        let batches: Vec<&[usize]> =
            order.chunks(batch_size).filter(|b| !(drop_short && b.len() < batch_size)).collect();
        for (step, idx) in batches.iter().enumerate() {
            let samples: Vec<&CorpusSample> = idx.iter().map(|&i| &corpus.samples[i]).collect();
            let rng = seeded(cfg.seed, STREAM_DROPOUT_BASE + global_step);
            global_step += 1;

            let store = model.store();
            let mut g = Graph::training(store, rng, cfg.dropout);
            let sg = batch_loss(&mut g, &model, cfg, &samples, bank.as_ref())?;
            let contrast = sg.contrast.map(|v| g.scalar(v)).unwrap_or(0.0);
            let caption = sg.caption.map(|v| g.scalar(v)).unwrap_or(0.0);
            let total = g.scalar(sg.total);
            for (term, value) in [("contrastive", contrast), ("captioning", caption), ("total", total)] {
                if !value.is_finite() {
                    return Err(Error::Divergence { epoch, step, term, value });
                }
            }
            let grads = g.backward(sg.total);
            let mut param_grads: Vec<(ParamId, Matrix)> =
                trainable.iter().filter_map(|&id| grads.param(id).map(|m| (id, m.clone()))).collect();
            let norm = global_norm(&param_grads);
            if !norm.is_finite() {
                return Err(Error::Divergence { epoch, step, term: "gradient norm", value: norm });
            }
            if norm > cfg.grad_clip_norm {
                let k = cfg.grad_clip_norm / norm;
                for (_, m) in &mut param_grads {
                    m.data_mut().iter_mut().for_each(|x| *x *= k);
                }
            }
            grad_norms.push(norm);
            clipped_norms.push(global_norm(&param_grads));

            let stats = g.take_stat_updates();
            let new_entries = bank.is_some().then(|| {
                let emb = g.value(sg.video_embeddings).clone();
                let cond: Vec<Matrix> = sg.conditioning.iter().map(|&c| g.value(c).clone()).collect();
                (emb, cond)
            });
            drop(g);

            let store = model.store_mut();
            adam.update(store, &param_grads, cfg.learning_rate);
            for (id, value) in stats {
                *store.get_mut(id) = value;
            }
            store.round_to_f32();
            if let (Some(b), Some((emb, cond))) = (bank.as_mut(), new_entries) {
                b.push_batch(&emb, &cond);
            }
            sum_contrast += contrast;
            sum_caption += caption;
        }
        let steps = grad_norms.len();
        let denom = steps.max(1) as f64;
        let record = EpochRecord {
            epoch,
            steps,
            loss: combined_loss(
                sum_contrast / denom,
                if cfg.captioning_enabled() { sum_caption / denom } else { 0.0 },
                cfg.lambda,
                cfg.alpha,
            ),
            grad_norms,
            clipped_grad_norms: clipped_norms,
        };
        on_epoch(&record);
        epochs.push(record);
    }

    let held: Vec<&CorpusSample> = held_idx.iter().map(|&i| &corpus.samples[i]).collect();
    let heldout = if held.is_empty() { None } else { Some(evaluate(&model, &held, &cfg.eval_ks)?) };
    let report = TrainReport {
        seed: cfg.seed,
        config_hash: cfg.hash(),
        config: cfg.clone(),
        train_samples: train_idx.len(),
        heldout_ids: held.iter().map(|s| s.id.clone()).collect(),
        epochs,
        heldout,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    Ok(TrainOutcome { model, report })
}

fn init_seed(seed: u64) -> u64 {
    rand::RngCore::next_u64(&mut seeded(seed, STREAM_INIT))
}
