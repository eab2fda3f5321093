//! Training objectives: the hard-negative triplet loss, the InfoNCE
//! alternative, support-set attention, cross-captioning and the combined loss.
//!
//! Each objective exists twice. The plain functions here operate on
//! [`Matrix`] values and serve evaluation and testing; [`graph`] builds the
//! same quantities on an autograd tape for training. Tests check that the two
//! routes agree.
//!
//! Conventions:
//!
//! * similarities are cosine, `s(a, b) = a.b / (|a| |b|)`, with rows indexing
//!   texts and columns indexing videos;
//! * the hardest negative excludes the positive pair (`j != i`), and ties go
//!   to the lowest index;
//! * the support-set softmax uses cosine similarity by default
//!   ([`SupportSimilarity::Dot`] keeps raw inner products);
//! * the support pool holds the current batch first, so pool index `i` is
//!   the video paired with text `i`.

use serde::{Deserialize, Serialize};

use crate::autograd::softmax_rows;
use crate::decoder::Decoder;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{dot, Matrix};

pub const DEFAULT_MARGIN: f64 = 0.2;
pub const DEFAULT_TEMPERATURE: f64 = 0.1;
pub const DEFAULT_LAMBDA: f64 = 10.0;

/// Text-by-video cosine similarities.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix(Matrix);

impl SimilarityMatrix {
    /// Rows of `text` against rows of `video`. Zero vectors have similarity 0.
    pub fn from_embeddings(text: &Matrix, video: &Matrix) -> Self {
        let m = text.normalize_rows().matmul_t(&video.normalize_rows());
        Self(m.map(|x| x.clamp(-1.0, 1.0)))
    }

    /// Wraps precomputed similarities, which must lie in `[-1, 1]`.
    pub fn new(values: Matrix) -> Result<Self> {
        if let Some(bad) = values.data().iter().find(|x| !(-1.0..=1.0).contains(*x)) {
            return Err(Error::Input(format!("similarity {bad} outside [-1, 1]")));
        }
        Ok(Self(values))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn get(&self, text: usize, video: usize) -> f64 {
        self.0.get(text, video)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.shape()
    }

    pub fn is_square(&self) -> bool {
        self.0.rows() == self.0.cols()
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
    }
}

fn require_square(sim: &SimilarityMatrix, min: usize, what: &str) -> Result<usize> {
    let (r, c) = sim.shape();
    if r != c {
        return Err(Error::Shape(format!("{what} needs a square similarity matrix, got {r}x{c}")));
    }
    if r < min {
        return Err(Error::Input(format!("{what} needs a batch of at least {min}, got {r}")));
    }
    Ok(r)
}

/// Hinge-based triplet ranking loss with hardest in-batch negatives, averaged
/// over the batch and summed over both retrieval directions.
pub fn triplet_contrastive(sim: &SimilarityMatrix, margin: f64) -> Result<f64> {
    let b = require_square(sim, 2, "triplet loss")?;
    let mut total = 0.0;
    for i in 0..b {
        let pos = sim.get(i, i);
        let hardest_video = (0..b).filter(|&j| j != i).map(|j| sim.get(i, j)).fold(f64::NEG_INFINITY, f64::max);
        let hardest_text = (0..b).filter(|&j| j != i).map(|j| sim.get(j, i)).fold(f64::NEG_INFINITY, f64::max);
        total += (margin - pos + hardest_video).max(0.0) + (margin - pos + hardest_text).max(0.0);
    }
    Ok(total / b as f64)
}

/// Which similarities enter the InfoNCE denominators.
#[derive(Clone, Copy, Debug)]
pub enum InfoNceMode<'a> {
    /// Cross-modal candidates only.
    Inter,
    /// Cross-modal candidates plus same-modality negatives: text-text
    /// similarities for text anchors and video-video ones for video anchors.
    InterIntra { text: &'a SimilarityMatrix, video: &'a SimilarityMatrix },
}

/// Symmetric softmax cross-entropy against the diagonal; the mean of the
/// text-anchored and video-anchored terms.
pub fn infonce_contrastive(sim: &SimilarityMatrix, temperature: f64, mode: InfoNceMode<'_>) -> Result<f64> {
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(Error::Input(format!("InfoNCE temperature must be positive, got {temperature}")));
    }
    let b = require_square(sim, 1, "InfoNCE")?;
    let intra = match mode {
        InfoNceMode::Inter => None,
        InfoNceMode::InterIntra { text, video } => {
            if text.shape() != (b, b) || video.shape() != (b, b) {
                return Err(Error::Shape("intra-modal similarities must match the batch".into()));
            }
            Some((text, video))
        }
    };
    let term = |anchor_row: &dyn Fn(usize) -> f64, extra: &dyn Fn(usize) -> f64, i: usize| -> f64 {
        let mut logits: Vec<f64> = (0..b).map(|j| anchor_row(j) / temperature).collect();
        if intra.is_some() {
            logits.extend((0..b).filter(|&j| j != i).map(|j| extra(j) / temperature));
        }
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + logits.iter().map(|l| (l - mx).exp()).sum::<f64>().ln();
        lse - logits[i]
    };
    let mut text_side = 0.0;
    let mut video_side = 0.0;
    for i in 0..b {
        text_side += term(&|j| sim.get(i, j), &|j| intra.map_or(0.0, |(t, _)| t.get(i, j)), i);
        video_side += term(&|j| sim.get(j, i), &|j| intra.map_or(0.0, |(_, v)| v.get(i, j)), i);
    }
    Ok(0.5 * (text_side + video_side) / b as f64)
}

/// Captioning regime. `None` disables the captioning branch entirely.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    None,
    /// Each caption is reconstructed from its own video.
    Identity,
    /// Softmax over every pool entry, own video included.
    Full,
    /// Average of the identity and full weights.
    Hybrid,
    /// Softmax over every pool entry except the caption's own video.
    #[default]
    Cross,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::None, Variant::Identity, Variant::Full, Variant::Hybrid, Variant::Cross];

    pub fn label(self) -> &'static str {
        match self {
            Variant::None => "None",
            Variant::Identity => "Identity",
            Variant::Full => "Full",
            Variant::Hybrid => "Hybrid",
            Variant::Cross => "Cross",
        }
    }
}

/// Inner product used inside the support-set softmax.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SupportSimilarity {
    #[default]
    Cosine,
    Dot,
}

/// Row-stochastic attention of captions over the support pool.
#[derive(Clone, Debug, PartialEq)]
pub struct SupportWeights {
    pub weights: Matrix,
    pub variant: Variant,
    pub temperature: f64,
}

impl SupportWeights {
    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.weights.rows()).map(|i| self.weights.row(i).iter().sum()).collect()
    }
}

/// Keep-mask for the support softmax; `None` when every entry participates.
pub(crate) fn support_mask(variant: Variant, batch: usize, pool: usize) -> Option<Vec<bool>> {
    match variant {
        Variant::Cross => Some((0..batch * pool).map(|e| e / pool != e % pool).collect()),
        _ => None,
    }
}

pub(crate) fn check_support(variant: Variant, batch: usize, pool: usize, temperature: f64) -> Result<()> {
    if variant == Variant::None {
        return Err(Error::Config("variant none has no support weights".into()));
    }
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(Error::Config(format!("support temperature must be positive, got {temperature}")));
    }
    if pool < batch {
        return Err(Error::Shape(format!("support pool of {pool} cannot contain the batch of {batch}")));
    }
    if variant == Variant::Cross && pool < 2 {
        return Err(Error::Config("cross variant needs a support pool of at least 2 (empty support set)".into()));
    }
    Ok(())
}

/// Support weights of `B` captions over a pool of `P >= B` videos whose first
/// `B` entries are the batch itself.
pub fn support_weights(
    text: &Matrix,
    pool: &Matrix,
    variant: Variant,
    temperature: f64,
    similarity: SupportSimilarity,
) -> Result<SupportWeights> {
    let (b, p) = (text.rows(), pool.rows());
    check_support(variant, b, p, temperature)?;
    if text.cols() != pool.cols() {
        return Err(Error::Shape("text and pool embeddings differ in width".into()));
    }
    let mut identity = Matrix::zeros(b, p);
    for i in 0..b {
        identity.set(i, i, 1.0);
    }
    let weights = if variant == Variant::Identity {
        identity
    } else {
        let logits = match similarity {
            SupportSimilarity::Cosine => text.normalize_rows().matmul_t(&pool.normalize_rows()),
            SupportSimilarity::Dot => text.matmul_t(pool),
        }
        .scale(1.0 / temperature);
        let mask = support_mask(variant, b, p);
        let soft = softmax_rows(&logits, mask.as_deref());
        if variant == Variant::Hybrid {
            soft.zip_map(&identity, |a, b| 0.5 * (a + b))
        } else {
            soft
        }
    };
    Ok(SupportWeights { weights, variant, temperature })
}

/// Mean captioning NLL where caption `i` is conditioned on
/// `sum_j weights[i][j] * pool[j]`.
pub fn cross_captioning_loss(
    decoder: &Decoder,
    store: &ParamStore,
    captions: &[(&[u32], usize)],
    weights: &SupportWeights,
    pool: &[Matrix],
) -> Result<f64> {
    let w = &weights.weights;
    if w.rows() != captions.len() || w.cols() != pool.len() {
        return Err(Error::Shape(format!(
            "weights are {}x{}, expected {}x{}",
            w.rows(),
            w.cols(),
            captions.len(),
            pool.len()
        )));
    }
    let shape = pool.first().map(Matrix::shape).ok_or_else(|| Error::Input("empty pool".into()))?;
    if pool.iter().any(|m| m.shape() != shape) {
        return Err(Error::Shape("pool entries differ in shape".into()));
    }
    let mut total = 0.0;
    for (i, (tokens, len)) in captions.iter().enumerate() {
        let mut mixed = Matrix::zeros(shape.0, shape.1);
        for (j, e) in pool.iter().enumerate() {
            let wij = w.get(i, j);
            for (m, x) in mixed.data_mut().iter_mut().zip(e.data()) {
                *m += wij * x;
            }
        }
        total += decoder.caption_nll(store, tokens, *len, &mixed)?;
    }
    Ok(total / captions.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub contrast: f64,
    pub caption: f64,
    pub total: f64,
    pub lambda: f64,
    pub margin: f64,
}

/// `total = contrast + lambda * caption`.
pub fn combined_loss(contrast: f64, caption: f64, lambda: f64, margin: f64) -> LossBreakdown {
    LossBreakdown { contrast, caption, total: contrast + lambda * caption, lambda, margin }
}

/// One stored support entry. Values are copies and carry no gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct BankEntry {
    pub embedding: Vec<f64>,
    pub conditioning: Matrix,
}

/// Fixed-capacity FIFO of past video embeddings that extends the support pool
/// beyond the current batch. Stored values are not refreshed after insertion.
#[derive(Clone, Debug)]
pub struct MemoryBank {
    slots: Vec<Option<BankEntry>>,
    cursor: usize,
    seen: usize,
}

impl MemoryBank {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("memory bank capacity must be positive".into()));
        }
        Ok(Self { slots: vec![None; capacity], cursor: 0, seen: 0 })
    }

    pub fn capacity(&self) -> usize {
        self.slots.len()
    }

    pub fn len(&self) -> usize {
        self.seen.min(self.capacity())
    }

    pub fn is_empty(&self) -> bool {
        self.seen == 0
    }

    pub fn push(&mut self, entry: BankEntry) {
        let cap = self.capacity();
        self.slots[self.cursor] = Some(entry);
        self.cursor = (self.cursor + 1) % cap;
        self.seen += 1;
    }

    pub fn push_batch(&mut self, embeddings: &Matrix, conditioning: &[Matrix]) {
        for (i, c) in conditioning.iter().enumerate() {
            self.push(BankEntry { embedding: embeddings.row(i).to_vec(), conditioning: c.clone() });
        }
    }

    /// Stored entries, oldest first.
    pub fn entries(&self) -> Vec<&BankEntry> {
        let cap = self.capacity();
        let n = self.len();
        let start = if self.seen < cap { 0 } else { self.cursor };
        (0..n).filter_map(|k| self.slots[(start + k) % cap].as_ref()).collect()
    }

    /// The support pool: the current batch followed by the bank contents.
    pub fn pool(&self, batch_embeddings: &Matrix, batch_conditioning: &[Matrix]) -> (Matrix, Vec<Matrix>) {
        let entries = self.entries();
        let mut rows: Vec<&[f64]> = (0..batch_embeddings.rows()).map(|i| batch_embeddings.row(i)).collect();
        rows.extend(entries.iter().map(|e| e.embedding.as_slice()));
        let mut cond: Vec<Matrix> = batch_conditioning.to_vec();
        cond.extend(entries.iter().map(|e| e.conditioning.clone()));
        (Matrix::from_rows(&rows), cond)
    }
}

/// Differentiable versions of the objectives.
pub mod graph {
    use std::rc::Rc;

    use super::{check_support, support_mask, SupportSimilarity, Variant};
    use crate::autograd::{Graph, Var};
    use crate::error::Result;
    use crate::tensor::Matrix;

    /// Cosine similarities between the rows of `a` and `b`.
    pub fn cosine_similarity(g: &mut Graph<'_>, a: Var, b: Var) -> Var {
        let na = g.normalize_rows(a);
        let nb = g.normalize_rows(b);
        g.matmul_t(na, nb)
    }

    fn diagonal(g: &mut Graph<'_>, sim: Var) -> Var {
        let b = g.shape(sim).0;
        let idx: Vec<(usize, usize)> = (0..b).map(|i| (i, i)).collect();
        g.pick(sim, &idx)
    }

    fn off_diagonal_mask(rows: usize, blocks: usize) -> Vec<bool> {
        let cols = rows * blocks;
        (0..rows * cols).map(|e| e / cols != (e % cols) % rows).collect()
    }

    /// Triplet loss from text (`B x d`) and video (`B x d`) embeddings. With
    /// `intra`, same-modality samples join the negative candidates.
    pub fn triplet(g: &mut Graph<'_>, text: Var, video: Var, margin: f64, intra: bool) -> Var {
        let b = g.shape(text).0;
        let tv = cosine_similarity(g, text, video);
        let vt = g.transpose(tv);
        let pos = diagonal(g, tv);
        let (text_cand, video_cand, blocks) = if intra {
            let tt = cosine_similarity(g, text, text);
            let vv = cosine_similarity(g, video, video);
            (g.concat_cols(&[tv, tt]), g.concat_cols(&[vt, vv]), 2)
        } else {
            (tv, vt, 1)
        };
        let keep = off_diagonal_mask(b, blocks);
        let h_text = g.hard_negative_hinge(text_cand, pos, &keep, margin);
        let h_video = g.hard_negative_hinge(video_cand, pos, &keep, margin);
        let both = g.add(h_text, h_video);
        let s = g.sum_all(both);
        g.scale(s, 1.0 / b as f64)
    }

    /// Symmetric InfoNCE from text and video embeddings.
    pub fn infonce(g: &mut Graph<'_>, text: Var, video: Var, temperature: f64, intra: bool) -> Var {
        let b = g.shape(text).0;
        let tv = cosine_similarity(g, text, video);
        let vt = g.transpose(tv);
        let (text_logits, video_logits, mask) = if intra {
            let tt = cosine_similarity(g, text, text);
            let vv = cosine_similarity(g, video, video);
            let cols = 2 * b;
            let mask: Vec<bool> = (0..b * cols)
                .map(|e| {
                    let (i, j) = (e / cols, e % cols);
                    j < b || j - b != i
                })
                .collect();
            (g.concat_cols(&[tv, tt]), g.concat_cols(&[vt, vv]), Some(Rc::new(mask)))
        } else {
            (tv, vt, None)
        };
        let idx: Vec<(usize, usize)> = (0..b).map(|i| (i, i)).collect();
        let mut sides = Vec::with_capacity(2);
        for logits in [text_logits, video_logits] {
            let scaled = g.scale(logits, 1.0 / temperature);
            let lp = g.log_softmax_rows(scaled, mask.clone());
            sides.push(g.pick(lp, &idx));
        }
        let both = g.add(sides[0], sides[1]);
        let s = g.sum_all(both);
        g.scale(s, -0.5 / b as f64)
    }

    /// `B x P` support weights; the identity variant yields a constant.
    pub fn support_weights(
        g: &mut Graph<'_>,
        text: Var,
        pool: Var,
        variant: Variant,
        temperature: f64,
        similarity: SupportSimilarity,
    ) -> Result<Var> {
        let (b, p) = (g.shape(text).0, g.shape(pool).0);
        check_support(variant, b, p, temperature)?;
        let mut identity = Matrix::zeros(b, p);
        for i in 0..b {
            identity.set(i, i, 1.0);
        }
        if variant == Variant::Identity {
            return Ok(g.constant(identity));
        }
        let logits = match similarity {
            SupportSimilarity::Cosine => cosine_similarity(g, text, pool),
            SupportSimilarity::Dot => g.matmul_t(text, pool),
        };
        let logits = g.scale(logits, 1.0 / temperature);
        let mask = support_mask(variant, b, p).map(Rc::new);
        let soft = g.softmax_rows(logits, mask);
        Ok(if variant == Variant::Hybrid {
            let id = g.constant(identity);
            let sum = g.add(soft, id);
            g.scale(sum, 0.5)
        } else {
            soft
        })
    }

    /// Row `i` of the result is `sum_j weights[i][j] * pool[j]`; every pool
    /// entry must have the same `K x d` shape.
    pub fn mix(g: &mut Graph<'_>, weights: Var, pool: &[Var]) -> Vec<Var> {
        let (k, d) = g.shape(pool[0]);
        let flat: Vec<Var> = pool.iter().map(|&e| if k == 1 { e } else { g.reshape(e, 1, k * d) }).collect();
        let stacked = g.concat_rows(&flat);
        let mixed = g.matmul(weights, stacked);
        let b = g.shape(weights).0;
        (0..b)
            .map(|i| {
                let row = g.slice_rows(mixed, i, 1);
                if k == 1 {
                    row
                } else {
                    g.reshape(row, k, d)
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sim(rows: &[&[f64]]) -> SimilarityMatrix {
        SimilarityMatrix::new(Matrix::from_rows(rows)).unwrap()
    }

    fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Term-by-term evaluation of the triplet loss with explicit loops over
    /// every (i, j) pair.
    fn triplet_oracle(s: &Matrix, margin: f64) -> f64 {
        let b = s.rows();
        let mut sum = 0.0;
        for i in 0..b {
            let mut best_v: Option<f64> = None;
            let mut best_t: Option<f64> = None;
            for j in 0..b {
                if j == i {
                    continue;
                }
                let hv = f64::max(0.0, margin - s.get(i, i) + s.get(i, j));
                let ht = f64::max(0.0, margin - s.get(i, i) + s.get(j, i));
                best_v = Some(best_v.map_or(hv, |x: f64| x.max(hv)));
                best_t = Some(best_t.map_or(ht, |x: f64| x.max(ht)));
            }
            sum += best_v.unwrap() + best_t.unwrap();
        }
        sum / b as f64
    }

    #[test]
    fn triplet_identity_similarity_is_zero() {
        let s = sim(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(triplet_contrastive(&s, 0.2).unwrap(), 0.0);
    }

    #[test]
    fn triplet_equal_similarities_cost_twice_the_margin() {
        for b in 2..6 {
            let s = SimilarityMatrix::new(Matrix::filled(b, b, 0.37)).unwrap();
            let l = triplet_contrastive(&s, 0.2).unwrap();
            assert!((l - 0.4).abs() < 1e-12, "B={b}: {l}");
        }
    }

    #[test]
    fn triplet_needs_two_samples() {
        let s = sim(&[&[1.0]]);
        assert!(triplet_contrastive(&s, 0.2).is_err());
        let r = SimilarityMatrix::new(Matrix::zeros(2, 3)).unwrap();
        assert!(matches!(triplet_contrastive(&r, 0.2), Err(Error::Shape(_))));
    }

    #[test]
    fn triplet_random_4x4_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = random_matrix(4, 4, &mut rng);
        let s = SimilarityMatrix::new(m.clone()).unwrap();
        assert_eq!(triplet_contrastive(&s, 0.2).unwrap(), triplet_oracle(&m, 0.2));
    }

    #[test]
    fn infonce_two_by_two_closed_form() {
        let s = sim(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let e = std::f64::consts::E;
        let expected = -(e / (e + 1.0)).ln();
        let l = infonce_contrastive(&s, 1.0, InfoNceMode::Inter).unwrap();
        assert!((l - expected).abs() < 1e-12);
        assert!((l - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn infonce_uniform_is_log_b() {
        for b in 1..6 {
            let s = SimilarityMatrix::new(Matrix::filled(b, b, 0.2)).unwrap();
            let l = infonce_contrastive(&s, 0.1, InfoNceMode::Inter).unwrap();
            assert!((l - (b as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn infonce_decreases_with_stronger_diagonal() {
        let mut prev = f64::INFINITY;
        for d in [0.0, 0.2, 0.5, 0.9] {
            let s = sim(&[&[d, 0.1, -0.2], &[0.3, d, 0.0], &[0.1, 0.1, d]]);
            let l = infonce_contrastive(&s, 0.5, InfoNceMode::Inter).unwrap();
            assert!(l < prev);
            prev = l;
        }
        assert!(infonce_contrastive(&s_eye(2), 0.0, InfoNceMode::Inter).is_err());
    }

    fn s_eye(n: usize) -> SimilarityMatrix {
        SimilarityMatrix::new(Matrix::identity(n)).unwrap()
    }

    #[test]
    fn support_identity_and_symmetric_cross() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = random_matrix(4, 3, &mut rng);
        let v = random_matrix(4, 3, &mut rng);
        let w = support_weights(&t, &v, Variant::Identity, 0.1, SupportSimilarity::Cosine).unwrap();
        assert_eq!(w.weights, Matrix::identity(4));

        let same = Matrix::filled(4, 3, 0.5);
        let w = support_weights(&same, &same, Variant::Cross, 0.1, SupportSimilarity::Cosine).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let expected = if i == j { 0.0 } else { 1.0 / 3.0 };
                assert!((w.weights.get(i, j) - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn hybrid_is_mean_of_identity_and_full() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = random_matrix(5, 4, &mut rng);
        let v = random_matrix(5, 4, &mut rng);
        let get = |var| support_weights(&t, &v, var, 0.1, SupportSimilarity::Cosine).unwrap().weights;
        let expected = get(Variant::Identity).zip_map(&get(Variant::Full), |a, b| (a + b) / 2.0);
        assert!(get(Variant::Hybrid).max_abs_diff(&expected) < 1e-15);
    }

    #[test]
    fn cross_with_single_entry_pool_is_rejected() {
        let t = Matrix::filled(1, 3, 1.0);
        let err = support_weights(&t, &t, Variant::Cross, 0.1, SupportSimilarity::Cosine).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn low_temperature_concentrates_on_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = random_matrix(6, 4, &mut rng);
        let v = random_matrix(6, 4, &mut rng);
        let w = support_weights(&t, &v, Variant::Cross, 1e-3, SupportSimilarity::Cosine).unwrap();
        let cos = t.normalize_rows().matmul_t(&v.normalize_rows());
        for i in 0..6 {
            let best = (0..6).filter(|&j| j != i).max_by(|&a, &b| cos.get(i, a).total_cmp(&cos.get(i, b))).unwrap();
            assert!((w.weights.get(i, best) - 1.0).abs() < 1e-6, "row {i}");
        }
    }

    #[test]
    fn combined_loss_arithmetic() {
        let b = combined_loss(0.4, 0.03, 10.0, 0.2);
        assert!((b.total - 0.7).abs() < 1e-12);
        assert_eq!(combined_loss(0.4, 5.0, 0.0, 0.2).total, 0.4);
        assert_eq!(DEFAULT_LAMBDA, 10.0);
    }

    #[test]
    fn memory_bank_is_fifo() {
        assert!(MemoryBank::new(0).is_err());
        let mut bank = MemoryBank::new(4).unwrap();
        for k in 1..=6 {
            bank.push(BankEntry { embedding: vec![k as f64], conditioning: Matrix::filled(1, 1, k as f64) });
        }
        let held: Vec<f64> = bank.entries().iter().map(|e| e.embedding[0]).collect();
        assert_eq!(held, vec![3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn empty_bank_pool_is_the_batch() {
        let bank = MemoryBank::new(3).unwrap();
        let emb = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        let cond = vec![Matrix::zeros(1, 2), Matrix::zeros(1, 2)];
        let (p, c) = bank.pool(&emb, &cond);
        assert_eq!(p, emb);
        assert_eq!(c.len(), 2);
    }

    #[test]
    fn pool_size_follows_push_script() {
        // counting oracle: pool = min(capacity, pushed) + batch
        let script = [3usize, 0, 5, 1, 7, 2];
        let batch = 3;
        let capacity = 8;
        let mut bank = MemoryBank::new(capacity).unwrap();
        let mut pushed = 0;
        for n in script {
            let emb = Matrix::zeros(n, 2);
            let cond = vec![Matrix::zeros(1, 2); n];
            bank.push_batch(&emb, &cond);
            pushed += n;
            let (p, c) = bank.pool(&Matrix::zeros(batch, 2), &vec![Matrix::zeros(1, 2); batch]);
            assert_eq!(p.rows(), pushed.min(capacity) + batch);
            assert_eq!(c.len(), p.rows());
        }
    }

    #[test]
    fn graph_support_weights_match_plain_route() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = random_matrix(4, 5, &mut rng);
        let v = random_matrix(7, 5, &mut rng);
        let store = ParamStore::new();
        for variant in [Variant::Identity, Variant::Full, Variant::Hybrid, Variant::Cross] {
            for sim in [SupportSimilarity::Cosine, SupportSimilarity::Dot] {
                let plain = support_weights(&t, &v, variant, 0.1, sim).unwrap();
                let mut g = Graph::new(&store);
                let tv = g.constant(t.clone());
                let vv = g.constant(v.clone());
                let w = graph::support_weights(&mut g, tv, vv, variant, 0.1, sim).unwrap();
                assert!(g.value(w).max_abs_diff(&plain.weights) < 1e-12, "{variant:?} {sim:?}");
            }
        }
    }

    #[test]
    fn graph_contrastive_losses_match_plain_route() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let t = random_matrix(5, 3, &mut rng);
        let v = random_matrix(5, 3, &mut rng);
        let s = SimilarityMatrix::from_embeddings(&t, &v);
        let tt = SimilarityMatrix::from_embeddings(&t, &t);
        let vv = SimilarityMatrix::from_embeddings(&v, &v);
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let tg = g.constant(t.clone());
        let vg = g.constant(v.clone());
        let trip = graph::triplet(&mut g, tg, vg, 0.2, false);
        assert!((g.scalar(trip) - triplet_contrastive(&s, 0.2).unwrap()).abs() < 1e-12);
        let nce = graph::infonce(&mut g, tg, vg, 0.1, false);
        assert!((g.scalar(nce) - infonce_contrastive(&s, 0.1, InfoNceMode::Inter).unwrap()).abs() < 1e-12);
        let nce2 = graph::infonce(&mut g, tg, vg, 0.1, true);
        let plain2 = infonce_contrastive(&s, 0.1, InfoNceMode::InterIntra { text: &tt, video: &vv }).unwrap();
        assert!((g.scalar(nce2) - plain2).abs() < 1e-12);
    }

    #[test]
    fn scaling_one_embedding_leaves_triplet_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let t = random_matrix(4, 3, &mut rng);
        let v = random_matrix(4, 3, &mut rng);
        let base = triplet_contrastive(&SimilarityMatrix::from_embeddings(&t, &v), 0.2).unwrap();
        let mut t2 = t.clone();
        t2.row_mut(2).iter_mut().for_each(|x| *x *= 7.5);
        let scaled = triplet_contrastive(&SimilarityMatrix::from_embeddings(&t2, &v), 0.2).unwrap();
        assert!((base - scaled).abs() < 1e-12);
        let a = [0.3, -0.4, 1.2];
        let na = dot(&a, &a).sqrt();
        let b: Vec<f64> = a.iter().map(|x| x / na * 3.0).collect();
        assert!((cosine(&a, &b) - 1.0).abs() < 1e-15);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn triplet_matches_exhaustive_oracle(b in 2usize..=8, seed in any::<u64>(), margin in 0.0f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_matrix(b, b, &mut rng);
            let s = SimilarityMatrix::new(m.clone()).unwrap();
            prop_assert_eq!(triplet_contrastive(&s, margin).unwrap(), triplet_oracle(&m, margin));
        }

        #[test]
        fn support_rows_are_stochastic(b in 1usize..=8, extra in 0usize..4, seed in any::<u64>(), t in 0.01f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let text = random_matrix(b, 4, &mut rng);
            let pool = random_matrix(b + extra, 4, &mut rng);
            for variant in [Variant::Identity, Variant::Full, Variant::Hybrid, Variant::Cross] {
                if variant == Variant::Cross && b + extra < 2 {
                    continue;
                }
                let w = support_weights(&text, &pool, variant, t, SupportSimilarity::Cosine).unwrap();
                for s in w.row_sums() {
                    prop_assert!((s - 1.0).abs() < 1e-6);
                }
                for i in 0..b {
                    let d = w.weights.get(i, i);
                    match variant {
                        Variant::Cross => prop_assert_eq!(d, 0.0),
                        Variant::Hybrid => prop_assert!(d >= 0.5),
                        Variant::Identity => prop_assert_eq!(d, 1.0),
                        _ => {}
                    }
                }
            }
        }
    }
}
