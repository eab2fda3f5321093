//! Retrieval metrics and support-attention dumps.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::CorpusSample;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::objectives::{support_weights, SimilarityMatrix, SupportSimilarity, SupportWeights, Variant};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    TextToVideo,
    VideoToText,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub direction: Direction,
    /// Fraction of queries whose match ranks within the top `K`.
    pub recall_at: BTreeMap<usize, f64>,
    pub median_rank: f64,
    /// 1-based rank of the true match for each query.
    pub ranks: Vec<usize>,
}

impl RetrievalResult {
    fn from_ranks(direction: Direction, ranks: Vec<usize>, ks: &[usize]) -> Self {
        let n = ranks.len() as f64;
        let recall_at = ks.iter().map(|&k| (k, ranks.iter().filter(|&&r| r <= k).count() as f64 / n)).collect();
        Self { direction, recall_at, median_rank: median(&ranks), ranks }
    }

    pub fn recall(&self, k: usize) -> Option<f64> {
        self.recall_at.get(&k).copied()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub text_to_video: RetrievalResult,
    pub video_to_text: RetrievalResult,
}

/// Median with the midpoint of the two central values for even counts.
pub fn median(ranks: &[usize]) -> f64 {
    let mut s = ranks.to_vec();
    s.sort_unstable();
    let n = s.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        s[n / 2] as f64
    } else {
        (s[n / 2 - 1] + s[n / 2]) as f64 / 2.0
    }
}

/// Pessimistic rank: every other candidate scoring at least as high as the
/// true match is counted ahead of it.
fn rank(scores: impl Iterator<Item = f64>, truth: usize) -> usize {
    let scores: Vec<f64> = scores.collect();
    let target = scores[truth];
    1 + scores.iter().enumerate().filter(|&(j, &s)| j != truth && s >= target).count()
}

/// Bidirectional retrieval metrics with the diagonal as ground truth.
pub fn retrieval_metrics(sim: &SimilarityMatrix, ks: &[usize]) -> Result<RetrievalMetrics> {
    let (r, c) = sim.shape();
    if r != c {
        return Err(Error::Shape(format!("retrieval needs a square similarity matrix, got {r}x{c}")));
    }
    if r == 0 {
        return Err(Error::Input("retrieval over an empty set".into()));
    }
    if ks.contains(&0) {
        return Err(Error::Input("recall cutoffs must be at least 1".into()));
    }
    let t2v = (0..r).map(|i| rank((0..r).map(|j| sim.get(i, j)), i)).collect();
    let v2t = (0..r).map(|i| rank((0..r).map(|j| sim.get(j, i)), i)).collect();
    Ok(RetrievalMetrics {
        text_to_video: RetrievalResult::from_ranks(Direction::TextToVideo, t2v, ks),
        video_to_text: RetrievalResult::from_ranks(Direction::VideoToText, v2t, ks),
    })
}

/// Support weights of one batch, as written to disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionDump {
    pub ids: Vec<String>,
    pub variant: Variant,
    pub temperature: f64,
    /// Row-major `ids.len() x ids.len()` weights.
    pub weights: Vec<f64>,
}

impl AttentionDump {
    pub fn new(ids: Vec<String>, w: &SupportWeights) -> Result<Self> {
        let n = ids.len();
        if w.weights.shape() != (n, n) {
            return Err(Error::Shape(format!("weights are {:?}, expected {n}x{n} for the batch", w.weights.shape())));
        }
        Ok(Self { ids, variant: w.variant, temperature: w.temperature, weights: w.weights.data().to_vec() })
    }

    pub fn size(&self) -> usize {
        self.ids.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.size();
        &self.weights[i * n..(i + 1) * n]
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let dump: Self = serde_json::from_str(&text)?;
        if dump.weights.len() != dump.size() * dump.size() {
            return Err(Error::Shape(format!("{} weights for {} ids", dump.weights.len(), dump.size())));
        }
        Ok(dump)
    }

    /// Grayscale heatmap, `cell` pixels per entry; darker means heavier.
    pub fn write_png(&self, path: &Path, cell: usize) -> Result<()> {
        let n = self.size();
        let cell = cell.max(1);
        let side = (n * cell) as u32;
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), side, side);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let png_err = |e: png::EncodingError| Error::Io { path: path.to_path_buf(), source: std::io::Error::other(e) };
        let mut writer = enc.write_header().map_err(png_err)?;
        let mut pixels = Vec::with_capacity((side * side) as usize);
        for i in 0..n {
            let row: Vec<u8> = self
                .row(i)
                .iter()
                .flat_map(|w| {
                    let v = (255.0 * (1.0 - w.clamp(0.0, 1.0))).round() as u8;
                    std::iter::repeat_n(v, cell)
                })
                .collect();
            for _ in 0..cell {
                pixels.extend_from_slice(&row);
            }
        }
        writer.write_image_data(&pixels).map_err(png_err)?;
        writer.finish().map_err(png_err)
    }
}

/// Support weights a model assigns within one batch, the batch acting as its
/// own support pool.
pub fn export_attention(
    model: &Model,
    batch: &[&CorpusSample],
    variant: Variant,
    temperature: f64,
    similarity: SupportSimilarity,
) -> Result<AttentionDump> {
    let e = model.embed(batch)?;
    let w = support_weights(&e.text, &e.video, variant, temperature, similarity)?;
    AttentionDump::new(batch.iter().map(|s| s.id.clone()).collect(), &w)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropySummary {
    /// Shannon entropy of each row, in nats.
    pub per_row: Vec<f64>,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

pub fn row_entropy(row: &[f64]) -> f64 {
    -row.iter().filter(|&&w| w > 0.0).map(|&w| w * w.ln()).sum::<f64>()
}

pub fn entropy_summary(dump: &AttentionDump) -> EntropySummary {
    let per_row: Vec<f64> = (0..dump.size()).map(|i| row_entropy(dump.row(i))).collect();
    let n = per_row.len().max(1) as f64;
    EntropySummary {
        mean: per_row.iter().sum::<f64>() / n,
        min: per_row.iter().cloned().fold(f64::INFINITY, f64::min),
        max: per_row.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        per_row,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::{support_weights, SupportSimilarity};
    use crate::tensor::Matrix;
    use proptest::prelude::*;

    fn sim(m: Matrix) -> SimilarityMatrix {
        SimilarityMatrix::new(m).unwrap()
    }

    #[test]
    fn identity_similarity_is_perfect() {
        let m = retrieval_metrics(&sim(Matrix::identity(5)), &[1, 5]).unwrap();
        for r in [&m.text_to_video, &m.video_to_text] {
            assert_eq!(r.recall(1), Some(1.0));
            assert_eq!(r.median_rank, 1.0);
        }
    }

    #[test]
    fn one_inversion_matches_sort_oracle() {
        // text 0 prefers video 1 over its own match
        let s = sim(Matrix::from_rows(&[[0.5, 0.8, 0.1], [0.2, 0.9, 0.0], [0.3, 0.1, 0.7]]));
        let m = retrieval_metrics(&s, &[1, 2, 3]).unwrap();
        let oracle = |scores: Vec<f64>, truth: usize| {
            // sort descending, placing the true item after anything it ties with
            let mut idx: Vec<usize> = (0..scores.len()).collect();
            idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then((a == truth).cmp(&(b == truth))));
            idx.iter().position(|&j| j == truth).unwrap() + 1
        };
        let expect_t2v: Vec<usize> = (0..3).map(|i| oracle(s.matrix().row(i).to_vec(), i)).collect();
        let expect_v2t: Vec<usize> = (0..3).map(|i| oracle(s.matrix().column(i), i)).collect();
        assert_eq!(m.text_to_video.ranks, expect_t2v);
        assert_eq!(m.video_to_text.ranks, expect_v2t);
        assert_eq!(m.text_to_video.ranks, vec![2, 1, 1]);
        assert!((m.text_to_video.recall(1).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn constant_similarity_is_worst_case() {
        let m = retrieval_metrics(&sim(Matrix::filled(4, 4, 0.3)), &[1, 4]).unwrap();
        assert_eq!(m.text_to_video.ranks, vec![4; 4]);
        assert_eq!(m.text_to_video.recall(1), Some(0.0));
        assert_eq!(m.text_to_video.recall(4), Some(1.0));
        let one = retrieval_metrics(&sim(Matrix::filled(1, 1, 0.3)), &[1]).unwrap();
        assert_eq!(one.text_to_video.recall(1), Some(1.0));
    }

    #[test]
    fn non_square_is_rejected() {
        assert!(retrieval_metrics(&sim(Matrix::zeros(2, 3)), &[1]).is_err());
    }

    #[test]
    fn even_count_median_uses_midpoint() {
        assert_eq!(median(&[4, 1, 3, 10]), 3.5);
        assert_eq!(median(&[2, 9, 1]), 2.0);
    }

    fn dump_for(weights: Matrix, variant: Variant) -> AttentionDump {
        let n = weights.rows();
        let ids = (0..n).map(|i| format!("s{i}")).collect();
        AttentionDump::new(ids, &SupportWeights { weights, variant, temperature: 0.1 }).unwrap()
    }

    #[test]
    fn entropy_of_known_rows() {
        let third = 1.0 / 3.0;
        let d =
            dump_for(Matrix::from_rows(&[[1.0, 0.0, 0.0], [third, third, third], [0.5, 0.25, 0.25]]), Variant::Full);
        let s = entropy_summary(&d);
        assert_eq!(s.per_row[0], 0.0);
        assert!((s.per_row[1] - 3f64.ln()).abs() < 1e-12);
        assert!((s.per_row[1] - 1.0986).abs() < 1e-4);
        // independent summation of -w ln w
        let direct = -(0.5 * 0.5f64.ln() + 2.0 * 0.25 * 0.25f64.ln());
        assert!((s.per_row[2] - direct).abs() < 1e-12);
        assert_eq!(s.min, 0.0);
        assert!((s.mean - (s.per_row.iter().sum::<f64>() / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn dump_round_trips_and_renders() {
        let emb = Matrix::filled(4, 3, 1.0);
        let w = support_weights(&emb, &emb, Variant::Cross, 0.1, SupportSimilarity::Cosine).unwrap();
        let dump = AttentionDump::new((0..4).map(|i| format!("s{i}")).collect(), &w).unwrap();
        assert_eq!(dump.row(0), &[0.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]);
        let dir = tempfile::tempdir().unwrap();
        let json = dir.path().join("attn.json");
        dump.write_json(&json).unwrap();
        assert_eq!(AttentionDump::read_json(&json).unwrap(), dump);
        let png = dir.path().join("attn.png");
        dump.write_png(&png, 4).unwrap();
        let bytes = std::fs::read(&png).unwrap();
        assert_eq!(&bytes[1..4], b"PNG");
        let err = dump.write_json(&dir.path().join("missing/attn.json")).unwrap_err();
        assert!(err.to_string().contains("missing"));
    }

    proptest! {
        #[test]
        fn recall_is_monotone_and_median_consistent(n in 1usize..30, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let ks: Vec<usize> = (1..=n).collect();
            let m = retrieval_metrics(&sim(Matrix::from_vec(n, n, data)), &ks).unwrap();
            for r in [&m.text_to_video, &m.video_to_text] {
                let rec: Vec<f64> = ks.iter().map(|&k| r.recall(k).unwrap()).collect();
                prop_assert!(rec.windows(2).all(|w| w[0] <= w[1]));
                prop_assert_eq!(rec[n - 1], 1.0);
                prop_assert!(r.median_rank >= 1.0 && r.median_rank <= n as f64);
                prop_assert_eq!(r.median_rank, median(&r.ranks));
            }
        }
    }
}
