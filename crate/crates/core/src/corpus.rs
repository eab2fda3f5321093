//! Synthetic paired video/caption corpora and their JSON Lines file format.
//!
//! Every class owns one feature prototype (an `M x feature_dim` matrix) and one
//! caption template. A sample copies its class prototype plus Gaussian noise
//! scaled by `intra_class_noise`, and copies the template with a bounded number
//! of content tokens replaced. At zero noise all members of a class are
//! identical, which gives retrieval and attention tests a known ground truth.
//!
//! File layout: line 1 is a header object, every further line one sample.
//!
//! ```text
//! {"version":1,"feature_dim":8,"M":4,"N":6,"vocab_size":16,"num_classes":2}
//! {"id":"c000-000","class_id":0,"video_features":[...],"caption_tokens":[1,7,9,2,0,0],"caption_true_len":4}
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
/// Token ids below this value are reserved.
pub const NUM_SPECIAL_TOKENS: u32 = 4;

pub const FORMAT_VERSION: u32 = 1;

/// Fraction of a caption's content tokens replaced at `intra_class_noise >= 1`.
pub const MAX_TOKEN_PERTURBATION: f64 = 0.3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    /// Frames per video (`M`).
    pub video_len: usize,
    /// Maximum caption length including BOS and EOS (`N`).
    pub caption_len_max: usize,
    pub feature_dim: usize,
    pub vocab_size: usize,
    pub intra_class_noise: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            num_classes: 16,
            samples_per_class: 16,
            video_len: 8,
            caption_len_max: 10,
            feature_dim: 16,
            vocab_size: 32,
            intra_class_noise: 0.5,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_classes", self.num_classes),
            ("samples_per_class", self.samples_per_class),
            ("video_len", self.video_len),
            ("caption_len_max", self.caption_len_max),
            ("feature_dim", self.feature_dim),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.vocab_size < NUM_SPECIAL_TOKENS as usize {
            return Err(Error::Config(format!(
                "vocab_size must be at least {NUM_SPECIAL_TOKENS} (PAD, BOS, EOS, UNK), got {}",
                self.vocab_size
            )));
        }
        if self.caption_len_max < 2 {
            return Err(Error::Config(format!(
                "caption_len_max must leave room for BOS and EOS, got {}",
                self.caption_len_max
            )));
        }
        if !(self.intra_class_noise.is_finite() && self.intra_class_noise >= 0.0) {
            return Err(Error::Config(format!(
                "intra_class_noise must be a non-negative number, got {}",
                self.intra_class_noise
            )));
        }
        Ok(())
    }

    pub fn total_samples(&self) -> usize {
        self.num_classes * self.samples_per_class
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusHeader {
    pub version: u32,
    pub feature_dim: usize,
    #[serde(rename = "M")]
    pub video_len: usize,
    #[serde(rename = "N")]
    pub caption_len_max: usize,
    pub vocab_size: usize,
    pub num_classes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSample {
    pub id: String,
    pub class_id: usize,
    /// `M x feature_dim`, frozen upstream features.
    pub video_features: Matrix,
    /// BOS-prefixed, EOS-terminated, PAD-filled up to `N`.
    pub caption_tokens: Vec<u32>,
    pub caption_true_len: usize,
}

impl CorpusSample {
    /// Valid-frame mask; synthetic videos use every frame.
    pub fn video_mask(&self) -> Vec<bool> {
        vec![true; self.video_features.rows()]
    }

    pub fn caption_mask(&self) -> Vec<bool> {
        (0..self.caption_tokens.len()).map(|k| k < self.caption_true_len).collect()
    }

    pub fn caption(&self) -> &[u32] {
        &self.caption_tokens[..self.caption_true_len]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub header: CorpusHeader,
    pub samples: Vec<CorpusSample>,
}

impl Corpus {
    pub fn empty(header: CorpusHeader) -> Self {
        Self { header, samples: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Checks every sample against the header.
    pub fn validate(&self) -> Result<()> {
        for (k, s) in self.samples.iter().enumerate() {
            check_sample(&self.header, s).map_err(|message| Error::Schema {
                path: "<memory>".into(),
                line: k + 2,
                message,
            })?;
        }
        Ok(())
    }
}

/// Deterministic in `spec.seed`.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (m, f, n) = (spec.video_len, spec.feature_dim, spec.caption_len_max);

    let content_token = |rng: &mut ChaCha8Rng| -> u32 {
        if spec.vocab_size as u32 > NUM_SPECIAL_TOKENS {
            rng.random_range(NUM_SPECIAL_TOKENS..spec.vocab_size as u32)
        } else {
            UNK
        }
    };

    let mut prototypes = Vec::with_capacity(spec.num_classes);
    let mut templates = Vec::with_capacity(spec.num_classes);
    for _ in 0..spec.num_classes {
        let proto: Vec<f64> = (0..m * f).map(|_| StandardNormal.sample(&mut rng)).collect();
        prototypes.push(proto);
        let min_len = n.div_ceil(2).max(2);
        let true_len = rng.random_range(min_len..=n);
        let mut tokens = vec![PAD; n];
        tokens[0] = BOS;
        for t in tokens.iter_mut().take(true_len - 1).skip(1) {
            *t = content_token(&mut rng);
        }
        tokens[true_len - 1] = EOS;
        templates.push((tokens, true_len));
    }

    let fraction = spec.intra_class_noise.min(1.0) * MAX_TOKEN_PERTURBATION;
    let mut samples = Vec::with_capacity(spec.total_samples());
    for class in 0..spec.num_classes {
        for k in 0..spec.samples_per_class {
            let features: Vec<f64> = prototypes[class]
                .iter()
                .map(|&p| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    p + spec.intra_class_noise * z
                })
                .collect();
            let (mut tokens, true_len) = templates[class].clone();
            let content = true_len - 2;
            let swaps = (fraction * content as f64).floor() as usize;
            if swaps > 0 {
                for pos in sample_indices(&mut rng, content, swaps) {
                    tokens[pos + 1] = content_token(&mut rng);
                }
            }
            samples.push(CorpusSample {
                id: format!("c{class:03}-{k:03}"),
                class_id: class,
                video_features: Matrix::from_vec(m, f, features),
                caption_tokens: tokens,
                caption_true_len: true_len,
            });
        }
    }

    Ok(Corpus {
        header: CorpusHeader {
            version: FORMAT_VERSION,
            feature_dim: f,
            video_len: m,
            caption_len_max: n,
            vocab_size: spec.vocab_size,
            num_classes: spec.num_classes,
        },
        samples,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    id: String,
    class_id: usize,
    video_features: Vec<f64>,
    caption_tokens: Vec<u32>,
    caption_true_len: usize,
}

pub fn corpus_to_string(corpus: &Corpus) -> Result<String> {
    let mut out = serde_json::to_string(&corpus.header)?;
    out.push('\n');
    for s in &corpus.samples {
        if !s.video_features.all_finite() {
            return Err(Error::Input(format!("sample {} has non-finite features", s.id)));
        }
        let rec = SampleRecord {
            id: s.id.clone(),
            class_id: s.class_id,
            video_features: s.video_features.data().to_vec(),
            caption_tokens: s.caption_tokens.clone(),
            caption_true_len: s.caption_true_len,
        };
        out.push_str(&serde_json::to_string(&rec)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = corpus_to_string(corpus)?;
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text, path)
}

/// Parses corpus text; `path` is only used for error messages.
pub fn parse_corpus(text: &str, path: &Path) -> Result<Corpus> {
    let parse_err = |line: usize, message: String| Error::Parse { path: path.to_path_buf(), line, message };
    let schema_err = |line: usize, message: String| Error::Schema { path: path.to_path_buf(), line, message };

    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let Some((_, first)) = lines.next() else {
        return Err(parse_err(1, "missing header record".into()));
    };
    let header: CorpusHeader = serde_json::from_str(first).map_err(|e| parse_err(1, format!("header: {e}")))?;
    if header.version != FORMAT_VERSION {
        return Err(schema_err(1, format!("unsupported version {} (expected {FORMAT_VERSION})", header.version)));
    }

    let mut samples = Vec::new();
    for (k, line) in lines {
        let lineno = k + 1;
        let rec: SampleRecord = serde_json::from_str(line).map_err(|e| parse_err(lineno, format!("sample: {e}")))?;
        let expected = header.video_len * header.feature_dim;
        if rec.video_features.len() != expected {
            return Err(schema_err(
                lineno,
                format!(
                    "field video_features has {} values, header requires M x feature_dim = {expected}",
                    rec.video_features.len()
                ),
            ));
        }
        let sample = CorpusSample {
            id: rec.id,
            class_id: rec.class_id,
            video_features: Matrix::from_vec(header.video_len, header.feature_dim, rec.video_features),
            caption_tokens: rec.caption_tokens,
            caption_true_len: rec.caption_true_len,
        };
        check_sample(&header, &sample).map_err(|m| schema_err(lineno, m))?;
        samples.push(sample);
    }
    Ok(Corpus { header, samples })
}

fn check_sample(header: &CorpusHeader, s: &CorpusSample) -> std::result::Result<(), String> {
    if s.video_features.shape() != (header.video_len, header.feature_dim) {
        return Err(format!(
            "field video_features has shape {:?}, expected ({}, {})",
            s.video_features.shape(),
            header.video_len,
            header.feature_dim
        ));
    }
    if !s.video_features.all_finite() {
        return Err("field video_features contains non-finite values".into());
    }
    if s.class_id >= header.num_classes {
        return Err(format!("field class_id {} out of range for {} classes", s.class_id, header.num_classes));
    }
    let toks = &s.caption_tokens;
    if toks.len() > header.caption_len_max {
        return Err(format!("field caption_tokens has length {}, exceeds N = {}", toks.len(), header.caption_len_max));
    }
    if let Some(bad) = toks.iter().find(|&&t| t as usize >= header.vocab_size) {
        return Err(format!("field caption_tokens contains id {bad} outside vocabulary of size {}", header.vocab_size));
    }
    let len = s.caption_true_len;
    if len < 1 || len > toks.len() {
        return Err(format!("field caption_true_len {len} out of range"));
    }
    if toks[0] != BOS {
        return Err("field caption_tokens must start with BOS".into());
    }
    if len >= 2 && toks[len - 1] != EOS {
        return Err("field caption_tokens must have EOS at caption_true_len - 1".into());
    }
    if toks[len..].iter().any(|&t| t != PAD) {
        return Err("field caption_tokens must be PAD after caption_true_len".into());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(classes: usize, per_class: usize, noise: f64, seed: u64) -> CorpusSpec {
        CorpusSpec {
            num_classes: classes,
            samples_per_class: per_class,
            video_len: 4,
            caption_len_max: 8,
            feature_dim: 5,
            vocab_size: 20,
            intra_class_noise: noise,
            seed,
        }
    }

    #[test]
    fn zero_noise_collapses_each_class() {
        let c = generate_corpus(&spec(2, 3, 0.0, 1)).unwrap();
        assert_eq!(c.len(), 6);
        for a in &c.samples {
            for b in &c.samples {
                if a.class_id == b.class_id {
                    assert_eq!(a.video_features, b.video_features);
                    assert_eq!(a.caption_tokens, b.caption_tokens);
                } else {
                    assert!(a.video_features.max_abs_diff(&b.video_features) > 0.0);
                }
            }
        }
    }

    #[test]
    fn generation_is_seeded() {
        let a = corpus_to_string(&generate_corpus(&spec(4, 8, 0.1, 7)).unwrap()).unwrap();
        let b = corpus_to_string(&generate_corpus(&spec(4, 8, 0.1, 7)).unwrap()).unwrap();
        let c = corpus_to_string(&generate_corpus(&spec(4, 8, 0.1, 8)).unwrap()).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn samples_satisfy_token_layout() {
        let c = generate_corpus(&spec(5, 4, 1.0, 3)).unwrap();
        c.validate().unwrap();
        for s in &c.samples {
            assert_eq!(s.caption_tokens.len(), 8);
            assert_eq!(s.caption_tokens[0], BOS);
            assert_eq!(s.caption_tokens[s.caption_true_len - 1], EOS);
        }
    }

    #[test]
    fn rejects_invalid_specs() {
        for bad in [
            CorpusSpec { num_classes: 0, ..spec(1, 1, 0.0, 0) },
            CorpusSpec { vocab_size: 3, ..spec(1, 1, 0.0, 0) },
            CorpusSpec { caption_len_max: 1, ..spec(1, 1, 0.0, 0) },
            CorpusSpec { intra_class_noise: -0.1, ..spec(1, 1, 0.0, 0) },
        ] {
            assert!(matches!(generate_corpus(&bad), Err(Error::Config(_))));
        }
    }

    #[test]
    fn intra_class_distance_grows_with_noise() {
        let mean_intra = |noise: f64| {
            let c = generate_corpus(&spec(3, 4, noise, 11)).unwrap();
            let mut total = 0.0;
            let mut count = 0;
            for a in &c.samples {
                for b in &c.samples {
                    if a.class_id == b.class_id && a.id < b.id {
                        total += a.video_features.zip_map(&b.video_features, |x, y| (x - y).powi(2)).sum().sqrt();
                        count += 1;
                    }
                }
            }
            total / count as f64
        };
        let levels = [0.0, 0.1, 0.5, 2.0];
        let d: Vec<f64> = levels.iter().map(|&n| mean_intra(n)).collect();
        assert_eq!(d[0], 0.0);
        assert!(d.windows(2).all(|w| w[0] <= w[1]), "{d:?}");
    }

    #[test]
    fn empty_corpus_round_trips_to_header_only() {
        let header = generate_corpus(&spec(1, 1, 0.0, 0)).unwrap().header;
        let c = Corpus::empty(header);
        let text = corpus_to_string(&c).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert_eq!(parse_corpus(&text, Path::new("x")).unwrap(), c);
    }

    #[test]
    fn token_outside_vocabulary_is_schema_error() {
        let mut c = generate_corpus(&spec(1, 1, 0.0, 0)).unwrap();
        c.samples[0].caption_tokens[1] = 20;
        let text = corpus_to_string(&c).unwrap();
        let err = parse_corpus(&text, Path::new("bad.jsonl")).unwrap_err();
        assert!(matches!(err, Error::Schema { line: 2, .. }), "{err}");
    }

    #[test]
    fn malformed_record_names_line_and_field() {
        let c = generate_corpus(&spec(1, 2, 0.0, 0)).unwrap();
        let mut text = corpus_to_string(&c).unwrap();
        text = text.replacen("\"class_id\"", "\"klass\"", 2);
        let err = parse_corpus(&text, Path::new("bad.jsonl")).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{msg}");
        assert!(msg.contains("klass"), "{msg}");
    }

    #[test]
    fn feature_count_mismatch_is_schema_error() {
        let c = generate_corpus(&spec(1, 1, 0.0, 0)).unwrap();
        let text = corpus_to_string(&c).unwrap().replace("\"feature_dim\":5", "\"feature_dim\":6");
        let err = parse_corpus(&text, Path::new("bad.jsonl")).unwrap_err();
        assert!(matches!(err, Error::Schema { line: 2, .. }), "{err}");
        assert!(err.to_string().contains("video_features"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn write_read_round_trip(classes in 1usize..4, per in 1usize..4, noise in 0.0f64..3.0, seed in any::<u64>()) {
            let c = generate_corpus(&spec(classes, per, noise, seed)).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("c.jsonl");
            write_corpus(&c, &path).unwrap();
            prop_assert_eq!(read_corpus(&path).unwrap(), c);
        }
    }
}
