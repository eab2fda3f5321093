use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use supportset::corpus::{generate_corpus, CorpusSample, CorpusSpec};
use supportset::encoders::PoolingHeadConfig;
use supportset::evaluation::{export_attention, retrieval_metrics};
use supportset::model::{Model, ModelDims};
use supportset::objectives::{SimilarityMatrix, SupportSimilarity, Variant};
use supportset::tensor::Matrix;
use supportset::trainer::{train, ContrastiveLoss, TrainConfig};

fn small_head() -> PoolingHeadConfig {
    PoolingHeadConfig {
        embed_dim: 8,
        num_heads: 2,
        ffn_hidden: 16,
        num_layers: 1,
        conv_kernel_sizes: vec![2, 3],
        ..Default::default()
    }
}

fn zero_noise(classes: usize, per: usize) -> supportset::corpus::Corpus {
    generate_corpus(&CorpusSpec {
        num_classes: classes,
        samples_per_class: per,
        video_len: 5,
        caption_len_max: 7,
        feature_dim: 6,
        vocab_size: 20,
        intra_class_noise: 0.0,
        seed: 12,
    })
    .unwrap()
}

#[test]
fn identical_samples_spread_cross_attention_evenly() {
    let corpus = zero_noise(1, 4);
    let cfg = TrainConfig { model: small_head(), ..Default::default() };
    let model = Model::new(cfg.model_spec(ModelDims::from_header(&corpus.header)), 3).unwrap();
    let batch: Vec<&CorpusSample> = corpus.samples.iter().collect();
    let dump = export_attention(&model, &batch, Variant::Cross, 0.1, SupportSimilarity::Cosine).unwrap();
    for i in 0..4 {
        for (j, &w) in dump.row(i).iter().enumerate() {
            let expect = if i == j { 0.0 } else { 1.0 / 3.0 };
            assert!((w - expect).abs() < 1e-12, "({i},{j}) = {w}");
        }
    }
    let dump = export_attention(&model, &batch, Variant::Identity, 0.1, SupportSimilarity::Cosine).unwrap();
    for i in 0..4 {
        for (j, &w) in dump.row(i).iter().enumerate() {
            assert_eq!(w, if i == j { 1.0 } else { 0.0 });
        }
    }
    assert_eq!(dump.ids, batch.iter().map(|s| s.id.clone()).collect::<Vec<_>>());
}

#[test]
fn trained_model_attends_to_the_class_partner() {
    let corpus = zero_noise(4, 2);
    let cfg = TrainConfig {
        model: small_head(),
        batch_size: 8,
        epochs: 120,
        learning_rate: 3e-3,
        holdout_fraction: 0.0,
        dropout: 0.0,
        // same-class videos are exact duplicates here, which leaves every
        // hardest-negative hinge active; the softmax loss shares them instead
        contrastive: ContrastiveLoss::Infonce,
        ..Default::default()
    };
    let out = train(&cfg, &corpus).unwrap();
    let batch: Vec<&CorpusSample> = corpus.samples.iter().collect();
    let dump = export_attention(&out.model, &batch, Variant::Cross, cfg.temperature, cfg.support_sim).unwrap();
    for (i, s) in batch.iter().enumerate() {
        let row = dump.row(i);
        let top = (0..row.len()).filter(|&j| j != i).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
        assert_eq!(batch[top].class_id, s.class_id, "row {i}: {row:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metrics_ignore_positive_rescaling(n in 2usize..40, seed in any::<u64>(), kt in 0.01f64..100.0, kv in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = || Matrix::from_vec(n, 6, (0..n * 6).map(|_| rng.random_range(-1.0..1.0)).collect());
        let (text, video) = (draw(), draw());
        let base = retrieval_metrics(&SimilarityMatrix::from_embeddings(&text, &video), &[1, 5]).unwrap();
        let scaled = retrieval_metrics(&SimilarityMatrix::from_embeddings(&text.scale(kt), &video.scale(kv)), &[1, 5]).unwrap();
        prop_assert_eq!(base, scaled);
    }
}
