//! The full model: video encoder, text encoder and caption decoder sharing one
//! parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::corpus::{CorpusHeader, CorpusSample};
use crate::decoder::Decoder;
use crate::encoders::{EncodedVars, Pooling, PoolingHeadConfig, TextEncoder, VideoEncoder};
use crate::error::{Error, Result};
use crate::params::{ParamBuilder, ParamStore};
use crate::tensor::Matrix;

/// Corpus-derived sizes a model is built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub feature_dim: usize,
    pub vocab_size: usize,
    pub video_len: usize,
    pub caption_len_max: usize,
}

impl ModelDims {
    pub fn from_header(h: &CorpusHeader) -> Self {
        Self {
            feature_dim: h.feature_dim,
            vocab_size: h.vocab_size,
            video_len: h.video_len,
            caption_len_max: h.caption_len_max,
        }
    }

    /// Decoder window: a full conditioning sequence plus a full caption.
    fn decoder_positions(&self) -> usize {
        self.video_len + self.caption_len_max
    }
}

/// Architecture choices that determine the parameter layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub head: PoolingHeadConfig,
    pub pooling: Pooling,
    pub tie_embeddings: bool,
    pub dims: ModelDims,
}

/// Encoder outputs for a batch, still attached to the graph.
pub struct BatchVars {
    pub video: Vec<EncodedVars>,
    pub text: Vec<EncodedVars>,
}

/// Evaluation-mode embeddings of a list of samples, one row per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Embeddings {
    pub text: Matrix,
    pub video: Matrix,
    /// Pooled video vectors (decoder conditioning), one row per sample.
    pub video_pooled: Matrix,
}

#[derive(Clone, Debug)]
pub struct Model {
    spec: ModelSpec,
    store: ParamStore,
    video: VideoEncoder,
    text: TextEncoder,
    decoder: Decoder,
}

/// Samples per graph when embedding in evaluation mode.
const EVAL_CHUNK: usize = 64;

impl Model {
    /// Builds a freshly initialized model; `seed` fixes every initial weight.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.head.validate()?;
        let d = spec.dims;
        if d.feature_dim == 0 || d.vocab_size == 0 || d.video_len == 0 || d.caption_len_max < 2 {
            return Err(Error::Config(format!("invalid model dimensions {d:?}")));
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let video = VideoEncoder::new(&mut pb, &spec.head, d.feature_dim, spec.pooling);
        let text = TextEncoder::new(&mut pb, &spec.head, d.vocab_size);
        let shared = spec.tie_embeddings.then(|| text.embedding_table());
        let decoder = Decoder::new(
            &mut pb,
            spec.head.embed_dim,
            spec.head.num_heads,
            spec.head.ffn_hidden,
            d.vocab_size,
            d.decoder_positions(),
            shared,
        );
        Ok(Self { spec, store, video, text, decoder })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn dims(&self) -> ModelDims {
        self.spec.dims
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Replaces every parameter, checking names and shapes.
    pub fn load_params(&mut self, params: &ParamStore) -> Result<()> {
        self.store.load_from(params)
    }

    pub fn video_encoder(&self) -> &VideoEncoder {
        &self.video
    }

    pub fn text_encoder(&self) -> &TextEncoder {
        &self.text
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    /// Checks a corpus header against the dimensions this model was built for.
    pub fn check_compatible(&self, header: &CorpusHeader) -> Result<()> {
        let got = ModelDims::from_header(header);
        if got != self.spec.dims {
            return Err(Error::Shape(format!(
                "corpus dimensions {got:?} do not match the model's {:?}",
                self.spec.dims
            )));
        }
        Ok(())
    }

    /// Encodes both modalities of `samples` onto `g`.
    pub fn forward_batch(&self, g: &mut Graph<'_>, samples: &[&CorpusSample]) -> Result<BatchVars> {
        let mut frames = Vec::with_capacity(samples.len());
        let mut tokens = Vec::with_capacity(samples.len());
        for s in samples {
            frames.push(self.video.valid_frames(&s.video_features, &s.video_mask())?);
            tokens.push(self.text.valid_tokens(&s.caption_tokens, &s.caption_mask())?);
        }
        Ok(BatchVars { video: self.video.forward_batch(g, &frames), text: self.text.forward_batch(g, &tokens) })
    }

    /// Evaluation-mode embeddings of `samples`, processed in fixed chunks.
    pub fn embed(&self, samples: &[&CorpusSample]) -> Result<Embeddings> {
        let d = self.spec.head.embed_dim;
        let n = samples.len();
        let mut out =
            Embeddings { text: Matrix::zeros(n, d), video: Matrix::zeros(n, d), video_pooled: Matrix::zeros(n, d) };
        for (c, chunk) in samples.chunks(EVAL_CHUNK).enumerate() {
            let mut g = Graph::new(&self.store);
            let vars = self.forward_batch(&mut g, chunk)?;
            for k in 0..chunk.len() {
                let row = c * EVAL_CHUNK + k;
                out.text.row_mut(row).copy_from_slice(g.value(vars.text[k].embedding).data());
                out.video.row_mut(row).copy_from_slice(g.value(vars.video[k].embedding).data());
                out.video_pooled.row_mut(row).copy_from_slice(g.value(vars.video[k].pooled).data());
            }
        }
        Ok(out)
    }

    /// Caption NLL conditioned on a `K x d` matrix.
    pub fn caption_nll(&self, tokens: &[u32], true_len: usize, conditioning: &Matrix) -> Result<f64> {
        self.decoder.caption_nll(&self.store, tokens, true_len, conditioning)
    }

    pub fn greedy_decode(&self, conditioning: &Matrix, max_len: usize) -> Result<Vec<u32>> {
        if max_len > self.spec.dims.caption_len_max {
            return Err(Error::Input(format!(
                "max_len {max_len} exceeds the caption length {}",
                self.spec.dims.caption_len_max
            )));
        }
        self.decoder.greedy_decode(&self.store, conditioning, max_len)
    }
}
