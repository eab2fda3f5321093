//! Video and text encoders mapping sequences into the joint embedding space.
//!
//! Both sides share one layout: a pre-encoder `f` refines the sequence, then
//! each pooling layer computes
//!
//! ```text
//! e_attn = Norm(MHA(f(e)) + f(e))
//! out    = Norm(FFN(e_attn) + e_attn)
//! ```
//!
//! The first position of the final sequence is the pooled vector, and a
//! linear projection maps it to the joint embedding `c`. Video uses a bank of
//! 1D convolutions as `f`; text uses a bidirectional GRU.
//!
//! Masked positions are dropped before the encoder runs, so they cannot
//! influence any output.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{BiGru, ConvBank, FeedForward, Linear, MultiHeadAttention, Norm, NormKind};
use crate::params::{ParamBuilder, ParamId, ParamStore};
use crate::tensor::Matrix;

/// The upstream video feature extractor is never trained; corpus features are
/// only ever read.
pub const UPSTREAM_FROZEN: bool = true;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoolingHeadConfig {
    pub embed_dim: usize,
    pub num_heads: usize,
    pub ffn_hidden: usize,
    pub num_layers: usize,
    pub conv_kernel_sizes: Vec<usize>,
    pub norm: NormKind,
}

impl Default for PoolingHeadConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            num_heads: 4,
            ffn_hidden: 128,
            num_layers: 2,
            conv_kernel_sizes: vec![2, 3, 4, 6],
            norm: NormKind::Batch,
        }
    }
}

impl PoolingHeadConfig {
    pub fn validate(&self) -> Result<()> {
        let d = self.embed_dim;
        if d == 0 || !d.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "embed_dim must be a positive even number (bidirectional text pre-encoder), got {d}"
            )));
        }
        if self.num_heads == 0 || !d.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!("num_heads ({}) must divide embed_dim ({d})", self.num_heads)));
        }
        if self.num_layers == 0 {
            return Err(Error::Config("num_layers must be at least 1".into()));
        }
        if self.ffn_hidden == 0 {
            return Err(Error::Config("ffn_hidden must be positive".into()));
        }
        if self.conv_kernel_sizes.is_empty() || self.conv_kernel_sizes.contains(&0) {
            return Err(Error::Config("conv_kernel_sizes must be a non-empty list of positive sizes".into()));
        }
        Ok(())
    }
}

/// Temporal reduction for the video side.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Transformer,
    Mean,
    Max,
}

#[derive(Clone, Debug)]
enum PreEncoder {
    Conv(ConvBank),
    Gru(BiGru),
}

impl PreEncoder {
    fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        match self {
            PreEncoder::Conv(c) => c.forward(g, x),
            PreEncoder::Gru(r) => r.forward(g, x),
        }
    }
}

#[derive(Clone, Debug)]
struct PoolingLayer {
    pre: PreEncoder,
    attn: MultiHeadAttention,
    attn_norm: Norm,
    ffn: FeedForward,
    ffn_norm: Norm,
}

#[derive(Clone, Debug)]
pub struct PoolingHead {
    layers: Vec<PoolingLayer>,
}

#[derive(Clone, Copy)]
enum PreKind {
    Conv,
    Gru,
}

impl PoolingHead {
    fn new(pb: &mut ParamBuilder<'_>, cfg: &PoolingHeadConfig, pre: PreKind) -> Self {
        let d = cfg.embed_dim;
        let layers = (0..cfg.num_layers)
            .map(|l| {
                pb.scoped(&format!("layer{l}"), |pb| PoolingLayer {
                    pre: match pre {
                        PreKind::Conv => PreEncoder::Conv(ConvBank::new(pb, "conv", d, &cfg.conv_kernel_sizes)),
                        PreKind::Gru => PreEncoder::Gru(BiGru::new(pb, "gru", d)),
                    },
                    attn: MultiHeadAttention::new(pb, "attn", d, cfg.num_heads),
                    attn_norm: Norm::new(pb, "attn_norm", cfg.norm, d),
                    ffn: FeedForward::new(pb, "ffn", d, cfg.ffn_hidden),
                    ffn_norm: Norm::new(pb, "ffn_norm", cfg.norm, d),
                })
            })
            .collect();
        Self { layers }
    }

    /// Contextualizes every sequence of a batch. Normalization statistics in
    /// training mode are shared across all valid positions of the batch.
    fn forward_batch(&self, g: &mut Graph<'_>, seqs: &[Var]) -> Vec<Var> {
        let lens: Vec<usize> = seqs.iter().map(|&s| g.shape(s).0).collect();
        let mut cur = seqs.to_vec();
        for layer in &self.layers {
            let mut attended = Vec::with_capacity(cur.len());
            for &x in &cur {
                let f = layer.pre.forward(g, x);
                let a = layer.attn.forward(g, f, false);
                let a = g.dropout(a);
                attended.push(g.add(a, f));
            }
            let stacked = concat(g, &attended);
            let e_attn = layer.attn_norm.forward(g, stacked);
            let h = layer.ffn.forward(g, e_attn);
            let h = g.dropout(h);
            let h = g.add(h, e_attn);
            let out = layer.ffn_norm.forward(g, h);
            cur = split(g, out, &lens);
        }
        cur
    }
}

fn concat(g: &mut Graph<'_>, parts: &[Var]) -> Var {
    if parts.len() == 1 {
        parts[0]
    } else {
        g.concat_rows(parts)
    }
}

fn split(g: &mut Graph<'_>, x: Var, lens: &[usize]) -> Vec<Var> {
    if lens.len() == 1 {
        return vec![x];
    }
    let mut off = 0;
    lens.iter()
        .map(|&l| {
            let s = g.slice_rows(x, off, l);
            off += l;
            s
        })
        .collect()
}

/// Graph nodes for one encoded sample.
#[derive(Clone, Copy, Debug)]
pub struct EncodedVars {
    /// Sequence entering the pooling head (`e`), `L x d`.
    pub input: Var,
    /// Contextualized output sequence, `L x d`.
    pub context: Var,
    /// First contextualized position, `1 x d`; the decoder's conditioning.
    pub pooled: Var,
    /// Joint-space embedding `c`, `1 x d`.
    pub embedding: Var,
}

/// Evaluation-mode result of encoding one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoding {
    pub input: Matrix,
    pub context: Matrix,
    pub pooled: Vec<f64>,
    pub embedding: Vec<f64>,
}

impl Encoding {
    fn from_graph(g: &Graph<'_>, v: &EncodedVars) -> Self {
        Self {
            input: g.value(v.input).clone(),
            context: g.value(v.context).clone(),
            pooled: g.value(v.pooled).data().to_vec(),
            embedding: g.value(v.embedding).data().to_vec(),
        }
    }
}

/// Indices of the valid positions; errors if none are valid.
pub fn valid_positions(mask: &[bool], len: usize) -> Result<Vec<usize>> {
    if mask.len() != len {
        return Err(Error::Input(format!("mask length {} does not match sequence length {len}", mask.len())));
    }
    let idx: Vec<usize> = (0..len).filter(|&k| mask[k]).collect();
    if idx.is_empty() {
        return Err(Error::Input("empty sequence: every position is masked".into()));
    }
    Ok(idx)
}

/// Mean or max over the valid rows of `e`.
pub fn pool_baseline(e: &Matrix, mask: &[bool], mode: Pooling) -> Result<Vec<f64>> {
    let idx = valid_positions(mask, e.rows())?;
    let cols = e.cols();
    let out = match mode {
        Pooling::Mean => (0..cols).map(|c| idx.iter().map(|&r| e.get(r, c)).sum::<f64>() / idx.len() as f64).collect(),
        Pooling::Max => (0..cols).map(|c| idx.iter().map(|&r| e.get(r, c)).fold(f64::NEG_INFINITY, f64::max)).collect(),
        Pooling::Transformer => {
            return Err(Error::Input("pool_baseline handles mean and max; transformer pooling needs an encoder".into()))
        }
    };
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct VideoEncoder {
    input: Linear,
    head: PoolingHead,
    pooling: Pooling,
    proj: Linear,
    feature_dim: usize,
}

impl VideoEncoder {
    pub fn new(pb: &mut ParamBuilder<'_>, cfg: &PoolingHeadConfig, feature_dim: usize, pooling: Pooling) -> Self {
        pb.scoped("video", |pb| Self {
            input: Linear::new(pb, "input", feature_dim, cfg.embed_dim),
            head: PoolingHead::new(pb, cfg, PreKind::Conv),
            pooling,
            proj: Linear::new(pb, "proj", cfg.embed_dim, cfg.embed_dim),
            feature_dim,
        })
    }

    pub fn upstream_frozen(&self) -> bool {
        UPSTREAM_FROZEN
    }

    /// Encodes a batch of videos given only their valid frames.
    pub fn forward_batch(&self, g: &mut Graph<'_>, frames: &[Matrix]) -> Vec<EncodedVars> {
        let lens: Vec<usize> = frames.iter().map(Matrix::rows).collect();
        let refs: Vec<&Matrix> = frames.iter().collect();
        let stacked = g.constant(Matrix::vstack(&refs));
        let projected = self.input.forward(g, stacked);
        let inputs = split(g, projected, &lens);
        let contexts = match self.pooling {
            Pooling::Transformer => self.head.forward_batch(g, &inputs),
            Pooling::Mean | Pooling::Max => inputs.clone(),
        };
        inputs
            .iter()
            .zip(contexts)
            .map(|(&input, context)| {
                let pooled = match self.pooling {
                    Pooling::Transformer => g.slice_rows(context, 0, 1),
                    Pooling::Mean => g.mean_rows(context),
                    Pooling::Max => g.max_rows(context),
                };
                let embedding = self.proj.forward(g, pooled);
                EncodedVars { input, context, pooled, embedding }
            })
            .collect()
    }

    /// Keeps the rows of `features` selected by `mask`, validating shape and
    /// finiteness.
    pub fn valid_frames(&self, features: &Matrix, mask: &[bool]) -> Result<Matrix> {
        if features.cols() != self.feature_dim {
            return Err(Error::Input(format!(
                "video features have {} columns, encoder expects {}",
                features.cols(),
                self.feature_dim
            )));
        }
        if !features.all_finite() {
            return Err(Error::Input("video features contain non-finite values".into()));
        }
        let idx = valid_positions(mask, features.rows())?;
        Ok(features.select_rows(&idx))
    }

    /// Evaluation-mode encoding of one video.
    pub fn encode(&self, store: &ParamStore, features: &Matrix, mask: &[bool]) -> Result<Encoding> {
        let frames = self.valid_frames(features, mask)?;
        let mut g = Graph::new(store);
        let out = self.forward_batch(&mut g, &[frames]);
        Ok(Encoding::from_graph(&g, &out[0]))
    }
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    embed: ParamId,
    head: PoolingHead,
    proj: Linear,
    vocab_size: usize,
}

impl TextEncoder {
    pub fn new(pb: &mut ParamBuilder<'_>, cfg: &PoolingHeadConfig, vocab_size: usize) -> Self {
        pb.scoped("text", |pb| Self {
            embed: pb.normal("embed", vocab_size, cfg.embed_dim, 0.5),
            head: PoolingHead::new(pb, cfg, PreKind::Gru),
            proj: Linear::new(pb, "proj", cfg.embed_dim, cfg.embed_dim),
            vocab_size,
        })
    }

    pub fn embedding_table(&self) -> ParamId {
        self.embed
    }

    pub fn forward_batch(&self, g: &mut Graph<'_>, captions: &[Vec<u32>]) -> Vec<EncodedVars> {
        let table = g.param(self.embed);
        let inputs: Vec<Var> = captions
            .iter()
            .map(|toks| {
                let idx: Vec<usize> = toks.iter().map(|&t| t as usize).collect();
                g.gather_rows(table, &idx)
            })
            .collect();
        let contexts = self.head.forward_batch(g, &inputs);
        inputs
            .iter()
            .zip(contexts)
            .map(|(&input, context)| {
                let pooled = g.slice_rows(context, 0, 1);
                let embedding = self.proj.forward(g, pooled);
                EncodedVars { input, context, pooled, embedding }
            })
            .collect()
    }

    /// Keeps the tokens selected by `mask`, validating ids.
    pub fn valid_tokens(&self, tokens: &[u32], mask: &[bool]) -> Result<Vec<u32>> {
        if let Some(bad) = tokens.iter().find(|&&t| t as usize >= self.vocab_size) {
            return Err(Error::Input(format!("token id {bad} outside vocabulary of size {}", self.vocab_size)));
        }
        let idx = valid_positions(mask, tokens.len())?;
        Ok(idx.into_iter().map(|k| tokens[k]).collect())
    }

    pub fn encode(&self, store: &ParamStore, tokens: &[u32], mask: &[bool]) -> Result<Encoding> {
        let toks = self.valid_tokens(tokens, mask)?;
        let mut g = Graph::new(store);
        let out = self.forward_batch(&mut g, &[toks]);
        Ok(Encoding::from_graph(&g, &out[0]))
    }
}
