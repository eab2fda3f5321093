//! Autoregressive caption decoder conditioned on a video representation.
//!
//! The conditioning (one `1 x d` vector, or a `K x d` sequence) is projected
//! and placed in front of the token embeddings, followed by one pre-norm block
//! of causal self-attention and a feed-forward layer. The output at the
//! position of token `k` scores token `k + 1`.

use crate::autograd::{Graph, Var};
use crate::corpus::{BOS, EOS};
use crate::error::{Error, Result};
use crate::nn::{FeedForward, Linear, MultiHeadAttention, Norm, NormKind};
use crate::params::{ParamBuilder, ParamId, ParamStore};
use crate::tensor::{argmax, Matrix};

#[derive(Clone, Debug)]
pub struct Decoder {
    embed: ParamId,
    positions: ParamId,
    cond: Linear,
    attn_norm: Norm,
    attn: MultiHeadAttention,
    ffn_norm: Norm,
    ffn: FeedForward,
    out: Linear,
    vocab_size: usize,
    max_positions: usize,
}

impl Decoder {
    /// `shared_embed` ties the token table to an existing parameter.
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        dim: usize,
        heads: usize,
        ffn_hidden: usize,
        vocab_size: usize,
        max_positions: usize,
        shared_embed: Option<ParamId>,
    ) -> Self {
        pb.scoped("decoder", |pb| Self {
            embed: shared_embed.unwrap_or_else(|| pb.normal("embed", vocab_size, dim, 0.5)),
            positions: pb.normal("positions", max_positions, dim, 0.1),
            cond: Linear::new(pb, "cond", dim, dim),
            attn_norm: Norm::new(pb, "attn_norm", NormKind::Layer, dim),
            attn: MultiHeadAttention::new(pb, "attn", dim, heads),
            ffn_norm: Norm::new(pb, "ffn_norm", NormKind::Layer, dim),
            ffn: FeedForward::new(pb, "ffn", dim, ffn_hidden),
            out: Linear::new(pb, "out", dim, vocab_size),
            vocab_size,
            max_positions,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Next-token logits for each input token: row `k` scores the token that
    /// follows `inputs[k]`. Output is `inputs.len() x vocab_size`.
    pub fn logits(&self, g: &mut Graph<'_>, conditioning: Var, inputs: &[u32]) -> Var {
        let k = g.shape(conditioning).0;
        let len = k + inputs.len();
        assert!(len <= self.max_positions, "decoder window {len} exceeds {}", self.max_positions);
        let c = self.cond.forward(g, conditioning);
        let table = g.param(self.embed);
        let idx: Vec<usize> = inputs.iter().map(|&t| t as usize).collect();
        let tok = g.gather_rows(table, &idx);
        let x = g.concat_rows(&[c, tok]);
        let pos = g.param(self.positions);
        let pos = g.slice_rows(pos, 0, len);
        let x = g.add(x, pos);

        let h = self.attn_norm.forward(g, x);
        let h = self.attn.forward(g, h, true);
        let h = g.dropout(h);
        let x = g.add(x, h);
        let h = self.ffn_norm.forward(g, x);
        let h = self.ffn.forward(g, h);
        let h = g.dropout(h);
        let x = g.add(x, h);

        let x = g.slice_rows(x, k, inputs.len());
        self.out.forward(g, x)
    }

    /// Mean per-token negative log-likelihood of `tokens[1..true_len]` under
    /// teacher forcing. Positions from `true_len` on are ignored.
    pub fn nll(&self, g: &mut Graph<'_>, conditioning: Var, tokens: &[u32], true_len: usize) -> Result<Var> {
        self.check_caption(tokens, true_len)?;
        let logits = self.logits(g, conditioning, &tokens[..true_len - 1]);
        let logp = g.log_softmax_rows(logits, None);
        let targets: Vec<(usize, usize)> = (1..true_len).map(|k| (k - 1, tokens[k] as usize)).collect();
        let picked = g.pick(logp, &targets);
        let mean = g.mean_all(picked);
        Ok(g.scale(mean, -1.0))
    }

    fn check_caption(&self, tokens: &[u32], true_len: usize) -> Result<()> {
        if true_len < 2 {
            return Err(Error::Input(format!("caption of true length {true_len} has nothing to predict")));
        }
        if true_len > tokens.len() {
            return Err(Error::Input(format!("caption_true_len {true_len} exceeds {} tokens", tokens.len())));
        }
        if let Some(bad) = tokens.iter().find(|&&t| t as usize >= self.vocab_size) {
            return Err(Error::Input(format!("token id {bad} outside vocabulary")));
        }
        Ok(())
    }

    /// Evaluation-mode NLL for one caption. `conditioning` is `K x d`.
    pub fn caption_nll(
        &self,
        store: &ParamStore,
        tokens: &[u32],
        true_len: usize,
        conditioning: &Matrix,
    ) -> Result<f64> {
        if !conditioning.all_finite() {
            return Err(Error::Input("conditioning contains non-finite values".into()));
        }
        let mut g = Graph::new(store);
        let c = g.constant(conditioning.clone());
        let loss = self.nll(&mut g, c, tokens, true_len)?;
        Ok(g.scalar(loss))
    }

    /// Greedy decoding from BOS. Stops after emitting EOS or when the
    /// sequence (BOS included) reaches `max_len`. Ties pick the lowest id.
    pub fn greedy_decode(&self, store: &ParamStore, conditioning: &Matrix, max_len: usize) -> Result<Vec<u32>> {
        let k = conditioning.rows();
        if k + max_len.saturating_sub(1) > self.max_positions {
            return Err(Error::Input(format!(
                "max_len {max_len} exceeds the decoder window of {} positions",
                self.max_positions
            )));
        }
        let mut seq = vec![BOS];
        while seq.len() < max_len {
            let mut g = Graph::new(store);
            let c = g.constant(conditioning.clone());
            let logits = self.logits(&mut g, c, &seq);
            let last = g.value(logits).row(seq.len() - 1);
            let next = argmax(last).expect("non-empty vocabulary") as u32;
            seq.push(next);
            if next == EOS {
                break;
            }
        }
        Ok(seq)
    }
}
