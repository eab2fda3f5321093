//! Layers shared by the pooling heads and the decoder.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mask, Var};
use crate::params::{ParamBuilder, ParamId};
use crate::tensor::Matrix;

const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        pb.scoped(name, |pb| Self { w: pb.glorot("w", fan_in, fan_out), b: pb.constant("b", 1, fan_out, 0.0) })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

/// Normalization used inside the pooling layers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    /// Per-feature statistics over every valid position in the batch.
    #[default]
    Batch,
    /// Per-position statistics over features.
    Layer,
}

#[derive(Clone, Debug)]
pub struct Norm {
    kind: NormKind,
    gamma: ParamId,
    beta: ParamId,
    running: Option<(ParamId, ParamId)>,
}

impl Norm {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, kind: NormKind, dim: usize) -> Self {
        pb.scoped(name, |pb| {
            let gamma = pb.constant("gamma", 1, dim, 1.0);
            let beta = pb.constant("beta", 1, dim, 0.0);
            let running = match kind {
                NormKind::Batch => {
                    Some((pb.buffer("running_mean", 1, dim, 0.0), pb.buffer("running_var", 1, dim, 1.0)))
                }
                NormKind::Layer => None,
            };
            Self { kind, gamma, beta, running }
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        match (self.kind, self.running) {
            (NormKind::Layer, _) | (NormKind::Batch, None) => g.layer_norm(x, gamma, beta),
            (NormKind::Batch, Some((rm, rv))) => {
                if g.is_training() {
                    g.batch_norm_train(x, gamma, beta, Some((rm, rv, BN_MOMENTUM)))
                } else {
                    let store = g.store();
                    g.batch_norm_fixed(x, gamma, beta, store.get(rm).data(), store.get(rv).data())
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, dim: usize, heads: usize) -> Self {
        pb.scoped(name, |pb| Self {
            q: Linear::new(pb, "q", dim, dim),
            k: Linear::new(pb, "k", dim, dim),
            v: Linear::new(pb, "v", dim, dim),
            o: Linear::new(pb, "o", dim, dim),
            heads,
        })
    }

    /// Self-attention over the rows of `x`. With `causal`, row `t` only sees
    /// rows `<= t`.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var, causal: bool) -> Var {
        let (len, dim) = g.shape(x);
        let dh = dim / self.heads;
        let q = self.q.forward(g, x);
        let k = self.k.forward(g, x);
        let v = self.v.forward(g, x);
        let mask: Option<Mask> = causal.then(|| Rc::new((0..len * len).map(|e| e % len <= e / len).collect()));
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let vh = g.slice_cols(v, h * dh, dh);
            let scores = g.matmul_t(qh, kh);
            let scores = g.scale(scores, scale);
            let attn = g.softmax_rows(scores, mask.clone());
            outs.push(g.matmul(attn, vh));
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        self.o.forward(g, cat)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, dim: usize, hidden: usize) -> Self {
        pb.scoped(name, |pb| Self {
            up: Linear::new(pb, "up", dim, hidden),
            down: Linear::new(pb, "down", hidden, dim),
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let h = self.up.forward(g, x);
        let h = g.relu(h);
        self.down.forward(g, h)
    }
}

/// Parallel same-length 1D convolutions over time, concatenated and projected
/// back to the model width.
#[derive(Clone, Debug)]
pub struct ConvBank {
    kernels: Vec<(usize, Linear)>,
    proj: Linear,
}

impl ConvBank {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, dim: usize, kernel_sizes: &[usize]) -> Self {
        pb.scoped(name, |pb| {
            let kernels = kernel_sizes.iter().map(|&k| (k, Linear::new(pb, &format!("k{k}"), k * dim, dim))).collect();
            let proj = Linear::new(pb, "proj", kernel_sizes.len() * dim, dim);
            Self { kernels, proj }
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let mut outs = Vec::with_capacity(self.kernels.len());
        for (k, lin) in &self.kernels {
            // "same" padding: (k - 1) / 2 zero rows before, the rest after.
            let left = ((k - 1) / 2) as isize;
            let taps: Vec<Var> = (0..*k as isize).map(|o| g.shift_rows(x, o - left)).collect();
            let window = if taps.len() == 1 { taps[0] } else { g.concat_cols(&taps) };
            let y = lin.forward(g, window);
            outs.push(g.relu(y));
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        self.proj.forward(g, cat)
    }
}

#[derive(Clone, Debug)]
struct GruCell {
    input: Linear,
    recur_w: ParamId,
    recur_b: ParamId,
    hidden: usize,
}

impl GruCell {
    fn new(pb: &mut ParamBuilder<'_>, name: &str, dim: usize, hidden: usize) -> Self {
        pb.scoped(name, |pb| Self {
            input: Linear::new(pb, "input", dim, 3 * hidden),
            recur_w: pb.glorot("recur_w", hidden, 3 * hidden),
            recur_b: pb.constant("recur_b", 1, 3 * hidden, 0.0),
            hidden,
        })
    }

    /// Runs over the rows of `x` in the given order; outputs are returned in
    /// row order regardless of direction.
    fn run(&self, g: &mut Graph<'_>, x: Var, reverse: bool) -> Var {
        let len = g.shape(x).0;
        let hd = self.hidden;
        let xp = self.input.forward(g, x);
        let uw = g.param(self.recur_w);
        let ub = g.param(self.recur_b);
        let mut h = g.constant(Matrix::zeros(1, hd));
        let mut outs = vec![h; len];
        let order: Vec<usize> = if reverse { (0..len).rev().collect() } else { (0..len).collect() };
        for t in order {
            let xt = g.slice_rows(xp, t, 1);
            let hp = g.matmul(h, uw);
            let hp = g.add_row(hp, ub);
            let xz = g.slice_cols(xt, 0, hd);
            let hz = g.slice_cols(hp, 0, hd);
            let z = g.add(xz, hz);
            let z = g.sigmoid(z);
            let xr = g.slice_cols(xt, hd, hd);
            let hr = g.slice_cols(hp, hd, hd);
            let r = g.add(xr, hr);
            let r = g.sigmoid(r);
            let xn = g.slice_cols(xt, 2 * hd, hd);
            let hn = g.slice_cols(hp, 2 * hd, hd);
            let rh = g.mul(r, hn);
            let n = g.add(xn, rh);
            let n = g.tanh(n);
            // h' = (1 - z) * n + z * h = n + z * (h - n)
            let diff = g.sub(h, n);
            let zd = g.mul(z, diff);
            h = g.add(n, zd);
            outs[t] = h;
        }
        g.concat_rows(&outs)
    }
}

/// Bidirectional GRU with `dim / 2` units per direction.
#[derive(Clone, Debug)]
pub struct BiGru {
    fwd: GruCell,
    bwd: GruCell,
}

impl BiGru {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, dim: usize) -> Self {
        pb.scoped(name, |pb| Self {
            fwd: GruCell::new(pb, "fwd", dim, dim / 2),
            bwd: GruCell::new(pb, "bwd", dim, dim / 2),
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let f = self.fwd.run(g, x, false);
        let b = self.bwd.run(g, x, true);
        g.concat_cols(&[f, b])
    }
}
