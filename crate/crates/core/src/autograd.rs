//! Tape-based reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Graph`] records every operation applied during one forward pass. Nodes
//! are appended in evaluation order, so walking the tape backwards visits each
//! node after all of its consumers. Parameters are borrowed from a
//! [`ParamStore`] without copying.
//!
//! Besides the elementwise and linear-algebra primitives, a few fused ops
//! (normalization layers, masked softmax, hard-negative hinge) carry
//! hand-written backward rules; each is covered by a finite-difference test.

use std::borrow::Cow;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{argmax, dot, Matrix};

pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Keep-mask for masked softmax; `true` entries participate.
pub type Mask = Rc<Vec<bool>>;

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulConst(Var, Matrix),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var, Option<Mask>),
    SumAll(Var),
    MeanAll(Var),
    MeanRows(Var),
    MaxRows(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    ShiftRows(Var, isize),
    Reshape(Var),
    NormalizeRows(Var, Vec<f64>),
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Matrix, inv_std: Vec<f64> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Matrix, inv_std: Vec<f64> },
    FixedNorm { x: Var, gamma: Var, beta: Var, xhat: Matrix, inv_std: Vec<f64> },
    Pick(Var, Vec<(usize, usize)>),
    HardNegativeHinge { cand: Var, pos: Var, chosen: Vec<Option<usize>> },
}

struct Node<'p> {
    value: Cow<'p, Matrix>,
    op: Op,
    requires_grad: bool,
}

struct TrainCtx {
    rng: ChaCha8Rng,
    dropout: f64,
}

pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node<'p>>,
    param_vars: Vec<Option<Var>>,
    train: Option<TrainCtx>,
    stat_updates: Vec<(ParamId, Matrix)>,
}

impl<'p> Graph<'p> {
    /// Evaluation-mode graph: no dropout, normalization uses stored statistics.
    pub fn new(store: &'p ParamStore) -> Self {
        Self { store, nodes: Vec::new(), param_vars: vec![None; store.len()], train: None, stat_updates: Vec::new() }
    }

    /// Training-mode graph. Dropout masks are drawn from `rng`.
    pub fn training(store: &'p ParamStore, rng: ChaCha8Rng, dropout: f64) -> Self {
        let mut g = Self::new(store);
        g.train = Some(TrainCtx { rng, dropout });
        g
    }

    pub fn is_training(&self) -> bool {
        self.train.is_some()
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.len(), 1);
        m.data()[0]
    }

    /// Running-statistic updates produced by training-mode normalization.
    pub fn take_stat_updates(&mut self) -> Vec<(ParamId, Matrix)> {
        std::mem::take(&mut self.stat_updates)
    }

    fn push(&mut self, value: Cow<'p, Matrix>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn unary(&mut self, x: Var, value: Matrix, op: Op) -> Var {
        let rg = self.rg(x);
        self.push(Cow::Owned(value), op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, value: Matrix, op: Op) -> Var {
        let rg = self.rg(a) || self.rg(b);
        self.push(Cow::Owned(value), op, rg)
    }

    /// A value that gradients do not flow into.
    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(Cow::Owned(m), Op::Leaf, false)
    }

    /// A free input whose gradient is reported by [`Gradients::var`].
    pub fn input(&mut self, m: Matrix) -> Var {
        self.push(Cow::Owned(m), Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let store = self.store;
        let entry = store.entry(id);
        let v = self.push(Cow::Borrowed(&entry.value), Op::Param, entry.trainable);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.binary(a, b, v, Op::MatMul(a, b))
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        self.binary(a, b, v, Op::MatMulT(a, b))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let v = self.value(x).transpose();
        self.unary(x, v, Op::Transpose(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.binary(a, b, v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.binary(a, b, v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.binary(a, b, v, Op::Mul(a, b))
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "add_row expects a 1x{c} row");
        let mut v = self.value(a).clone();
        let b = self.value(row).data().to_vec();
        for i in 0..r {
            for (x, y) in v.row_mut(i).iter_mut().zip(&b) {
                *x += y;
            }
        }
        self.binary(a, row, v, Op::AddRow(a, row))
    }

    pub fn mul_const(&mut self, x: Var, m: Matrix) -> Var {
        let v = self.value(x).zip_map(&m, |a, b| a * b);
        self.unary(x, v, Op::MulConst(x, m))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let v = self.value(x).scale(k);
        self.unary(x, v, Op::Scale(x, k))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.max(0.0));
        self.unary(x, v, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::tanh);
        self.unary(x, v, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        self.unary(x, v, Op::Sigmoid(x))
    }

    /// Row-wise softmax. Entries with a `false` mask get exactly zero weight.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<Mask>) -> Var {
        let v = softmax_rows(self.value(x), mask.as_deref().map(|m| m.as_slice()));
        self.unary(x, v, Op::SoftmaxRows(x))
    }

    /// Row-wise log-softmax. Masked entries hold `-inf`; only [`Graph::pick`]
    /// should consume the result.
    pub fn log_softmax_rows(&mut self, x: Var, mask: Option<Mask>) -> Var {
        let xv = self.value(x);
        let (r, c) = xv.shape();
        let mut v = Matrix::zeros(r, c);
        for i in 0..r {
            let row = xv.row(i);
            let keep = |j: usize| mask.as_ref().is_none_or(|m| m[i * c + j]);
            let mx = (0..c).filter(|&j| keep(j)).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + (0..c).filter(|&j| keep(j)).map(|j| (row[j] - mx).exp()).sum::<f64>().ln();
            for j in 0..c {
                let val = if keep(j) { row[j] - lse } else { f64::NEG_INFINITY };
                v.set(i, j, val);
            }
        }
        self.unary(x, v, Op::LogSoftmaxRows(x, mask))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let v = Matrix::from_vec(1, 1, vec![self.value(x).sum()]);
        self.unary(x, v, Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let m = self.value(x);
        let v = Matrix::from_vec(1, 1, vec![m.sum() / m.len() as f64]);
        self.unary(x, v, Op::MeanAll(x))
    }

    /// Column means, `1 x c`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let m = self.value(x);
        let (r, c) = m.shape();
        let mut v = Matrix::zeros(1, c);
        for i in 0..r {
            for (o, a) in v.data_mut().iter_mut().zip(m.row(i)) {
                *o += a / r as f64;
            }
        }
        self.unary(x, v, Op::MeanRows(x))
    }

    /// Column maxima, `1 x c`; ties go to the first row.
    pub fn max_rows(&mut self, x: Var) -> Var {
        let m = self.value(x);
        let c = m.cols();
        let idx: Vec<usize> = (0..c).map(|j| argmax(&m.column(j)).expect("max over empty rows")).collect();
        let v = Matrix::from_vec(1, c, idx.iter().enumerate().map(|(j, &i)| m.get(i, j)).collect());
        self.unary(x, v, Op::MaxRows(x, idx))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.shape(parts[0]).0;
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut v = Matrix::zeros(rows, total);
        let mut off = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.rows(), rows, "concat_cols row mismatch");
            for i in 0..rows {
                v.row_mut(i)[off..off + m.cols()].copy_from_slice(m.row(i));
            }
            off += m.cols();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Cow::Owned(v), Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Matrix::vstack(&mats);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Cow::Owned(v), Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x).slice_rows(start, len);
        self.unary(x, v, Op::SliceRows(x, start))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let m = self.value(x);
        assert!(start + len <= m.cols(), "column slice out of range");
        let mut v = Matrix::zeros(m.rows(), len);
        for i in 0..m.rows() {
            v.row_mut(i).copy_from_slice(&m.row(i)[start..start + len]);
        }
        self.unary(x, v, Op::SliceCols(x, start))
    }

    /// Rows of `table` selected by `idx` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Var {
        let v = self.value(table).select_rows(idx);
        self.unary(table, v, Op::GatherRows(table, idx.to_vec()))
    }

    /// `out[t] = x[t + offset]`, zero where out of range.
    pub fn shift_rows(&mut self, x: Var, offset: isize) -> Var {
        let m = self.value(x);
        let (r, c) = m.shape();
        let mut v = Matrix::zeros(r, c);
        for t in 0..r {
            let src = t as isize + offset;
            if src >= 0 && (src as usize) < r {
                v.row_mut(t).copy_from_slice(m.row(src as usize));
            }
        }
        self.unary(x, v, Op::ShiftRows(x, offset))
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let v = self.value(x).clone().reshape(rows, cols);
        self.unary(x, v, Op::Reshape(x))
    }

    /// Unit-L2 rows. Zero rows map to zero with zero gradient.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let m = self.value(x);
        let norms: Vec<f64> = (0..m.rows()).map(|i| dot(m.row(i), m.row(i)).sqrt()).collect();
        let v = m.normalize_rows();
        self.unary(x, v, Op::NormalizeRows(x, norms))
    }

    /// Normalizes each column over the rows (batch statistics) and records a
    /// running-statistics update for `(running_mean, running_var)`.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, running: Option<(ParamId, ParamId, f64)>) -> Var {
        let m = self.value(x);
        let (r, c) = m.shape();
        let mut mean = vec![0.0; c];
        for i in 0..r {
            for (mu, a) in mean.iter_mut().zip(m.row(i)) {
                *mu += a / r as f64;
            }
        }
        let mut var = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                let d = m.get(i, j) - mean[j];
                var[j] += d * d / r as f64;
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let mut xhat = Matrix::zeros(r, c);
        for i in 0..r {
            for j in 0..c {
                xhat.set(i, j, (m.get(i, j) - mean[j]) * inv_std[j]);
            }
        }
        if let Some((rm, rv, momentum)) = running {
            let unbias = if r > 1 { r as f64 / (r as f64 - 1.0) } else { 1.0 };
            let old_m = self.store.get(rm);
            let old_v = self.store.get(rv);
            let new_m = Matrix::from_vec(
                1,
                c,
                (0..c).map(|j| (1.0 - momentum) * old_m.data()[j] + momentum * mean[j]).collect(),
            );
            let new_v = Matrix::from_vec(
                1,
                c,
                (0..c).map(|j| (1.0 - momentum) * old_v.data()[j] + momentum * var[j] * unbias).collect(),
            );
            self.stat_updates.push((rm, new_m));
            self.stat_updates.push((rv, new_v));
        }
        let v = affine_cols(&xhat, self.value(gamma), self.value(beta));
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(Cow::Owned(v), Op::BatchNorm { x, gamma, beta, xhat, inv_std }, rg)
    }

    /// Column normalization with fixed statistics (evaluation-mode batch norm).
    pub fn batch_norm_fixed(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64]) -> Var {
        let m = self.value(x);
        let (r, c) = m.shape();
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let mut xhat = Matrix::zeros(r, c);
        for i in 0..r {
            for j in 0..c {
                xhat.set(i, j, (m.get(i, j) - mean[j]) * inv_std[j]);
            }
        }
        let v = affine_cols(&xhat, self.value(gamma), self.value(beta));
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(Cow::Owned(v), Op::FixedNorm { x, gamma, beta, xhat, inv_std }, rg)
    }

    /// Normalizes each row over its features.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let m = self.value(x);
        let (r, c) = m.shape();
        let mut xhat = Matrix::zeros(r, c);
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = m.row(i);
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|a| (a - mu) * (a - mu)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + NORM_EPS).sqrt();
            inv_std.push(is);
            for (o, a) in xhat.row_mut(i).iter_mut().zip(row) {
                *o = (a - mu) * is;
            }
        }
        let v = affine_cols(&xhat, self.value(gamma), self.value(beta));
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(Cow::Owned(v), Op::LayerNorm { x, gamma, beta, xhat, inv_std }, rg)
    }

    /// Inverted dropout in training mode; identity otherwise.
    pub fn dropout(&mut self, x: Var) -> Var {
        let Some(ctx) = self.train.as_mut() else {
            return x;
        };
        let p = ctx.dropout;
        if p <= 0.0 {
            return x;
        }
        let (r, c) = self.nodes[x.0].value.shape();
        let keep = 1.0 / (1.0 - p);
        let mask =
            Matrix::from_vec(r, c, (0..r * c).map(|_| if ctx.rng.random::<f64>() < p { 0.0 } else { keep }).collect());
        self.mul_const(x, mask)
    }

    /// Gathers the listed `(row, col)` entries into an `n x 1` column.
    pub fn pick(&mut self, x: Var, idx: &[(usize, usize)]) -> Var {
        let m = self.value(x);
        let v = Matrix::from_vec(idx.len(), 1, idx.iter().map(|&(r, c)| m.get(r, c)).collect());
        self.unary(x, v, Op::Pick(x, idx.to_vec()))
    }

    /// Per row `i`: `[alpha - pos_i + max_j cand_ij]_+` over the kept `j`.
    /// The maximizing column is the first one attaining the maximum. Rows with
    /// no kept candidate yield zero. Output is `rows x 1`.
    pub fn hard_negative_hinge(&mut self, cand: Var, pos: Var, keep: &[bool], alpha: f64) -> Var {
        let cm = self.value(cand);
        let pm = self.value(pos);
        let (r, c) = cm.shape();
        assert_eq!(pm.shape(), (r, 1), "hinge positives must be a column");
        assert_eq!(keep.len(), r * c, "hinge mask shape");
        let mut out = Matrix::zeros(r, 1);
        let mut chosen = Vec::with_capacity(r);
        for i in 0..r {
            let mut best: Option<(usize, f64)> = None;
            for j in 0..c {
                if !keep[i * c + j] {
                    continue;
                }
                let v = cm.get(i, j);
                match best {
                    Some((_, b)) if v <= b => {}
                    _ => best = Some((j, v)),
                }
            }
            match best {
                Some((j, v)) => {
                    let h = alpha - pm.get(i, 0) + v;
                    if h > 0.0 {
                        out.set(i, 0, h);
                        chosen.push(Some(j));
                    } else {
                        chosen.push(None);
                    }
                }
                None => chosen.push(None),
            }
        }
        self.binary(cand, pos, out, Op::HardNegativeHinge { cand, pos, chosen })
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward expects a scalar");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Matrix>> = (0..n).map(|_| None).collect();
        let mut kept: Vec<Option<Matrix>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for i in (0..n).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let mut acc = |v: Var, g: Matrix| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&g),
                    slot => *slot = Some(g),
                }
            };
            match &node.op {
                Op::Leaf | Op::Param => {
                    kept[i] = Some(gy);
                }
                Op::MatMul(a, b) => {
                    acc(*a, gy.matmul_t(self.value(*b)));
                    acc(*b, self.value(*a).t_matmul(&gy));
                }
                Op::MatMulT(a, b) => {
                    // y = a b^T: da = gy b, db = gy^T a
                    acc(*a, gy.matmul(self.value(*b)));
                    acc(*b, gy.t_matmul(self.value(*a)));
                }
                Op::Transpose(x) => acc(*x, gy.transpose()),
                Op::Add(a, b) => {
                    acc(*a, gy.clone());
                    acc(*b, gy);
                }
                Op::Sub(a, b) => {
                    acc(*a, gy.clone());
                    acc(*b, gy.scale(-1.0));
                }
                Op::Mul(a, b) => {
                    acc(*a, gy.zip_map(self.value(*b), |g, y| g * y));
                    acc(*b, gy.zip_map(self.value(*a), |g, x| g * x));
                }
                Op::AddRow(a, row) => {
                    let (r, c) = gy.shape();
                    let mut gr = Matrix::zeros(1, c);
                    for k in 0..r {
                        for (o, g) in gr.data_mut().iter_mut().zip(gy.row(k)) {
                            *o += g;
                        }
                    }
                    acc(*a, gy);
                    acc(*row, gr);
                }
                Op::MulConst(x, m) => acc(*x, gy.zip_map(m, |g, k| g * k)),
                Op::Scale(x, k) => acc(*x, gy.scale(*k)),
                Op::Relu(x) => acc(*x, gy.zip_map(self.value(*x), |g, a| if a > 0.0 { g } else { 0.0 })),
                Op::Tanh(_) | Op::Sigmoid(_) => {
                    let y = &node.value;
                    let (x, d): (Var, Matrix) = match &node.op {
                        Op::Tanh(x) => (*x, gy.zip_map(y, |g, t| g * (1.0 - t * t))),
                        Op::Sigmoid(x) => (*x, gy.zip_map(y, |g, s| g * s * (1.0 - s))),
                        _ => unreachable!(),
                    };
                    acc(x, d);
                }
                Op::SoftmaxRows(x) => {
                    let y = &node.value;
                    let (r, c) = y.shape();
                    let mut gx = Matrix::zeros(r, c);
                    for k in 0..r {
                        let s = dot(gy.row(k), y.row(k));
                        for j in 0..c {
                            gx.set(k, j, y.get(k, j) * (gy.get(k, j) - s));
                        }
                    }
                    acc(*x, gx);
                }
                Op::LogSoftmaxRows(x, mask) => {
                    let y = &node.value;
                    let (r, c) = y.shape();
                    let mut gx = Matrix::zeros(r, c);
                    for k in 0..r {
                        let keep = |j: usize| mask.as_ref().is_none_or(|m| m[k * c + j]);
                        let s: f64 = (0..c).filter(|&j| keep(j)).map(|j| gy.get(k, j)).sum();
                        for j in 0..c {
                            if keep(j) {
                                gx.set(k, j, gy.get(k, j) - y.get(k, j).exp() * s);
                            }
                        }
                    }
                    acc(*x, gx);
                }
                Op::SumAll(x) => {
                    let (r, c) = self.shape(*x);
                    acc(*x, Matrix::filled(r, c, gy.data()[0]));
                }
                Op::MeanAll(x) => {
                    let (r, c) = self.shape(*x);
                    acc(*x, Matrix::filled(r, c, gy.data()[0] / (r * c) as f64));
                }
                Op::MeanRows(x) => {
                    let (r, c) = self.shape(*x);
                    let mut gx = Matrix::zeros(r, c);
                    for k in 0..r {
                        for (o, g) in gx.row_mut(k).iter_mut().zip(gy.data()) {
                            *o = g / r as f64;
                        }
                    }
                    acc(*x, gx);
                }
                Op::MaxRows(x, idx) => {
                    let (r, c) = self.shape(*x);
                    let mut gx = Matrix::zeros(r, c);
                    for (j, &k) in idx.iter().enumerate() {
                        gx.set(k, j, gy.data()[j]);
                    }
                    acc(*x, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let (r, c) = self.shape(p);
                        let mut gp = Matrix::zeros(r, c);
                        for k in 0..r {
                            gp.row_mut(k).copy_from_slice(&gy.row(k)[off..off + c]);
                        }
                        off += c;
                        acc(p, gp);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let r = self.shape(p).0;
                        acc(p, gy.slice_rows(off, r));
                        off += r;
                    }
                }
                Op::SliceRows(x, start) => {
                    let (r, c) = self.shape(*x);
                    let mut gx = Matrix::zeros(r, c);
                    for k in 0..gy.rows() {
                        gx.row_mut(start + k).copy_from_slice(gy.row(k));
                    }
                    acc(*x, gx);
                }
                Op::SliceCols(x, start) => {
                    let (r, c) = self.shape(*x);
                    let mut gx = Matrix::zeros(r, c);
                    let w = gy.cols();
                    for k in 0..r {
                        gx.row_mut(k)[*start..start + w].copy_from_slice(gy.row(k));
                    }
                    acc(*x, gx);
                }
                Op::GatherRows(table, idx) => {
                    let (r, c) = self.shape(*table);
                    let mut gt = Matrix::zeros(r, c);
                    for (k, &row) in idx.iter().enumerate() {
                        for (o, g) in gt.row_mut(row).iter_mut().zip(gy.row(k)) {
                            *o += g;
                        }
                    }
                    acc(*table, gt);
                }
                Op::ShiftRows(x, offset) => {
                    let (r, c) = self.shape(*x);
                    let mut gx = Matrix::zeros(r, c);
                    for t in 0..r {
                        let src = t as isize + offset;
                        if src >= 0 && (src as usize) < r {
                            gx.row_mut(src as usize).copy_from_slice(gy.row(t));
                        }
                    }
                    acc(*x, gx);
                }
                Op::Reshape(x) => {
                    let (r, c) = self.shape(*x);
                    acc(*x, gy.reshape(r, c));
                }
                Op::NormalizeRows(x, norms) => {
                    let y = &node.value;
                    let (r, c) = y.shape();
                    let mut gx = Matrix::zeros(r, c);
                    for k in 0..r {
                        if norms[k] == 0.0 {
                            continue;
                        }
                        let s = dot(gy.row(k), y.row(k));
                        for j in 0..c {
                            gx.set(k, j, (gy.get(k, j) - y.get(k, j) * s) / norms[k]);
                        }
                    }
                    acc(*x, gx);
                }
                Op::BatchNorm { x, gamma, beta, xhat, inv_std } => {
                    let (r, c) = xhat.shape();
                    let g = self.value(*gamma);
                    let (dgamma, dbeta) = affine_param_grads(&gy, xhat);
                    let mut gx = Matrix::zeros(r, c);
                    let n = r as f64;
                    for j in 0..c {
                        let sum_g = dbeta.data()[j];
                        let sum_gx = dgamma.data()[j];
                        let k = g.data()[j] * inv_std[j] / n;
                        for i in 0..r {
                            gx.set(i, j, k * (n * gy.get(i, j) - sum_g - xhat.get(i, j) * sum_gx));
                        }
                    }
                    acc(*x, gx);
                    acc(*gamma, dgamma);
                    acc(*beta, dbeta);
                }
                Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                    let (r, c) = xhat.shape();
                    let g = self.value(*gamma);
                    let (dgamma, dbeta) = affine_param_grads(&gy, xhat);
                    let mut gx = Matrix::zeros(r, c);
                    let n = c as f64;
                    for i in 0..r {
                        let dxhat: Vec<f64> = (0..c).map(|j| gy.get(i, j) * g.data()[j]).collect();
                        let s1: f64 = dxhat.iter().sum();
                        let s2: f64 = dxhat.iter().zip(xhat.row(i)).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gx.set(i, j, inv_std[i] / n * (n * dxhat[j] - s1 - xhat.get(i, j) * s2));
                        }
                    }
                    acc(*x, gx);
                    acc(*gamma, dgamma);
                    acc(*beta, dbeta);
                }
                Op::FixedNorm { x, gamma, beta, xhat, inv_std } => {
                    let (r, c) = xhat.shape();
                    let g = self.value(*gamma);
                    let (dgamma, dbeta) = affine_param_grads(&gy, xhat);
                    let mut gx = Matrix::zeros(r, c);
                    for i in 0..r {
                        for j in 0..c {
                            gx.set(i, j, gy.get(i, j) * g.data()[j] * inv_std[j]);
                        }
                    }
                    acc(*x, gx);
                    acc(*gamma, dgamma);
                    acc(*beta, dbeta);
                }
                Op::Pick(x, idx) => {
                    let (r, c) = self.shape(*x);
                    let mut gx = Matrix::zeros(r, c);
                    for (k, &(a, b)) in idx.iter().enumerate() {
                        gx.set(a, b, gx.get(a, b) + gy.data()[k]);
                    }
                    acc(*x, gx);
                }
                Op::HardNegativeHinge { cand, pos, chosen } => {
                    let (r, c) = self.shape(*cand);
                    let mut gc = Matrix::zeros(r, c);
                    let mut gp = Matrix::zeros(r, 1);
                    for (i, ch) in chosen.iter().enumerate() {
                        if let Some(j) = ch {
                            gc.set(i, *j, gy.get(i, 0));
                            gp.set(i, 0, -gy.get(i, 0));
                        }
                    }
                    acc(*cand, gc);
                    acc(*pos, gp);
                }
            }
        }

        let params = self.param_vars.iter().map(|v| v.and_then(|v| kept[v.0].clone())).collect();
        Gradients { params, leaves: kept }
    }
}

/// Gradients of a scalar with respect to parameters and free inputs.
pub struct Gradients {
    params: Vec<Option<Matrix>>,
    leaves: Vec<Option<Matrix>>,
}

impl Gradients {
    /// `None` when the parameter was unused or is not trainable.
    pub fn param(&self, id: ParamId) -> Option<&Matrix> {
        self.params[id.0].as_ref()
    }

    /// Gradient for a node created with [`Graph::input`].
    pub fn var(&self, v: Var) -> Option<&Matrix> {
        self.leaves[v.0].as_ref()
    }

    pub fn into_param_grads(self) -> Vec<Option<Matrix>> {
        self.params
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax over kept entries; masked entries are exactly zero.
pub fn softmax_rows(m: &Matrix, mask: Option<&[bool]>) -> Matrix {
    let (r, c) = m.shape();
    let mut out = Matrix::zeros(r, c);
    for i in 0..r {
        let keep = |j: usize| mask.is_none_or(|mk| mk[i * c + j]);
        let row = m.row(i);
        let mx = (0..c).filter(|&j| keep(j)).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
        if mx == f64::NEG_INFINITY {
            continue;
        }
        let mut total = 0.0;
        for j in 0..c {
            if keep(j) {
                let e = (row[j] - mx).exp();
                out.set(i, j, e);
                total += e;
            }
        }
        for x in out.row_mut(i) {
            *x /= total;
        }
    }
    out
}

fn affine_cols(xhat: &Matrix, gamma: &Matrix, beta: &Matrix) -> Matrix {
    let (r, c) = xhat.shape();
    let mut v = Matrix::zeros(r, c);
    for i in 0..r {
        for j in 0..c {
            v.set(i, j, xhat.get(i, j) * gamma.data()[j] + beta.data()[j]);
        }
    }
    v
}

fn affine_param_grads(gy: &Matrix, xhat: &Matrix) -> (Matrix, Matrix) {
    let (r, c) = xhat.shape();
    let mut dgamma = Matrix::zeros(1, c);
    let mut dbeta = Matrix::zeros(1, c);
    for i in 0..r {
        for j in 0..c {
            dgamma.data_mut()[j] += gy.get(i, j) * xhat.get(i, j);
            dbeta.data_mut()[j] += gy.get(i, j);
        }
    }
    (dgamma, dbeta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect())
    }

    /// Checks the analytic gradient of `build` (which must reduce to a scalar)
    /// against central differences for every entry of every input.
    fn check(inputs: &[Matrix], build: impl Fn(&mut Graph, &[Var]) -> Var) {
        let store = ParamStore::new();
        let eval = |xs: &[Matrix]| {
            let mut g = Graph::new(&store);
            let vars: Vec<Var> = xs.iter().map(|m| g.input(m.clone())).collect();
            let out = build(&mut g, &vars);
            g.scalar(out)
        };
        let mut g = Graph::new(&store);
        let vars: Vec<Var> = inputs.iter().map(|m| g.input(m.clone())).collect();
        let out = build(&mut g, &vars);
        let grads = g.backward(out);
        let h = 1e-6;
        for (k, x) in inputs.iter().enumerate() {
            let analytic = grads.var(vars[k]).cloned().unwrap_or_else(|| Matrix::zeros(x.rows(), x.cols()));
            for e in 0..x.len() {
                let mut plus = inputs.to_vec();
                plus[k].data_mut()[e] += h;
                let mut minus = inputs.to_vec();
                minus[k].data_mut()[e] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data()[e];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
                assert!(err < 1e-5, "input {k} entry {e}: analytic {a} numeric {numeric}");
            }
        }
    }

    /// Weighted sum so every output entry carries a distinct sensitivity.
    fn weighted(g: &mut Graph, y: Var, seed: u64) -> Var {
        let (r, c) = g.shape(y);
        let w = random(r, c, seed);
        let wy = g.mul_const(y, w);
        g.sum_all(wy)
    }

    #[test]
    fn linear_algebra_ops() {
        check(&[random(3, 4, 1), random(4, 2, 2)], |g, v| {
            let y = g.matmul(v[0], v[1]);
            weighted(g, y, 9)
        });
        check(&[random(3, 4, 1), random(2, 4, 2)], |g, v| {
            let y = g.matmul_t(v[0], v[1]);
            weighted(g, y, 9)
        });
        check(&[random(3, 4, 1), random(1, 4, 2)], |g, v| {
            let y = g.add_row(v[0], v[1]);
            let t = g.transpose(y);
            weighted(g, t, 9)
        });
        check(&[random(3, 4, 1), random(3, 4, 2)], |g, v| {
            let a = g.mul(v[0], v[1]);
            let b = g.sub(a, v[1]);
            let c = g.add(b, v[0]);
            let d = g.scale(c, -0.7);
            weighted(g, d, 9)
        });
    }

    #[test]
    fn nonlinearities() {
        check(&[random(3, 5, 3)], |g, v| {
            let a = g.tanh(v[0]);
            let b = g.sigmoid(a);
            let c = g.relu(v[0]);
            let d = g.add(b, c);
            weighted(g, d, 4)
        });
    }

    #[test]
    fn softmax_and_log_softmax_with_masks() {
        let mask: Mask = Rc::new(vec![true, false, true, true, true, true, false, true, true, true, true, false]);
        let m2 = mask.clone();
        check(&[random(3, 4, 5)], move |g, v| {
            let y = g.softmax_rows(v[0], Some(m2.clone()));
            weighted(g, y, 6)
        });
        check(&[random(3, 4, 5)], move |g, v| {
            let y = g.log_softmax_rows(v[0], Some(mask.clone()));
            let p = g.pick(y, &[(0, 0), (1, 3), (2, 2), (0, 3)]);
            weighted(g, p, 6)
        });
    }

    #[test]
    fn structural_ops() {
        check(&[random(4, 3, 7), random(4, 2, 8)], |g, v| {
            let c = g.concat_cols(&[v[0], v[1]]);
            let s = g.slice_cols(c, 1, 3);
            let r = g.concat_rows(&[s, s]);
            let t = g.slice_rows(r, 2, 5);
            let sh = g.shift_rows(t, -2);
            let sh2 = g.shift_rows(sh, 1);
            let rs = g.reshape(sh2, 3, 5);
            weighted(g, rs, 10)
        });
        check(&[random(5, 3, 11)], |g, v| {
            let e = g.gather_rows(v[0], &[4, 0, 4, 2]);
            let m = g.mean_rows(e);
            let x = g.max_rows(v[0]);
            let s = g.concat_cols(&[m, x]);
            weighted(g, s, 12)
        });
    }

    #[test]
    fn normalization_ops() {
        check(&[random(4, 3, 13)], |g, v| {
            let n = g.normalize_rows(v[0]);
            weighted(g, n, 14)
        });
        check(&[random(5, 3, 15), random(1, 3, 16), random(1, 3, 17)], |g, v| {
            let y = g.batch_norm_train(v[0], v[1], v[2], None);
            weighted(g, y, 18)
        });
        check(&[random(5, 3, 15), random(1, 3, 16), random(1, 3, 17)], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2]);
            weighted(g, y, 18)
        });
        check(&[random(5, 3, 15), random(1, 3, 16), random(1, 3, 17)], |g, v| {
            let y = g.batch_norm_fixed(v[0], v[1], v[2], &[0.1, -0.2, 0.3], &[1.5, 0.5, 2.0]);
            weighted(g, y, 18)
        });
    }

    #[test]
    fn hard_negative_hinge() {
        let keep: Vec<bool> = (0..12).map(|k| k % 5 != 0).collect();
        check(&[random(3, 4, 19), random(3, 1, 20)], move |g, v| {
            let h = g.hard_negative_hinge(v[0], v[1], &keep, 2.0);
            weighted(g, h, 21)
        });
    }

    #[test]
    fn constants_receive_no_gradient() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let c = g.constant(random(2, 2, 1));
        let x = g.input(random(2, 2, 2));
        let y = g.mul(c, x);
        let s = g.sum_all(y);
        let grads = g.backward(s);
        assert!(grads.var(c).is_none());
        assert_eq!(grads.var(x).unwrap(), g.value(c));
    }

    #[test]
    fn dropout_is_identity_in_eval_mode() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.input(random(2, 3, 1));
        assert_eq!(g.dropout(x), x);
        let mut t = Graph::training(&store, ChaCha8Rng::seed_from_u64(0), 0.5);
        let x = t.input(Matrix::filled(20, 20, 1.0));
        let y = t.dropout(x);
        assert!(t.value(y).data().iter().all(|&v| v == 0.0 || v == 2.0));
    }
}
