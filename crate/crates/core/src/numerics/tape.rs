//! Reverse-mode automatic differentiation over a flat op tape.
//!
//! Every forward computation in the repo — training or evaluation — runs
//! through this tape, so the two paths cannot drift apart numerically.
//! Evaluation simply never calls `backward`. Ops record whatever forward
//! state their backward needs (softmax weights, dropout masks, layer-norm
//! statistics); node creation order is a topological order, so the backward
//! sweep is a single reverse pass.

use std::rc::Rc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::numerics::tensor::{dot, gelu, gelu_grad, sigmoid, Real, Tensor};
use crate::{Error, Result};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Attention visibility: for each query row, the allowed key indices in
/// strictly ascending order. Kernels iterate these lists verbatim, so two
/// computations that share an `AttnMask` see identical summation orders.
#[derive(Debug, Clone)]
pub struct AttnMask {
    pub allowed: Vec<Vec<u32>>,
}

impl AttnMask {
    pub fn n_queries(&self) -> usize {
        self.allowed.len()
    }
}

enum Op<S: Real> {
    Leaf,
    Constant,
    Matmul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    AddRowBroadcast {
        a: Var,
        bias: Var,
    },
    Scale {
        a: Var,
        c: S,
    },
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    MulConst {
        a: Var,
        w: Rc<Tensor<S>>,
    },
    Sum(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<S>,
        rstd: Vec<S>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        mask: Rc<AttnMask>,
        scale: S,
        /// Pre-dropout softmax weights, aligned with the mask's allowed lists.
        weights: Vec<Vec<S>>,
        /// Attention-probability dropout: per-weight keep mask and keep rate.
        drop: Option<(Vec<Vec<bool>>, S)>,
    },
    Dropout {
        a: Var,
        keep: S,
        mask: Vec<bool>,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        a: Var,
        start: usize,
    },
    GatherRows {
        a: Var,
        idx: Rc<Vec<usize>>,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        a: Var,
        start: usize,
    },
    BceWithLogits {
        logits: Var,
        labels: Rc<Tensor<S>>,
    },
}

struct Node<S: Real> {
    value: Tensor<S>,
    needs_grad: bool,
    op: Op<S>,
}

pub struct Tape<S: Real> {
    nodes: Vec<Node<S>>,
    train: bool,
    rng: Option<ChaCha20Rng>,
}

impl<S: Real> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Real> Tape<S> {
    /// Evaluation-mode tape: dropout is the identity.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            train: false,
            rng: None,
        }
    }

    /// Training-mode tape; `seed` drives dropout masks deterministically.
    pub fn train(seed: u64) -> Self {
        Tape {
            nodes: Vec::new(),
            train: true,
            rng: Some(ChaCha20Rng::seed_from_u64(seed)),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<S>, needs_grad: bool, op: Op<S>) -> Var {
        self.nodes.push(Node {
            value,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf: gradients are tracked.
    pub fn leaf(&mut self, t: Tensor<S>) -> Var {
        self.push(t, true, Op::Leaf)
    }

    /// Non-trainable input: no gradient ever flows into it.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(t, false, Op::Constant)
    }

    pub fn matmul(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let value = super::tensor::matmul(&self.nodes[a.0].value, ta, &self.nodes[b.0].value, tb);
        let needs = self.ng(a) || self.ng(b);
        self.push(value, needs, Op::Matmul { a, b, ta, tb })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let mut out = va.clone();
        for (x, y) in out.data_mut().iter_mut().zip(vb.data()) {
            *x += *y;
        }
        let needs = self.ng(a) || self.ng(b);
        self.push(out, needs, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "sub shape mismatch");
        let mut out = va.clone();
        for (x, y) in out.data_mut().iter_mut().zip(vb.data()) {
            *x -= *y;
        }
        let needs = self.ng(a) || self.ng(b);
        self.push(out, needs, Op::Sub(a, b))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "hadamard shape mismatch");
        let mut out = va.clone();
        for (x, y) in out.data_mut().iter_mut().zip(vb.data()) {
            *x = *x * *y;
        }
        let needs = self.ng(a) || self.ng(b);
        self.push(out, needs, Op::Hadamard(a, b))
    }

    /// `a` is m x n, `bias` is 1 x n, added to every row.
    pub fn add_row_broadcast(&mut self, a: Var, bias: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[bias.0].value);
        assert_eq!(vb.rows(), 1, "bias must be a row vector");
        assert_eq!(va.cols(), vb.cols(), "bias width mismatch");
        let mut out = va.clone();
        let n = out.cols();
        for i in 0..out.rows() {
            let r = out.row_mut(i);
            for j in 0..n {
                r[j] += vb.data()[j];
            }
        }
        let needs = self.ng(a) || self.ng(bias);
        self.push(out, needs, Op::AddRowBroadcast { a, bias })
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let out = self.nodes[a.0].value.map(|x| x * c);
        let needs = self.ng(a);
        self.push(out, needs, Op::Scale { a, c })
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.map(gelu);
        let needs = self.ng(a);
        self.push(out, needs, Op::Gelu(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.map(|x| if x > S::zero() { x } else { S::zero() });
        let needs = self.ng(a);
        self.push(out, needs, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.map(sigmoid);
        let needs = self.ng(a);
        self.push(out, needs, Op::Sigmoid(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.map(|x| x.abs());
        let needs = self.ng(a);
        self.push(out, needs, Op::Abs(a))
    }

    /// Elementwise product with a constant weight tensor (masking).
    pub fn mul_const(&mut self, a: Var, w: Rc<Tensor<S>>) -> Var {
        let va = &self.nodes[a.0].value;
        assert_eq!(va.shape(), w.shape(), "mul_const shape mismatch");
        let mut out = va.clone();
        for (x, y) in out.data_mut().iter_mut().zip(w.data()) {
            *x = *x * *y;
        }
        let needs = self.ng(a);
        self.push(out, needs, Op::MulConst { a, w })
    }

    /// Sum of all elements, as a 1x1 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.sum();
        let needs = self.ng(a);
        self.push(Tensor::scalar(s), needs, Op::Sum(a))
    }

    /// Row-wise layer norm with learned gain/bias (both 1 x n).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: S) -> Var {
        let vx = &self.nodes[x.0].value;
        let vg = &self.nodes[gamma.0].value;
        let vb = &self.nodes[beta.0].value;
        let n = vx.cols();
        assert_eq!(vg.shape(), (1, n), "gamma shape");
        assert_eq!(vb.shape(), (1, n), "beta shape");
        let n_s = S::from_f64(n as f64);
        let mut out = Tensor::zeros(vx.rows(), n);
        let mut means = Vec::with_capacity(vx.rows());
        let mut rstds = Vec::with_capacity(vx.rows());
        for i in 0..vx.rows() {
            let row = vx.row(i);
            let mut mu = S::zero();
            for &v in row {
                mu += v;
            }
            mu = mu / n_s;
            let mut var = S::zero();
            for &v in row {
                let d = v - mu;
                var += d * d;
            }
            var = var / n_s;
            let rstd = S::one() / (var + eps).sqrt();
            let orow = out.row_mut(i);
            for j in 0..n {
                let xhat = (row[j] - mu) * rstd;
                orow[j] = xhat * vg.data()[j] + vb.data()[j];
            }
            means.push(mu);
            rstds.push(rstd);
        }
        let needs = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            out,
            needs,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean: means,
                rstd: rstds,
            },
        )
    }

    /// Fused masked single-head attention. q is Lq x d, k and v are Lk x d.
    /// Per query row: softmax over the mask's allowed keys of scaled dot
    /// products, then the weighted sum of value rows, iterating keys in the
    /// mask's ascending order.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, mask: Rc<AttnMask>, scale: S) -> Var {
        self.attention_with_dropout(q, k, v, mask, scale, 0.0)
    }

    /// Attention with dropout applied to the softmax probabilities
    /// (inverted scaling). Identity dropout in eval mode or at rate zero.
    pub fn attention_with_dropout(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        mask: Rc<AttnMask>,
        scale: S,
        drop_rate: f64,
    ) -> Var {
        let dropout_active = self.train && drop_rate > 0.0;
        let keep = S::from_f64(1.0 - drop_rate);
        let drop_masks: Option<Vec<Vec<bool>>> = if dropout_active {
            let rng = self.rng.as_mut().expect("train tape has rng");
            Some(
                mask.allowed
                    .iter()
                    .map(|a| a.iter().map(|_| rng.gen::<f64>() >= drop_rate).collect())
                    .collect(),
            )
        } else {
            None
        };
        let (vq, vk, vv) = (
            &self.nodes[q.0].value,
            &self.nodes[k.0].value,
            &self.nodes[v.0].value,
        );
        let d = vq.cols();
        assert_eq!(vk.cols(), d, "k width mismatch");
        assert_eq!(vv.rows(), vk.rows(), "k/v length mismatch");
        assert_eq!(mask.n_queries(), vq.rows(), "mask query count mismatch");
        let mut out = Tensor::zeros(vq.rows(), vv.cols());
        let mut all_weights = Vec::with_capacity(vq.rows());
        for qi in 0..vq.rows() {
            let qrow = vq.row(qi);
            let allowed = &mask.allowed[qi];
            assert!(!allowed.is_empty(), "query {qi} has no allowed keys");
            let mut scores: Vec<S> = Vec::with_capacity(allowed.len());
            let mut max = S::neg_infinity();
            for &ki in allowed {
                let s = dot(qrow, vk.row(ki as usize)) * scale;
                if s > max {
                    max = s;
                }
                scores.push(s);
            }
            let mut denom = S::zero();
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                denom += *s;
            }
            for s in scores.iter_mut() {
                *s = *s / denom;
            }
            let orow = out.row_mut(qi);
            for (j, (&w, &ki)) in scores.iter().zip(allowed).enumerate() {
                let w_eff = match &drop_masks {
                    Some(dm) => {
                        if dm[qi][j] {
                            w / keep
                        } else {
                            S::zero()
                        }
                    }
                    None => w,
                };
                if w_eff == S::zero() {
                    continue;
                }
                let vrow = vv.row(ki as usize);
                for c in 0..vrow.len() {
                    orow[c] += w_eff * vrow[c];
                }
            }
            all_weights.push(scores);
        }
        let needs = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(
            out,
            needs,
            Op::Attention {
                q,
                k,
                v,
                mask,
                scale,
                weights: all_weights,
                drop: drop_masks.map(|m| (m, keep)),
            },
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let va = &self.nodes[a.0].value;
        assert!(start + len <= va.cols(), "slice_cols out of range");
        let mut out = Tensor::zeros(va.rows(), len);
        for i in 0..va.rows() {
            out.row_mut(i).copy_from_slice(&va.row(i)[start..start + len]);
        }
        let needs = self.ng(a);
        self.push(out, needs, Op::SliceCols { a, start })
    }

    /// Inverted dropout. Identity in eval mode or at rate zero.
    pub fn dropout(&mut self, a: Var, rate: f64) -> Var {
        if !self.train || rate <= 0.0 {
            return a;
        }
        let keep = S::from_f64(1.0 - rate);
        let rng = self.rng.as_mut().expect("train tape has rng");
        let n = self.nodes[a.0].value.numel();
        let mask: Vec<bool> = (0..n).map(|_| rng.gen::<f64>() >= rate).collect();
        let va = &self.nodes[a.0].value;
        let mut out = va.clone();
        for (x, &m) in out.data_mut().iter_mut().zip(&mask) {
            *x = if m { *x / keep } else { S::zero() };
        }
        let needs = self.ng(a);
        self.push(out, needs, Op::Dropout { a, keep, mask })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.nodes[parts[0].0].value.cols();
        let total: usize = parts.iter().map(|p| self.nodes[p.0].value.rows()).sum();
        let mut out = Tensor::zeros(total, cols);
        let mut r = 0;
        for p in parts {
            let vp = &self.nodes[p.0].value;
            assert_eq!(vp.cols(), cols, "concat_rows width mismatch");
            for i in 0..vp.rows() {
                out.row_mut(r).copy_from_slice(vp.row(i));
                r += 1;
            }
        }
        let needs = parts.iter().any(|p| self.ng(*p));
        self.push(out, needs, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let va = &self.nodes[a.0].value;
        assert!(start + len <= va.rows(), "slice_rows out of range");
        let mut out = Tensor::zeros(len, va.cols());
        for i in 0..len {
            out.row_mut(i).copy_from_slice(va.row(start + i));
        }
        let needs = self.ng(a);
        self.push(out, needs, Op::SliceRows { a, start })
    }

    pub fn gather_rows(&mut self, a: Var, idx: Rc<Vec<usize>>) -> Var {
        let va = &self.nodes[a.0].value;
        let mut out = Tensor::zeros(idx.len(), va.cols());
        for (i, &src) in idx.iter().enumerate() {
            assert!(src < va.rows(), "gather_rows index out of range");
            out.row_mut(i).copy_from_slice(va.row(src));
        }
        let needs = self.ng(a);
        self.push(out, needs, Op::GatherRows { a, idx })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.nodes[parts[0].0].value.rows();
        let total: usize = parts.iter().map(|p| self.nodes[p.0].value.cols()).sum();
        let mut out = Tensor::zeros(rows, total);
        let mut c = 0;
        for p in parts {
            let vp = &self.nodes[p.0].value;
            assert_eq!(vp.rows(), rows, "concat_cols height mismatch");
            for i in 0..rows {
                let prow = vp.row(i);
                out.data_mut()[i * total + c..i * total + c + prow.len()].copy_from_slice(prow);
            }
            c += vp.cols();
        }
        let needs = parts.iter().any(|p| self.ng(*p));
        self.push(out, needs, Op::ConcatCols(parts.to_vec()))
    }

    /// Mean binary cross-entropy over all elements, from logits; numerically
    /// stable form max(x,0) - x*y + ln(1 + exp(-|x|)).
    pub fn bce_with_logits(&mut self, logits: Var, labels: Rc<Tensor<S>>) -> Var {
        let vx = &self.nodes[logits.0].value;
        assert_eq!(vx.shape(), labels.shape(), "bce label shape mismatch");
        let n = S::from_f64(vx.numel() as f64);
        let mut acc = S::zero();
        for (&x, &y) in vx.data().iter().zip(labels.data()) {
            let pos = if x > S::zero() { x } else { S::zero() };
            acc += pos - x * y + (S::one() + (-x.abs()).exp()).ln();
        }
        let needs = self.ng(logits);
        self.push(
            Tensor::scalar(acc / n),
            needs,
            Op::BceWithLogits { logits, labels },
        )
    }

    /// Reverse sweep from a scalar loss with seed gradient 1.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        self.backward_scaled(loss, S::one())
    }

    /// Reverse sweep with an explicit seed gradient, used to fold batch-level
    /// normalization constants into per-window backward passes.
    pub fn backward_scaled(&self, loss: Var, seed: S) -> Result<Gradients<S>> {
        let ln = &self.nodes[loss.0];
        if ln.value.numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward requires a scalar loss, got shape {:?}",
                ln.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(seed));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Matmul { a, b, ta, tb } => {
                let va = &self.nodes[a.0].value;
                let vb = &self.nodes[b.0].value;
                if self.ng(*a) {
                    let da = match (ta, tb) {
                        (false, false) => super::tensor::matmul(g, false, vb, true),
                        (false, true) => super::tensor::matmul(g, false, vb, false),
                        (true, false) => super::tensor::matmul(vb, false, g, true),
                        (true, true) => super::tensor::matmul(vb, true, g, true),
                    };
                    accum(grads, *a, da);
                }
                if self.ng(*b) {
                    let db = match (ta, tb) {
                        (false, false) => super::tensor::matmul(va, true, g, false),
                        (false, true) => super::tensor::matmul(g, true, va, false),
                        (true, false) => super::tensor::matmul(va, false, g, false),
                        (true, true) => super::tensor::matmul(g, true, va, true),
                    };
                    accum(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                if self.ng(*a) {
                    accum(grads, *a, g.clone());
                }
                if self.ng(*b) {
                    accum(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.ng(*a) {
                    accum(grads, *a, g.clone());
                }
                if self.ng(*b) {
                    accum(grads, *b, g.map(|x| -x));
                }
            }
            Op::Hadamard(a, b) => {
                if self.ng(*a) {
                    let mut da = g.clone();
                    for (x, y) in da.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
                        *x = *x * *y;
                    }
                    accum(grads, *a, da);
                }
                if self.ng(*b) {
                    let mut db = g.clone();
                    for (x, y) in db.data_mut().iter_mut().zip(self.nodes[a.0].value.data()) {
                        *x = *x * *y;
                    }
                    accum(grads, *b, db);
                }
            }
            Op::AddRowBroadcast { a, bias } => {
                if self.ng(*a) {
                    accum(grads, *a, g.clone());
                }
                if self.ng(*bias) {
                    let mut db = Tensor::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        let grow = g.row(i);
                        let drow = db.row_mut(0);
                        for j in 0..grow.len() {
                            drow[j] += grow[j];
                        }
                    }
                    accum(grads, *bias, db);
                }
            }
            Op::Scale { a, c } => {
                if self.ng(*a) {
                    accum(grads, *a, g.map(|x| x * *c));
                }
            }
            Op::Gelu(a) => {
                if self.ng(*a) {
                    let mut da = g.clone();
                    for (x, y) in da.data_mut().iter_mut().zip(self.nodes[a.0].value.data()) {
                        *x = *x * gelu_grad(*y);
                    }
                    accum(grads, *a, da);
                }
            }
            Op::Relu(a) => {
                if self.ng(*a) {
                    let mut da = g.clone();
                    for (x, y) in da.data_mut().iter_mut().zip(self.nodes[a.0].value.data()) {
                        if *y <= S::zero() {
                            *x = S::zero();
                        }
                    }
                    accum(grads, *a, da);
                }
            }
            Op::Sigmoid(a) => {
                if self.ng(*a) {
                    let mut da = g.clone();
                    for (x, y) in da.data_mut().iter_mut().zip(node.value.data()) {
                        *x = *x * *y * (S::one() - *y);
                    }
                    accum(grads, *a, da);
                }
            }
            Op::Abs(a) => {
                if self.ng(*a) {
                    let mut da = g.clone();
                    for (x, y) in da.data_mut().iter_mut().zip(self.nodes[a.0].value.data()) {
                        *x = if *y > S::zero() {
                            *x
                        } else if *y < S::zero() {
                            -*x
                        } else {
                            S::zero()
                        };
                    }
                    accum(grads, *a, da);
                }
            }
            Op::MulConst { a, w } => {
                if self.ng(*a) {
                    let mut da = g.clone();
                    for (x, y) in da.data_mut().iter_mut().zip(w.data()) {
                        *x = *x * *y;
                    }
                    accum(grads, *a, da);
                }
            }
            Op::Sum(a) => {
                if self.ng(*a) {
                    let s = g.item();
                    let va = &self.nodes[a.0].value;
                    accum(grads, *a, Tensor::full(va.rows(), va.cols(), s));
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let vx = &self.nodes[x.0].value;
                let vg = &self.nodes[gamma.0].value;
                let n = vx.cols();
                let n_s = S::from_f64(n as f64);
                if self.ng(*gamma) {
                    let mut dg = Tensor::zeros(1, n);
                    for i in 0..vx.rows() {
                        let row = vx.row(i);
                        let grow = g.row(i);
                        let drow = dg.row_mut(0);
                        for j in 0..n {
                            let xhat = (row[j] - mean[i]) * rstd[i];
                            drow[j] += grow[j] * xhat;
                        }
                    }
                    accum(grads, *gamma, dg);
                }
                if self.ng(*beta) {
                    let mut db = Tensor::zeros(1, n);
                    for i in 0..vx.rows() {
                        let grow = g.row(i);
                        let drow = db.row_mut(0);
                        for j in 0..n {
                            drow[j] += grow[j];
                        }
                    }
                    accum(grads, *beta, db);
                }
                if self.ng(*x) {
                    let mut dx = Tensor::zeros(vx.rows(), n);
                    for i in 0..vx.rows() {
                        let row = vx.row(i);
                        let grow = g.row(i);
                        let mut sum_dxhat = S::zero();
                        let mut sum_dxhat_xhat = S::zero();
                        for j in 0..n {
                            let dxhat = grow[j] * vg.data()[j];
                            let xhat = (row[j] - mean[i]) * rstd[i];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                        let m1 = sum_dxhat / n_s;
                        let m2 = sum_dxhat_xhat / n_s;
                        let drow = dx.row_mut(i);
                        for j in 0..n {
                            let dxhat = grow[j] * vg.data()[j];
                            let xhat = (row[j] - mean[i]) * rstd[i];
                            drow[j] = rstd[i] * (dxhat - m1 - xhat * m2);
                        }
                    }
                    accum(grads, *x, dx);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                mask,
                scale,
                weights,
                drop,
            } => {
                let vq = &self.nodes[q.0].value;
                let vk = &self.nodes[k.0].value;
                let vv = &self.nodes[v.0].value;
                let mut dq = Tensor::zeros(vq.rows(), vq.cols());
                let mut dk = Tensor::zeros(vk.rows(), vk.cols());
                let mut dv = Tensor::zeros(vv.rows(), vv.cols());
                for qi in 0..vq.rows() {
                    let allowed = &mask.allowed[qi];
                    let w = &weights[qi];
                    let grow = g.row(qi);
                    // Effective (post-dropout) weight for position j.
                    let eff = |j: usize| -> S {
                        match drop {
                            Some((dm, keep)) => {
                                if dm[qi][j] {
                                    w[j] / *keep
                                } else {
                                    S::zero()
                                }
                            }
                            None => w[j],
                        }
                    };
                    // dv_j += w_eff_j * g_row; dw_j routes through dropout.
                    let mut dw: Vec<S> = Vec::with_capacity(allowed.len());
                    for (j, &ki) in allowed.iter().enumerate() {
                        let vrow = vv.row(ki as usize);
                        let d_eff = dot(grow, vrow);
                        let dwj = match drop {
                            Some((dm, keep)) => {
                                if dm[qi][j] {
                                    d_eff / *keep
                                } else {
                                    S::zero()
                                }
                            }
                            None => d_eff,
                        };
                        dw.push(dwj);
                        let we = eff(j);
                        if we != S::zero() {
                            let dvrow = dv.row_mut(ki as usize);
                            for c in 0..grow.len() {
                                dvrow[c] += we * grow[c];
                            }
                        }
                    }
                    // softmax backward over pre-dropout weights:
                    // ds_j = w_j * (dw_j - sum_k w_k dw_k)
                    let mut mix = S::zero();
                    for (wj, dwj) in w.iter().zip(&dw) {
                        mix += *wj * *dwj;
                    }
                    let qrow = vq.row(qi);
                    let dqrow = dq.row_mut(qi);
                    for ((&ki, &wj), &dwj) in allowed.iter().zip(w).zip(&dw) {
                        let ds = wj * (dwj - mix) * *scale;
                        let krow = vk.row(ki as usize);
                        for c in 0..qrow.len() {
                            dqrow[c] += ds * krow[c];
                        }
                        let dkrow = dk.row_mut(ki as usize);
                        for c in 0..qrow.len() {
                            dkrow[c] += ds * qrow[c];
                        }
                    }
                }
                if self.ng(*q) {
                    accum(grads, *q, dq);
                }
                if self.ng(*k) {
                    accum(grads, *k, dk);
                }
                if self.ng(*v) {
                    accum(grads, *v, dv);
                }
            }
            Op::Dropout { a, keep, mask } => {
                if self.ng(*a) {
                    let mut da = g.clone();
                    for (x, &m) in da.data_mut().iter_mut().zip(mask) {
                        *x = if m { *x / *keep } else { S::zero() };
                    }
                    accum(grads, *a, da);
                }
            }
            Op::ConcatRows(parts) => {
                let mut r = 0;
                for p in parts {
                    let vp = &self.nodes[p.0].value;
                    let rows = vp.rows();
                    if self.ng(*p) {
                        let mut dp = Tensor::zeros(rows, vp.cols());
                        for i in 0..rows {
                            dp.row_mut(i).copy_from_slice(g.row(r + i));
                        }
                        accum(grads, *p, dp);
                    }
                    r += rows;
                }
            }
            Op::SliceRows { a, start } => {
                if self.ng(*a) {
                    let va = &self.nodes[a.0].value;
                    let mut da = Tensor::zeros(va.rows(), va.cols());
                    for i in 0..g.rows() {
                        da.row_mut(start + i).copy_from_slice(g.row(i));
                    }
                    accum(grads, *a, da);
                }
            }
            Op::GatherRows { a, idx } => {
                if self.ng(*a) {
                    let va = &self.nodes[a.0].value;
                    let mut da = Tensor::zeros(va.rows(), va.cols());
                    for (i, &src) in idx.iter().enumerate() {
                        let grow = g.row(i);
                        let drow = da.row_mut(src);
                        for j in 0..grow.len() {
                            drow[j] += grow[j];
                        }
                    }
                    accum(grads, *a, da);
                }
            }
            Op::ConcatCols(parts) => {
                let mut c = 0;
                for p in parts {
                    let vp = &self.nodes[p.0].value;
                    let cols = vp.cols();
                    if self.ng(*p) {
                        let mut dp = Tensor::zeros(vp.rows(), cols);
                        for i in 0..vp.rows() {
                            dp.row_mut(i).copy_from_slice(&g.row(i)[c..c + cols]);
                        }
                        accum(grads, *p, dp);
                    }
                    c += cols;
                }
            }
            Op::SliceCols { a, start } => {
                if self.ng(*a) {
                    let va = &self.nodes[a.0].value;
                    let mut da = Tensor::zeros(va.rows(), va.cols());
                    for i in 0..g.rows() {
                        let grow = g.row(i);
                        da.row_mut(i)[*start..*start + grow.len()].copy_from_slice(grow);
                    }
                    accum(grads, *a, da);
                }
            }
            Op::BceWithLogits { logits, labels } => {
                if self.ng(*logits) {
                    let vx = &self.nodes[logits.0].value;
                    let n = S::from_f64(vx.numel() as f64);
                    let gs = g.item() / n;
                    let mut dl = Tensor::zeros(vx.rows(), vx.cols());
                    for ((d, &x), &y) in dl.data_mut().iter_mut().zip(vx.data()).zip(labels.data())
                    {
                        *d = (sigmoid(x) - y) * gs;
                    }
                    accum(grads, *logits, dl);
                }
            }
        }
    }
}

fn accum<S: Real>(grads: &mut [Option<Tensor<S>>], v: Var, contrib: Tensor<S>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_scaled(&contrib, S::one()),
        slot @ None => *slot = Some(contrib),
    }
}

/// Gradient table produced by a backward sweep.
pub struct Gradients<S: Real> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Real> Gradients<S> {
    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for a leaf, with zeros when the loss does not reach it.
    pub fn grad_or_zeros(&self, v: Var, rows: usize, cols: usize) -> Tensor<S> {
        match self.grad(v) {
            Some(g) => {
                assert_eq!(g.shape(), (rows, cols), "gradient shape mismatch");
                g.clone()
            }
            None => Tensor::zeros(rows, cols),
        }
    }
}
