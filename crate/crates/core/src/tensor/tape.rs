//! Wengert tape: operations record themselves during the forward pass and
//! are replayed in exact reverse order by `backward`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{mm_nn, mm_nt, mm_tn};
use super::{numel, Tensor, TensorError};
use crate::scalar::Scalar;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// One pooled row range of a rank-3 input: rows `start..end` of batch entry
/// `batch`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowSpan {
    pub batch: usize,
    pub start: usize,
    pub end: usize,
}

/// One supervised mention token for the coreference attention loss.
///
/// `weight` already folds in the per-token normalizers (1/N_i and the
/// cluster/batch normalization mode), so the loss is simply
/// `-sum(weight * ln(max(alpha, 1e-12)))` over all (token, antecedent) pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct CorefTerm {
    pub batch: usize,
    pub position: usize,
    pub antecedents: Vec<usize>,
    pub weight: f64,
}

const COREF_LOG_CLAMP: f64 = 1e-12;

#[derive(Clone)]
enum Op<S> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    AddBias { x: Var, bias: Var },
    MatMul { a: Var, b: Var, transpose_b: bool },
    Relu(Var),
    Tanh(Var),
    Softmax(Var),
    CausalSoftmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<S>, inv_std: Vec<S> },
    Embedding { table: Var, ids: Vec<usize> },
    Reshape(Var),
    SplitHeads { x: Var, n_heads: usize },
    MergeHeads { x: Var, n_heads: usize },
    MeanHeads(Var),
    RowsMaxPool { x: Var, argmax: Vec<usize> },
    ConcatCols { a: Var, b: Var },
    CrossEntropyMasked {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<S>,
        probs: Vec<S>,
        inv_mask_sum: S,
    },
    CorefLoss { attn: Var, terms: Vec<CorefTerm> },
    Sum(Var),
}

struct Node<S> {
    value: Tensor<S>,
    grad: Option<Vec<S>>,
    requires_grad: bool,
    op: Op<S>,
}

/// Ordered record of executed operations. Inputs always precede the ops that
/// consume them, so reverse iteration is a valid topological order for
/// backpropagation.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record an owned tensor as a leaf. Its `requires_grad` flag decides
    /// whether backward materializes a gradient for it.
    pub fn leaf(&mut self, tensor: Tensor<S>) -> Var {
        let requires_grad = tensor.requires_grad;
        self.push(tensor, requires_grad, Op::Leaf)
    }

    /// Record a borrowed tensor (typically a model parameter) as a leaf.
    pub fn leaf_from(&mut self, tensor: &Tensor<S>) -> Var {
        let mut copy = Tensor::new(tensor.shape().to_vec(), tensor.data().to_vec())
            .expect("tensor invariant: shape matches data");
        copy.requires_grad = tensor.requires_grad;
        self.leaf(copy)
    }

    /// Leaf that never receives a gradient (masks, targets-as-values, ...).
    pub fn constant(&mut self, mut tensor: Tensor<S>) -> Var {
        tensor.requires_grad = false;
        self.leaf(tensor)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated for `v`, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<S>, requires_grad: bool, op: Op<S>) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn push_result(
        &mut self,
        shape: Vec<usize>,
        data: Vec<S>,
        inputs: &[Var],
        op: Op<S>,
    ) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let value = Tensor::new(shape, data).expect("op output shape matches data");
        self.push(value, requires_grad, op)
    }

    // ── Elementwise and shape ops ───────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(TensorError::Shape {
                op: "add",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| x + y)
            .collect();
        Ok(self.push_result(ta.shape().to_vec(), data, &[a, b], Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(TensorError::Shape {
                op: "mul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| x * y)
            .collect();
        Ok(self.push_result(ta.shape().to_vec(), data, &[a, b], Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: S) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| v * c).collect();
        self.push_result(tx.shape().to_vec(), data, &[x], Op::Scale(x, c))
    }

    /// `x + bias` where the bias shape is a strict suffix of the shape of
    /// `x`; the bias is repeated over the leading dimensions.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let (xs, bs) = (tx.shape(), tb.shape());
        if bs.is_empty() || bs.len() >= xs.len() || !xs.ends_with(bs) {
            return Err(TensorError::Shape {
                op: "add_bias",
                lhs: xs.to_vec(),
                rhs: bs.to_vec(),
            });
        }
        let span = tb.numel();
        let mut data = tx.data().to_vec();
        for chunk in data.chunks_exact_mut(span) {
            for (v, &b) in chunk.iter_mut().zip(tb.data()) {
                *v = *v + b;
            }
        }
        Ok(self.push_result(xs.to_vec(), data, &[x, bias], Op::AddBias { x, bias }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let data = tx
            .data()
            .iter()
            .map(|&v| if v > S::zero() { v } else { S::zero() })
            .collect();
        self.push_result(tx.shape().to_vec(), data, &[x], Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| v.tanh()).collect();
        self.push_result(tx.shape().to_vec(), data, &[x], Op::Tanh(x))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        let tx = self.value(x);
        if numel(&shape) != tx.numel() {
            return Err(TensorError::Numel { shape, len: tx.numel() });
        }
        let data = tx.data().to_vec();
        Ok(self.push_result(shape, data, &[x], Op::Reshape(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total: S = self.value(x).data().iter().copied().sum();
        self.push_result(Vec::new(), vec![total], &[x], Op::Sum(x))
    }

    // ── Matrix products ─────────────────────────────────────────────────

    /// Batched matrix product over the trailing two dimensions.
    ///
    /// `a` is `[..., m, k]`. `b` is either rank-2 (shared across the batch)
    /// or has the same leading dimensions as `a`. With `transpose_b`, the
    /// trailing dims of `b` are `[n, k]` instead of `[k, n]`.
    pub fn matmul_ext(
        &mut self,
        a: Var,
        b: Var,
        transpose_b: bool,
    ) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        let mismatch = || TensorError::Shape {
            op: if transpose_b { "matmul_nt" } else { "matmul" },
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (bk, bn) = if transpose_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if bk != k {
            return Err(mismatch());
        }
        let shared_b = sb.len() == 2;
        if !shared_b && sb[..sb.len() - 2] != sa[..sa.len() - 2] {
            return Err(mismatch());
        }
        let batch = numel(&sa[..sa.len() - 2]);
        let n = bn;
        let mut out = vec![S::zero(); batch * m * n];
        for l in 0..batch {
            let a_sl = &ta.data()[l * m * k..(l + 1) * m * k];
            let b_sl = if shared_b {
                tb.data()
            } else {
                &tb.data()[l * k * n..(l + 1) * k * n]
            };
            let c_sl = &mut out[l * m * n..(l + 1) * m * n];
            if transpose_b {
                mm_nt(a_sl, b_sl, c_sl, m, k, n);
            } else {
                mm_nn(a_sl, b_sl, c_sl, m, k, n);
            }
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.push(m);
        shape.push(n);
        Ok(self.push_result(shape, out, &[a, b], Op::MatMul { a, b, transpose_b }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_ext(a, b, false)
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_ext(a, b, true)
    }

    // ── Normalization and activations over rows ─────────────────────────

    /// Softmax over the last axis, computed with max-subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        let tx = self.value(x);
        let shape = tx.shape().to_vec();
        let d = *shape.last().ok_or_else(|| TensorError::Shape {
            op: "softmax",
            lhs: shape.clone(),
            rhs: Vec::new(),
        })?;
        let mut data = tx.data().to_vec();
        for row in data.chunks_exact_mut(d) {
            softmax_row(row);
        }
        Ok(self.push_result(shape, data, &[x], Op::Softmax(x)))
    }

    /// Row-wise softmax over the trailing `[T, T]` block where row `t` only
    /// sees columns `0..=t`. Entries above the diagonal are exactly zero.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        let tx = self.value(x);
        let shape = tx.shape().to_vec();
        let r = shape.len();
        if r < 2 || shape[r - 1] != shape[r - 2] {
            return Err(TensorError::Shape {
                op: "causal_softmax",
                lhs: shape,
                rhs: Vec::new(),
            });
        }
        let t = shape[r - 1];
        let mut data = tx.data().to_vec();
        for block in data.chunks_exact_mut(t * t) {
            for (i, row) in block.chunks_exact_mut(t).enumerate() {
                softmax_row(&mut row[..=i]);
                row[i + 1..].iter_mut().for_each(|v| *v = S::zero());
            }
        }
        Ok(self.push_result(shape, data, &[x], Op::CausalSoftmax(x)))
    }

    /// Layer normalization over the last axis with affine transform.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: S,
    ) -> Result<Var, TensorError> {
        let tx = self.value(x);
        let shape = tx.shape().to_vec();
        let d = *shape.last().unwrap_or(&0);
        if d == 0
            || self.value(gamma).shape() != [d]
            || self.value(beta).shape() != [d]
        {
            return Err(TensorError::Shape {
                op: "layer_norm",
                lhs: shape,
                rhs: self.value(gamma).shape().to_vec(),
            });
        }
        let rows = tx.numel() / d;
        let mut data = tx.data().to_vec();
        let mut mean = Vec::with_capacity(rows);
        let mut inv_std = Vec::with_capacity(rows);
        let inv_d = S::one() / S::from_usize(d);
        let gamma_data = self.value(gamma).data().to_vec();
        let beta_data = self.value(beta).data().to_vec();
        for row in data.chunks_exact_mut(d) {
            let mu: S = row.iter().copied().sum::<S>() * inv_d;
            let var: S = row
                .iter()
                .map(|&v| (v - mu) * (v - mu))
                .sum::<S>()
                * inv_d;
            let istd = S::one() / (var + eps).sqrt();
            for (v, (&g, &b)) in row.iter_mut().zip(gamma_data.iter().zip(&beta_data)) {
                *v = (*v - mu) * istd * g + b;
            }
            mean.push(mu);
            inv_std.push(istd);
        }
        Ok(self.push_result(
            tx.shape().to_vec(),
            data,
            &[x, gamma, beta],
            Op::LayerNorm { x, gamma, beta, mean, inv_std },
        ))
    }

    // ── Gather / scatter ────────────────────────────────────────────────

    /// Row gather from `table[V, d]`; output shape is `prefix + [d]` and
    /// `ids.len()` must equal the product of `prefix`. Backward scatter-adds
    /// into the table gradient, so repeated ids accumulate.
    pub fn embedding(
        &mut self,
        table: Var,
        ids: &[usize],
        prefix: &[usize],
    ) -> Result<Var, TensorError> {
        let tt = self.value(table);
        if tt.shape().len() != 2 {
            return Err(TensorError::Shape {
                op: "embedding",
                lhs: tt.shape().to_vec(),
                rhs: prefix.to_vec(),
            });
        }
        let (v, d) = (tt.shape()[0], tt.shape()[1]);
        if numel(prefix) != ids.len() {
            return Err(TensorError::Contract(format!(
                "embedding: {} ids do not fill prefix shape {prefix:?}",
                ids.len()
            )));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::Index { what: "embedding id", index: id, bound: v });
            }
            data.extend_from_slice(&tt.data()[id * d..(id + 1) * d]);
        }
        let mut shape = prefix.to_vec();
        shape.push(d);
        Ok(self.push_result(
            shape,
            data,
            &[table],
            Op::Embedding { table, ids: ids.to_vec() },
        ))
    }

    /// `[B, T, D] -> [B, H, T, D/H]` head split for multi-head attention.
    pub fn split_heads(&mut self, x: Var, n_heads: usize) -> Result<Var, TensorError> {
        let tx = self.value(x);
        let s = tx.shape();
        if s.len() != 3 || n_heads == 0 || s[2] % n_heads != 0 {
            return Err(TensorError::Shape {
                op: "split_heads",
                lhs: s.to_vec(),
                rhs: vec![n_heads],
            });
        }
        let (b, t, d) = (s[0], s[1], s[2]);
        let dk = d / n_heads;
        let mut data = vec![S::zero(); tx.numel()];
        let src = tx.data();
        for bi in 0..b {
            for h in 0..n_heads {
                for ti in 0..t {
                    let dst = (((bi * n_heads + h) * t) + ti) * dk;
                    let from = (bi * t + ti) * d + h * dk;
                    data[dst..dst + dk].copy_from_slice(&src[from..from + dk]);
                }
            }
        }
        Ok(self.push_result(
            vec![b, n_heads, t, dk],
            data,
            &[x],
            Op::SplitHeads { x, n_heads },
        ))
    }

    /// Inverse of [`Tape::split_heads`]: `[B, H, T, dk] -> [B, T, H*dk]`.
    pub fn merge_heads(&mut self, x: Var) -> Result<Var, TensorError> {
        let tx = self.value(x);
        let s = tx.shape();
        if s.len() != 4 {
            return Err(TensorError::Shape {
                op: "merge_heads",
                lhs: s.to_vec(),
                rhs: Vec::new(),
            });
        }
        let (b, h, t, dk) = (s[0], s[1], s[2], s[3]);
        let d = h * dk;
        let mut data = vec![S::zero(); tx.numel()];
        let src = tx.data();
        for bi in 0..b {
            for hi in 0..h {
                for ti in 0..t {
                    let from = (((bi * h + hi) * t) + ti) * dk;
                    let dst = (bi * t + ti) * d + hi * dk;
                    data[dst..dst + dk].copy_from_slice(&src[from..from + dk]);
                }
            }
        }
        Ok(self.push_result(vec![b, t, d], data, &[x], Op::MergeHeads { x, n_heads: h }))
    }

    /// Mean over the head axis: `[B, H, T, U] -> [B, T, U]`. Averaging
    /// head-wise probability rows preserves row normalization.
    pub fn mean_heads(&mut self, x: Var) -> Result<Var, TensorError> {
        let tx = self.value(x);
        let s = tx.shape();
        if s.len() != 4 {
            return Err(TensorError::Shape {
                op: "mean_heads",
                lhs: s.to_vec(),
                rhs: Vec::new(),
            });
        }
        let (b, h, t, u) = (s[0], s[1], s[2], s[3]);
        let inv_h = S::one() / S::from_usize(h);
        let mut data = vec![S::zero(); b * t * u];
        let src = tx.data();
        for bi in 0..b {
            for hi in 0..h {
                let block = &src[(bi * h + hi) * t * u..(bi * h + hi + 1) * t * u];
                let dst = &mut data[bi * t * u..(bi + 1) * t * u];
                for (o, &v) in dst.iter_mut().zip(block) {
                    *o = *o + v * inv_h;
                }
            }
        }
        Ok(self.push_result(vec![b, t, u], data, &[x], Op::MeanHeads(x)))
    }

    /// Coordinatewise max over row spans of a `[B, T, D]` input; one output
    /// row per span. Used to pool hidden states into sentence vectors.
    pub fn rows_max_pool(
        &mut self,
        x: Var,
        spans: &[RowSpan],
    ) -> Result<Var, TensorError> {
        let tx = self.value(x);
        let s = tx.shape();
        if s.len() != 3 {
            return Err(TensorError::Shape {
                op: "rows_max_pool",
                lhs: s.to_vec(),
                rhs: Vec::new(),
            });
        }
        let (b, t, d) = (s[0], s[1], s[2]);
        let mut data = Vec::with_capacity(spans.len() * d);
        let mut argmax = Vec::with_capacity(spans.len() * d);
        let src = tx.data();
        for span in spans {
            if span.start >= span.end {
                return Err(TensorError::Contract(format!(
                    "rows_max_pool: empty span {}..{}",
                    span.start, span.end
                )));
            }
            if span.batch >= b || span.end > t {
                return Err(TensorError::Index {
                    what: "rows_max_pool span bound",
                    index: span.end.max(span.batch),
                    bound: t,
                });
            }
            for c in 0..d {
                let mut best = S::neg_infinity();
                let mut best_idx = 0usize;
                for ti in span.start..span.end {
                    let idx = (span.batch * t + ti) * d + c;
                    if src[idx] > best {
                        best = src[idx];
                        best_idx = idx;
                    }
                }
                data.push(best);
                argmax.push(best_idx);
            }
        }
        Ok(self.push_result(
            vec![spans.len(), d],
            data,
            &[x],
            Op::RowsMaxPool { x, argmax },
        ))
    }

    /// Concatenate two rank-2 tensors along columns.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(TensorError::Shape {
                op: "concat_cols",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (rows, da, db) = (sa[0], sa[1], sb[1]);
        let mut data = Vec::with_capacity(rows * (da + db));
        for r in 0..rows {
            data.extend_from_slice(&ta.data()[r * da..(r + 1) * da]);
            data.extend_from_slice(&tb.data()[r * db..(r + 1) * db]);
        }
        Ok(self.push_result(
            vec![rows, da + db],
            data,
            &[a, b],
            Op::ConcatCols { a, b },
        ))
    }

    // ── Losses ──────────────────────────────────────────────────────────

    /// Masked mean cross entropy over `[N, V]` logits:
    /// `-(sum_t mask_t * log softmax(logits_t)[target_t]) / sum_t mask_t`.
    ///
    /// Uses log-softmax directly for stability. With an all-zero mask the
    /// loss is 0 with zero gradients; callers flag that case in their step
    /// report. The gradient at masked rows is exactly zero.
    pub fn cross_entropy_masked(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: &[S],
    ) -> Result<Var, TensorError> {
        let tl = self.value(logits);
        let s = tl.shape();
        if s.len() != 2 || targets.len() != s[0] || mask.len() != s[0] {
            return Err(TensorError::Shape {
                op: "cross_entropy_masked",
                lhs: s.to_vec(),
                rhs: vec![targets.len(), mask.len()],
            });
        }
        let (n, v) = (s[0], s[1]);
        for &m in mask {
            if m != S::zero() && m != S::one() {
                return Err(TensorError::Contract(format!(
                    "cross_entropy_masked: mask value {m} not in {{0, 1}}"
                )));
            }
        }
        for &t in targets {
            if t >= v {
                return Err(TensorError::Index { what: "target id", index: t, bound: v });
            }
        }
        let mask_sum: S = mask.iter().copied().sum();
        let mut probs = vec![S::zero(); n * v];
        let mut loss = S::zero();
        if mask_sum > S::zero() {
            let src = tl.data();
            for row in 0..n {
                if mask[row] == S::zero() {
                    continue;
                }
                let x = &src[row * v..(row + 1) * v];
                let max = x.iter().copied().fold(S::neg_infinity(), S::max);
                let mut denom = S::zero();
                let p = &mut probs[row * v..(row + 1) * v];
                for (pi, &xi) in p.iter_mut().zip(x) {
                    let e = (xi - max).exp();
                    *pi = e;
                    denom = denom + e;
                }
                let log_denom = denom.ln();
                p.iter_mut().for_each(|pi| *pi = *pi / denom);
                // log softmax computed directly: x - max - ln(sum exp)
                let logp_target = x[targets[row]] - max - log_denom;
                loss = loss - mask[row] * logp_target;
            }
            loss = loss / mask_sum;
        }
        let inv_mask_sum = if mask_sum > S::zero() {
            S::one() / mask_sum
        } else {
            S::zero()
        };
        Ok(self.push_result(
            Vec::new(),
            vec![loss],
            &[logits],
            Op::CrossEntropyMasked {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                inv_mask_sum,
            },
        ))
    }

    /// Coreference attention loss over row-normalized attention
    /// `attn[B, T, T]`: `-sum(term.weight * ln(max(attn[b, i, k], 1e-12)))`
    /// over every antecedent `k` of every supervised token `i`.
    pub fn coref_loss(
        &mut self,
        attn: Var,
        terms: &[CorefTerm],
    ) -> Result<Var, TensorError> {
        let ta = self.value(attn);
        let s = ta.shape();
        if s.len() != 3 || s[1] != s[2] {
            return Err(TensorError::Shape {
                op: "coref_loss",
                lhs: s.to_vec(),
                rhs: Vec::new(),
            });
        }
        let (b, t) = (s[0], s[1]);
        let clamp = S::from_f64(COREF_LOG_CLAMP);
        let mut loss = S::zero();
        for term in terms {
            if term.batch >= b || term.position >= t {
                return Err(TensorError::Contract(format!(
                    "coref_loss: supervised position {} (batch {}) outside sequence length {t}",
                    term.position, term.batch
                )));
            }
            let w = S::from_f64(term.weight);
            for &k in &term.antecedents {
                if k >= term.position {
                    return Err(TensorError::Contract(format!(
                        "coref_loss: antecedent {k} not before position {}",
                        term.position
                    )));
                }
                let alpha = ta.data()[(term.batch * t + term.position) * t + k];
                loss = loss - w * alpha.max(clamp).ln();
            }
        }
        Ok(self.push_result(
            Vec::new(),
            vec![loss],
            &[attn],
            Op::CorefLoss { attn, terms: terms.to_vec() },
        ))
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Populate gradients for every `requires_grad` tensor reachable from
    /// the scalar `loss`. Each call propagates its own vector-Jacobian
    /// products through scratch buffers and adds them into the persistent
    /// per-node gradients, so repeated calls (on the same or different
    /// losses of this tape) accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut work: Vec<Option<Vec<S>>> = vec![None; loss.0 + 1];
        work[loss.0] = Some(vec![S::one()]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(dout) = work[idx].take() else { continue };
            let op = self.nodes[idx].op.clone();
            self.backward_op(&mut work, idx, &op, &dout);
            let node = &mut self.nodes[idx];
            let grad = node
                .grad
                .get_or_insert_with(|| vec![S::zero(); node.value.numel()]);
            for (g, &d) in grad.iter_mut().zip(&dout) {
                *g = *g + d;
            }
        }
        Ok(())
    }

    fn accum(&self, work: &mut [Option<Vec<S>>], v: Var, delta: &[S]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let grad = work[v.0]
            .get_or_insert_with(|| vec![S::zero(); self.nodes[v.0].value.numel()]);
        debug_assert_eq!(grad.len(), delta.len());
        for (g, &d) in grad.iter_mut().zip(delta) {
            *g = *g + d;
        }
    }

    fn backward_op(
        &self,
        work: &mut [Option<Vec<S>>],
        out_idx: usize,
        op: &Op<S>,
        dout: &[S],
    ) {
        match op {
            Op::Leaf => {}

            Op::Add(a, b) => {
                self.accum(work, *a, dout);
                self.accum(work, *b, dout);
            }

            Op::Mul(a, b) => {
                let da: Vec<S> = dout
                    .iter()
                    .zip(self.value(*b).data())
                    .map(|(&d, &v)| d * v)
                    .collect();
                let db: Vec<S> = dout
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(&d, &v)| d * v)
                    .collect();
                self.accum(work, *a, &da);
                self.accum(work, *b, &db);
            }

            Op::Scale(x, c) => {
                let dx: Vec<S> = dout.iter().map(|&d| d * *c).collect();
                self.accum(work, *x, &dx);
            }

            Op::AddBias { x, bias } => {
                self.accum(work, *x, dout);
                let span = self.value(*bias).numel();
                let mut db = vec![S::zero(); span];
                for chunk in dout.chunks_exact(span) {
                    for (g, &d) in db.iter_mut().zip(chunk) {
                        *g = *g + d;
                    }
                }
                self.accum(work, *bias, &db);
            }

            Op::MatMul { a, b, transpose_b } => {
                let sa = self.value(*a).shape().to_vec();
                let sb = self.value(*b).shape().to_vec();
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = if *transpose_b { sb[sb.len() - 2] } else { sb[sb.len() - 1] };
                let batch = numel(&sa[..sa.len() - 2]);
                let shared_b = sb.len() == 2;
                let mut da = vec![S::zero(); batch * m * k];
                let mut db = vec![S::zero(); if shared_b { n * k } else { batch * n * k }];
                {
                    let a_data = self.value(*a).data();
                    let b_data = self.value(*b).data();
                    for l in 0..batch {
                        let dc = &dout[l * m * n..(l + 1) * m * n];
                        let a_sl = &a_data[l * m * k..(l + 1) * m * k];
                        let b_sl = if shared_b {
                            b_data
                        } else {
                            &b_data[l * n * k..(l + 1) * n * k]
                        };
                        let da_sl = &mut da[l * m * k..(l + 1) * m * k];
                        let db_sl = if shared_b {
                            &mut db[..]
                        } else {
                            &mut db[l * n * k..(l + 1) * n * k]
                        };
                        if *transpose_b {
                            // c = a b^T: da = dc b, db = dc^T a
                            mm_nn(dc, b_sl, da_sl, m, n, k);
                            mm_tn(dc, a_sl, db_sl, m, n, k);
                        } else {
                            // c = a b: da = dc b^T, db = a^T dc
                            mm_nt(dc, b_sl, da_sl, m, n, k);
                            mm_tn(a_sl, dc, db_sl, m, k, n);
                        }
                    }
                }
                self.accum(work, *a, &da);
                self.accum(work, *b, &db);
            }

            Op::Relu(x) => {
                // subgradient at exactly 0 is 0
                let dx: Vec<S> = dout
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&d, &v)| if v > S::zero() { d } else { S::zero() })
                    .collect();
                self.accum(work, *x, &dx);
            }

            Op::Tanh(x) => {
                let dx: Vec<S> = dout
                    .iter()
                    .zip(self.nodes[out_idx].value.data())
                    .map(|(&d, &y)| d * (S::one() - y * y))
                    .collect();
                self.accum(work, *x, &dx);
            }

            Op::Softmax(x) | Op::CausalSoftmax(x) => {
                // dx_i = y_i * (dout_i - sum_j dout_j y_j); rows above the
                // causal diagonal have y = 0 so the same rule covers both.
                let y = self.nodes[out_idx].value.data();
                let d = *self.nodes[out_idx].value.shape().last().expect("rank >= 1");
                let mut dx = vec![S::zero(); y.len()];
                for ((dx_row, y_row), dout_row) in dx
                    .chunks_exact_mut(d)
                    .zip(y.chunks_exact(d))
                    .zip(dout.chunks_exact(d))
                {
                    let dot: S = dout_row
                        .iter()
                        .zip(y_row)
                        .map(|(&g, &p)| g * p)
                        .sum();
                    for ((o, &g), &p) in dx_row.iter_mut().zip(dout_row).zip(y_row) {
                        *o = p * (g - dot);
                    }
                }
                self.accum(work, *x, &dx);
            }

            Op::LayerNorm { x, gamma, beta, mean, inv_std } => {
                let tx = self.value(*x);
                let d = *tx.shape().last().expect("rank >= 1");
                let inv_d = S::one() / S::from_usize(d);
                let gamma_data = self.value(*gamma).data().to_vec();
                let x_data = self.value(*x).data();
                let mut dx = vec![S::zero(); x_data.len()];
                let mut dgamma = vec![S::zero(); d];
                let mut dbeta = vec![S::zero(); d];
                for (r, (x_row, dout_row)) in x_data
                    .chunks_exact(d)
                    .zip(dout.chunks_exact(d))
                    .enumerate()
                {
                    let (mu, istd) = (mean[r], inv_std[r]);
                    let dx_row = &mut dx[r * d..(r + 1) * d];
                    let mut m1 = S::zero();
                    let mut m2 = S::zero();
                    for j in 0..d {
                        let xhat = (x_row[j] - mu) * istd;
                        let g = dout_row[j] * gamma_data[j];
                        dgamma[j] = dgamma[j] + dout_row[j] * xhat;
                        dbeta[j] = dbeta[j] + dout_row[j];
                        m1 = m1 + g;
                        m2 = m2 + g * xhat;
                        dx_row[j] = g;
                    }
                    m1 = m1 * inv_d;
                    m2 = m2 * inv_d;
                    for j in 0..d {
                        let xhat = (x_row[j] - mu) * istd;
                        dx_row[j] = (dx_row[j] - m1 - xhat * m2) * istd;
                    }
                }
                self.accum(work, *x, &dx);
                self.accum(work, *gamma, &dgamma);
                self.accum(work, *beta, &dbeta);
            }

            Op::Embedding { table, ids } => {
                let (v, d) = {
                    let s = self.value(*table).shape();
                    (s[0], s[1])
                };
                let mut dt = vec![S::zero(); v * d];
                for (row, &id) in ids.iter().enumerate() {
                    let src = &dout[row * d..(row + 1) * d];
                    let dst = &mut dt[id * d..(id + 1) * d];
                    for (g, &x) in dst.iter_mut().zip(src) {
                        *g = *g + x;
                    }
                }
                self.accum(work, *table, &dt);
            }

            Op::Reshape(x) => {
                self.accum(work, *x, dout);
            }

            Op::Sum(x) => {
                let dx = vec![dout[0]; self.value(*x).numel()];
                self.accum(work, *x, &dx);
            }

            Op::SplitHeads { x, n_heads } => {
                let s = self.value(*x).shape().to_vec();
                let (b, t, d) = (s[0], s[1], s[2]);
                let dk = d / n_heads;
                let mut dx = vec![S::zero(); b * t * d];
                for bi in 0..b {
                    for h in 0..*n_heads {
                        for ti in 0..t {
                            let from = (((bi * n_heads + h) * t) + ti) * dk;
                            let dst = (bi * t + ti) * d + h * dk;
                            for c in 0..dk {
                                dx[dst + c] = dx[dst + c] + dout[from + c];
                            }
                        }
                    }
                }
                self.accum(work, *x, &dx);
            }

            Op::MergeHeads { x, n_heads } => {
                let s = self.value(*x).shape().to_vec();
                let (b, h, t, dk) = (s[0], s[1], s[2], s[3]);
                debug_assert_eq!(h, *n_heads);
                let d = h * dk;
                let mut dx = vec![S::zero(); b * h * t * dk];
                for bi in 0..b {
                    for hi in 0..h {
                        for ti in 0..t {
                            let dst = (((bi * h + hi) * t) + ti) * dk;
                            let from = (bi * t + ti) * d + hi * dk;
                            for c in 0..dk {
                                dx[dst + c] = dx[dst + c] + dout[from + c];
                            }
                        }
                    }
                }
                self.accum(work, *x, &dx);
            }

            Op::MeanHeads(x) => {
                let s = self.value(*x).shape().to_vec();
                let (b, h, t, u) = (s[0], s[1], s[2], s[3]);
                let inv_h = S::one() / S::from_usize(h);
                let mut dx = vec![S::zero(); b * h * t * u];
                for bi in 0..b {
                    for hi in 0..h {
                        let dst = &mut dx[(bi * h + hi) * t * u..(bi * h + hi + 1) * t * u];
                        let src = &dout[bi * t * u..(bi + 1) * t * u];
                        for (g, &d) in dst.iter_mut().zip(src) {
                            *g = *g + d * inv_h;
                        }
                    }
                }
                self.accum(work, *x, &dx);
            }

            Op::RowsMaxPool { x, argmax } => {
                let mut dx = vec![S::zero(); self.value(*x).numel()];
                for (e, &idx) in argmax.iter().enumerate() {
                    dx[idx] = dx[idx] + dout[e];
                }
                self.accum(work, *x, &dx);
            }

            Op::ConcatCols { a, b } => {
                let (da_cols, db_cols) = (
                    self.value(*a).shape()[1],
                    self.value(*b).shape()[1],
                );
                let rows = self.value(*a).shape()[0];
                let mut da = vec![S::zero(); rows * da_cols];
                let mut db = vec![S::zero(); rows * db_cols];
                let width = da_cols + db_cols;
                for r in 0..rows {
                    da[r * da_cols..(r + 1) * da_cols]
                        .copy_from_slice(&dout[r * width..r * width + da_cols]);
                    db[r * db_cols..(r + 1) * db_cols]
                        .copy_from_slice(&dout[r * width + da_cols..(r + 1) * width]);
                }
                self.accum(work, *a, &da);
                self.accum(work, *b, &db);
            }

            Op::CrossEntropyMasked { logits, targets, mask, probs, inv_mask_sum } => {
                let v = self.value(*logits).shape()[1];
                let scale = dout[0] * *inv_mask_sum;
                let mut dl = vec![S::zero(); probs.len()];
                for (row, &m) in mask.iter().enumerate() {
                    if m == S::zero() {
                        continue; // gradient at masked positions is exactly zero
                    }
                    let p = &probs[row * v..(row + 1) * v];
                    let g = &mut dl[row * v..(row + 1) * v];
                    for (gi, &pi) in g.iter_mut().zip(p) {
                        *gi = scale * m * pi;
                    }
                    g[targets[row]] = g[targets[row]] - scale * m;
                }
                self.accum(work, *logits, &dl);
            }

            Op::CorefLoss { attn, terms } => {
                let t = self.value(*attn).shape()[1];
                let clamp = S::from_f64(COREF_LOG_CLAMP);
                let attn_data = self.value(*attn).data();
                let mut da = vec![S::zero(); attn_data.len()];
                for term in terms {
                    let w = S::from_f64(term.weight);
                    for &k in &term.antecedents {
                        let idx = (term.batch * t + term.position) * t + k;
                        let alpha = attn_data[idx];
                        if alpha > clamp {
                            da[idx] = da[idx] - dout[0] * w / alpha;
                        }
                    }
                }
                self.accum(work, *attn, &da);
            }
        }
    }
}

fn softmax_row<S: Scalar>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut denom = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        denom = denom + *v;
    }
    for v in row.iter_mut() {
        *v = *v / denom;
    }
}
