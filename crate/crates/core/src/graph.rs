//! Reverse-mode differentiation over a recorded operation list.
//!
//! A [`Graph`] is built fresh for every forward pass. Each operation appends
//! a node holding its output value, so nodes are in topological order by
//! construction. [`Graph::backward`] walks the nodes in exact reverse of
//! recording order and accumulates gradients additively into every input
//! that requires them. `backward` borrows the graph immutably: it may be
//! called more than once and the graph stays inspectable afterwards; drop
//! the graph to release the recorded values.
//!
//! Nodes whose inputs are all constants do not require gradients and are
//! skipped during the backward walk.

use crate::error::{shape_err, Error, Result};
use crate::kernels::{gemm_nn, gemm_nt, gemm_tn, ExactSum};
use crate::rng::SeededRng;
use crate::tensor::{c, split_axis, Float, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add(Var, Var),
    AddBroadcast(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, scale: T },
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    ScaleByMask { x: Var, mask: Vec<T> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<T> },
    Concat { inputs: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Reshape(Var),
    Expand(Var),
    MaskedMean { x: Var, mask: Vec<bool>, counts: Vec<usize> },
    Sum(Var),
    Mean(Var),
    WeightedBce { logits: Var, targets: Vec<T>, pos_weight: T },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Grads<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

/// Stable `ln(1 + e^x)`.
#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub(crate) fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn parameter(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(shape_err!("matmul needs rank-2 operands, got {sa:?} and {sb:?}"));
        }
        if sa[1] != sb[0] {
            return Err(shape_err!(
                "matmul inner dimensions differ: {sa:?} x {sb:?}"
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMul { a, b, m, k, n }, rg))
    }

    fn check_same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!(
                "{what}: shapes differ {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b, "add")?;
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// `x + y` where `y`'s shape is a suffix of `x`'s shape.
    pub fn add_broadcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let (sx, sy) = (self.shape(x), self.shape(y));
        if sy.len() > sx.len() || sx[sx.len() - sy.len()..] != *sy {
            return Err(shape_err!("cannot broadcast {sy:?} onto {sx:?}"));
        }
        let block = self.value(y).numel();
        let mut value = self.value(x).clone();
        if block > 0 {
            let yd = self.value(y).data();
            for chunk in value.data_mut().chunks_mut(block) {
                for (a, &b) in chunk.iter_mut().zip(yd) {
                    *a += b;
                }
            }
        }
        let rg = self.any_grad(&[x, y]);
        Ok(self.push(value, Op::AddBroadcast(x, y), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b, "mul")?;
        let bd = self.value(b).data();
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(bd)
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let (s, t) = (c::<T>(scale), c::<T>(shift));
        let value = self.value(x).map(|v| s * v + t);
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Affine { x, scale: s }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(T::zero()));
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Sigmoid(x), rg)
    }

    pub fn log(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.ln());
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Log(x), rg)
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let d = xv.last_dim();
        let mut data = xv.data().to_vec();
        if d > 0 {
            for row in data.chunks_mut(d) {
                softmax_in_place(row);
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Softmax(x), rg)
    }

    /// Normalizes each vector along the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        if d == 0 {
            return Err(shape_err!("layer_norm over an empty axis"));
        }
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(shape_err!(
                "layer_norm gain/bias must be [{d}], got {:?} / {:?}",
                self.shape(gain),
                self.shape(bias)
            ));
        }
        let eps = c::<T>(eps);
        let inv_d = c::<T>(1.0 / d as f64);
        let rows = xv.numel() / d;
        let mut xhat = Vec::with_capacity(xv.numel());
        let mut rstd = Vec::with_capacity(rows);
        for row in xv.data().chunks(d) {
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            xhat.extend(row.iter().map(|&v| (v - mean) * r));
        }
        let (gd, bd) = (self.value(gain).data(), self.value(bias).data());
        let out = xhat
            .chunks(d)
            .flat_map(|row| row.iter().zip(gd).zip(bd).map(|((&h, &g), &b)| h * g + b))
            .collect();
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Inverted dropout. In eval mode, or with `rate == 0`, returns `x` itself.
    pub fn dropout(&mut self, x: Var, rate: f64, train: bool, rng: &mut SeededRng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let keep = c::<T>(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(x).numel())
            .map(|_| if rng.bernoulli(rate) { T::zero() } else { keep })
            .collect();
        self.scale_by_mask(x, mask)
    }

    /// Elementwise product with a constant tensor of the same length.
    pub fn scale_by_mask(&mut self, x: Var, mask: Vec<T>) -> Result<Var> {
        let xv = self.value(x);
        if mask.len() != xv.numel() {
            return Err(shape_err!("mask length {} vs {}", mask.len(), xv.numel()));
        }
        let data = xv.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::ScaleByMask { x, mask }, rg))
    }

    /// Multi-head scaled dot-product attention core on pre-projected
    /// `q`, `k`, `v` of shape `[B, T, D]`. Head `h` uses channels
    /// `h*D/H .. (h+1)*D/H`. Keys whose `key_valid` flag (length `B*T`) is
    /// false get zero weight. A query row with no valid key outputs zeros.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        key_valid: &[bool],
        heads: usize,
    ) -> Result<Var> {
        let shape = self.shape(q).to_vec();
        if shape.len() != 3 {
            return Err(shape_err!("attention expects [B, T, D], got {shape:?}"));
        }
        if self.shape(k) != shape.as_slice() || self.shape(v) != shape.as_slice() {
            return Err(shape_err!("attention q/k/v shapes differ"));
        }
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "model dimension {d} not divisible by {heads} heads"
            )));
        }
        if key_valid.len() != b * t {
            return Err(shape_err!(
                "mask length {} does not match B*T = {}",
                key_valid.len(),
                b * t
            ));
        }
        let dh = d / heads;
        let scale = c::<T>(1.0 / (dh as f64).sqrt());
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut probs = vec![T::zero(); b * heads * t * t];
        let mut out = vec![T::zero(); b * t * d];
        let mut scores = vec![T::zero(); t];
        for bi in 0..b {
            let valid = &key_valid[bi * t..(bi + 1) * t];
            for h in 0..heads {
                let off = h * dh;
                for i in 0..t {
                    let qi = &qd[(bi * t + i) * d + off..][..dh];
                    let mut max = T::neg_infinity();
                    for j in 0..t {
                        if !valid[j] {
                            continue;
                        }
                        let kj = &kd[(bi * t + j) * d + off..][..dh];
                        let s = qi.iter().zip(kj).map(|(&x, &y)| x * y).sum::<T>() * scale;
                        scores[j] = s;
                        max = max.max(s);
                    }
                    if max == T::neg_infinity() {
                        continue;
                    }
                    let p_row = &mut probs[((bi * heads + h) * t + i) * t..][..t];
                    let mut total = T::zero();
                    for j in 0..t {
                        if valid[j] {
                            let e = (scores[j] - max).exp();
                            p_row[j] = e;
                            total += e;
                        }
                    }
                    let o = &mut out[(bi * t + i) * d + off..][..dh];
                    for j in 0..t {
                        if !valid[j] {
                            continue;
                        }
                        p_row[j] /= total;
                        let p = p_row[j];
                        let vj = &vd[(bi * t + j) * d + off..][..dh];
                        for (oo, &vv) in o.iter_mut().zip(vj) {
                            *oo += p * vv;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        let rg = self.any_grad(&[q, k, v]);
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Attention probabilities recorded by an attention node, laid out `[B, H, T, T]`.
    pub fn attention_weights(&self, var: Var) -> Option<&[T]> {
        match &self.nodes[var.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| shape_err!("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err!("concat axis {axis} out of range for {base:?}"));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err!("concat shapes {s:?} vs {base:?} on axis {axis}"));
            }
            total += s[axis];
        }
        let mut shape = base;
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let block = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * block..(o + 1) * block]);
            }
        }
        let value = Tensor::new(shape, data)?;
        let rg = self.any_grad(inputs);
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(shape_err!(
                "narrow [{start}, {}) on axis {axis} of {s:?}",
                start + len
            ));
        }
        let (outer, n, inner) = split_axis(&s, axis);
        let xd = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&xd[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let value = Tensor::new(shape, data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Narrow { x, axis, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Repeat `x` `n` times along a new leading axis.
    pub fn expand(&mut self, x: Var, n: usize) -> Var {
        let xv = self.value(x);
        let mut shape = vec![n];
        shape.extend_from_slice(xv.shape());
        let mut data = Vec::with_capacity(n * xv.numel());
        for _ in 0..n {
            data.extend_from_slice(xv.data());
        }
        let value = Tensor::new(shape, data).expect("consistent");
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Expand(x), rg)
    }

    /// Mean over axis 1 of `[B, T, D]`, counting only positions flagged valid
    /// in `mask` (length `B*T`). Rows with no valid positions give zeros.
    ///
    /// Each mean is the correctly rounded double-precision sum divided by the
    /// count, so the result is independent of frame order.
    pub fn masked_mean(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(shape_err!("masked_mean expects [B, T, D], got {s:?}"));
        }
        let (b, t, d) = (s[0], s[1], s[2]);
        if mask.len() != b * t {
            return Err(shape_err!("mask length {} vs B*T = {}", mask.len(), b * t));
        }
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); b * d];
        let mut counts = Vec::with_capacity(b);
        let mut acc = ExactSum::default();
        for bi in 0..b {
            let valid = &mask[bi * t..(bi + 1) * t];
            let count = valid.iter().filter(|&&m| m).count();
            counts.push(count);
            if count == 0 {
                continue;
            }
            for di in 0..d {
                acc.clear();
                for ti in 0..t {
                    if valid[ti] {
                        acc.add(xd[(bi * t + ti) * d + di].as_f64());
                    }
                }
                out[bi * d + di] = T::from_f64_lossy(acc.value() / count as f64);
            }
        }
        let value = Tensor::new(vec![b, d], out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            value,
            Op::MaskedMean {
                x,
                mask: mask.to_vec(),
                counts,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total: f64 = self.value(x).data().iter().map(|v| v.as_f64()).sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(c(total)), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.numel().max(1) as f64;
        let total: f64 = xv.data().iter().map(|v| v.as_f64()).sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(c(total / n)), Op::Mean(x), rg)
    }

    /// Weighted binary cross-entropy from logits `[B, C]` against 0/1 targets:
    /// the batch mean of `-(1/C) Σ_c [w·y·ln σ(z) + (1-y)·ln(1-σ(z))]`,
    /// evaluated through softplus so extreme logits stay finite.
    pub fn weighted_bce(&mut self, logits: Var, targets: &Tensor<T>, pos_weight: f64) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || targets.shape() != s.as_slice() {
            return Err(shape_err!(
                "weighted_bce needs matching [B, C] logits and targets, got {s:?} / {:?}",
                targets.shape()
            ));
        }
        if let Some(bad) = targets
            .data()
            .iter()
            .find(|&&y| y != T::zero() && y != T::one())
        {
            return Err(Error::Data(format!("target {bad} is not 0 or 1")));
        }
        let n = (s[0] * s[1]).max(1) as f64;
        let mut total = 0.0;
        for (&z, &y) in self.value(logits).data().iter().zip(targets.data()) {
            let z = z.as_f64();
            total += if y == T::one() {
                pos_weight * softplus(-z)
            } else {
                softplus(z)
            };
        }
        let value = Tensor::scalar(c(total / n));
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            value,
            Op::WeightedBce {
                logits,
                targets: targets.data().to_vec(),
                pos_weight: c(pos_weight),
            },
            rg,
        ))
    }

    /// Gradients of the scalar `loss` with respect to every node that
    /// requires them.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if !self.value(loss).is_scalar() {
            return Err(shape_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let ls = self.shape(loss).to_vec();
        grads[loss.0] = Some(Tensor::full(&ls, T::one()));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.backward_node(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], var: Var, contribution: Tensor<T>) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => existing.add_assign(&contribution),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn wants(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn backward_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        let like = |v: Var, data: Vec<T>| {
            Tensor::new(self.shape(v).to_vec(), data).expect("gradient shape")
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm_nt(gd, self.value(*b).data(), &mut da, m, n, k);
                    self.accumulate(grads, *a, like(*a, da));
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm_tn(self.value(*a).data(), gd, &mut db, m, k, n);
                    self.accumulate(grads, *b, like(*b, db));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddBroadcast(x, y) => {
                self.accumulate(grads, *x, g.clone());
                if self.wants(*y) {
                    let block = self.value(*y).numel();
                    let mut dy = vec![T::zero(); block];
                    if block > 0 {
                        for chunk in gd.chunks(block) {
                            for (a, &b) in dy.iter_mut().zip(chunk) {
                                *a += b;
                            }
                        }
                    }
                    self.accumulate(grads, *y, like(*y, dy));
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let da = gd.iter().zip(bd).map(|(&g, &y)| g * y).collect();
                    self.accumulate(grads, *a, like(*a, da));
                }
                if self.wants(*b) {
                    let db = gd.iter().zip(ad).map(|(&g, &x)| g * x).collect();
                    self.accumulate(grads, *b, like(*b, db));
                }
            }
            Op::Affine { x, scale } => {
                self.accumulate(grads, *x, g.map(|v| v * *scale));
            }
            Op::Relu(x) => {
                let xd = self.value(*x).data();
                let dx = gd
                    .iter()
                    .zip(xd)
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, like(*x, dx));
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let dx = gd
                    .iter()
                    .zip(y)
                    .map(|(&g, &s)| g * s * (T::one() - s))
                    .collect();
                self.accumulate(grads, *x, like(*x, dx));
            }
            Op::Log(x) => {
                let xd = self.value(*x).data();
                let dx = gd.iter().zip(xd).map(|(&g, &v)| g / v).collect();
                self.accumulate(grads, *x, like(*x, dx));
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let d = node.value.last_dim();
                let mut dx = vec![T::zero(); y.len()];
                if d > 0 {
                    for ((dxr, yr), gr) in dx.chunks_mut(d).zip(y.chunks(d)).zip(gd.chunks(d)) {
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for ((o, &yy), &gg) in dxr.iter_mut().zip(yr).zip(gr) {
                            *o = yy * (gg - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, like(*x, dx));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = node.value.last_dim();
                let gain_d = self.value(*gain).data();
                let mut dgain = vec![T::zero(); d];
                let mut dbias = vec![T::zero(); d];
                let mut dx = vec![T::zero(); xhat.len()];
                let dn = c::<T>(d as f64);
                for (r, ((gr, hr), dxr)) in gd
                    .chunks(d)
                    .zip(xhat.chunks(d))
                    .zip(dx.chunks_mut(d))
                    .enumerate()
                {
                    let mut sum_dh = T::zero();
                    let mut sum_dh_h = T::zero();
                    for j in 0..d {
                        dgain[j] += gr[j] * hr[j];
                        dbias[j] += gr[j];
                        let dh = gr[j] * gain_d[j];
                        sum_dh += dh;
                        sum_dh_h += dh * hr[j];
                    }
                    let scale = rstd[r] / dn;
                    for j in 0..d {
                        let dh = gr[j] * gain_d[j];
                        dxr[j] = scale * (dn * dh - sum_dh - hr[j] * sum_dh_h);
                    }
                }
                self.accumulate(grads, *x, like(*x, dx));
                self.accumulate(grads, *gain, like(*gain, dgain));
                self.accumulate(grads, *bias, like(*bias, dbias));
            }
            Op::ScaleByMask { x, mask } => {
                let dx = gd.iter().zip(mask).map(|(&g, &m)| g * m).collect();
                self.accumulate(grads, *x, like(*x, dx));
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, probs, gd, grads),
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let (outer, _, inner) = split_axis(shape, *axis);
                let mut offsets = Vec::with_capacity(inputs.len());
                let mut acc = 0;
                for &v in inputs {
                    offsets.push(acc);
                    acc += self.shape(v)[*axis] * inner;
                }
                let row = acc;
                for (&v, &off) in inputs.iter().zip(&offsets) {
                    if !self.wants(v) {
                        continue;
                    }
                    let block = self.shape(v)[*axis] * inner;
                    let mut dv = Vec::with_capacity(outer * block);
                    for o in 0..outer {
                        dv.extend_from_slice(&gd[o * row + off..o * row + off + block]);
                    }
                    self.accumulate(grads, v, like(v, dv));
                }
            }
            Op::Narrow { x, axis, start } => {
                let xs = self.shape(*x);
                let (outer, n, inner) = split_axis(xs, *axis);
                let len = node.value.shape()[*axis];
                let mut dx = vec![T::zero(); outer * n * inner];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    dx[dst..dst + len * inner]
                        .copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *x, like(*x, dx));
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, like(*x, gd.to_vec()));
            }
            Op::Expand(x) => {
                let block = self.value(*x).numel();
                let mut dx = vec![T::zero(); block];
                if block > 0 {
                    for chunk in gd.chunks(block) {
                        for (a, &b) in dx.iter_mut().zip(chunk) {
                            *a += b;
                        }
                    }
                }
                self.accumulate(grads, *x, like(*x, dx));
            }
            Op::MaskedMean { x, mask, counts } => {
                let s = self.shape(*x);
                let (b, t, d) = (s[0], s[1], s[2]);
                let mut dx = vec![T::zero(); b * t * d];
                for bi in 0..b {
                    if counts[bi] == 0 {
                        continue;
                    }
                    let inv = c::<T>(1.0 / counts[bi] as f64);
                    for ti in 0..t {
                        if !mask[bi * t + ti] {
                            continue;
                        }
                        let dst = &mut dx[(bi * t + ti) * d..][..d];
                        for (o, &gg) in dst.iter_mut().zip(&gd[bi * d..(bi + 1) * d]) {
                            *o = gg * inv;
                        }
                    }
                }
                self.accumulate(grads, *x, like(*x, dx));
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, like(*x, vec![gd[0]; n]));
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                let v = gd[0] / c::<T>(n.max(1) as f64);
                self.accumulate(grads, *x, like(*x, vec![v; n]));
            }
            Op::WeightedBce {
                logits,
                targets,
                pos_weight,
            } => {
                let zs = self.value(*logits).data();
                let scale = gd[0] / c::<T>(zs.len().max(1) as f64);
                let dz = zs
                    .iter()
                    .zip(targets)
                    .map(|(&z, &y)| {
                        let p = sigmoid(z);
                        let d = if y == T::one() {
                            -*pos_weight * (T::one() - p)
                        } else {
                            p
                        };
                        scale * d
                    })
                    .collect();
                self.accumulate(grads, *logits, like(*logits, dz));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[T],
        gd: &[T],
        grads: &mut [Option<Tensor<T>>],
    ) {
        let s = self.shape(q);
        let (b, t, d) = (s[0], s[1], s[2]);
        let dh = d / heads;
        let scale = c::<T>(1.0 / (dh as f64).sqrt());
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut dq = vec![T::zero(); b * t * d];
        let mut dk = vec![T::zero(); b * t * d];
        let mut dv = vec![T::zero(); b * t * d];
        let mut dp = vec![T::zero(); t];
        for bi in 0..b {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..t {
                    let p_row = &probs[((bi * heads + h) * t + i) * t..][..t];
                    let go = &gd[(bi * t + i) * d + off..][..dh];
                    let mut dot = T::zero();
                    for j in 0..t {
                        let p = p_row[j];
                        if p == T::zero() {
                            dp[j] = T::zero();
                            continue;
                        }
                        let vj = &vd[(bi * t + j) * d + off..][..dh];
                        let dpj = go.iter().zip(vj).map(|(&a, &b)| a * b).sum::<T>();
                        dp[j] = dpj;
                        dot += p * dpj;
                        let dvj = &mut dv[(bi * t + j) * d + off..][..dh];
                        for (o, &gg) in dvj.iter_mut().zip(go) {
                            *o += p * gg;
                        }
                    }
                    let qi = &qd[(bi * t + i) * d + off..][..dh];
                    for j in 0..t {
                        let p = p_row[j];
                        if p == T::zero() {
                            continue;
                        }
                        let ds = p * (dp[j] - dot) * scale;
                        let kj = &kd[(bi * t + j) * d + off..][..dh];
                        let dqi = &mut dq[(bi * t + i) * d + off..][..dh];
                        for (o, &kk) in dqi.iter_mut().zip(kj) {
                            *o += ds * kk;
                        }
                        let dkj = &mut dk[(bi * t + j) * d + off..][..dh];
                        for (o, &qq) in dkj.iter_mut().zip(qi) {
                            *o += ds * qq;
                        }
                    }
                }
            }
        }
        let shape = s.to_vec();
        self.accumulate(grads, q, Tensor::new(shape.clone(), dq).expect("shape"));
        self.accumulate(grads, k, Tensor::new(shape.clone(), dk).expect("shape"));
        self.accumulate(grads, v, Tensor::new(shape, dv).expect("shape"));
    }
}

fn softmax_in_place<T: Float>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::<f64>::new();
        let i2 = g.constant(Tensor::eye(2));
        let m = g.constant(t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let p = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(p), g.value(m));

        let col = g.constant(t2(&[&[5.0], &[6.0]]));
        let p = g.matmul(m, col).unwrap();
        assert_eq!(g.value(p).data(), &[17.0, 39.0]);

        let z = g.constant(Tensor::zeros(&[3, 4]));
        let any = g.constant(Tensor::full(&[4, 2], 7.5));
        let p = g.matmul(z, any).unwrap();
        assert_eq!(g.value(p), &Tensor::zeros(&[3, 2]));
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("inner dimensions"), "{err}");
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t2(&[&[0.0, 0.0, 0.0], &[1000.0, 0.0, 0.0], &[1.0, 2.0, 3.0]]));
        let y = g.softmax_rows(x);
        let d = g.value(y).data();
        for v in &d[0..3] {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        assert!((d[3] - 1.0).abs() < 1e-12 && d[4] < 1e-300);
        let want = [0.09003, 0.24473, 0.66524];
        for (v, w) in d[6..9].iter().zip(want) {
            assert!((v - w).abs() < 5e-6, "{v} vs {w}");
        }
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::<f64>::new();
        let ones = g.constant(Tensor::full(&[2], 1.0));
        let zeros = g.constant(Tensor::zeros(&[2]));
        let x = g.constant(t2(&[&[4.0, 4.0], &[1.0, 3.0]]));
        let y = g.layer_norm(x, ones, zeros, 1e-12).unwrap();
        let d = g.value(y).data();
        assert_eq!(&d[0..2], &[0.0, 0.0]);
        assert!((d[2] + 1.0).abs() < 1e-9 && (d[3] - 1.0).abs() < 1e-9);

        let bias = g.constant(Tensor::new(vec![2], vec![0.25, -0.5]).unwrap());
        let y = g.layer_norm(x, zeros, bias, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0.25, -0.5, 0.25, -0.5]);
    }

    #[test]
    fn backward_examples() {
        // loss = sum(W x): dL/dW[i][j] = x[j] for every row i
        let mut g = Graph::<f64>::new();
        let w = g.parameter(t2(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]));
        let x = g.constant(t2(&[&[0.5], &[-1.0], &[2.0]]));
        let unused = g.parameter(Tensor::full(&[2], 3.0));
        let wx = g.matmul(w, x).unwrap();
        let loss = g.sum(wx);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
        assert!(grads.get(unused).is_none());

        let mut g = Graph::<f64>::new();
        let x = g.parameter(Tensor::scalar(1.5));
        let y = g.affine(x, 1.0, 0.0);
        let twice = g.add(y, y).unwrap();
        let grads = g.backward(twice).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.parameter(Tensor::zeros(&[2]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn dropout_rates() {
        let mut g = Graph::<f64>::new();
        let mut rng = SeededRng::new(0);
        let x = g.constant(Tensor::full(&[100_000], 1.0));
        assert_eq!(g.dropout(x, 0.0, true, &mut rng).unwrap(), x);
        assert_eq!(g.dropout(x, 0.5, false, &mut rng).unwrap(), x);
        assert!(g.dropout(x, 1.0, true, &mut rng).is_err());

        let y = g.dropout(x, 0.5, true, &mut rng).unwrap();
        let d = g.value(y).data();
        let survivors = d.iter().filter(|&&v| v != 0.0).count() as f64 / d.len() as f64;
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        assert!((survivors - 0.5).abs() < 0.01, "{survivors}");
        assert!((mean - 1.0).abs() < 0.02, "{mean}");
    }

    #[test]
    fn weighted_bce_is_stable_for_extreme_logits() {
        let mut g = Graph::<f32>::new();
        let z = g.parameter(Tensor::new(vec![1, 2], vec![-1e6, 1e6]).unwrap());
        let y = Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap();
        let loss = g.weighted_bce(z, &y, 0.25).unwrap();
        assert_eq!(g.value(loss).data()[0], 0.0);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(z).unwrap().all_finite());
    }

    #[test]
    fn weighted_bce_rejects_soft_targets() {
        let mut g = Graph::<f32>::new();
        let z = g.parameter(Tensor::zeros(&[1, 2]));
        let y = Tensor::new(vec![1, 2], vec![0.5, 1.0]).unwrap();
        assert!(g.weighted_bce(z, &y, 1.0).is_err());
    }

    #[test]
    fn masked_mean_handles_empty_rows() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![2, 2, 2], vec![1.0, 1.0, 3.0, 3.0, 9.0, 9.0, 9.0, 9.0]).unwrap());
        let m = g.masked_mean(x, &[true, true, false, false]).unwrap();
        assert_eq!(g.value(m).data(), &[2.0, 2.0, 0.0, 0.0]);
    }
}
