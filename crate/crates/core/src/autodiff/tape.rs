// Reverse-mode tape: every op appends a node holding its output value and the
// ids of its inputs. Node order is already a topological order, so backward is
// a single reverse sweep.

use super::kernels;
use super::tensor::{split_axis, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    // rhs may be a trailing-suffix broadcast; backward folds with `i % len`
    Binary { kind: Binary, a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose { x: Var, rows: usize, cols: usize },
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    BatchNorm { x: Var, gain: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu { x: Var },
    Slice { x: Var, axis: usize, start: usize },
    Concat { xs: Vec<Var>, axis: usize },
    Select { x: Var, axis: usize, indices: Vec<usize> },
    Reshape { x: Var },
    Expand { x: Var },
    Sum { x: Var },
    Mean { x: Var },
    Attention { qkv: Var, heads: usize, probs: Tensor },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    Triplet { x: Var, picks: Vec<TripletPick>, anchors: usize },
}

#[derive(Clone, Copy, Debug)]
struct TripletPick {
    anchor: usize,
    pos: usize,
    neg: usize,
    pos_dist: f64,
    neg_dist: f64,
}

// Squared distances below this floor are clamped before the square root,
// which keeps the gradient finite for coincident points.
const DIST_FLOOR: f64 = 1e-12;

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf; it takes part in differentiation iff the tensor's
    /// `requires_grad` flag is set.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Head-resolved attention weights `[B, heads, T, T]` retained by an
    /// attention node, or `None` for any other node.
    pub fn attention_probs(&self, v: Var) -> Option<&Tensor> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ── elementwise ─────────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b, false)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b, false)
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b, false)
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s shape.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b, true)
    }

    /// `a ⊙ b` where `b`'s shape is a trailing suffix of `a`'s shape.
    pub fn mul_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b, true)
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var, broadcast: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ok = if broadcast {
            sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb
        } else {
            sa == sb
        };
        if !ok {
            let op = match kind {
                Binary::Add => "add",
                Binary::Sub => "sub",
                Binary::Mul => "mul",
            };
            return Err(Error::Shape { op, lhs: sa.to_vec(), rhs: sb.to_vec() });
        }
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let nb = vb.len();
        let data: Vec<f64> = match kind {
            Binary::Add => va.iter().enumerate().map(|(i, x)| x + vb[i % nb]).collect(),
            Binary::Sub => va.iter().enumerate().map(|(i, x)| x - vb[i % nb]).collect(),
            Binary::Mul => va.iter().enumerate().map(|(i, x)| x * vb[i % nb]).collect(),
        };
        let value = Tensor::new(self.shape(a), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Binary { kind, a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(self.shape(x), data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Scale { x, factor }, rg))
    }

    // ── linear algebra ──────────────────────────────────────────────────

    /// `a[..., k] · b[k, n]`; leading axes of `a` are treated as rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::Shape { op: "matmul", lhs: sa, rhs: sb });
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.value(a).numel() / k;
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let value = Tensor::new(&shape, out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul { a, b, m, k, n }, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::invalid("transpose", format!("expected rank 2, got {s:?}")));
        }
        let (rows, cols) = (s[0], s[1]);
        let src = self.value(x).data();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = src[r * cols + c];
            }
        }
        let value = Tensor::new(&[cols, rows], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Transpose { x, rows, cols }, rg))
    }

    // ── nonlinearities ──────────────────────────────────────────────────

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid("softmax", format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[at(j)] /= sum;
                }
            }
        }
        let value = Tensor::new(&shape, out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Softmax { x, axis }, rg))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`
    /// (both shaped like the last axis).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().unwrap();
        for p in [gain, bias] {
            if self.shape(p) != [c] {
                return Err(Error::Shape { op: "layer_norm", lhs: shape.clone(), rhs: self.shape(p).to_vec() });
            }
        }
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let bvals = self.value(bias).data();
        let rows = src.len() / c;
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + bvals[j];
            }
        }
        let value = Tensor::new(&shape, out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg))
    }

    /// Standardizes each column of `x[B, C]` with the batch mean and biased
    /// variance, then scales by `gain[C]`.
    pub fn batch_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let [b, c] = shape[..] else {
            return Err(Error::invalid("batch_norm", format!("expected [B, C], got {shape:?}")));
        };
        if self.shape(gain) != [c] {
            return Err(Error::Shape { op: "batch_norm", lhs: shape, rhs: self.shape(gain).to_vec() });
        }
        let src = self.value(x).data();
        let gv = self.value(gain).data();
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; c];
        let mut out = vec![0.0; src.len()];
        for j in 0..c {
            let mean = (0..b).map(|i| src[i * c + j]).sum::<f64>() / b as f64;
            let var = (0..b).map(|i| (src[i * c + j] - mean).powi(2)).sum::<f64>() / b as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[j] = rs;
            for i in 0..b {
                let h = (src[i * c + j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * gv[j];
            }
        }
        let value = Tensor::new(&shape, out)?;
        let rg = self.rg(x) || self.rg(gain);
        Ok(self.push(value, Op::BatchNorm { x, gain, xhat, rstd }, rg))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| kernels::gelu(v)).collect();
        let value = Tensor::new(self.shape(x), data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Gelu { x }, rg))
    }

    // ── structural ──────────────────────────────────────────────────────

    /// Keeps `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(Error::invalid(
                "slice",
                format!("range {start}..{end} on axis {axis} invalid for {shape:?}"),
            ));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let width = (end - start) * inner;
        let mut out = Vec::with_capacity(outer * width);
        for o in 0..outer {
            let base = o * len * inner + start * inner;
            out.extend_from_slice(&src[base..base + width]);
        }
        let mut new_shape = shape;
        new_shape[axis] = end - start;
        let value = Tensor::new(&new_shape, out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Slice { x, axis, start }, rg))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let base_shape = self.shape(*first).to_vec();
        if axis >= base_shape.len() {
            return Err(Error::invalid("concat", format!("axis {axis} out of range for {base_shape:?}")));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == base_shape.len()
                && s.iter().zip(&base_shape).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::Shape { op: "concat", lhs: base_shape.clone(), rhs: s.to_vec() });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base_shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis];
                let src = self.value(v).data();
                out.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base_shape;
        shape[axis] = total;
        let value = Tensor::new(&shape, out)?;
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(value, Op::Concat { xs: xs.to_vec(), axis }, rg))
    }

    /// Gathers the given positions along `axis` (repeats allowed).
    pub fn select(&mut self, x: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || indices.is_empty() || indices.iter().any(|&i| i >= shape[axis]) {
            return Err(Error::invalid("select", format!("indices out of range on axis {axis} of {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let base = (o * len + i) * inner;
                out.extend_from_slice(&src[base..base + inner]);
            }
        }
        let mut new_shape = shape;
        new_shape[axis] = indices.len();
        let value = Tensor::new(&new_shape, out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Select { x, axis, indices: indices.to_vec() }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    /// Stacks `n` copies of `x` along a new leading axis.
    pub fn expand(&mut self, x: Var, n: usize) -> Result<Var> {
        if n == 0 {
            return Err(Error::invalid("expand", "zero copies"));
        }
        let src = self.value(x);
        let mut shape = vec![n];
        shape.extend_from_slice(src.shape());
        let data = src.data().repeat(n);
        let value = Tensor::new(&shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Expand { x }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::Sum { x }, rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::Mean { x }, rg))
    }

    // ── fused blocks ────────────────────────────────────────────────────

    /// Multi-head scaled dot-product self-attention.
    ///
    /// `qkv` is `[B, T, 3D]` laid out as `[q | k | v]` along the last axis,
    /// each `D` wide and split into `heads` contiguous head slices. Returns
    /// the mixed values `[B, T, D]`; the softmax weights stay on the node.
    pub fn self_attention(&mut self, qkv: Var, heads: usize) -> Result<Var> {
        let shape = self.shape(qkv).to_vec();
        if shape.len() != 3 || heads == 0 || !shape[2].is_multiple_of(3 * heads) {
            return Err(Error::invalid(
                "self_attention",
                format!("qkv shape {shape:?} incompatible with {heads} heads"),
            ));
        }
        let (b, t, d) = (shape[0], shape[1], shape[2] / 3);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let src = self.value(qkv).data();
        let mut out = vec![0.0; b * t * d];
        let mut probs = vec![0.0; b * heads * t * t];
        let mut q = vec![0.0; t * dh];
        let mut k = vec![0.0; t * dh];
        let mut v = vec![0.0; t * dh];
        for bi in 0..b {
            for h in 0..heads {
                gather_head(src, bi, t, d, h, dh, &mut q, &mut k, &mut v);
                let p = &mut probs[(bi * heads + h) * t * t..(bi * heads + h + 1) * t * t];
                for i in 0..t {
                    let qi = &q[i * dh..(i + 1) * dh];
                    let row = &mut p[i * t..(i + 1) * t];
                    let mut max = f64::NEG_INFINITY;
                    for (j, r) in row.iter_mut().enumerate() {
                        *r = kernels::dot(qi, &k[j * dh..(j + 1) * dh]) * scale;
                        max = max.max(*r);
                    }
                    let mut sum = 0.0;
                    for r in row.iter_mut() {
                        *r = (*r - max).exp();
                        sum += *r;
                    }
                    for r in row.iter_mut() {
                        *r /= sum;
                    }
                    let o = &mut out[(bi * t + i) * d + h * dh..(bi * t + i) * d + (h + 1) * dh];
                    for (j, &pij) in row.iter().enumerate() {
                        for (oc, &vc) in o.iter_mut().zip(&v[j * dh..(j + 1) * dh]) {
                            *oc += pij * vc;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(&[b, t, d], out)?;
        let probs = Tensor::new(&[b, heads, t, t], probs)?;
        let rg = self.rg(qkv);
        Ok(self.push(value, Op::Attention { qkv, heads, probs }, rg))
    }

    /// Mean softmax cross-entropy of `logits[B, K]` against `labels`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::Shape { op: "cross_entropy", lhs: shape, rhs: vec![labels.len()] });
        }
        let (b, k) = (shape[0], shape[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::invalid("cross_entropy", format!("label {bad} outside [0, {k})")));
        }
        let src = self.value(logits).data();
        let mut probs = vec![0.0; b * k];
        let mut loss = 0.0;
        for r in 0..b {
            let row = &src[r * k..(r + 1) * k];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            loss += lse - row[labels[r]];
            for j in 0..k {
                probs[r * k + j] = (row[j] - lse).exp();
            }
        }
        let value = Tensor::scalar(loss / b as f64);
        let rg = self.rg(logits);
        Ok(self.push(value, Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, rg))
    }

    /// Batch-hard triplet loss over Euclidean distances of `features[B, d]`.
    ///
    /// For each anchor the farthest same-label sample and the nearest
    /// other-label sample are used; anchors with no other same-label sample
    /// are skipped. The batch must hold at least two labels and at least one
    /// label with two samples.
    pub fn batch_hard_triplet(&mut self, features: Var, labels: &[usize], margin: f64) -> Result<Var> {
        let shape = self.shape(features).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::Shape { op: "batch_hard_triplet", lhs: shape, rhs: vec![labels.len()] });
        }
        let n = labels.len();
        let distinct = {
            let mut l = labels.to_vec();
            l.sort_unstable();
            l.dedup();
            l.len()
        };
        let has_pair = (0..n).any(|a| (0..n).any(|j| j != a && labels[j] == labels[a]));
        if distinct < 2 || !has_pair {
            return Err(Error::invalid(
                "batch_hard_triplet",
                "degenerate batch: need at least two identities and two samples of one identity",
            ));
        }
        let d = shape[1];
        let x = self.value(features).data();
        let dist = |i: usize, j: usize| -> f64 {
            let sq: f64 = (0..d).map(|c| (x[i * d + c] - x[j * d + c]).powi(2)).sum();
            sq.max(DIST_FLOOR).sqrt()
        };
        let mut picks = Vec::new();
        let mut total = 0.0;
        let mut anchors = 0usize;
        for a in 0..n {
            let mut pos: Option<(usize, f64)> = None;
            let mut neg: Option<(usize, f64)> = None;
            for j in 0..n {
                if j == a {
                    continue;
                }
                let dj = dist(a, j);
                if labels[j] == labels[a] {
                    if pos.is_none_or(|(_, best)| dj > best) {
                        pos = Some((j, dj));
                    }
                } else if neg.is_none_or(|(_, best)| dj < best) {
                    neg = Some((j, dj));
                }
            }
            let (Some((p, dp)), Some((q, dn))) = (pos, neg) else { continue };
            anchors += 1;
            let hinge = dp - dn + margin;
            if hinge > 0.0 {
                total += hinge;
                picks.push(TripletPick { anchor: a, pos: p, neg: q, pos_dist: dp, neg_dist: dn });
            }
        }
        let rg = self.rg(features);
        let value = Tensor::scalar(total / anchors as f64);
        Ok(self.push(value, Op::Triplet { x: features, picks, anchors }, rg))
    }
}

#[allow(clippy::too_many_arguments)]
fn gather_head(
    src: &[f64],
    b: usize,
    t: usize,
    d: usize,
    h: usize,
    dh: usize,
    q: &mut [f64],
    k: &mut [f64],
    v: &mut [f64],
) {
    for i in 0..t {
        let row = &src[(b * t + i) * 3 * d..(b * t + i + 1) * 3 * d];
        q[i * dh..(i + 1) * dh].copy_from_slice(&row[h * dh..(h + 1) * dh]);
        k[i * dh..(i + 1) * dh].copy_from_slice(&row[d + h * dh..d + (h + 1) * dh]);
        v[i * dh..(i + 1) * dh].copy_from_slice(&row[2 * d + h * dh..2 * d + (h + 1) * dh]);
    }
}

impl Tape {
    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid("backward", format!("loss must be scalar, got {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.rg(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.rg(v) {
            return None;
        }
        let n = self.value(v).numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b } => {
                let nb = self.value(*b).numel();
                match kind {
                    Binary::Add | Binary::Sub => {
                        if let Some(ga) = self.slot(grads, *a) {
                            ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                        }
                        let sign = if *kind == Binary::Add { 1.0 } else { -1.0 };
                        if let Some(gb) = self.slot(grads, *b) {
                            for (i, gi) in g.iter().enumerate() {
                                gb[i % nb] += sign * gi;
                            }
                        }
                    }
                    Binary::Mul => {
                        let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                        if let Some(ga) = self.slot(grads, *a) {
                            for (i, gi) in g.iter().enumerate() {
                                ga[i] += gi * vb[i % nb];
                            }
                        }
                        if let Some(gb) = self.slot(grads, *b) {
                            for (i, gi) in g.iter().enumerate() {
                                gb[i % nb] += gi * va[i];
                            }
                        }
                    }
                }
            }
            Op::Scale { x, factor } => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b * factor);
                }
            }
            Op::MatMul { a, b, m, k, n } => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.slot(grads, *a) {
                    kernels::matmul_bt_acc(g, vb, ga, *m, *n, *k);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    kernels::matmul_at_acc(va, g, gb, *m, *k, *n);
                }
            }
            Op::Transpose { x, rows, cols } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for r in 0..*rows {
                        for c in 0..*cols {
                            gx[r * cols + c] += g[c * rows + r];
                        }
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                if let Some(gx) = self.slot(grads, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let s: f64 = (0..len).map(|j| y[at(j)] * g[at(j)]).sum();
                            for j in 0..len {
                                gx[at(j)] += y[at(j)] * (g[at(j)] - s);
                            }
                        }
                    }
                }
            }
            Op::BatchNorm { x, gain, xhat, rstd } => {
                let c = rstd.len();
                let b = g.len() / c;
                let gv = self.value(*gain).data().to_vec();
                if let Some(ggain) = self.slot(grads, *gain) {
                    for i in 0..b {
                        for j in 0..c {
                            ggain[j] += g[i * c + j] * xhat[i * c + j];
                        }
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    for j in 0..c {
                        let (mut s1, mut s2) = (0.0, 0.0);
                        for i in 0..b {
                            let d = g[i * c + j] * gv[j];
                            s1 += d;
                            s2 += d * xhat[i * c + j];
                        }
                        for i in 0..b {
                            let d = g[i * c + j] * gv[j];
                            gx[i * c + j] += rstd[j] / b as f64 * (b as f64 * d - s1 - xhat[i * c + j] * s2);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let c = *node.value.shape().last().unwrap();
                let rows = g.len() / c;
                let gv = self.value(*gain).data().to_vec();
                if let Some(ggain) = self.slot(grads, *gain) {
                    for r in 0..rows {
                        for j in 0..c {
                            ggain[j] += g[r * c + j] * xhat[r * c + j];
                        }
                    }
                }
                if let Some(gbias) = self.slot(grads, *bias) {
                    for r in 0..rows {
                        for j in 0..c {
                            gbias[j] += g[r * c + j];
                        }
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    for r in 0..rows {
                        let gr = &g[r * c..(r + 1) * c];
                        let hr = &xhat[r * c..(r + 1) * c];
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for j in 0..c {
                            let dxh = gr[j] * gv[j];
                            mean_d += dxh;
                            mean_dh += dxh * hr[j];
                        }
                        mean_d /= c as f64;
                        mean_dh /= c as f64;
                        for j in 0..c {
                            let dxh = gr[j] * gv[j];
                            gx[r * c + j] += rstd[r] * (dxh - mean_d - hr[j] * mean_dh);
                        }
                    }
                }
            }
            Op::Gelu { x } => {
                let vx = self.value(*x).data();
                if let Some(gx) = self.slot(grads, *x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * kernels::gelu_grad(vx[i]);
                    }
                }
            }
            Op::Slice { x, axis, start } => {
                let src_shape = self.shape(*x).to_vec();
                let (outer, len, inner) = split_axis(&src_shape, *axis);
                let width = node.value.shape()[*axis] * inner;
                if let Some(gx) = self.slot(grads, *x) {
                    for o in 0..outer {
                        let base = o * len * inner + start * inner;
                        gx[base..base + width]
                            .iter_mut()
                            .zip(&g[o * width..(o + 1) * width])
                            .for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in xs {
                    let len = self.shape(v)[*axis];
                    if let Some(gv) = self.slot(grads, v) {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            gv[o * len * inner..(o + 1) * len * inner]
                                .iter_mut()
                                .zip(&g[src..src + len * inner])
                                .for_each(|(a, b)| *a += b);
                        }
                    }
                    offset += len;
                }
            }
            Op::Select { x, axis, indices } => {
                let src_shape = self.shape(*x).to_vec();
                let (outer, len, inner) = split_axis(&src_shape, *axis);
                if let Some(gx) = self.slot(grads, *x) {
                    for o in 0..outer {
                        for (pos, &i) in indices.iter().enumerate() {
                            let dst = (o * len + i) * inner;
                            let src = (o * indices.len() + pos) * inner;
                            for c in 0..inner {
                                gx[dst + c] += g[src + c];
                            }
                        }
                    }
                }
            }
            Op::Reshape { x } => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
            Op::Expand { x } => {
                if let Some(gx) = self.slot(grads, *x) {
                    let n = gx.len();
                    for (i, gi) in g.iter().enumerate() {
                        gx[i % n] += gi;
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::Mean { x } => {
                if let Some(gx) = self.slot(grads, *x) {
                    let s = g[0] / gx.len() as f64;
                    gx.iter_mut().for_each(|a| *a += s);
                }
            }
            Op::Attention { qkv, heads, probs } => self.attention_backward(node, *qkv, *heads, probs, g, grads),
            Op::CrossEntropy { logits, labels, probs } => {
                if let Some(gl) = self.slot(grads, *logits) {
                    let b = labels.len();
                    let k = probs.len() / b;
                    let s = g[0] / b as f64;
                    for r in 0..b {
                        for j in 0..k {
                            let target = if j == labels[r] { 1.0 } else { 0.0 };
                            gl[r * k + j] += s * (probs[r * k + j] - target);
                        }
                    }
                }
            }
            Op::Triplet { x, picks, anchors } => {
                let d = self.shape(*x)[1];
                let vx = self.value(*x).data().to_vec();
                if let Some(gx) = self.slot(grads, *x) {
                    let s = g[0] / *anchors as f64;
                    for p in picks {
                        for (other, dist, sign) in [(p.pos, p.pos_dist, 1.0), (p.neg, p.neg_dist, -1.0)] {
                            if dist * dist <= DIST_FLOOR {
                                continue;
                            }
                            for c in 0..d {
                                let diff = (vx[p.anchor * d + c] - vx[other * d + c]) / dist;
                                gx[p.anchor * d + c] += s * sign * diff;
                                gx[other * d + c] -= s * sign * diff;
                            }
                        }
                    }
                }
            }
        }
    }

    fn attention_backward(
        &self,
        node: &Node,
        qkv: Var,
        heads: usize,
        probs: &Tensor,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let [b, t, d] = node.value.shape() else { unreachable!("attention output is rank 3") };
        let (b, t, d) = (*b, *t, *d);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let src = self.value(qkv).data();
        let Some(gqkv) = self.slot(grads, qkv) else { return };
        let p_all = probs.data();
        let (mut q, mut k, mut v) = (vec![0.0; t * dh], vec![0.0; t * dh], vec![0.0; t * dh]);
        let mut go = vec![0.0; t * dh];
        let mut ds = vec![0.0; t * t];
        for bi in 0..b {
            for h in 0..heads {
                gather_head(src, bi, t, d, h, dh, &mut q, &mut k, &mut v);
                for i in 0..t {
                    let o = (bi * t + i) * d + h * dh;
                    go[i * dh..(i + 1) * dh].copy_from_slice(&g[o..o + dh]);
                }
                let p = &p_all[(bi * heads + h) * t * t..(bi * heads + h + 1) * t * t];
                for i in 0..t {
                    let goi = &go[i * dh..(i + 1) * dh];
                    let prow = &p[i * t..(i + 1) * t];
                    let mut s = 0.0;
                    for j in 0..t {
                        let dp = kernels::dot(goi, &v[j * dh..(j + 1) * dh]);
                        ds[i * t + j] = dp;
                        s += prow[j] * dp;
                    }
                    for j in 0..t {
                        ds[i * t + j] = prow[j] * (ds[i * t + j] - s) * scale;
                    }
                }
                for i in 0..t {
                    let row = (bi * t + i) * 3 * d;
                    for j in 0..t {
                        let dsij = ds[i * t + j];
                        let dsji = ds[j * t + i];
                        let pji = p[j * t + i];
                        for c in 0..dh {
                            // dQ_i += dS_ij K_j ; dK_i += dS_ji Q_j ; dV_i += P_ji dO_j
                            gqkv[row + h * dh + c] += dsij * k[j * dh + c];
                            gqkv[row + d + h * dh + c] += dsji * q[j * dh + c];
                            gqkv[row + 2 * d + h * dh + c] += pji * go[j * dh + c];
                        }
                    }
                }
            }
        }
    }
}
