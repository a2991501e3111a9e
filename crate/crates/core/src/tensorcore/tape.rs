//! Reverse-mode differentiation over 2-D tensors.
//!
//! A [`Tape`] records every operation as a node holding its forward value.
//! Nodes are append-only and never mutated after being pushed, so
//! [`Tape::backward`] can walk them in reverse and accumulate gradients.

use serde::{Deserialize, Serialize};

use super::tensor::{accumulate_a_bt, accumulate_at_b, matmul, Real, Tensor};
use super::TensorError;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A contiguous run of rows, `start..start + len`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

impl Segment {
    pub fn new(start: usize, len: usize) -> Self {
        Self { start, len }
    }

    pub fn end(&self) -> usize {
        self.start + self.len
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Vec<T>,
        inv_std: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        segments: Vec<Segment>,
        heads: usize,
        // query-major, then head, then key
        weights: Vec<T>,
    },
    ConcatCols(Var, Var),
    SegmentMean {
        x: Var,
        segments: Vec<Segment>,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    ReplaceRows {
        base: Var,
        repl: Var,
        rows: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    DotConst {
        x: Var,
        weights: Tensor<T>,
    },
    Sum(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recorded computation graph.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn mismatch(op: &'static str, left: [usize; 2], right: [usize; 2]) -> TensorError {
    TensorError::ShapeMismatch { op, left, right }
}

fn invalid(op: &'static str, reason: impl Into<String>) -> TensorError {
    TensorError::InvalidArgument {
        op,
        reason: reason.into(),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(
        &mut self,
        op_name: &'static str,
        value: Tensor<T>,
        op: Op<T>,
        needs_grad: bool,
    ) -> Result<Var, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Trainable input; receives a gradient.
    pub fn leaf(&mut self, value: Tensor<T>) -> Result<Var, TensorError> {
        self.push("leaf", value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var, TensorError> {
        self.push("constant", value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = matmul(self.value(a), self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        self.push("matmul", value, Op::MatMul(a, b), ng)
    }

    /// Adds a `[1, m]` bias to every row of `x[n, m]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var, TensorError> {
        let (xs, bs) = (self.shape(x), self.shape(b));
        if bs != [1, xs[1]] {
            return Err(mismatch("add_bias", xs, bs));
        }
        let mut value = self.value(x).clone();
        let bias = self.value(b).data().to_vec();
        for r in 0..xs[0] {
            for (o, &bv) in value.row_mut(r).iter_mut().zip(&bias) {
                *o += bv;
            }
        }
        let ng = self.ng(x) || self.ng(b);
        self.push("add_bias", value, Op::AddBias(x, b), ng)
    }

    /// `x·w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs[1] != ws[0] {
            return Err(mismatch("linear", xs, ws));
        }
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(mismatch("add", sa, sb));
        }
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push("add", value, Op::Add(a, b), ng)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var, TensorError> {
        let value = self.value(x).map(|v| v * s);
        let ng = self.ng(x);
        self.push("scale", value, Op::Scale(x, s), ng)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let ng = self.ng(x);
        self.push("relu", value, Op::Relu(x), ng)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        let mut value = self.value(x).clone();
        for r in 0..value.rows() {
            softmax_in_place(value.row_mut(r));
        }
        let ng = self.ng(x);
        self.push("softmax_rows", value, Op::Softmax(x), ng)
    }

    /// Per-row normalization to zero mean and unit variance, then `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, TensorError> {
        let xs = self.shape(x);
        let (n, d) = (xs[0], xs[1]);
        for p in [gain, bias] {
            if self.shape(p) != [1, d] {
                return Err(mismatch("layer_norm", xs, self.shape(p)));
            }
        }
        let eps = T::from_f64(LAYER_NORM_EPS);
        let dn = T::from_f64(d as f64);
        let xv = self.value(x);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut normed = Vec::with_capacity(n * d);
        let mut inv_std = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n * d);
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (c, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                normed.push(h);
                out.push(h * g[c] + b[c]);
            }
        }
        let value = Tensor::new(n, d, out)?;
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            },
            ng,
        )
    }

    /// Multi-head scaled dot-product attention. Query row `i` attends over the
    /// key/value rows in `segments[i]`; the model dim is split into `heads`
    /// equal slices and each slice uses scale `1/√head_dim`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[Segment],
        heads: usize,
    ) -> Result<Var, TensorError> {
        let (qs, ks, vs) = (self.shape(q), self.shape(k), self.shape(v));
        if qs[1] != ks[1] {
            return Err(mismatch("attention", qs, ks));
        }
        if ks != vs {
            return Err(mismatch("attention", ks, vs));
        }
        let d = qs[1];
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::HeadsMismatch {
                model_dim: d,
                num_heads: heads,
            });
        }
        if segments.len() != qs[0] {
            return Err(invalid(
                "attention",
                format!("{} segments for {} query rows", segments.len(), qs[0]),
            ));
        }
        for s in segments {
            if s.len == 0 || s.end() > ks[0] {
                return Err(invalid(
                    "attention",
                    format!("segment {s:?} invalid for {} key rows", ks[0]),
                ));
            }
        }
        let hd = d / heads;
        let scale = T::one() / T::from_f64(hd as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = Tensor::zeros(qs[0], d);
        let total: usize = segments.iter().map(|s| s.len).sum();
        let mut weights = Vec::with_capacity(total * heads);
        let mut scores = Vec::new();
        for (i, seg) in segments.iter().enumerate() {
            let qrow = qv.row(i);
            for h in 0..heads {
                let hs = h * hd..(h + 1) * hd;
                let qh = &qrow[hs.clone()];
                scores.clear();
                for j in seg.start..seg.end() {
                    scores.push(scale * dot(qh, &kv.row(j)[hs.clone()]));
                }
                softmax_in_place(&mut scores);
                let orow = &mut out.row_mut(i)[hs.clone()];
                for (jj, &w) in scores.iter().enumerate() {
                    let vh = &vv.row(seg.start + jj)[hs.clone()];
                    for (o, &x) in orow.iter_mut().zip(vh) {
                        *o += w * x;
                    }
                }
                weights.extend_from_slice(&scores);
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(
            "attention",
            out,
            Op::Attention {
                q,
                k,
                v,
                segments: segments.to_vec(),
                heads,
                weights,
            },
            ng,
        )
    }

    /// Per-query attention weights of an [`Tape::attention`] node, averaged
    /// over heads. Each returned row sums to one.
    pub fn attention_weights(&self, v: Var) -> Option<Vec<Vec<T>>> {
        let Op::Attention {
            segments,
            heads,
            weights,
            ..
        } = &self.nodes.get(v.0)?.op
        else {
            return None;
        };
        let hn = T::from_f64(*heads as f64);
        let mut offset = 0;
        let mut rows = Vec::with_capacity(segments.len());
        for seg in segments {
            let mut avg = vec![T::zero(); seg.len];
            for h in 0..*heads {
                let w = &weights[offset + h * seg.len..offset + (h + 1) * seg.len];
                for (a, &x) in avg.iter_mut().zip(w) {
                    *a += x;
                }
            }
            avg.iter_mut().for_each(|a| *a /= hn);
            rows.push(avg);
            offset += heads * seg.len;
        }
        Some(rows)
    }

    /// Raw per-head weights: `[query][head][key]`.
    pub fn attention_weights_per_head(&self, v: Var) -> Option<Vec<Vec<Vec<T>>>> {
        let Op::Attention {
            segments,
            heads,
            weights,
            ..
        } = &self.nodes.get(v.0)?.op
        else {
            return None;
        };
        let mut offset = 0;
        let mut out = Vec::with_capacity(segments.len());
        for seg in segments {
            let per_head = (0..*heads)
                .map(|h| weights[offset + h * seg.len..offset + (h + 1) * seg.len].to_vec())
                .collect();
            out.push(per_head);
            offset += heads * seg.len;
        }
        Some(out)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa[0] != sb[0] {
            return Err(mismatch("concat_cols", sa, sb));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let value = Tensor::from_fn(sa[0], sa[1] + sb[1], |r, c| {
            if c < sa[1] {
                av.get(r, c)
            } else {
                bv.get(r, c - sa[1])
            }
        });
        let ng = self.ng(a) || self.ng(b);
        self.push("concat_cols", value, Op::ConcatCols(a, b), ng)
    }

    /// Mean of each segment's rows; an empty segment yields a zero row.
    pub fn segment_mean(&mut self, x: Var, segments: &[Segment]) -> Result<Var, TensorError> {
        let xs = self.shape(x);
        if segments.is_empty() {
            return Err(invalid("segment_mean", "no segments"));
        }
        if let Some(s) = segments.iter().find(|s| s.end() > xs[0]) {
            return Err(invalid(
                "segment_mean",
                format!("segment {s:?} exceeds {} rows", xs[0]),
            ));
        }
        let xv = self.value(x);
        let mut value = Tensor::zeros(segments.len(), xs[1]);
        for (i, seg) in segments.iter().enumerate() {
            if seg.len == 0 {
                continue;
            }
            let inv = T::one() / T::from_f64(seg.len as f64);
            let orow = value.row_mut(i);
            for j in seg.start..seg.end() {
                for (o, &v) in orow.iter_mut().zip(xv.row(j)) {
                    *o += v;
                }
            }
            orow.iter_mut().for_each(|o| *o *= inv);
        }
        let ng = self.ng(x);
        self.push(
            "segment_mean",
            value,
            Op::SegmentMean {
                x,
                segments: segments.to_vec(),
            },
            ng,
        )
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var, TensorError> {
        let xs = self.shape(x);
        if rows.is_empty() {
            return Err(invalid("gather_rows", "no rows"));
        }
        if let Some(&r) = rows.iter().find(|&&r| r >= xs[0]) {
            return Err(invalid(
                "gather_rows",
                format!("row {r} out of range for {} rows", xs[0]),
            ));
        }
        let xv = self.value(x);
        let value = Tensor::from_fn(rows.len(), xs[1], |i, c| xv.get(rows[i], c));
        let ng = self.ng(x);
        self.push(
            "gather_rows",
            value,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            ng,
        )
    }

    /// Copy of `base` with row `rows[i]` replaced by row `i` of `repl`.
    pub fn replace_rows(&mut self, base: Var, repl: Var, rows: &[usize]) -> Result<Var, TensorError> {
        let (bs, rs) = (self.shape(base), self.shape(repl));
        if bs[1] != rs[1] || rs[0] != rows.len() {
            return Err(mismatch("replace_rows", bs, rs));
        }
        let mut seen = vec![false; bs[0]];
        for &r in rows {
            if r >= bs[0] || std::mem::replace(&mut seen[r], true) {
                return Err(invalid(
                    "replace_rows",
                    format!("row {r} out of range or repeated"),
                ));
            }
        }
        let mut value = self.value(base).clone();
        let rv = self.value(repl);
        for (i, &r) in rows.iter().enumerate() {
            value.row_mut(r).copy_from_slice(rv.row(i));
        }
        let ng = self.ng(base) || self.ng(repl);
        self.push(
            "replace_rows",
            value,
            Op::ReplaceRows {
                base,
                repl,
                rows: rows.to_vec(),
            },
            ng,
        )
    }

    /// Mean negative log-softmax at the target indices; a `[1, 1]` loss.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, TensorError> {
        let ls = self.shape(logits);
        if targets.len() != ls[0] {
            return Err(invalid(
                "cross_entropy",
                format!("{} targets for {} rows", targets.len(), ls[0]),
            ));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= ls[1]) {
            return Err(TensorError::TargetOutOfRange {
                target: t,
                classes: ls[1],
            });
        }
        let lv = self.value(logits);
        let mut probs = Vec::with_capacity(ls[0] * ls[1]);
        let mut total = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = lv.row(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            total += lse - row[t];
            probs.extend(row.iter().map(|&v| (v - max).exp() / sum));
        }
        let loss = total / T::from_f64(ls[0] as f64);
        let ng = self.ng(logits);
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        )
    }

    /// `Σ x ⊙ weights` for a fixed `weights` tensor of the same shape.
    pub fn dot_const(&mut self, x: Var, weights: Tensor<T>) -> Result<Var, TensorError> {
        let xs = self.shape(x);
        if weights.shape() != xs {
            return Err(mismatch("dot_const", xs, weights.shape()));
        }
        let s = dot(self.value(x).data(), weights.data());
        let ng = self.ng(x);
        self.push("dot_const", Tensor::scalar(s), Op::DotConst { x, weights }, ng)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.value(x).data().iter().copied().sum();
        let ng = self.ng(x);
        self.push("sum", Tensor::scalar(s), Op::Sum(x), ng)
    }

    /// Back-propagates from a `[1, 1]` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        let shape = self.shape(loss);
        if shape != [1, 1] {
            return Err(TensorError::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Tensor<T>>], v: Var) -> Option<&'g mut Tensor<T>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let shape = self.shape(v);
        Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(shape[0], shape[1])))
    }

    fn backward_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.grad_slot(grads, *a) {
                    accumulate_a_bt(g, bv, ga);
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    accumulate_at_b(av, g, gb);
                }
            }
            Op::AddBias(x, b) => {
                if let Some(gx) = self.grad_slot(grads, *x) {
                    gx.add_assign(g);
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    let gbd = gb.data_mut();
                    for r in 0..g.rows() {
                        for (o, &v) in gbd.iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.grad_slot(grads, v) {
                        gv.add_assign(g);
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for (o, &v) in gx.data_mut().iter_mut().zip(g.data()) {
                        *o += v * *s;
                    }
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for ((o, &gv), &xi) in gx.data_mut().iter_mut().zip(g.data()).zip(xv.data()) {
                        if xi > T::zero() {
                            *o += gv;
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let y = &node.value;
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let s = dot(yr, gr);
                        for ((o, &yi), &gi) in gx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o += yi * (gi - s);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            } => {
                let [n, d] = g.shape();
                let gainv = self.value(*gain).data();
                let dn = T::from_f64(d as f64);
                if let Some(gx) = self.grad_slot(grads, *x) {
                    let mut dxhat = vec![T::zero(); d];
                    for r in 0..n {
                        let xh = &normed[r * d..(r + 1) * d];
                        let gr = g.row(r);
                        for c in 0..d {
                            dxhat[c] = gr[c] * gainv[c];
                        }
                        let mean_d = dxhat.iter().copied().sum::<T>() / dn;
                        let mean_dx = dot(&dxhat, xh) / dn;
                        for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                            *o += inv_std[r] * (dxhat[c] - mean_d - xh[c] * mean_dx);
                        }
                    }
                }
                if let Some(gg) = self.grad_slot(grads, *gain) {
                    let ggd = gg.data_mut();
                    for r in 0..n {
                        let xh = &normed[r * d..(r + 1) * d];
                        for ((o, &gv), &h) in ggd.iter_mut().zip(g.row(r)).zip(xh) {
                            *o += gv * h;
                        }
                    }
                }
                if let Some(gb) = self.grad_slot(grads, *bias) {
                    let gbd = gb.data_mut();
                    for r in 0..n {
                        for (o, &gv) in gbd.iter_mut().zip(g.row(r)) {
                            *o += gv;
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                segments,
                heads,
                weights,
            } => self.backward_attention(*q, *k, *v, segments, *heads, weights, g, grads),
            Op::ConcatCols(a, b) => {
                let ac = self.shape(*a)[1];
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for r in 0..g.rows() {
                        for (o, &v) in ga.row_mut(r).iter_mut().zip(&g.row(r)[..ac]) {
                            *o += v;
                        }
                    }
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    for r in 0..g.rows() {
                        for (o, &v) in gb.row_mut(r).iter_mut().zip(&g.row(r)[ac..]) {
                            *o += v;
                        }
                    }
                }
            }
            Op::SegmentMean { x, segments } => {
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for (i, seg) in segments.iter().enumerate() {
                        if seg.len == 0 {
                            continue;
                        }
                        let inv = T::one() / T::from_f64(seg.len as f64);
                        for j in seg.start..seg.end() {
                            for (o, &v) in gx.row_mut(j).iter_mut().zip(g.row(i)) {
                                *o += v * inv;
                            }
                        }
                    }
                }
            }
            Op::GatherRows { x, rows } => {
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for (i, &r) in rows.iter().enumerate() {
                        for (o, &v) in gx.row_mut(r).iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                }
            }
            Op::ReplaceRows { base, repl, rows } => {
                if let Some(gb) = self.grad_slot(grads, *base) {
                    let mut replaced = vec![false; g.rows()];
                    rows.iter().for_each(|&r| replaced[r] = true);
                    for (r, skip) in replaced.into_iter().enumerate() {
                        if skip {
                            continue;
                        }
                        for (o, &v) in gb.row_mut(r).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                }
                if let Some(gr) = self.grad_slot(grads, *repl) {
                    for (i, &r) in rows.iter().enumerate() {
                        for (o, &v) in gr.row_mut(i).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let c = self.shape(*logits)[1];
                let scale = g.data()[0] / T::from_f64(targets.len() as f64);
                if let Some(gl) = self.grad_slot(grads, *logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        let p = &probs[r * c..(r + 1) * c];
                        for (j, o) in gl.row_mut(r).iter_mut().enumerate() {
                            let onehot = if j == t { T::one() } else { T::zero() };
                            *o += scale * (p[j] - onehot);
                        }
                    }
                }
            }
            Op::DotConst { x, weights } => {
                let s = g.data()[0];
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for (o, &w) in gx.data_mut().iter_mut().zip(weights.data()) {
                        *o += s * w;
                    }
                }
            }
            Op::Sum(x) => {
                let s = g.data()[0];
                if let Some(gx) = self.grad_slot(grads, *x) {
                    gx.data_mut().iter_mut().for_each(|o| *o += s);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[Segment],
        heads: usize,
        weights: &[T],
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let d = g.cols();
        let hd = d / heads;
        let scale = T::one() / T::from_f64(hd as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let [kr, kc] = kv.shape();

        // Buffers are filled locally and merged at the end so q/k/v may alias.
        let mut gq = self.ng(q).then(|| Tensor::zeros(qv.rows(), d));
        let mut gk = self.ng(k).then(|| Tensor::zeros(kr, kc));
        let mut gv = self.ng(v).then(|| Tensor::zeros(kr, kc));

        let mut dw = Vec::new();
        let mut offset = 0;
        for (i, seg) in segments.iter().enumerate() {
            for h in 0..heads {
                let hs = h * hd..(h + 1) * hd;
                let w = &weights[offset + h * seg.len..offset + (h + 1) * seg.len];
                let go = &g.row(i)[hs.clone()];
                dw.clear();
                for (jj, &wj) in w.iter().enumerate() {
                    let j = seg.start + jj;
                    dw.push(dot(go, &vv.row(j)[hs.clone()]));
                    if let Some(gv) = gv.as_mut() {
                        for (o, &x) in gv.row_mut(j)[hs.clone()].iter_mut().zip(go) {
                            *o += wj * x;
                        }
                    }
                }
                let s = dot(w, &dw);
                for (jj, &wj) in w.iter().enumerate() {
                    let j = seg.start + jj;
                    let ds = wj * (dw[jj] - s) * scale;
                    if let Some(gq) = gq.as_mut() {
                        for (o, &x) in gq.row_mut(i)[hs.clone()].iter_mut().zip(&kv.row(j)[hs.clone()]) {
                            *o += ds * x;
                        }
                    }
                    if let Some(gk) = gk.as_mut() {
                        for (o, &x) in gk.row_mut(j)[hs.clone()].iter_mut().zip(&qv.row(i)[hs.clone()]) {
                            *o += ds * x;
                        }
                    }
                }
            }
            offset += heads * seg.len;
        }
        for (var, buf) in [(q, gq), (k, gk), (v, gv)] {
            if let (Some(buf), Some(slot)) = (buf, self.grad_slot(grads, var)) {
                slot.add_assign(&buf);
            }
        }
    }
}

pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}
