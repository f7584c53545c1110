use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::kernels::{self, dot};
use super::{as_matrix, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: S },
    Sum { x: Var },
    Mean { x: Var },
    RmsNorm { x: Var, gain: Var, normed: Vec<S>, inv_rms: Vec<S> },
    Silu { x: Var },
    Gather { table: Var, ids: Vec<usize> },
    ConcatRows { parts: Vec<Var> },
    ConcatCols { parts: Vec<Var> },
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    Transpose { x: Var },
    Softmax { x: Var },
    LogSoftmax { x: Var },
    SoftCrossEntropy { logits: Var, target: Vec<S>, weights: Vec<S>, probs: Vec<S> },
    SmoothL1 { a: Var, b: Var },
    Attention { q: Var, k: Var, v: Var, heads: usize, scale: S, probs: Vec<S> },
    Rope { x: Var, heads: usize, positions: Vec<usize>, base: f64 },
    WriteRows { buffer: Var, dst: Vec<usize>, src: Var, src_rows: Vec<usize> },
}

#[derive(Debug)]
struct Node<S> {
    value: Arc<Tensor<S>>,
    grad: Option<Vec<S>>,
    requires_grad: bool,
    op: Op<S>,
}

/// Append-only computation tape.
///
/// Nodes are stored in creation order, which is a topological order of the
/// computation, so backward is a single reverse sweep. A graph built with
/// [`Graph::inference`] records values only.
#[derive(Debug)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    record: bool,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), record: true }
    }

    /// A graph that never records backward state.
    pub fn inference() -> Self {
        Self { nodes: Vec::new(), record: false }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// Constant leaf sharing storage with the caller.
    pub fn constant_shared(&mut self, value: &Arc<Tensor<S>>) -> Var {
        self.push_shared(Arc::clone(value), false, Op::Leaf)
    }

    /// Trainable leaf sharing storage with the caller.
    pub fn param_shared(&mut self, value: &Arc<Tensor<S>>) -> Var {
        let rg = self.record;
        self.push_shared(Arc::clone(value), rg, Op::Leaf)
    }

    /// Leaf that accumulates a gradient during [`Graph::backward`].
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        let rg = self.record;
        self.push(value, rg, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shared_value(&self, v: Var) -> Arc<Tensor<S>> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<S>> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn check_finite(&self, v: Var, what: &str) -> Result<()> {
        if self.nodes[v.0].value.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    fn push(&mut self, value: Tensor<S>, requires_grad: bool, op: Op<S>) -> Var {
        self.push_shared(Arc::new(value), requires_grad, op)
    }

    fn push_shared(&mut self, value: Arc<Tensor<S>>, requires_grad: bool, op: Op<S>) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor<S>, inputs: &[Var], op: impl FnOnce() -> Op<S>) -> Var {
        let rg = self.record && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if rg { op() } else { Op::Leaf };
        self.push(value, rg, op)
    }

    fn dims(&self, v: Var) -> Result<(usize, usize)> {
        as_matrix(&self.nodes[v.0].value)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(format!("{what}: shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.derived(out, &[a, b], || Op::MatMul { a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| *x + *y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.derived(out, &[a, b], || Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| *x - *y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.derived(out, &[a, b], || Op::Sub { a, b }))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| *x * *y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.derived(out, &[a, b], || Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, c: S) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.derived(out, &[x], || Op::Scale { x, c })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: S = self.value(x).data().iter().copied().sum();
        self.derived(Tensor::scalar(s), &[x], || Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s: S = t.data().iter().copied().sum::<S>() / S::usize(t.numel());
        self.derived(Tensor::scalar(s), &[x], || Op::Mean { x })
    }

    /// Row-wise RMS normalisation with a learned gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (rows, d) = self.dims(x)?;
        if self.value(gain).numel() != d {
            return Err(Error::shape(format!("rms_norm gain has {} entries, rows have {d}", self.value(gain).numel())));
        }
        let eps = S::of(eps);
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let mut normed = vec![S::zero(); rows * d];
        let mut inv_rms = vec![S::zero(); rows];
        let mut out = vec![S::zero(); rows * d];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let ms = dot(row, row) / S::usize(d);
            let inv = S::one() / (ms + eps).sqrt();
            inv_rms[r] = inv;
            for j in 0..d {
                let n = row[j] * inv;
                normed[r * d + j] = n;
                out[r * d + j] = n * g[j];
            }
        }
        let shape = self.value(x).shape().to_vec();
        let out = Tensor::new(shape, out)?;
        Ok(self.derived(out, &[x, gain], || Op::RmsNorm { x, gain, normed, inv_rms }))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(kernels::silu);
        self.derived(out, &[x], || Op::Silu { x })
    }

    /// Row gather: embedding lookup when `table` is an embedding matrix.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, d) = self.dims(table)?;
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::shape(format!("row index {id} out of range for {rows} rows")));
            }
            out.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        if ids.is_empty() {
            return Err(Error::shape("gather of zero rows"));
        }
        let out = Tensor::matrix(ids.len(), d, out)?;
        Ok(self.derived(out, &[table], || Op::Gather { table, ids: ids.to_vec() }))
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.dims(parts[0])?.1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.dims(p)?;
            if c != cols {
                return Err(Error::shape(format!("concat_rows: {c} columns vs {cols}")));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::matrix(rows, cols, data)?;
        Ok(self.derived(out, parts, || Op::ConcatRows { parts: parts.to_vec() }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.dims(parts[0])?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims(p)?;
            if r != rows {
                return Err(Error::shape(format!("concat_cols: {r} rows vs {rows}")));
            }
            widths.push(c);
        }
        let cols: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let out = Tensor::matrix(rows, cols, data)?;
        Ok(self.derived(out, parts, || Op::ConcatCols { parts: parts.to_vec() }))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = self.dims(x)?;
        if start >= end || end > rows {
            return Err(Error::shape(format!("row slice {start}..{end} of {rows}")));
        }
        let data = self.value(x).data()[start * cols..end * cols].to_vec();
        let out = Tensor::matrix(end - start, cols, data)?;
        Ok(self.derived(out, &[x], || Op::SliceRows { x, start }))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = self.dims(x)?;
        if start >= end || end > cols {
            return Err(Error::shape(format!("column slice {start}..{end} of {cols}")));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&src[r * cols + start..r * cols + end]);
        }
        let out = Tensor::matrix(rows, end - start, data)?;
        Ok(self.derived(out, &[x], || Op::SliceCols { x, start }))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose()?;
        Ok(self.derived(out, &[x], || Op::Transpose { x }))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let cols = t.cols();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(cols) {
            kernels::softmax_in_place(row);
        }
        let out = Tensor::new(t.shape().to_vec(), data).expect("shape preserved");
        self.derived(out, &[x], || Op::Softmax { x })
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let cols = t.cols();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(cols) {
            let lse = kernels::log_sum_exp(row);
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let out = Tensor::new(t.shape().to_vec(), data).expect("shape preserved");
        self.derived(out, &[x], || Op::LogSoftmax { x })
    }

    /// `Σ_r w_r · (−Σ_t p_rt · log softmax(z_r)_t)` over the rows of `logits`.
    ///
    /// Every row of `target` must be a probability vector to within 1e-6.
    pub fn soft_cross_entropy(&mut self, target: &Tensor<S>, logits: Var, weights: &[S]) -> Result<Var> {
        let (rows, cols) = self.dims(logits)?;
        if as_matrix(target)? != (rows, cols) {
            return Err(Error::shape(format!(
                "soft_cross_entropy: target {:?} vs logits {:?}",
                target.shape(),
                self.value(logits).shape()
            )));
        }
        if weights.len() != rows {
            return Err(Error::shape(format!("{} weights for {rows} rows", weights.len())));
        }
        for r in 0..rows {
            let row = target.row(r);
            let total: f64 = row.iter().map(|v| v.f64()).sum();
            if (total - 1.0).abs() > 1e-6 || row.iter().any(|v| *v < S::zero()) {
                return Err(Error::validation(format!("target row {r} is not a probability vector (sum {total})")));
            }
        }
        let z = self.value(logits).data();
        let mut probs = z.to_vec();
        let mut loss = S::zero();
        for r in 0..rows {
            let zr = &z[r * cols..(r + 1) * cols];
            let lse = kernels::log_sum_exp(zr);
            let mut ce = S::zero();
            for (t, &p) in target.row(r).iter().enumerate() {
                if p != S::zero() {
                    ce -= p * (zr[t] - lse);
                }
            }
            loss += weights[r] * ce;
            kernels::softmax_in_place(&mut probs[r * cols..(r + 1) * cols]);
        }
        let tgt = target.data().to_vec();
        let w = weights.to_vec();
        Ok(self.derived(Tensor::scalar(loss), &[logits], || Op::SoftCrossEntropy {
            logits,
            target: tgt,
            weights: w,
            probs,
        }))
    }

    /// Mean Huber loss with unit threshold.
    pub fn smooth_l1(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "smooth_l1")?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let half = S::of(0.5);
        let mut acc = S::zero();
        for (x, y) in va.iter().zip(vb) {
            let e = (*x - *y).abs();
            acc += if e < S::one() { half * e * e } else { e - half };
        }
        let out = Tensor::scalar(acc / S::usize(va.len()));
        Ok(self.derived(out, &[a, b], || Op::SmoothL1 { a, b }))
    }

    /// Multi-head attention of `q[T×d]` over `k[S×d]`, `v[S×d]`.
    ///
    /// `allowed` is a row-major `T×S` admissibility matrix. Disallowed keys
    /// get exactly zero weight; a query with no admissible key outputs zeros.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, allowed: &[bool]) -> Result<Var> {
        let (t, d) = self.dims(q)?;
        let (s, dk) = self.dims(k)?;
        let (sv, dv) = self.dims(v)?;
        if dk != d || dv != d || sv != s {
            return Err(Error::shape(format!("attention: q {t}×{d}, k {s}×{dk}, v {sv}×{dv}")));
        }
        if allowed.len() != t * s {
            return Err(Error::shape(format!("attention mask has {} entries, expected {t}×{s}", allowed.len())));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::shape(format!("{heads} heads do not divide width {d}")));
        }
        let dh = d / heads;
        let scale = S::one() / S::usize(dh).sqrt();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![S::zero(); heads * t * s];
        let mut out = vec![S::zero(); t * d];
        let mut scores = vec![S::zero(); s];
        for i in 0..t {
            let mask_row = &allowed[i * s..(i + 1) * s];
            if !mask_row.iter().any(|&m| m) {
                continue;
            }
            for h in 0..heads {
                let qi = &qv[i * d + h * dh..i * d + (h + 1) * dh];
                let mut max = S::neg_infinity();
                for j in 0..s {
                    if mask_row[j] {
                        let sc = dot(qi, &kv[j * d + h * dh..j * d + (h + 1) * dh]) * scale;
                        scores[j] = sc;
                        max = max.max(sc);
                    }
                }
                let mut sum = S::zero();
                for j in 0..s {
                    if mask_row[j] {
                        let e = (scores[j] - max).exp();
                        scores[j] = e;
                        sum += e;
                    }
                }
                let p_row = &mut probs[(h * t + i) * s..(h * t + i + 1) * s];
                let o = &mut out[i * d + h * dh..i * d + (h + 1) * dh];
                for j in 0..s {
                    if mask_row[j] {
                        let p = scores[j] / sum;
                        p_row[j] = p;
                        let vj = &vv[j * d + h * dh..j * d + (h + 1) * dh];
                        for (oo, &x) in o.iter_mut().zip(vj) {
                            *oo += p * x;
                        }
                    }
                }
            }
        }
        let out = Tensor::matrix(t, d, out)?;
        Ok(self.derived(out, &[q, k, v], || Op::Attention { q, k, v, heads, scale, probs }))
    }

    /// Rotary position encoding, applied per head on half-split pairs.
    pub fn rope(&mut self, x: Var, heads: usize, positions: &[usize], base: f64) -> Result<Var> {
        let (rows, d) = self.dims(x)?;
        if positions.len() != rows {
            return Err(Error::shape(format!("{} positions for {rows} rows", positions.len())));
        }
        if heads == 0 || d % heads != 0 || (d / heads) % 2 != 0 {
            return Err(Error::shape(format!("rope needs an even head width ({d} / {heads})")));
        }
        let mut data = self.value(x).data().to_vec();
        rotate(&mut data, d, heads, positions, base, false);
        let out = Tensor::matrix(rows, d, data)?;
        Ok(self.derived(out, &[x], || Op::Rope { x, heads, positions: positions.to_vec(), base }))
    }

    /// Overwrite rows of a leaf buffer in place with rows of `src`.
    ///
    /// The buffer keeps its node, so no storage is allocated. Gradient that
    /// later consumers send to the overwritten rows is routed to `src`.
    /// Consumers recorded before the write must not have sent gradient to
    /// those rows (they must have been masked out), otherwise backward
    /// mixes the old and new contents.
    pub fn write_rows(&mut self, buffer: Var, dst: &[usize], src: Var, src_rows: &[usize]) -> Result<()> {
        if !matches!(self.nodes[buffer.0].op, Op::Leaf) {
            return Err(Error::usage("write_rows target must be a leaf buffer"));
        }
        if dst.len() != src_rows.len() {
            return Err(Error::shape("write_rows: row lists differ in length"));
        }
        let (brows, d) = self.dims(buffer)?;
        let (srows, sd) = self.dims(src)?;
        if sd != d {
            return Err(Error::shape(format!("write_rows: width {sd} into {d}")));
        }
        if dst.iter().any(|&r| r >= brows) || src_rows.iter().any(|&r| r >= srows) {
            return Err(Error::shape("write_rows: row index out of range"));
        }
        for (&to, &from) in dst.iter().zip(src_rows) {
            let row: Vec<S> = self.nodes[src.0].value.row(from).to_vec();
            Arc::make_mut(&mut self.nodes[buffer.0].value).row_mut(to).copy_from_slice(&row);
        }
        let rg = self.record && self.nodes[src.0].requires_grad;
        if rg {
            self.nodes[buffer.0].requires_grad = true;
            let op = Op::WriteRows { buffer, dst: dst.to_vec(), src, src_rows: src_rows.to_vec() };
            self.push(Tensor::zeros(&[0]), true, op);
        }
        Ok(())
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Intermediate gradients live only for the duration of the call; leaf
    /// gradients accumulate across calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::usage("backward needs a scalar loss"));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::usage("loss was not produced by recorded ops"));
        }
        let mut grads: Vec<Option<Vec<S>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![S::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::WriteRows { buffer, dst, src, src_rows } = &node.op {
                let d = self.nodes[buffer.0].value.cols();
                let Some(bg) = grads[buffer.0].as_mut() else { continue };
                let mut moved = Vec::with_capacity(dst.len());
                for (&to, &from) in dst.iter().zip(src_rows) {
                    let row = &mut bg[to * d..(to + 1) * d];
                    moved.push((from, row.to_vec()));
                    row.iter_mut().for_each(|g| *g = S::zero());
                }
                if self.nodes[src.0].requires_grad {
                    let n = self.nodes[src.0].value.numel();
                    let sg = grads[src.0].get_or_insert_with(|| vec![S::zero(); n]);
                    for (from, row) in moved {
                        for (a, b) in sg[from * d..(from + 1) * d].iter_mut().zip(row) {
                            *a += b;
                        }
                    }
                }
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut grads);
        }
        for (idx, g) in grads.into_iter().enumerate() {
            let node = &mut self.nodes[idx];
            if let (Some(g), Op::Leaf, true) = (g, &node.op, node.requires_grad) {
                match node.grad.as_mut() {
                    Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(g),
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[idx];
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [S])| {
            if nodes[v.0].requires_grad {
                let n = nodes[v.0].value.numel();
                f(grads[v.0].get_or_insert_with(|| vec![S::zero(); n]));
            }
        };
        match &node.op {
            Op::Leaf | Op::WriteRows { .. } => {}
            Op::MatMul { a, b } => {
                let (m, k) = as_matrix(&nodes[a.0].value).expect("matrix");
                let n = nodes[b.0].value.cols();
                acc(*a, &mut |ga| kernels::matmul_a_bt(g, nodes[b.0].value.data(), ga, m, k, n));
                acc(*b, &mut |gb| kernels::matmul_at_b(nodes[a.0].value.data(), g, gb, m, k, n));
            }
            Op::Add { a, b } => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub { a, b } => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= *y));
            }
            Op::Mul { a, b } => {
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * vb[i];
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * va[i];
                    }
                });
            }
            Op::Scale { x, c } => acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(a, b)| *a += *b * *c)),
            Op::Sum { x } => acc(*x, &mut |gx| gx.iter_mut().for_each(|a| *a += g[0])),
            Op::Mean { x } => {
                let n = S::usize(nodes[x.0].value.numel());
                acc(*x, &mut |gx| gx.iter_mut().for_each(|a| *a += g[0] / n));
            }
            Op::RmsNorm { x, gain, normed, inv_rms } => {
                let d = nodes[gain.0].value.numel();
                let gv = nodes[gain.0].value.data();
                acc(*gain, &mut |gg| {
                    for (r, row) in g.chunks(d).enumerate() {
                        for j in 0..d {
                            gg[j] += row[j] * normed[r * d + j];
                        }
                    }
                });
                acc(*x, &mut |gx| {
                    for (r, row) in g.chunks(d).enumerate() {
                        let xh = &normed[r * d..(r + 1) * d];
                        let mut m = S::zero();
                        for j in 0..d {
                            m += row[j] * gv[j] * xh[j];
                        }
                        m /= S::usize(d);
                        for j in 0..d {
                            gx[r * d + j] += inv_rms[r] * (row[j] * gv[j] - xh[j] * m);
                        }
                    }
                });
            }
            Op::Silu { x } => {
                let xv = nodes[x.0].value.data();
                acc(*x, &mut |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * kernels::silu_grad(xv[i]);
                    }
                });
            }
            Op::Gather { table, ids } => {
                let d = nodes[table.0].value.cols();
                acc(*table, &mut |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for p in parts {
                    let n = nodes[p.0].value.numel();
                    acc(*p, &mut |gp| add_into(gp, &g[off..off + n]));
                    off += n;
                }
            }
            Op::ConcatCols { parts } => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut off = 0;
                for p in parts {
                    let w = nodes[p.0].value.cols();
                    acc(*p, &mut |gp| {
                        for r in 0..rows {
                            add_into(&mut gp[r * w..(r + 1) * w], &g[r * total + off..r * total + off + w]);
                        }
                    });
                    off += w;
                }
            }
            Op::SliceRows { x, start } => {
                let cols = node.value.cols();
                acc(*x, &mut |gx| add_into(&mut gx[start * cols..start * cols + g.len()], g));
            }
            Op::SliceCols { x, start } => {
                let w = node.value.cols();
                let cols = nodes[x.0].value.cols();
                acc(*x, &mut |gx| {
                    for (r, row) in g.chunks(w).enumerate() {
                        add_into(&mut gx[r * cols + start..r * cols + start + w], row);
                    }
                });
            }
            Op::Transpose { x } => {
                let (m, n) = as_matrix(&nodes[x.0].value).expect("matrix");
                acc(*x, &mut |gx| add_into(gx, &kernels::transpose(g, n, m)));
            }
            Op::Softmax { x } => {
                let y = node.value.data();
                let cols = node.value.cols();
                acc(*x, &mut |gx| {
                    for r in 0..y.len() / cols {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let c = dot(yr, gr);
                        for j in 0..cols {
                            gx[r * cols + j] += yr[j] * (gr[j] - c);
                        }
                    }
                });
            }
            Op::LogSoftmax { x } => {
                let y = node.value.data();
                let cols = node.value.cols();
                acc(*x, &mut |gx| {
                    for r in 0..y.len() / cols {
                        let gr = &g[r * cols..(r + 1) * cols];
                        let total: S = gr.iter().copied().sum();
                        for j in 0..cols {
                            gx[r * cols + j] += gr[j] - y[r * cols + j].exp() * total;
                        }
                    }
                });
            }
            Op::SoftCrossEntropy { logits, target, weights, probs } => {
                let cols = nodes[logits.0].value.cols();
                acc(*logits, &mut |gz| {
                    for (r, &w) in weights.iter().enumerate() {
                        let tr = &target[r * cols..(r + 1) * cols];
                        let mass: S = tr.iter().copied().sum();
                        let scale = g[0] * w;
                        for j in 0..cols {
                            gz[r * cols + j] += scale * (probs[r * cols + j] * mass - tr[j]);
                        }
                    }
                });
            }
            Op::SmoothL1 { a, b } => {
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                let n = S::usize(va.len());
                let de: Vec<S> =
                    va.iter().zip(vb).map(|(x, y)| (*x - *y).max(-S::one()).min(S::one()) * g[0] / n).collect();
                acc(*a, &mut |ga| add_into(ga, &de));
                acc(*b, &mut |gb| gb.iter_mut().zip(&de).for_each(|(x, y)| *x -= *y));
            }
            Op::Attention { q, k, v, heads, scale, probs } => {
                let (t, d) = as_matrix(&nodes[q.0].value).expect("matrix");
                let s = nodes[k.0].value.rows();
                let dh = d / heads;
                let (qv, kv, vv) = (nodes[q.0].value.data(), nodes[k.0].value.data(), nodes[v.0].value.data());
                let mut gq = vec![S::zero(); t * d];
                let mut gk = vec![S::zero(); s * d];
                let mut gv = vec![S::zero(); s * d];
                let mut dp = vec![S::zero(); s];
                for h in 0..*heads {
                    let hs = h * dh..(h + 1) * dh;
                    for i in 0..t {
                        let p_row = &probs[(h * t + i) * s..(h * t + i + 1) * s];
                        let go = &g[i * d + hs.start..i * d + hs.end];
                        let mut c = S::zero();
                        for j in 0..s {
                            if p_row[j] != S::zero() {
                                dp[j] = dot(go, &vv[j * d + hs.start..j * d + hs.end]);
                                c += p_row[j] * dp[j];
                            }
                        }
                        for j in 0..s {
                            let p = p_row[j];
                            if p == S::zero() {
                                continue;
                            }
                            for (a, &b) in gv[j * d + hs.start..j * d + hs.end].iter_mut().zip(go) {
                                *a += p * b;
                            }
                            let ds = p * (dp[j] - c) * *scale;
                            let kj = &kv[j * d + hs.start..j * d + hs.end];
                            for (a, &b) in gq[i * d + hs.start..i * d + hs.end].iter_mut().zip(kj) {
                                *a += ds * b;
                            }
                            let qi = &qv[i * d + hs.start..i * d + hs.end];
                            for (a, &b) in gk[j * d + hs.start..j * d + hs.end].iter_mut().zip(qi) {
                                *a += ds * b;
                            }
                        }
                    }
                }
                acc(*q, &mut |x| add_into(x, &gq));
                acc(*k, &mut |x| add_into(x, &gk));
                acc(*v, &mut |x| add_into(x, &gv));
            }
            Op::Rope { x, heads, positions, base } => {
                let d = node.value.cols();
                let mut back = g.to_vec();
                rotate(&mut back, d, *heads, positions, *base, true);
                acc(*x, &mut |gx| add_into(gx, &back));
            }
        }
    }
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (a, &b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

/// In-place rotary rotation; `inverse` applies the transpose rotation.
pub(crate) fn rotate<S: Scalar>(data: &mut [S], d: usize, heads: usize, positions: &[usize], base: f64, inverse: bool) {
    let dh = d / heads;
    let half = dh / 2;
    for (r, &pos) in positions.iter().enumerate() {
        for i in 0..half {
            let theta = pos as f64 * base.powf(-2.0 * i as f64 / dh as f64);
            let (mut sin, cos) = theta.sin_cos();
            if inverse {
                sin = -sin;
            }
            let (sin, cos) = (S::of(sin), S::of(cos));
            for h in 0..heads {
                let a = r * d + h * dh + i;
                let b = a + half;
                let (x1, x2) = (data[a], data[b]);
                data[a] = x1 * cos - x2 * sin;
                data[b] = x1 * sin + x2 * cos;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[4.0, 8.0]);
        g.zero_grad();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_without_tape_is_usage_error() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(Tensor::scalar(1.0));
        assert!(matches!(g.backward(c), Err(Error::Usage(_))));
        let mut g = Graph::<f64>::inference();
        let x = g.param(Tensor::vector(vec![1.0]));
        let s = g.sum(x);
        assert!(matches!(g.backward(s), Err(Error::Usage(_))));
    }

    #[test]
    fn soft_ce_examples() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::vector(vec![10.0, 0.0, 0.0]));
        let ce = g.soft_cross_entropy(&Tensor::vector(vec![1.0, 0.0, 0.0]), z, &[1.0]).unwrap();
        // −log(e¹⁰ / (e¹⁰ + 2))
        let want = (1.0 + 2.0 * (-10.0f64).exp()).ln();
        assert!((g.value(ce).item() - want).abs() < 1e-15);
        assert!((g.value(ce).item() - 9.08e-5).abs() < 1e-6);

        let n = 7;
        let z = g.constant(Tensor::vector(vec![0.3; n]));
        let ce = g.soft_cross_entropy(&Tensor::vector(vec![1.0 / n as f64; n]), z, &[1.0]).unwrap();
        assert!((g.value(ce).item() - (n as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn soft_ce_rejects_unnormalised_target() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let r = g.soft_cross_entropy(&Tensor::vector(vec![0.6, 0.6]), z, &[1.0]);
        assert!(matches!(r, Err(Error::Validation(_))));
    }

    #[test]
    fn soft_ce_gradient_is_softmax_minus_target() {
        let mut g = Graph::<f64>::new();
        let z = g.param(Tensor::vector(vec![0.5, -1.0, 2.0]));
        let p = Tensor::vector(vec![0.2, 0.3, 0.5]);
        let ce = g.soft_cross_entropy(&p, z, &[1.0]).unwrap();
        g.backward(ce).unwrap();
        let q = g.value(z).softmax(0).unwrap();
        for i in 0..3 {
            assert!((g.grad(z).unwrap()[i] - (q.data()[i] - p.data()[i])).abs() < 1e-14);
        }
    }

    #[test]
    fn smooth_l1_examples() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::vector(vec![2.0]));
        let b = g.constant(Tensor::vector(vec![0.0]));
        let l = g.smooth_l1(a, b).unwrap();
        assert_eq!(g.value(l).item(), 1.5);
        let a = g.constant(Tensor::vector(vec![0.5]));
        let l = g.smooth_l1(a, b).unwrap();
        assert_eq!(g.value(l).item(), 0.125);
        let l = g.smooth_l1(a, a).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        let c = g.constant(Tensor::vector(vec![0.5, 1.0]));
        assert!(g.smooth_l1(a, c).is_err());
    }

    #[test]
    fn empty_attention_row_is_zero() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(Tensor::full(&[2, 4], 0.3));
        let k = g.constant(Tensor::full(&[2, 4], 0.7));
        let v = g.constant(Tensor::full(&[2, 4], 1.5));
        let o = g.attention(q, k, v, 2, &[false, false, true, false]).unwrap();
        assert_eq!(g.value(o).row(0), &[0.0; 4]);
        assert_eq!(g.value(o).row(1), &[1.5; 4]);
    }

    #[test]
    fn write_rows_routes_gradient_to_source() {
        let mut g = Graph::<f64>::new();
        let buf = g.param(Tensor::zeros(&[3, 2]));
        let w = g.param(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let src = g.scale(w, 3.0);
        g.write_rows(buf, &[2], src, &[0]).unwrap();
        assert_eq!(g.value(buf).row(2), &[3.0, 6.0]);
        let sq = g.mul(buf, buf).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        // d/dw Σ (3w)² = 18 w
        assert_eq!(g.grad(w).unwrap(), &[18.0, 36.0]);
        assert_eq!(g.grad(buf).unwrap()[4..], [0.0, 0.0]);
    }
}
