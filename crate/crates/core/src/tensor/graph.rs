//! Reverse-mode tape over dense 2-D tensors.
//!
//! A [`Graph`] owns every intermediate value of one forward pass. Ops append
//! nodes in topological order, so the backward sweep is a single reverse walk
//! over the tape. Graphs are single-threaded by construction; parallelism
//! happens one graph per worker against read-only parameter snapshots.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Reduction applied by [`Graph::cross_entropy`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

enum Op<T> {
    Leaf { trainable: bool },
    Matmul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    GatherRows(Var, Vec<usize>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    BlockTranspose(Var, usize),
    BlockPoolRows(Var, usize, Vec<T>),
    MeanRows(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, eps: f64 },
    Gelu(Var),
    BlockAttnScores { q: Var, k: Var, block: usize, scale: f64 },
    BlockAttnCombine { weights: Var, values: Var, block: usize },
    CrossEntropy { logits: Var, targets: Vec<usize>, reduction: Reduction },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    op: Op<T>,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf; receives a gradient after [`Graph::backward`].
    pub fn leaf(&mut self, value: &Tensor<T>) -> Var {
        self.push_unchecked(value.clone(), Op::Leaf { trainable: true })
    }

    /// Non-trainable leaf; the backward sweep does not propagate into it.
    pub fn constant(&mut self, value: &Tensor<T>) -> Var {
        self.push_unchecked(value.clone(), Op::Leaf { trainable: false })
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient of a leaf after `backward`. Trainable leaves that did not
    /// participate in the loss get a zero tensor.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.take()
    }

    fn push_unchecked(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if !value.is_finite_all() {
            return Err(Error::NonFinite { op: op_name });
        }
        Ok(self.push_unchecked(value, op))
    }

    fn shape_err(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Error {
        Error::ShapeMismatch {
            op,
            lhs: a.shape_string(),
            rhs: b.shape_string(),
        }
    }

    // ------------------------------------------------------------------
    // Forward ops
    // ------------------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.value(a).shape();
        let (br, bc) = self.value(b).shape();
        if ac != br {
            return Err(Self::shape_err("matmul", self.value(a), self.value(b)));
        }
        let mut out = Tensor::zeros(ar, bc);
        T::gemm(
            ar,
            ac,
            bc,
            self.value(a).data(),
            self.value(b).data(),
            out.data_mut(),
        );
        self.push("matmul", out, Op::Matmul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Self::shape_err("add", self.value(a), self.value(b)));
        }
        let mut out = self.value(a).clone();
        for (o, &x) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o += x;
        }
        self.push("add", out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Self::shape_err("sub", self.value(a), self.value(b)));
        }
        let mut out = self.value(a).clone();
        for (o, &x) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o -= x;
        }
        self.push("sub", out, Op::Sub(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let f = T::from_f64(factor);
        let out = self.value(a).map(|x| x * f);
        self.push("scale", out, Op::Scale(a, factor))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).shape();
        let mut out = Tensor::zeros(c, r);
        for i in 0..r {
            for j in 0..c {
                out.set(j, i, self.value(a).get(i, j));
            }
        }
        self.push("transpose", out, Op::Transpose(a))
    }

    /// Row gather: `out[i] = a[indices[i]]`. Serves as the embedding lookup
    /// (table rows by token id) and as row selection in general. The backward
    /// pass scatter-adds, so repeated indices accumulate.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let (rows, cols) = self.value(a).shape();
        let mut out = Tensor::zeros(indices.len(), cols);
        for (i, &idx) in indices.iter().enumerate() {
            if idx >= rows {
                return Err(Error::IndexOutOfRange {
                    what: "gather_rows row",
                    index: idx,
                    limit: rows,
                });
            }
            out.row_mut(i).copy_from_slice(self.value(a).row(idx));
        }
        self.push("gather_rows", out, Op::GatherRows(a, indices.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.value(a).shape();
        if start + len > rows {
            return Err(Error::IndexOutOfRange {
                what: "slice_rows end",
                index: start + len,
                limit: rows,
            });
        }
        let mut out = Tensor::zeros(len, cols);
        out.data_mut()
            .copy_from_slice(&self.value(a).data()[start * cols..(start + len) * cols]);
        self.push("slice_rows", out, Op::SliceRows(a, start))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.value(a).shape();
        if start + len > cols {
            return Err(Error::IndexOutOfRange {
                what: "slice_cols end",
                index: start + len,
                limit: cols,
            });
        }
        let mut out = Tensor::zeros(rows, len);
        for i in 0..rows {
            out.row_mut(i)
                .copy_from_slice(&self.value(a).row(i)[start..start + len]);
        }
        self.push("slice_cols", out, Op::SliceCols(a, start))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        assert!(!parts.is_empty(), "concat_rows needs at least one part");
        let cols = self.value(parts[0]).cols();
        let mut rows = 0;
        for &p in parts {
            if self.value(p).cols() != cols {
                return Err(Self::shape_err(
                    "concat_rows",
                    self.value(parts[0]),
                    self.value(p),
                ));
            }
            rows += self.value(p).rows();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new(rows, cols, data)?;
        self.push("concat_rows", out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        assert!(!parts.is_empty(), "concat_cols needs at least one part");
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(Self::shape_err(
                    "concat_cols",
                    self.value(parts[0]),
                    self.value(p),
                ));
            }
            cols += self.value(p).cols();
        }
        let mut out = Tensor::zeros(rows, cols);
        for i in 0..rows {
            let mut offset = 0;
            for &p in parts {
                let pc = self.value(p).cols();
                out.row_mut(i)[offset..offset + pc].copy_from_slice(self.value(p).row(i));
                offset += pc;
            }
        }
        self.push("concat_cols", out, Op::ConcatCols(parts.to_vec()))
    }

    /// Per-block transpose: input `(B*r) x c` becomes `(B*c) x r`, each block
    /// of `r` consecutive rows transposed independently.
    pub fn block_transpose(&mut self, a: Var, block_rows: usize) -> Result<Var> {
        let (rows, cols) = self.value(a).shape();
        if block_rows == 0 || rows % block_rows != 0 {
            return Err(Error::ShapeMismatch {
                op: "block_transpose",
                lhs: self.value(a).shape_string(),
                rhs: format!("block of {} rows", block_rows),
            });
        }
        let blocks = rows / block_rows;
        let mut out = Tensor::zeros(blocks * cols, block_rows);
        for b in 0..blocks {
            for i in 0..block_rows {
                for j in 0..cols {
                    out.set(b * cols + j, i, self.value(a).get(b * block_rows + i, j));
                }
            }
        }
        self.push("block_transpose", out, Op::BlockTranspose(a, block_rows))
    }

    /// Weighted sum over each block of `block` consecutive rows:
    /// `out[b] = sum_i weights[b*block+i] * a[b*block+i]`. With weights
    /// `1/n` on live rows and `0` on padding this is masked mean pooling.
    pub fn block_pool_rows(&mut self, a: Var, block: usize, weights: &[T]) -> Result<Var> {
        let (rows, cols) = self.value(a).shape();
        if block == 0 || rows % block != 0 || weights.len() != rows {
            return Err(Error::ShapeMismatch {
                op: "block_pool_rows",
                lhs: self.value(a).shape_string(),
                rhs: format!("block {} with {} weights", block, weights.len()),
            });
        }
        let blocks = rows / block;
        let mut out = Tensor::zeros(blocks, cols);
        for r in 0..rows {
            let w = weights[r];
            let dst = r / block;
            for j in 0..cols {
                let v = out.get(dst, j) + w * self.value(a).get(r, j);
                out.set(dst, j, v);
            }
        }
        self.push(
            "block_pool_rows",
            out,
            Op::BlockPoolRows(a, block, weights.to_vec()),
        )
    }

    /// Column-wise mean over all rows, producing a `1 x cols` vector.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.value(a).shape();
        let inv = T::from_f64(1.0 / rows as f64);
        let mut out = Tensor::zeros(1, cols);
        for i in 0..rows {
            for j in 0..cols {
                let v = out.get(0, j) + self.value(a).get(i, j);
                out.set(0, j, v);
            }
        }
        out.scale_in_place(inv);
        self.push("mean_rows", out, Op::MeanRows(a))
    }

    /// Row-wise softmax with max-subtraction for stability.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.value(a).shape();
        let mut out = Tensor::zeros(rows, cols);
        for i in 0..rows {
            softmax_row(self.value(a).row(i), out.row_mut(i));
        }
        self.push("softmax", out, Op::Softmax(a))
    }

    /// Row-wise layer normalization followed by the affine transform
    /// `gain * xhat + bias`. `gain` and `bias` are `1 x cols`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = self.value(x).shape();
        if self.value(gain).shape() != (1, cols) {
            return Err(Self::shape_err("layer_norm gain", self.value(x), self.value(gain)));
        }
        if self.value(bias).shape() != (1, cols) {
            return Err(Self::shape_err("layer_norm bias", self.value(x), self.value(bias)));
        }
        let mut out = Tensor::zeros(rows, cols);
        let e = T::from_f64(eps);
        for i in 0..rows {
            let row = self.value(x).row(i);
            let (mean, var) = mean_var(row);
            let inv_std = (var + e).sqrt().recip();
            for j in 0..cols {
                let xhat = (row[j] - mean) * inv_std;
                out.set(
                    0 + i,
                    j,
                    self.value(gain).get(0, j) * xhat + self.value(bias).get(0, j),
                );
            }
        }
        self.push("layer_norm", out, Op::LayerNorm { x, gain, bias, eps })
    }

    /// Exact GELU: `x * Phi(x)` with `Phi` the standard normal CDF.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(gelu_scalar);
        self.push("gelu", out, Op::Gelu(a))
    }

    /// Scaled dot-product scores inside independent blocks of `block` rows:
    /// `out[i][j] = scale * q[i] . k[block_base(i) + j]`.
    pub fn block_attn_scores(&mut self, q: Var, k: Var, block: usize, scale: f64) -> Result<Var> {
        let (rows, dim) = self.value(q).shape();
        if self.value(k).shape() != (rows, dim) || block == 0 || rows % block != 0 {
            return Err(Self::shape_err(
                "block_attn_scores",
                self.value(q),
                self.value(k),
            ));
        }
        let s = T::from_f64(scale);
        let mut out = Tensor::zeros(rows, block);
        for i in 0..rows {
            let base = (i / block) * block;
            for j in 0..block {
                let dot = dot(self.value(q).row(i), self.value(k).row(base + j));
                out.set(i, j, s * dot);
            }
        }
        self.push("block_attn_scores", out, Op::BlockAttnScores { q, k, block, scale })
    }

    /// Combine values with attention weights inside independent blocks:
    /// `out[i] = sum_j weights[i][j] * v[block_base(i) + j]`.
    pub fn block_attn_combine(&mut self, weights: Var, values: Var, block: usize) -> Result<Var> {
        let (rows, wcols) = self.value(weights).shape();
        let (vrows, dim) = self.value(values).shape();
        if wcols != block || vrows != rows || block == 0 || rows % block != 0 {
            return Err(Self::shape_err(
                "block_attn_combine",
                self.value(weights),
                self.value(values),
            ));
        }
        let mut out = Tensor::zeros(rows, dim);
        for i in 0..rows {
            let base = (i / block) * block;
            for j in 0..block {
                let w = self.value(weights).get(i, j);
                for c in 0..dim {
                    let v = out.get(i, c) + w * self.value(values).get(base + j, c);
                    out.set(i, c, v);
                }
            }
        }
        self.push(
            "block_attn_combine",
            out,
            Op::BlockAttnCombine { weights, values, block },
        )
    }

    /// Cross-entropy `-log softmax(logits)[target]` per row, computed in the
    /// log domain, reduced to a 1x1 scalar.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], reduction: Reduction) -> Result<Var> {
        let (rows, cols) = self.value(logits).shape();
        if targets.len() != rows {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: self.value(logits).shape_string(),
                rhs: format!("{} targets", targets.len()),
            });
        }
        let mut total = 0.0f64;
        for (i, &t) in targets.iter().enumerate() {
            if t >= cols {
                return Err(Error::IndexOutOfRange {
                    what: "cross_entropy target",
                    index: t,
                    limit: cols,
                });
            }
            let row = self.value(logits).row(i);
            total += log_sum_exp(row) - row[t].to_f64();
        }
        if let Reduction::Mean = reduction {
            total /= rows as f64;
        }
        let out = Tensor::scalar(T::from_f64(total));
        self.push(
            "cross_entropy",
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                reduction,
            },
        )
    }

    // ------------------------------------------------------------------
    // Backward
    // ------------------------------------------------------------------

    /// Reverse sweep from a scalar loss. Populates gradients on every
    /// trainable leaf; leaves that do not participate get zeros.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let (r, c) = self.value(loss).shape();
        if (r, c) != (1, 1) {
            return Err(Error::NotScalar {
                op: "backward",
                shape: self.value(loss).shape_string(),
            });
        }
        for node in self.nodes.iter_mut() {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(Tensor::scalar(T::one()));

        for id in (0..=loss.0).rev() {
            let grad = match self.nodes[id].grad.take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(id, &grad)?;
            self.nodes[id].grad = Some(grad);
        }

        // Zero-fill trainable leaves that never saw gradient.
        for node in self.nodes.iter_mut() {
            if let Op::Leaf { trainable: true } = node.op {
                if node.grad.is_none() {
                    node.grad = Some(Tensor::zeros(node.value.rows(), node.value.cols()));
                }
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: Tensor<T>) {
        match self.nodes[v.0].grad.as_mut() {
            Some(g) => g.add_scaled(&delta, T::one()),
            None => self.nodes[v.0].grad = Some(delta),
        }
    }

    fn propagate(&mut self, id: usize, grad: &Tensor<T>) -> Result<()> {
        // The op is moved out and restored to appease the borrow checker on
        // self.accumulate calls.
        let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf { trainable: false });
        match &op {
            Op::Leaf { .. } => {}
            Op::Matmul(a, b) => {
                let (ar, ac) = self.value(*a).shape();
                let (_, bc) = self.value(*b).shape();
                // dA = dY . B^T
                let bt = transpose_raw(self.value(*b));
                let mut da = Tensor::zeros(ar, ac);
                T::gemm(ar, bc, ac, grad.data(), bt.data(), da.data_mut());
                // dB = A^T . dY
                let at = transpose_raw(self.value(*a));
                let mut db = Tensor::zeros(ac, bc);
                T::gemm(ac, ar, bc, at.data(), grad.data(), db.data_mut());
                self.accumulate(*a, da);
                self.accumulate(*b, db);
            }
            Op::Add(a, b) => {
                self.accumulate(*a, grad.clone());
                self.accumulate(*b, grad.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, grad.clone());
                self.accumulate(*b, grad.map(|x| -x));
            }
            Op::Scale(a, factor) => {
                let f = T::from_f64(*factor);
                self.accumulate(*a, grad.map(|x| x * f));
            }
            Op::Transpose(a) => {
                self.accumulate(*a, transpose_raw(grad));
            }
            Op::GatherRows(a, indices) => {
                let (rows, cols) = self.value(*a).shape();
                let mut da = Tensor::zeros(rows, cols);
                for (i, &idx) in indices.iter().enumerate() {
                    let dst = da.row_mut(idx);
                    for (d, &g) in dst.iter_mut().zip(grad.row(i)) {
                        *d += g;
                    }
                }
                self.accumulate(*a, da);
            }
            Op::SliceRows(a, start) => {
                let (rows, cols) = self.value(*a).shape();
                let mut da = Tensor::zeros(rows, cols);
                let len = grad.rows();
                da.data_mut()[start * cols..(start + len) * cols].copy_from_slice(grad.data());
                self.accumulate(*a, da);
            }
            Op::SliceCols(a, start) => {
                let (rows, cols) = self.value(*a).shape();
                let mut da = Tensor::zeros(rows, cols);
                for i in 0..rows {
                    da.row_mut(i)[*start..start + grad.cols()].copy_from_slice(grad.row(i));
                }
                self.accumulate(*a, da);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pr = self.value(p).rows();
                    let cols = self.value(p).cols();
                    let mut dp = Tensor::zeros(pr, cols);
                    dp.data_mut()
                        .copy_from_slice(&grad.data()[offset * cols..(offset + pr) * cols]);
                    offset += pr;
                    self.accumulate(p, dp);
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (rows, pc) = self.value(p).shape();
                    let mut dp = Tensor::zeros(rows, pc);
                    for i in 0..rows {
                        dp.row_mut(i).copy_from_slice(&grad.row(i)[offset..offset + pc]);
                    }
                    offset += pc;
                    self.accumulate(p, dp);
                }
            }
            Op::BlockTranspose(a, block_rows) => {
                // Inverse permutation is a block transpose with the block
                // sizes swapped.
                let cols = self.value(*a).cols();
                let da = block_transpose_raw(grad, cols);
                debug_assert_eq!(da.shape(), self.value(*a).shape());
                let _ = block_rows;
                self.accumulate(*a, da);
            }
            Op::BlockPoolRows(a, block, weights) => {
                let (rows, cols) = self.value(*a).shape();
                let mut da = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    let w = weights[r];
                    let src = grad.row(r / block);
                    for (d, &g) in da.row_mut(r).iter_mut().zip(src) {
                        *d += w * g;
                    }
                }
                self.accumulate(*a, da);
            }
            Op::MeanRows(a) => {
                let (rows, cols) = self.value(*a).shape();
                let inv = T::from_f64(1.0 / rows as f64);
                let mut da = Tensor::zeros(rows, cols);
                for i in 0..rows {
                    for (d, &g) in da.row_mut(i).iter_mut().zip(grad.row(0)) {
                        *d = inv * g;
                    }
                }
                self.accumulate(*a, da);
            }
            Op::Softmax(a) => {
                // dx = y * (dy - <dy, y>) per row
                let y = &self.nodes[id].value;
                let (rows, cols) = y.shape();
                let mut da = Tensor::zeros(rows, cols);
                for i in 0..rows {
                    let dotv = dot(grad.row(i), y.row(i));
                    for j in 0..cols {
                        da.set(i, j, y.get(i, j) * (grad.get(i, j) - dotv));
                    }
                }
                self.accumulate(*a, da);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let (rows, cols) = self.value(*x).shape();
                let e = T::from_f64(*eps);
                let n = T::from_f64(cols as f64);
                let mut dx = Tensor::zeros(rows, cols);
                let mut dgain = Tensor::zeros(1, cols);
                let mut dbias = Tensor::zeros(1, cols);
                for i in 0..rows {
                    let row = self.value(*x).row(i);
                    let (mean, var) = mean_var(row);
                    let inv_std = (var + e).sqrt().recip();
                    // dxhat = dy * gain; reduce the two LN coupling terms.
                    let mut sum_dxhat = T::zero();
                    let mut sum_dxhat_xhat = T::zero();
                    for j in 0..cols {
                        let xhat = (row[j] - mean) * inv_std;
                        let dy = grad.get(i, j);
                        let dxhat = dy * self.value(*gain).get(0, j);
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                        dgain.set(0, j, dgain.get(0, j) + dy * xhat);
                        dbias.set(0, j, dbias.get(0, j) + dy);
                    }
                    for j in 0..cols {
                        let xhat = (row[j] - mean) * inv_std;
                        let dxhat = grad.get(i, j) * self.value(*gain).get(0, j);
                        let v = inv_std * (dxhat - sum_dxhat / n - xhat * sum_dxhat_xhat / n);
                        dx.set(i, j, v);
                    }
                }
                self.accumulate(*x, dx);
                self.accumulate(*gain, dgain);
                self.accumulate(*bias, dbias);
            }
            Op::Gelu(a) => {
                let x = self.value(*a).clone();
                let mut da = Tensor::zeros(x.rows(), x.cols());
                for (i, (&xv, d)) in x.data().iter().zip(da.data_mut().iter_mut()).enumerate() {
                    let g = grad.data()[i];
                    *d = g * gelu_grad_scalar(xv);
                }
                self.accumulate(*a, da);
            }
            Op::BlockAttnScores { q, k, block, scale } => {
                let (rows, dim) = self.value(*q).shape();
                let s = T::from_f64(*scale);
                let mut dq = Tensor::zeros(rows, dim);
                let mut dk = Tensor::zeros(rows, dim);
                for i in 0..rows {
                    let base = (i / block) * block;
                    for j in 0..*block {
                        let g = s * grad.get(i, j);
                        for c in 0..dim {
                            let vq = dq.get(i, c) + g * self.value(*k).get(base + j, c);
                            dq.set(i, c, vq);
                            let vk = dk.get(base + j, c) + g * self.value(*q).get(i, c);
                            dk.set(base + j, c, vk);
                        }
                    }
                }
                self.accumulate(*q, dq);
                self.accumulate(*k, dk);
            }
            Op::BlockAttnCombine { weights, values, block } => {
                let (rows, dim) = self.value(*values).shape();
                let mut dw = Tensor::zeros(rows, *block);
                let mut dv = Tensor::zeros(rows, dim);
                for i in 0..rows {
                    let base = (i / block) * block;
                    for j in 0..*block {
                        let mut acc = T::zero();
                        let w = self.value(*weights).get(i, j);
                        for c in 0..dim {
                            acc += grad.get(i, c) * self.value(*values).get(base + j, c);
                            let v = dv.get(base + j, c) + w * grad.get(i, c);
                            dv.set(base + j, c, v);
                        }
                        dw.set(i, j, acc);
                    }
                }
                self.accumulate(*weights, dw);
                self.accumulate(*values, dv);
            }
            Op::CrossEntropy { logits, targets, reduction } => {
                let (rows, cols) = self.value(*logits).shape();
                let upstream = grad.get(0, 0);
                let w = match reduction {
                    Reduction::Mean => upstream * T::from_f64(1.0 / rows as f64),
                    Reduction::Sum => upstream,
                };
                let mut dl = Tensor::zeros(rows, cols);
                for (i, &t) in targets.iter().enumerate() {
                    softmax_row(self.value(*logits).row(i), dl.row_mut(i));
                    for (j, d) in dl.row_mut(i).iter_mut().enumerate() {
                        let indicator = if j == t { T::one() } else { T::zero() };
                        *d = (*d - indicator) * w;
                    }
                }
                self.accumulate(*logits, dl);
            }
        }
        self.nodes[id].op = op;
        Ok(())
    }
}

// ----------------------------------------------------------------------
// Scalar helpers shared by forward and backward
// ----------------------------------------------------------------------

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b.iter()) {
        acc += x * y;
    }
    acc
}

fn mean_var<T: Scalar>(row: &[T]) -> (T, T) {
    let n = T::from_f64(row.len() as f64);
    let mut mean = T::zero();
    for &x in row {
        mean += x;
    }
    mean /= n;
    let mut var = T::zero();
    for &x in row {
        let d = x - mean;
        var += d * d;
    }
    var /= n;
    (mean, var)
}

fn softmax_row<T: Scalar>(input: &[T], output: &mut [T]) {
    let mut max = input[0];
    for &x in input.iter() {
        if x > max {
            max = x;
        }
    }
    let mut sum = T::zero();
    for (o, &x) in output.iter_mut().zip(input.iter()) {
        let e = (x - max).exp();
        *o = e;
        sum += e;
    }
    let inv = sum.recip();
    for o in output.iter_mut() {
        *o *= inv;
    }
}

fn log_sum_exp<T: Scalar>(row: &[T]) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for &x in row {
        max = max.max(x.to_f64());
    }
    let mut sum = 0.0f64;
    for &x in row {
        sum += (x.to_f64() - max).exp();
    }
    max + sum.ln()
}

#[inline]
fn gelu_scalar<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    x * half * (T::one() + (x * inv_sqrt2).erf())
}

#[inline]
fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    let inv_sqrt_2pi = T::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    let phi_cdf = half * (T::one() + (x * inv_sqrt2).erf());
    let phi_pdf = inv_sqrt_2pi * (-(x * x) * half).exp();
    phi_cdf + x * phi_pdf
}

fn transpose_raw<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let (r, c) = a.shape();
    let mut out = Tensor::zeros(c, r);
    for i in 0..r {
        for j in 0..c {
            out.set(j, i, a.get(i, j));
        }
    }
    out
}

fn block_transpose_raw<T: Scalar>(a: &Tensor<T>, block_rows: usize) -> Tensor<T> {
    let (rows, cols) = a.shape();
    debug_assert_eq!(rows % block_rows, 0);
    let blocks = rows / block_rows;
    let mut out = Tensor::zeros(blocks * cols, block_rows);
    for b in 0..blocks {
        for i in 0..block_rows {
            for j in 0..cols {
                out.set(b * cols + j, i, a.get(b * block_rows + i, j));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, GradCheckSettings, ParameterGroup};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor<f64> {
        let data = (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect();
        Tensor::new(rows, cols, data).unwrap()
    }

    /// Reduce any matrix to a scalar through a fixed nonlinear probe so that
    /// every coordinate of the op output carries a distinct gradient.
    fn probe(g: &mut Graph<f64>, v: Var, noise: &Tensor<f64>) -> Var {
        let shift = g.constant(noise);
        let shifted = g.add(v, shift).unwrap();
        let bent = g.gelu(shifted).unwrap();
        let col_mean = g.mean_rows(bent).unwrap();
        let t = g.transpose(col_mean).unwrap();
        g.mean_rows(t).unwrap()
    }

    /// Gradient-check one op builder against central differences on every
    /// input coordinate.
    fn check_op(
        inputs: &[(&str, Tensor<f64>)],
        build: impl Fn(&mut Graph<f64>, &[Var]) -> Var,
    ) -> f64 {
        let mut params = ParameterGroup::new();
        for (n, t) in inputs {
            params.push(*n, t.clone(), true);
        }

        // Output shape determines the probe noise, drawn once.
        let out_shape = {
            let mut g = Graph::new();
            let vars: Vec<Var> = params.entries().iter().map(|e| g.leaf(&e.tensor)).collect();
            let out = build(&mut g, &vars);
            g.value(out).shape()
        };
        let mut noise_rng = ChaCha8Rng::seed_from_u64(0xBEEF);
        let noise = rand_tensor(&mut noise_rng, out_shape.0, out_shape.1, 0.8);

        let eval = |p: &ParameterGroup<f64>| -> crate::error::Result<f64> {
            let mut g = Graph::new();
            let vars: Vec<Var> = p.entries().iter().map(|e| g.leaf(&e.tensor)).collect();
            let out = build(&mut g, &vars);
            let loss = probe(&mut g, out, &noise);
            Ok(g.value(loss).item()?)
        };

        let analytic = {
            let mut g = Graph::new();
            let vars: Vec<Var> = params.entries().iter().map(|e| g.leaf(&e.tensor)).collect();
            let out = build(&mut g, &vars);
            let loss = probe(&mut g, out, &noise);
            g.backward(loss).unwrap();
            let mut grads = ParameterGroup::new();
            for (entry, var) in params.entries().iter().zip(&vars) {
                grads.push(entry.name.clone(), g.grad(*var).unwrap().clone(), true);
            }
            grads
        };

        let report = grad_check(eval, &analytic, &mut params, &GradCheckSettings::default())
            .unwrap();
        assert!(
            report.passed(),
            "max rel err {:.3e} at {}",
            report.max_rel_err,
            report.worst
        );
        report.max_rel_err
    }

    #[test]
    fn grad_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor(&mut rng, 3, 4, 1.0);
        let b = rand_tensor(&mut rng, 4, 5, 1.0);
        check_op(&[("a", a), ("b", b)], |g, v| g.matmul(v[0], v[1]).unwrap());
    }

    #[test]
    fn grad_add_sub_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_tensor(&mut rng, 2, 3, 1.0);
        let b = rand_tensor(&mut rng, 2, 3, 1.0);
        check_op(&[("a", a.clone()), ("b", b.clone())], |g, v| {
            g.add(v[0], v[1]).unwrap()
        });
        check_op(&[("a", a.clone()), ("b", b)], |g, v| g.sub(v[0], v[1]).unwrap());
        check_op(&[("a", a)], |g, v| g.scale(v[0], -1.7).unwrap());
    }

    #[test]
    fn grad_transpose_and_slices() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_tensor(&mut rng, 4, 6, 1.0);
        check_op(&[("a", a.clone())], |g, v| g.transpose(v[0]).unwrap());
        check_op(&[("a", a.clone())], |g, v| g.slice_rows(v[0], 1, 2).unwrap());
        check_op(&[("a", a)], |g, v| g.slice_cols(v[0], 2, 3).unwrap());
    }

    #[test]
    fn grad_gather_rows_with_repeats() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = rand_tensor(&mut rng, 5, 3, 1.0);
        check_op(&[("a", a)], |g, v| {
            g.gather_rows(v[0], &[0, 2, 2, 4, 0]).unwrap()
        });
    }

    #[test]
    fn grad_concat() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = rand_tensor(&mut rng, 2, 3, 1.0);
        let b = rand_tensor(&mut rng, 4, 3, 1.0);
        check_op(&[("a", a.clone()), ("b", b)], |g, v| {
            g.concat_rows(&[v[0], v[1]]).unwrap()
        });
        let c = rand_tensor(&mut rng, 2, 5, 1.0);
        check_op(&[("a", a), ("c", c)], |g, v| {
            g.concat_cols(&[v[0], v[1]]).unwrap()
        });
    }

    #[test]
    fn grad_block_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = rand_tensor(&mut rng, 6, 4, 1.0); // two blocks of 3 rows
        check_op(&[("a", a.clone())], |g, v| g.block_transpose(v[0], 3).unwrap());

        let weights = [0.5, 0.25, 0.0, 0.3, 0.3, 0.4];
        check_op(&[("a", a.clone())], move |g, v| {
            g.block_pool_rows(v[0], 3, &weights).unwrap()
        });
        check_op(&[("a", a)], |g, v| g.mean_rows(v[0]).unwrap());
    }

    #[test]
    fn grad_softmax_gelu() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = rand_tensor(&mut rng, 3, 5, 2.0);
        check_op(&[("a", a.clone())], |g, v| g.softmax(v[0]).unwrap());
        check_op(&[("a", a)], |g, v| g.gelu(v[0]).unwrap());
    }

    #[test]
    fn grad_layer_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_tensor(&mut rng, 3, 6, 2.0);
        let gain = rand_tensor(&mut rng, 1, 6, 1.0);
        let bias = rand_tensor(&mut rng, 1, 6, 1.0);
        check_op(&[("x", x), ("gain", gain), ("bias", bias)], |g, v| {
            g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap()
        });
    }

    #[test]
    fn grad_block_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q = rand_tensor(&mut rng, 8, 3, 1.0); // two 4-token blocks
        let k = rand_tensor(&mut rng, 8, 3, 1.0);
        check_op(&[("q", q.clone()), ("k", k.clone())], |g, v| {
            g.block_attn_scores(v[0], v[1], 4, 0.5).unwrap()
        });

        let w = {
            let mut g = Graph::new();
            let raw = g.leaf(&rand_tensor(&mut rng, 8, 4, 1.0));
            let sm = g.softmax(raw).unwrap();
            g.value(sm).clone()
        };
        let v_in = rand_tensor(&mut rng, 8, 3, 1.0);
        check_op(&[("w", w), ("v", v_in)], |g, v| {
            g.block_attn_combine(v[0], v[1], 4).unwrap()
        });
    }

    #[test]
    fn grad_cross_entropy_both_reductions() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let logits = rand_tensor(&mut rng, 4, 7, 2.0);
        let targets = [3usize, 0, 6, 1];
        check_op(&[("l", logits.clone())], move |g, v| {
            g.cross_entropy(v[0], &targets, Reduction::Mean).unwrap()
        });
        check_op(&[("l", logits)], move |g, v| {
            g.cross_entropy(v[0], &targets, Reduction::Sum).unwrap()
        });
    }

    // ------------------------------------------------------------------
    // Forward oracles
    // ------------------------------------------------------------------

    #[test]
    fn matmul_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_tensor(&mut rng, 3, 4, 1.0);
        let mut eye = Tensor::zeros(3, 3);
        for i in 0..3 {
            eye.set(i, i, 1.0);
        }
        let mut g = Graph::new();
        let xi = g.constant(&x);
        let ii = g.constant(&eye);
        let y = g.matmul(ii, xi).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn transpose_involution() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = rand_tensor(&mut rng, 3, 5, 1.0);
        let mut g = Graph::new();
        let xi = g.constant(&x);
        let t = g.transpose(xi).unwrap();
        let tt = g.transpose(t).unwrap();
        assert_eq!(g.value(tt), &x);
    }

    #[test]
    fn mean_of_identical_rows_is_that_row() {
        let row = vec![0.3, -1.2, 2.5];
        let data: Vec<f64> = row.iter().cycle().take(9).copied().collect();
        let x = Tensor::new(3, 3, data).unwrap();
        let mut g = Graph::new();
        let xi = g.constant(&x);
        let m = g.mean_rows(xi).unwrap();
        for (got, want) in g.value(m).data().iter().zip(&row) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(&Tensor::row_vector(vec![0.0, 0.0]));
        let y = g.softmax(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);

        let x = g.constant(&Tensor::row_vector(vec![1000.0, 0.0]));
        let y = g.softmax(x).unwrap();
        assert!(g.value(y).is_finite_all());
        assert!((g.value(y).get(0, 0) - 1.0).abs() < 1e-12);
        assert!(g.value(y).get(0, 1) < 1e-12);
    }

    #[test]
    fn softmax_matches_direct_evaluation() {
        // Independent route: plain exp / sum without max subtraction.
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x: Vec<f64> = (0..7).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let direct: Vec<f64> = {
            let sum: f64 = x.iter().map(|v| v.exp()).sum();
            x.iter().map(|v| v.exp() / sum).collect()
        };
        let mut g = Graph::new();
        let xi = g.constant(&Tensor::row_vector(x));
        let y = g.softmax(xi).unwrap();
        for (a, b) in g.value(y).data().iter().zip(&direct) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = rand_tensor(&mut rng, 20, 9, 30.0);
        let mut g = Graph::new();
        let xi = g.constant(&x);
        let y = g.softmax(xi).unwrap();
        for i in 0..20 {
            let sum: f64 = g.value(y).row(i).iter().sum();
            assert!((sum - 1.0).abs() <= 1e-6);
        }
    }

    fn ln_unit(g: &mut Graph<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let cols = x.cols();
        let xi = g.constant(x);
        let gain = g.constant(&Tensor::filled(1, cols, 1.0));
        let bias = g.constant(&Tensor::zeros(1, cols));
        let y = g.layer_norm(xi, gain, bias, 1e-5).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut g = Graph::new();
        let y = ln_unit(&mut g, &Tensor::row_vector(vec![3.7, 3.7, 3.7]));
        for &v in y.data() {
            // The mean of three equal values is not bit-exact, so the
            // epsilon-guarded output is only numerically zero.
            assert!(v.abs() < 1e-9, "{v}");
        }
    }

    #[test]
    fn layer_norm_standardizes() {
        let mut g = Graph::new();
        let y = ln_unit(&mut g, &Tensor::row_vector(vec![1.0, 2.0, 3.0]));
        let mean: f64 = y.data().iter().sum::<f64>() / 3.0;
        let var: f64 = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
        assert!(mean.abs() <= 1e-6);
        assert!((var - 1.0).abs() <= 1e-4);
    }

    #[test]
    fn layer_norm_matches_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x: Vec<f64> = (0..11).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let mean: f64 = x.iter().sum::<f64>() / 11.0;
        let var: f64 = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 11.0;
        let expected: Vec<f64> = x.iter().map(|v| (v - mean) / (var + 1e-5).sqrt()).collect();

        let mut g = Graph::new();
        let y = ln_unit(&mut g, &Tensor::row_vector(x));
        for (a, b) in y.data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn layer_norm_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let x: Vec<f64> = (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let shifted: Vec<f64> = x.iter().map(|v| v + 13.5).collect();
        let mut g = Graph::new();
        let a = ln_unit(&mut g, &Tensor::row_vector(x));
        let b = ln_unit(&mut g, &Tensor::row_vector(shifted));
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() <= 1e-6);
        }
    }

    /// Standard normal CDF by Simpson quadrature, independent of erf.
    fn normal_cdf_quadrature(x: f64) -> f64 {
        let steps = 20_000usize;
        let lo = -12.0f64;
        let h = (x - lo) / steps as f64;
        let pdf = |t: f64| (-t * t / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mut acc = pdf(lo) + pdf(x);
        for i in 1..steps {
            let t = lo + i as f64 * h;
            acc += pdf(t) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        acc * h / 3.0
    }

    #[test]
    fn gelu_fixed_points_and_quadrature() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(&Tensor::row_vector(vec![0.0, 10.0, 1.0]));
        let y = g.gelu(x).unwrap();
        assert_eq!(g.value(y).get(0, 0), 0.0);
        assert!((g.value(y).get(0, 1) - 10.0).abs() <= 1e-6);
        let expected = 1.0 * normal_cdf_quadrature(1.0);
        assert!((g.value(y).get(0, 2) - expected).abs() <= 1e-8);
    }

    #[test]
    fn cross_entropy_uniform_and_confident() {
        let mut g: Graph<f64> = Graph::new();
        let n = 23;
        let x = g.constant(&Tensor::zeros(1, n));
        let loss = g.cross_entropy(x, &[7], Reduction::Mean).unwrap();
        assert!((g.value(loss).item().unwrap() - (n as f64).ln()).abs() <= 1e-9);

        let mut conf = Tensor::zeros(1, 5);
        conf.set(0, 2, 200.0);
        let x = g.constant(&conf);
        let loss = g.cross_entropy(x, &[2], Reduction::Mean).unwrap();
        let v = g.value(loss).item().unwrap();
        assert!(v >= 0.0 && v <= 1e-12);
    }

    #[test]
    fn cross_entropy_matches_softmax_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x: Vec<f64> = (0..11).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let target = 5usize;
        let sum: f64 = x.iter().map(|v| v.exp()).sum();
        let expected = -(x[target].exp() / sum).ln();

        let mut g = Graph::new();
        let xi = g.constant(&Tensor::row_vector(x));
        let loss = g.cross_entropy(xi, &[target], Reduction::Mean).unwrap();
        assert!((g.value(loss).item().unwrap() - expected).abs() < 1e-10);
    }

    #[test]
    fn cross_entropy_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let x: Vec<f64> = (0..9).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let shifted: Vec<f64> = x.iter().map(|v| v + 42.0).collect();
        let mut g: Graph<f64> = Graph::new();
        let a = g.constant(&Tensor::row_vector(x));
        let b = g.constant(&Tensor::row_vector(shifted));
        let la = g.cross_entropy(a, &[4], Reduction::Mean).unwrap();
        let lb = g.cross_entropy(b, &[4], Reduction::Mean).unwrap();
        let (va, vb) = (g.value(la).item().unwrap(), g.value(lb).item().unwrap());
        assert!((va - vb).abs() <= 1e-9);
    }

    #[test]
    fn cross_entropy_rejects_bad_target() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(&Tensor::zeros(1, 4));
        let err = g.cross_entropy(x, &[4], Reduction::Mean).unwrap_err();
        assert!(matches!(err, Error::IndexOutOfRange { .. }));
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.constant(&Tensor::zeros(2, 3));
        let b = g.constant(&Tensor::zeros(2, 3));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3"), "{msg}");
    }

    #[test]
    fn overflow_trips_numeric_error() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.constant(&Tensor::row_vector(vec![1e308]));
        let err = g.scale(a, 10.0).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.leaf(&Tensor::zeros(2, 2));
        let err = g.backward(a).unwrap_err();
        assert!(matches!(err, Error::NotScalar { .. }));
    }

    #[test]
    fn non_participating_leaf_gets_zero_gradient() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.leaf(&Tensor::row_vector(vec![2.0]));
        let unused = g.leaf(&Tensor::row_vector(vec![5.0, 5.0]));
        let loss = g.scale(a, 3.0).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(a).unwrap().get(0, 0), 3.0);
        assert_eq!(g.grad(unused).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn degenerate_single_token_attention_returns_value_row() {
        // Block size 1: each row attends only to itself, so the output is
        // exactly its value projection.
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let q = rand_tensor(&mut rng, 3, 4, 1.0);
        let k = rand_tensor(&mut rng, 3, 4, 1.0);
        let v = rand_tensor(&mut rng, 3, 4, 1.0);
        let mut g = Graph::new();
        let (qi, ki, vi) = (g.constant(&q), g.constant(&k), g.constant(&v));
        let scores = g.block_attn_scores(qi, ki, 1, 0.5).unwrap();
        let w = g.softmax(scores).unwrap();
        let out = g.block_attn_combine(w, vi, 1).unwrap();
        assert_eq!(g.value(out), &v);
    }
}
