//! Wengert-list reverse-mode autodiff.
//!
//! Every primitive appends a node holding its output value and enough saved
//! state to replay the vector-Jacobian product. Nodes are appended in
//! evaluation order, so a single reverse sweep visits each one exactly once.

use std::sync::Arc;

use crate::error::{shape_err, Error, Result};
use crate::numeric::{kernels, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow { a: Var, bias: Var },
    MulCol { a: Var, g: Var },
    Relu(Var),
    Tanh(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Bilinear { map: Var, pos: Var },
    Sum(Var),
    Mean(Var),
    ConcatCols(Vec<Var>),
    SliceCols { a: Var, start: usize },
    ConcatRows(Vec<Var>),
    GatherRows { a: Var, idx: Vec<usize> },
    ScatterRows { a: Var, idx: Vec<usize> },
    Reshape(Var),
    Attention { q: Var, k: Var, v: Var, seq: usize, probs: Vec<f64> },
    GroupWeightedSum { x: Var, w: Var },
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of primitive operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

/// Bilinear interpolation stencil for one fractional position.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Stencil {
    pub r0: usize,
    pub r1: usize,
    pub c0: usize,
    pub c1: usize,
    pub fr: f64,
    pub fc: f64,
    /// Whether the row/col coordinate was inside the grid (so it has a gradient).
    pub row_live: bool,
    pub col_live: bool,
}

impl Stencil {
    /// Clamps `(row, col)` to `[0, h-1] x [0, w-1]` and locates the four corners.
    pub(crate) fn new(h: usize, w: usize, row: f64, col: f64) -> Self {
        let (r0, r1, fr, row_live) = axis_stencil(h, row);
        let (c0, c1, fc, col_live) = axis_stencil(w, col);
        Self { r0, r1, c0, c1, fr, fc, row_live, col_live }
    }

    pub(crate) fn weights(&self) -> [(usize, usize, f64); 4] {
        let (fr, fc) = (self.fr, self.fc);
        [
            (self.r0, self.c0, (1.0 - fr) * (1.0 - fc)),
            (self.r0, self.c1, (1.0 - fr) * fc),
            (self.r1, self.c0, fr * (1.0 - fc)),
            (self.r1, self.c1, fr * fc),
        ]
    }
}

fn axis_stencil(n: usize, x: f64) -> (usize, usize, f64, bool) {
    if n == 1 {
        return (0, 0, 0.0, false);
    }
    let hi = (n - 1) as f64;
    let live = (0.0..=hi).contains(&x);
    let xc = x.clamp(0.0, hi);
    let i0 = (xc.floor() as usize).min(n - 2);
    (i0, i0 + 1, xc - i0 as f64, live)
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

    fn push(&mut self, value: Tensor, inputs_rg: bool, op: Op) -> Var {
        self.push_shared(Arc::new(value), inputs_rg, op)
    }

    fn push_shared(&mut self, value: Arc<Tensor>, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { value, requires_grad, op });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Records a leaf that shares storage with the caller.
    pub fn leaf_shared(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        self.push_shared(value, requires_grad, Op::Leaf)
    }

    /// Records a non-trainable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient accumulated by the last [`Tape::backward`], if `v` received one.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads[v.0].as_ref()?;
        Some(Tensor::new(self.shape(v).to_vec(), g.clone()).expect("grad matches value shape"))
    }

    /// Gradient of `v`, or zeros when nothing flowed into it.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v).unwrap_or_else(|| Tensor::zeros(self.shape(v)))
    }

    pub fn reset_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
        self.backward_done = false;
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.value(v)
            .dims2()
            .map_err(|_| shape_err(op, format!("expected a matrix, got {:?}", self.shape(v))))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    /// `a [m x k] * b [k x n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a [m x k] * b^T` with `b` stored as `[n x k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let op = if trans_b { "matmul_nt" } else { "matmul" };
        let (m, k) = self.dims2(a, op)?;
        let (br, bc) = self.dims2(b, op)?;
        let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(shape_err(op, format!("{:?} x {:?}", self.shape(a), self.shape(b))));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), trans_b, &mut out, 0.0);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, rg, Op::MatMul { a, b, trans_b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, rg, Op::Sub(a, b)))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).scale(c);
        let rg = self.rg(a);
        self.push(out, rg, Op::Scale(a, c))
    }

    /// Adds `bias` (length = last axis) to every slice of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let d = self.value(a).last_dim();
        if self.value(bias).len() != d {
            return Err(shape_err("add_row", format!("{:?} + {:?}", self.shape(a), self.shape(bias))));
        }
        let b = self.value(bias).data();
        let mut out = self.value(a).clone();
        for chunk in out.data_mut().chunks_mut(d) {
            for (o, bb) in chunk.iter_mut().zip(b) {
                *o += bb;
            }
        }
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(out, rg, Op::AddRow { a, bias }))
    }

    /// Scales row `i` of matrix `a` by `g[i]`.
    pub fn mul_col(&mut self, a: Var, g: Var) -> Result<Var> {
        let (rows, cols) = self.dims2(a, "mul_col")?;
        if self.value(g).len() != rows {
            return Err(shape_err("mul_col", format!("{:?} * {:?}", self.shape(a), self.shape(g))));
        }
        let gv = self.value(g).data();
        let mut out = self.value(a).clone();
        for (chunk, &s) in out.data_mut().chunks_mut(cols).zip(gv) {
            for o in chunk {
                *o *= s;
            }
        }
        let rg = self.rg(a) || self.rg(g);
        Ok(self.push(out, rg, Op::MulCol { a, g }))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        let rg = self.rg(a);
        self.push(out, rg, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let rg = self.rg(a);
        self.push(out, rg, Op::Tanh(a))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let out = softmax_last(self.value(a), None);
        let rg = self.rg(a);
        self.push(out, rg, Op::Softmax(a))
    }

    /// Softmax over the last axis restricted to entries where `mask` is true;
    /// masked entries are exactly zero and receive no gradient.
    pub fn masked_softmax(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        if mask.len() != self.value(a).len() {
            return Err(shape_err("masked_softmax", "mask length differs from input"));
        }
        let out = softmax_last(self.value(a), Some(mask));
        let rg = self.rg(a);
        Ok(self.push(out, rg, Op::Softmax(a)))
    }

    /// Layer normalization over the last axis with population variance.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(shape_err(
                "layer_norm",
                format!("input {:?}, gain {:?}, bias {:?}", self.shape(x), self.shape(gain), self.shape(bias)),
            ));
        }
        if eps <= 0.0 {
            return Err(Error::InvalidArgument(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = Vec::with_capacity(xv.outer_len());
        let mut out = vec![0.0; xv.len()];
        for (s, chunk) in xv.data().chunks(d).enumerate() {
            let mean = chunk.iter().sum::<f64>() / d as f64;
            let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            for j in 0..d {
                let xh = (chunk[j] - mean) * r;
                xhat[s * d + j] = xh;
                out[s * d + j] = xh * g[j] + b[j];
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(out, rg, Op::LayerNorm { x, gain, bias, xhat, rstd }))
    }

    /// Bilinearly samples `map [H x W x C]` at fractional `(row, col)` positions
    /// `pos [N x 2]` (or a single `[2]`), clamping to the grid. Output `[N x C]`
    /// (or `[C]`).
    pub fn bilinear_sample(&mut self, map: Var, pos: Var) -> Result<Var> {
        let (h, w, c) = match self.shape(map) {
            [h, w, c] => (*h, *w, *c),
            s => return Err(shape_err("bilinear_sample", format!("map must be H x W x C, got {s:?}"))),
        };
        let single = self.shape(pos) == [2];
        let n = match self.shape(pos) {
            [2] => 1,
            [n, 2] => *n,
            s => return Err(shape_err("bilinear_sample", format!("positions must be N x 2, got {s:?}"))),
        };
        let m = self.value(map).data();
        let p = self.value(pos).data();
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            let st = Stencil::new(h, w, p[2 * i], p[2 * i + 1]);
            let o = &mut out[i * c..(i + 1) * c];
            for (r, cc, wgt) in st.weights() {
                let src = &m[(r * w + cc) * c..(r * w + cc + 1) * c];
                for (oo, s) in o.iter_mut().zip(src) {
                    *oo += wgt * s;
                }
            }
        }
        let shape = if single { vec![c] } else { vec![n, c] };
        let rg = self.rg(map) || self.rg(pos);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::Bilinear { map, pos }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len().max(1) as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), rg, Op::Mean(a))
    }

    /// Mean squared error between same-shape tensors.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let d = self.sub(pred, target)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| shape_err("concat_cols", "no inputs"))?;
        let (rows, _) = self.dims2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_cols")?;
            if r != rows {
                return Err(shape_err("concat_cols", format!("row counts {rows} vs {r}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &wd) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..rows {
                out[r * total + off..r * total + off + wd].copy_from_slice(&src[r * wd..(r + 1) * wd]);
            }
            off += wd;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(vec![rows, total], out)?, rg, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims2(a, "slice_cols")?;
        if start + len > cols {
            return Err(shape_err("slice_cols", format!("{start}+{len} > {cols}")));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![rows, len], out)?, rg, Op::SliceCols { a, start }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| shape_err("concat_rows", "no inputs"))?;
        let (_, cols) = self.dims2(first, "concat_rows")?;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_rows")?;
            if c != cols {
                return Err(shape_err("concat_rows", format!("column counts {cols} vs {c}")));
            }
            out.extend_from_slice(self.value(p).data());
            rows += r;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(vec![rows, cols], out)?, rg, Op::ConcatRows(parts.to_vec())))
    }

    /// Row gather: `out[i] = a[idx[i]]`.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = self.dims2(a, "gather_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(shape_err("gather_rows", format!("row {bad} out of {rows}")));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            out.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(vec![idx.len(), cols], out)?,
            rg,
            Op::GatherRows { a, idx: idx.to_vec() },
        ))
    }

    /// Row scatter-add into `n_rows` zero rows: `out[idx[i]] += a[i]`.
    pub fn scatter_rows(&mut self, a: Var, idx: &[usize], n_rows: usize) -> Result<Var> {
        let (rows, cols) = self.dims2(a, "scatter_rows")?;
        if idx.len() != rows {
            return Err(shape_err("scatter_rows", format!("{} indices for {rows} rows", idx.len())));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n_rows) {
            return Err(shape_err("scatter_rows", format!("row {bad} out of {n_rows}")));
        }
        let src = self.value(a).data();
        let mut out = vec![0.0; n_rows * cols];
        for (i, &dst) in idx.iter().enumerate() {
            for (o, s) in out[dst * cols..(dst + 1) * cols].iter_mut().zip(&src[i * cols..(i + 1) * cols]) {
                *o += s;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(vec![n_rows, cols], out)?,
            rg,
            Op::ScatterRows { a, idx: idx.to_vec() },
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape.to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(out, rg, Op::Reshape(a)))
    }

    /// Scaled dot-product self-attention applied independently to each block
    /// of `seq` consecutive rows.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, seq: usize) -> Result<Var> {
        self.same_shape(q, k, "attention")?;
        self.same_shape(q, v, "attention")?;
        let (rows, d) = self.dims2(q, "attention")?;
        if seq == 0 || rows % seq != 0 {
            return Err(shape_err("attention", format!("{rows} rows not divisible by seq {seq}")));
        }
        let scale = 1.0 / (d as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; rows * seq];
        let mut out = vec![0.0; rows * d];
        for g in 0..rows / seq {
            let blk = g * seq * d..(g + 1) * seq * d;
            let p = &mut probs[g * seq * seq..(g + 1) * seq * seq];
            kernels::gemm(seq, d, seq, &qd[blk.clone()], false, &kd[blk.clone()], true, p, 0.0);
            for row in p.chunks_mut(seq) {
                let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for x in row.iter_mut() {
                    *x = ((*x - mx) * scale).exp();
                    z += *x;
                }
                for x in row.iter_mut() {
                    *x /= z;
                }
            }
            kernels::gemm(seq, seq, d, p, false, &vd[blk.clone()], false, &mut out[blk], 0.0);
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(Tensor::new(vec![rows, d], out)?, rg, Op::Attention { q, k, v, seq, probs }))
    }

    /// `out[n] = sum_k w[n, k] * x[n * K + k]` for `x [(N*K) x C]`, `w [N x K]`.
    pub fn group_weighted_sum(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xr, c) = self.dims2(x, "group_weighted_sum")?;
        let (n, kk) = self.dims2(w, "group_weighted_sum")?;
        if xr != n * kk {
            return Err(shape_err("group_weighted_sum", format!("{xr} rows vs {n} x {kk} weights")));
        }
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            let o = &mut out[i * c..(i + 1) * c];
            for j in 0..kk {
                let wt = wd[i * kk + j];
                let src = &xd[(i * kk + j) * c..(i * kk + j + 1) * c];
                for (oo, s) in o.iter_mut().zip(src) {
                    *oo += wt * s;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(Tensor::new(vec![n, c], out)?, rg, Op::GroupWeightedSum { x, w }))
    }

    fn acc(&mut self, v: Var) -> Option<&mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn acc_slice(&mut self, v: Var, g: &[f64]) {
        if let Some(buf) = self.acc(v) {
            for (b, x) in buf.iter_mut().zip(g) {
                *b += x;
            }
        }
    }

    /// Reverse sweep from a scalar `loss`, filling gradients of every
    /// `requires_grad` value that `loss` depends on.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.backward_done = true;
        if !self.rg(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) {
        // Temporarily detach the op so `self` stays mutably borrowable.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        let out = Arc::clone(&self.nodes[i].value);
        match &op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (a, b, trans_b) = (*a, *b, *trans_b);
                let av = Arc::clone(&self.nodes[a.0].value);
                let bv = Arc::clone(&self.nodes[b.0].value);
                let (m, k) = av.dims2().expect("matrix");
                let n = out.last_dim();
                if let Some(ga) = self.acc(a) {
                    // dA = dC * op(B)^T
                    kernels::gemm(m, n, k, g, false, bv.data(), !trans_b, ga, 1.0);
                }
                if let Some(gb) = self.acc(b) {
                    if trans_b {
                        // dB [n x k] = dC^T * A
                        kernels::gemm(n, m, k, g, true, av.data(), false, gb, 1.0);
                    } else {
                        // dB [k x n] = A^T * dC
                        kernels::gemm(k, m, n, av.data(), true, g, false, gb, 1.0);
                    }
                }
            }
            Op::Add(a, b) => {
                self.acc_slice(*a, g);
                self.acc_slice(*b, g);
            }
            Op::Sub(a, b) => {
                self.acc_slice(*a, g);
                if let Some(gb) = self.acc(*b) {
                    for (x, y) in gb.iter_mut().zip(g) {
                        *x -= y;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let av = Arc::clone(&self.nodes[a.0].value);
                let bv = Arc::clone(&self.nodes[b.0].value);
                if let Some(ga) = self.acc(a) {
                    for ((x, gg), bb) in ga.iter_mut().zip(g).zip(bv.data()) {
                        *x += gg * bb;
                    }
                }
                if let Some(gb) = self.acc(b) {
                    for ((x, gg), aa) in gb.iter_mut().zip(g).zip(av.data()) {
                        *x += gg * aa;
                    }
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                if let Some(ga) = self.acc(*a) {
                    for (x, gg) in ga.iter_mut().zip(g) {
                        *x += c * gg;
                    }
                }
            }
            Op::AddRow { a, bias } => {
                let d = out.last_dim();
                self.acc_slice(*a, g);
                if let Some(gb) = self.acc(*bias) {
                    for chunk in g.chunks(d) {
                        for (x, gg) in gb.iter_mut().zip(chunk) {
                            *x += gg;
                        }
                    }
                }
            }
            Op::MulCol { a, g: gate } => {
                let (a, gate) = (*a, *gate);
                let av = Arc::clone(&self.nodes[a.0].value);
                let gv = Arc::clone(&self.nodes[gate.0].value);
                let cols = av.last_dim();
                if let Some(ga) = self.acc(a) {
                    for ((x, gg), s) in ga.chunks_mut(cols).zip(g.chunks(cols)).zip(gv.data()) {
                        for (xx, ggg) in x.iter_mut().zip(gg) {
                            *xx += s * ggg;
                        }
                    }
                }
                if let Some(gg) = self.acc(gate) {
                    for ((x, up), arow) in gg.iter_mut().zip(g.chunks(cols)).zip(av.data().chunks(cols)) {
                        *x += up.iter().zip(arow).map(|(u, v)| u * v).sum::<f64>();
                    }
                }
            }
            Op::Relu(a) => {
                let av = Arc::clone(&self.nodes[a.0].value);
                if let Some(ga) = self.acc(*a) {
                    for ((x, gg), v) in ga.iter_mut().zip(g).zip(av.data()) {
                        if *v > 0.0 {
                            *x += gg;
                        }
                    }
                }
            }
            Op::Tanh(a) => {
                if let Some(ga) = self.acc(*a) {
                    for ((x, gg), y) in ga.iter_mut().zip(g).zip(out.data()) {
                        *x += gg * (1.0 - y * y);
                    }
                }
            }
            Op::Softmax(a) => {
                let d = out.last_dim();
                if let Some(ga) = self.acc(*a) {
                    for ((x, gg), y) in ga.chunks_mut(d).zip(g.chunks(d)).zip(out.data().chunks(d)) {
                        let dot: f64 = gg.iter().zip(y).map(|(u, v)| u * v).sum();
                        for j in 0..d {
                            x[j] += y[j] * (gg[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let d = out.last_dim();
                let gv = Arc::clone(&self.nodes[gain.0].value);
                if let Some(gg) = self.acc(gain) {
                    for (up, xh) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += up[j] * xh[j];
                        }
                    }
                }
                if let Some(gb) = self.acc(bias) {
                    for up in g.chunks(d) {
                        for j in 0..d {
                            gb[j] += up[j];
                        }
                    }
                }
                if let Some(gx) = self.acc(x) {
                    let mut dxh = vec![0.0; d];
                    for (s, (up, xh)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        for j in 0..d {
                            dxh[j] = up[j] * gv.data()[j];
                        }
                        let m1 = dxh.iter().sum::<f64>() / d as f64;
                        let m2 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        let r = rstd[s];
                        for j in 0..d {
                            gx[s * d + j] += r * (dxh[j] - m1 - xh[j] * m2);
                        }
                    }
                }
            }
            Op::Bilinear { map, pos } => {
                let (map, pos) = (*map, *pos);
                let mv = Arc::clone(&self.nodes[map.0].value);
                let pv = Arc::clone(&self.nodes[pos.0].value);
                let (h, w, c) = (mv.shape()[0], mv.shape()[1], mv.shape()[2]);
                let m = mv.data();
                let p = pv.data();
                let n = p.len() / 2;
                if let Some(gm) = self.acc(map) {
                    for i in 0..n {
                        let st = Stencil::new(h, w, p[2 * i], p[2 * i + 1]);
                        let up = &g[i * c..(i + 1) * c];
                        for (r, cc, wgt) in st.weights() {
                            let dst = &mut gm[(r * w + cc) * c..(r * w + cc + 1) * c];
                            for (x, u) in dst.iter_mut().zip(up) {
                                *x += wgt * u;
                            }
                        }
                    }
                }
                if let Some(gp) = self.acc(pos) {
                    for i in 0..n {
                        let st = Stencil::new(h, w, p[2 * i], p[2 * i + 1]);
                        let up = &g[i * c..(i + 1) * c];
                        let at = |r: usize, cc: usize, ch: usize| m[(r * w + cc) * c + ch];
                        let (mut d_row, mut d_col) = (0.0, 0.0);
                        for (ch, u) in up.iter().enumerate() {
                            let (v00, v01) = (at(st.r0, st.c0, ch), at(st.r0, st.c1, ch));
                            let (v10, v11) = (at(st.r1, st.c0, ch), at(st.r1, st.c1, ch));
                            d_row += u * ((1.0 - st.fc) * (v10 - v00) + st.fc * (v11 - v01));
                            d_col += u * ((1.0 - st.fr) * (v01 - v00) + st.fr * (v11 - v10));
                        }
                        if st.row_live {
                            gp[2 * i] += d_row;
                        }
                        if st.col_live {
                            gp[2 * i + 1] += d_col;
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.acc(*a) {
                    for x in ga.iter_mut() {
                        *x += g[0];
                    }
                }
            }
            Op::Mean(a) => {
                if let Some(ga) = self.acc(*a) {
                    let s = g[0] / ga.len().max(1) as f64;
                    for x in ga.iter_mut() {
                        *x += s;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.last_dim();
                let rows = out.outer_len();
                let mut off = 0;
                for &p in parts {
                    let wd = self.nodes[p.0].value.last_dim();
                    if let Some(gp) = self.acc(p) {
                        for r in 0..rows {
                            for j in 0..wd {
                                gp[r * wd + j] += g[r * total + off + j];
                            }
                        }
                    }
                    off += wd;
                }
            }
            Op::SliceCols { a, start } => {
                let (a, start) = (*a, *start);
                let cols = self.nodes[a.0].value.last_dim();
                let len = out.last_dim();
                if let Some(ga) = self.acc(a) {
                    for (r, up) in g.chunks(len).enumerate() {
                        for j in 0..len {
                            ga[r * cols + start + j] += up[j];
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.len();
                    self.acc_slice(p, &g[off..off + n]);
                    off += n;
                }
            }
            Op::GatherRows { a, idx } => {
                let cols = out.last_dim();
                if let Some(ga) = self.acc(*a) {
                    for (i, &src) in idx.iter().enumerate() {
                        for j in 0..cols {
                            ga[src * cols + j] += g[i * cols + j];
                        }
                    }
                }
            }
            Op::ScatterRows { a, idx } => {
                let cols = out.last_dim();
                if let Some(ga) = self.acc(*a) {
                    for (i, &dst) in idx.iter().enumerate() {
                        for j in 0..cols {
                            ga[i * cols + j] += g[dst * cols + j];
                        }
                    }
                }
            }
            Op::Reshape(a) => self.acc_slice(*a, g),
            Op::Attention { q, k, v, seq, probs } => {
                self.attention_backward(*q, *k, *v, *seq, probs, g);
            }
            Op::GroupWeightedSum { x, w } => {
                let (x, w) = (*x, *w);
                let xv = Arc::clone(&self.nodes[x.0].value);
                let wv = Arc::clone(&self.nodes[w.0].value);
                let c = out.last_dim();
                let kk = wv.last_dim();
                let n = wv.outer_len();
                if let Some(gx) = self.acc(x) {
                    for i in 0..n {
                        for j in 0..kk {
                            let wt = wv.data()[i * kk + j];
                            let dst = &mut gx[(i * kk + j) * c..(i * kk + j + 1) * c];
                            for (d, u) in dst.iter_mut().zip(&g[i * c..(i + 1) * c]) {
                                *d += wt * u;
                            }
                        }
                    }
                }
                if let Some(gw) = self.acc(w) {
                    for i in 0..n {
                        let up = &g[i * c..(i + 1) * c];
                        for j in 0..kk {
                            let src = &xv.data()[(i * kk + j) * c..(i * kk + j + 1) * c];
                            gw[i * kk + j] += up.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
            }
        }
        self.nodes[i].op = op;
    }

    fn attention_backward(&mut self, q: Var, k: Var, v: Var, seq: usize, probs: &[f64], g: &[f64]) {
        let qv = Arc::clone(&self.nodes[q.0].value);
        let kv = Arc::clone(&self.nodes[k.0].value);
        let vv = Arc::clone(&self.nodes[v.0].value);
        let (rows, d) = qv.dims2().expect("matrix");
        let scale = 1.0 / (d as f64).sqrt();
        let mut dq = vec![0.0; rows * d];
        let mut dk = vec![0.0; rows * d];
        let mut dv = vec![0.0; rows * d];
        let mut dp = vec![0.0; seq * seq];
        for b in 0..rows / seq {
            let blk = b * seq * d..(b + 1) * seq * d;
            let p = &probs[b * seq * seq..(b + 1) * seq * seq];
            let up = &g[blk.clone()];
            // dV = P^T dO
            kernels::gemm(seq, seq, d, p, true, up, false, &mut dv[blk.clone()], 0.0);
            // dP = dO V^T
            kernels::gemm(seq, d, seq, up, false, &vv.data()[blk.clone()], true, &mut dp, 0.0);
            for (drow, prow) in dp.chunks_mut(seq).zip(p.chunks(seq)) {
                let dot: f64 = drow.iter().zip(prow).map(|(a, b)| a * b).sum();
                for (x, pp) in drow.iter_mut().zip(prow) {
                    *x = pp * (*x - dot) * scale;
                }
            }
            // dQ = dS K, dK = dS^T Q
            kernels::gemm(seq, seq, d, &dp, false, &kv.data()[blk.clone()], false, &mut dq[blk.clone()], 0.0);
            kernels::gemm(seq, seq, d, &dp, true, &qv.data()[blk.clone()], false, &mut dk[blk.clone()], 0.0);
        }
        self.acc_slice(q, &dq);
        self.acc_slice(k, &dk);
        self.acc_slice(v, &dv);
    }
}

/// Numerically stable softmax over the last axis; masked-out entries are 0.
pub(crate) fn softmax_last(x: &Tensor, mask: Option<&[bool]>) -> Tensor {
    let d = x.last_dim();
    let mut out = x.clone();
    for (s, chunk) in out.data_mut().chunks_mut(d).enumerate() {
        let keep = |j: usize| mask.is_none_or(|m| m[s * d + j]);
        let mx = (0..d)
            .filter(|&j| keep(j))
            .map(|j| chunk[j])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (j, v) in chunk.iter_mut().enumerate() {
            if keep(j) {
                *v = (*v - mx).exp();
                z += *v;
            } else {
                *v = 0.0;
            }
        }
        if z > 0.0 {
            for v in chunk.iter_mut() {
                *v /= z;
            }
        }
    }
    out
}
