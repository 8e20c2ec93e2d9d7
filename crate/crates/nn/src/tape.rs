//! Reverse-mode differentiation over row-major `f64` matrices.
//!
//! Every operation appends a node to a [`Tape`]; [`Tape::backward`] walks the
//! nodes in reverse and returns the gradient of a scalar loss with respect to
//! every node that depends on a leaf created with [`Tape::leaf`].

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use thiserror::Error;

pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error, PartialEq)]
pub enum TapeError {
    #[error("loss must be 1x1, got {0}x{1}")]
    NonScalarLoss(usize, usize),
    #[error("node {node} reads node {input}, which is not recorded before it")]
    GraphCycle { node: usize, input: usize },
}

/// Buffers of at least this many values are recycled through a per-thread
/// pool. A forward/backward pass allocates tens of megabytes of same-sized
/// intermediates, and fresh pages cost far more than reuse.
const POOL_GRAIN: usize = 4096;
const POOL_CAP: usize = 24 << 20;

struct Pool {
    free: HashMap<usize, Vec<Vec<f64>>>,
    held: usize,
}

thread_local! {
    static POOL: RefCell<Pool> = RefCell::new(Pool { free: HashMap::new(), held: 0 });
}

/// A buffer of `len` values, zeroed when `zero` is set and otherwise holding
/// arbitrary finite leftovers.
fn pooled(len: usize, zero: bool) -> Vec<f64> {
    if len < POOL_GRAIN {
        return vec![0.0; len];
    }
    let class = len.div_ceil(POOL_GRAIN) * POOL_GRAIN;
    let reused = POOL.with(|p| {
        let mut p = p.borrow_mut();
        let v = p.free.get_mut(&class).and_then(Vec::pop);
        if v.is_some() {
            p.held -= class;
        }
        v
    });
    let mut v = reused.unwrap_or_else(|| Vec::with_capacity(class));
    if zero {
        v.clear();
    }
    v.resize(len, 0.0);
    v
}

fn recycle(v: Vec<f64>) {
    let class = v.capacity() / POOL_GRAIN * POOL_GRAIN;
    if class == 0 {
        return;
    }
    // try_with: the pool may already be gone during thread teardown
    let _ = POOL.try_with(|p| {
        let mut p = p.borrow_mut();
        if p.held + class <= POOL_CAP {
            p.held += class;
            p.free.entry(class).or_default().push(v);
        }
    });
}

#[derive(Debug, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Clone for Mat {
    fn clone(&self) -> Self {
        let mut out = Mat::scratch(self.rows, self.cols);
        out.data.copy_from_slice(&self.data);
        out
    }
}

impl Drop for Mat {
    fn drop(&mut self) {
        recycle(std::mem::take(&mut self.data));
    }
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: pooled(rows * cols, true),
        }
    }

    /// Matrix whose contents are about to be overwritten.
    fn scratch(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: pooled(rows * cols, false),
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "{rows}x{cols} matrix from {} values", data.len());
        Mat { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut out = Mat::scratch(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                out.data[i * cols + j] = f(i, j);
            }
        }
        out
    }

    pub fn scalar(v: f64) -> Self {
        Mat::from_vec(1, 1, vec![v])
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rows stacked in order.
    pub fn vstack(parts: &[&Mat]) -> Mat {
        let cols = parts.first().map_or(0, |m| m.cols);
        let rows = parts.iter().map(|m| m.rows).sum();
        let mut out = Mat::scratch(rows, cols);
        let mut off = 0;
        for m in parts {
            assert_eq!(m.cols, cols);
            out.data[off..off + m.data.len()].copy_from_slice(&m.data);
            off += m.data.len();
        }
        out
    }

    pub fn rows_range(&self, start: usize, len: usize) -> Mat {
        let mut out = Mat::scratch(len, self.cols);
        out.data.copy_from_slice(&self.data[start * self.cols..(start + len) * self.cols]);
        out
    }
}

/// `c = alpha·op(a)·op(b) + beta·c` with optional transposes, via matrixmultiply.
/// With `beta = 0` the previous contents of `c` are never read.
#[allow(clippy::too_many_arguments)]
fn gemm(alpha: f64, a: &Mat, ta: bool, b: &Mat, tb: bool, beta: f64, c: &mut Mat) {
    let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (k2, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, k2, "matmul inner dimensions");
    assert_eq!((c.rows, c.cols), (m, n), "matmul output shape");
    let (rsa, csa) = if ta { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if tb { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.data.fill(0.0);
        } else {
            c.data.iter_mut().for_each(|v| *v *= beta);
        }
        return;
    }
    // SAFETY: the shapes and strides above describe the owned buffers exactly.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `x·W + b`.
    Linear(Var, Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Silu(Var),
    GatherRows(Var, Rc<[usize]>),
    /// `out[e] = a[dst[e]] + b[src[e]] + c[e]`.
    EdgeSum {
        a: Var,
        b: Var,
        c: Var,
        dst: Rc<[usize]>,
        src: Rc<[usize]>,
    },
    ScatterMean {
        x: Var,
        dst: Rc<[usize]>,
        inv_degree: Rc<[f64]>,
    },
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    InstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        segments: Rc<[(usize, usize)]>,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    WeightedSqErr {
        pred: Var,
        target: Rc<Mat>,
        row_w: Rc<[f64]>,
        col_w: Rc<[f64]>,
    },
    Sum(Var),
    Scale(Var, f64),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::AddBias(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Linear(x, w, b) => vec![*x, *w, *b],
            Op::EdgeSum { a, b, c, .. } => vec![*a, *b, *c],
            Op::Silu(x) | Op::GatherRows(x, _) | Op::SliceRows(x, _) | Op::Sum(x) | Op::Scale(x, _) => vec![*x],
            Op::ScatterMean { x, .. } => vec![*x],
            Op::ConcatCols(xs) => xs.clone(),
            Op::LayerNorm { x, gamma, beta, .. } | Op::InstanceNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::WeightedSqErr { pred, .. } => vec![*pred],
        }
    }
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients indexed by [`Var`]; `None` where the loss does not depend on it.
pub struct Grads(Vec<Option<Mat>>);

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.0.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.0.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Gradient buffer of `v`, and whether it was just created. A fresh buffer
/// holds garbage and must be written, not accumulated into.
fn slot(grads: &mut [Option<Mat>], v: Var, rows: usize, cols: usize) -> (&mut Mat, bool) {
    let fresh = grads[v.0].is_none();
    let m = grads[v.0].get_or_insert_with(|| Mat::scratch(rows, cols));
    (m, fresh)
}

/// Zero-initialized gradient buffer for scatter-style accumulation.
fn zeroed_slot(grads: &mut [Option<Mat>], v: Var, rows: usize, cols: usize) -> &mut Mat {
    let (m, fresh) = slot(grads, v, rows, cols);
    if fresh {
        m.data.fill(0.0);
    }
    m
}

#[inline]
fn put(o: &mut f64, v: f64, fresh: bool) {
    if fresh {
        *o = v;
    } else {
        *o += v;
    }
}

fn put_all(dst: &mut [f64], src: impl Iterator<Item = f64>, fresh: bool) {
    if fresh {
        for (o, v) in dst.iter_mut().zip(src) {
            *o = v;
        }
    } else {
        for (o, v) in dst.iter_mut().zip(src) {
            *o += v;
        }
    }
}

/// Adds the column sums of `g` into a `1 × cols` gradient.
fn col_sums_into(grads: &mut [Option<Mat>], v: Var, g: &Mat) {
    let (gb, fresh) = slot(grads, v, 1, g.cols);
    if fresh {
        gb.data.fill(0.0);
    }
    for row in g.data.chunks(g.cols.max(1)) {
        for (o, x) in gb.data.iter_mut().zip(row) {
            *o += x;
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        let needs_grad = match &op {
            Op::Leaf => false,
            op => op.inputs().iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Input that is not differentiated.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Input whose gradient is wanted (parameters).
    pub fn leaf(&mut self, value: Mat) -> Var {
        let v = self.push(value, Op::Leaf);
        self.nodes[v.0].needs_grad = true;
        v
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Mat::scratch(av.rows, bv.cols);
        gemm(1.0, av, false, bv, false, 0.0, &mut out);
        self.push(out, Op::MatMul(a, b))
    }

    /// Dense layer `x·W + b` with `b` a `1 × cols` row.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        assert_eq!(bv.shape(), (1, wv.cols), "bias shape");
        let mut out = Mat::scratch(xv.rows, wv.cols);
        for row in out.data.chunks_mut(wv.cols.max(1)) {
            row.copy_from_slice(&bv.data);
        }
        gemm(1.0, xv, false, wv, false, 1.0, &mut out);
        self.push(out, Op::Linear(x, w, b))
    }

    /// `x + 1·b` with `b` a `1 × cols` row.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let bv = self.value(b);
        assert_eq!(bv.rows, 1);
        let mut out = self.value(x).clone();
        assert_eq!(out.cols, bv.cols);
        let cols = out.cols;
        for row in out.data.chunks_mut(cols) {
            for (o, b) in row.iter_mut().zip(&bv.data) {
                *o += b;
            }
        }
        self.push(out, Op::AddBias(x, b))
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Mat {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "elementwise shapes");
        let mut out = Mat::scratch(av.rows, av.cols);
        for ((o, x), y) in out.data.iter_mut().zip(&av.data).zip(&bv.data) {
            *o = f(*x, *y);
        }
        out
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x - y);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = Mat::scratch(xv.rows, xv.cols);
        for (o, &v) in out.data.iter_mut().zip(&xv.data) {
            *o = v * sigmoid(v);
        }
        self.push(out, Op::Silu(x))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let xv = self.value(x);
        let mut out = Mat::scratch(xv.rows, xv.cols);
        for (o, &v) in out.data.iter_mut().zip(&xv.data) {
            *o = v * s;
        }
        self.push(out, Op::Scale(x, s))
    }

    /// `out[e] = x[idx[e]]`.
    pub fn gather_rows(&mut self, x: Var, idx: Rc<[usize]>) -> Var {
        let xv = self.value(x);
        let mut out = Mat::scratch(idx.len(), xv.cols);
        for (e, &i) in idx.iter().enumerate() {
            out.row_mut(e).copy_from_slice(xv.row(i));
        }
        self.push(out, Op::GatherRows(x, idx))
    }

    /// `out[e] = a[dst[e]] + b[src[e]] + c[e]`: the per-edge sum of a
    /// receiver term, a sender term and an edge term.
    pub fn edge_sum(&mut self, a: Var, dst: Rc<[usize]>, b: Var, src: Rc<[usize]>, c: Var) -> Var {
        let (av, bv, cv) = (self.value(a), self.value(b), self.value(c));
        assert_eq!(dst.len(), src.len());
        assert_eq!(cv.rows, dst.len());
        assert!(av.cols == cv.cols && bv.cols == cv.cols, "edge_sum widths");
        let mut out = Mat::scratch(cv.rows, cv.cols);
        for e in 0..cv.rows {
            let (ra, rb, rc) = (av.row(dst[e]), bv.row(src[e]), cv.row(e));
            for (k, o) in out.row_mut(e).iter_mut().enumerate() {
                *o = ra[k] + rb[k] + rc[k];
            }
        }
        self.push(out, Op::EdgeSum { a, b, c, dst, src })
    }

    /// `out[i] = inv_degree[i] · Σ_{e: dst[e] = i} x[e]`, with one output row per
    /// entry of `inv_degree`.
    pub fn scatter_mean(&mut self, x: Var, dst: Rc<[usize]>, inv_degree: Rc<[f64]>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rows, dst.len());
        let mut out = Mat::zeros(inv_degree.len(), xv.cols);
        for (e, &i) in dst.iter().enumerate() {
            let w = inv_degree[i];
            let src = xv.row(e);
            for (o, v) in out.row_mut(i).iter_mut().zip(src) {
                *o += w * v;
            }
        }
        self.push(out, Op::ScatterMean { x, dst, inv_degree })
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Var {
        let rows = self.value(xs[0]).rows;
        let cols: usize = xs.iter().map(|v| self.value(*v).cols).sum();
        let mut out = Mat::scratch(rows, cols);
        let mut off = 0;
        for v in xs {
            let m = self.value(*v);
            assert_eq!(m.rows, rows, "concat row counts");
            for i in 0..rows {
                out.data[i * cols + off..i * cols + off + m.cols].copy_from_slice(m.row(i));
            }
            off += m.cols;
        }
        self.push(out, Op::ConcatCols(xs.to_vec()))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).rows_range(start, len);
        self.push(out, Op::SliceRows(x, start))
    }

    /// Per-row standardization over columns, then `γ ⊙ x̂ + β` (`1 × cols`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let mut xhat = Mat::scratch(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for i in 0..rows {
            let r = xv.row(i);
            let mu = r.iter().sum::<f64>() / cols as f64;
            let var = r.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + NORM_EPS).sqrt();
            inv_std.push(is);
            for (h, v) in xhat.row_mut(i).iter_mut().zip(r) {
                *h = (v - mu) * is;
            }
        }
        let out = self.affine(&xhat, gamma, beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Per-segment, per-column standardization over the rows of each segment
    /// `(start, len)`, then `γ ⊙ x̂ + β`.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, segments: Rc<[(usize, usize)]>) -> Var {
        let xv = self.value(x);
        let (_, cols) = xv.shape();
        let mut xhat = Mat::scratch(xv.rows, cols);
        let mut inv_std = Vec::with_capacity(segments.len() * cols);
        let mut mu = vec![0.0; cols];
        let mut var = vec![0.0; cols];
        for &(start, len) in segments.iter() {
            mu.iter_mut().for_each(|v| *v = 0.0);
            var.iter_mut().for_each(|v| *v = 0.0);
            for i in start..start + len {
                for (m, v) in mu.iter_mut().zip(xv.row(i)) {
                    *m += v;
                }
            }
            mu.iter_mut().for_each(|m| *m /= len as f64);
            // second pass removes the rounding of the first, so constant columns map to 0
            let mut corr = vec![0.0; cols];
            for i in start..start + len {
                for ((c, v), m) in corr.iter_mut().zip(xv.row(i)).zip(&mu) {
                    *c += v - m;
                }
            }
            for (m, c) in mu.iter_mut().zip(&corr) {
                *m += c / len as f64;
            }
            for i in start..start + len {
                for ((s, v), m) in var.iter_mut().zip(xv.row(i)).zip(&mu) {
                    *s += (v - m).powi(2);
                }
            }
            let is: Vec<f64> = var.iter().map(|s| 1.0 / (s / len as f64 + NORM_EPS).sqrt()).collect();
            for i in start..start + len {
                let src = xv.row(i);
                let dst = &mut xhat.data[i * cols..(i + 1) * cols];
                for c in 0..cols {
                    dst[c] = (src[c] - mu[c]) * is[c];
                }
            }
            inv_std.extend_from_slice(&is);
        }
        let out = self.affine(&xhat, gamma, beta);
        self.push(
            out,
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                segments,
                xhat,
                inv_std,
            },
        )
    }

    fn affine(&self, xhat: &Mat, gamma: Var, beta: Var) -> Mat {
        let (g, b) = (self.value(gamma), self.value(beta));
        assert_eq!((g.rows, g.cols), (1, xhat.cols));
        assert_eq!((b.rows, b.cols), (1, xhat.cols));
        let mut out = xhat.clone();
        for row in out.data.chunks_mut(xhat.cols.max(1)) {
            for ((o, gv), bv) in row.iter_mut().zip(&g.data).zip(&b.data) {
                *o = *o * gv + bv;
            }
        }
        out
    }

    /// `Σ_r Σ_c row_w[r]·col_w[c]·(pred − target)²` as a 1×1 value.
    pub fn weighted_sq_err(&mut self, pred: Var, target: Rc<Mat>, row_w: Rc<[f64]>, col_w: Rc<[f64]>) -> Var {
        let p = self.value(pred);
        assert_eq!(p.shape(), target.shape(), "prediction and target shapes");
        assert_eq!(row_w.len(), p.rows);
        assert_eq!(col_w.len(), p.cols);
        let mut total = 0.0;
        for i in 0..p.rows {
            let mut row = 0.0;
            for ((a, b), w) in p.row(i).iter().zip(target.row(i)).zip(col_w.iter()) {
                row += w * (a - b).powi(2);
            }
            total += row_w[i] * row;
        }
        self.push(
            Mat::scalar(total),
            Op::WeightedSqErr {
                pred,
                target,
                row_w,
                col_w,
            },
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        self.push(Mat::scalar(s), Op::Sum(x))
    }

    pub fn backward(&self, loss: Var) -> Result<Grads, TapeError> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(TapeError::NonScalarLoss(lv.rows, lv.cols));
        }
        for (i, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            for input in node.op.inputs() {
                if input.0 >= i {
                    return Err(TapeError::GraphCycle { node: i, input: input.0 });
                }
            }
        }
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, &g, &mut grads);
            // intermediate gradients are dropped (and recycled) as soon as
            // they have been propagated; only leaves keep theirs
            if matches!(node.op, Op::Leaf) || i == loss.0 {
                grads[i] = Some(g);
            }
        }
        Ok(Grads(grads))
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn pass_through(&self, grads: &mut [Option<Mat>], v: Var, g: &Mat, s: f64) {
        if self.wants(v) {
            let (gv, fresh) = slot(grads, v, g.rows, g.cols);
            put_all(&mut gv.data, g.data.iter().map(|x| s * x), fresh);
        }
    }

    fn backprop(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => self.matmul_grads(*a, *b, g, grads),
            Op::Linear(x, w, b) => {
                self.matmul_grads(*x, *w, g, grads);
                if self.wants(*b) {
                    col_sums_into(grads, *b, g);
                }
            }
            Op::AddBias(x, b) => {
                self.pass_through(grads, *x, g, 1.0);
                if self.wants(*b) {
                    col_sums_into(grads, *b, g);
                }
            }
            Op::Add(a, b) => {
                self.pass_through(grads, *a, g, 1.0);
                self.pass_through(grads, *b, g, 1.0);
            }
            Op::Sub(a, b) => {
                self.pass_through(grads, *a, g, 1.0);
                self.pass_through(grads, *b, g, -1.0);
            }
            Op::Mul(a, b) => {
                for (this, other) in [(*a, *b), (*b, *a)] {
                    if self.wants(this) {
                        let ov = &self.value(other).data;
                        let (gt, fresh) = slot(grads, this, g.rows, g.cols);
                        put_all(&mut gt.data, g.data.iter().zip(ov).map(|(gv, y)| gv * y), fresh);
                    }
                }
            }
            Op::Silu(x) => {
                let xv = &self.value(*x).data;
                let yv = &node.value.data;
                let (gx, fresh) = slot(grads, *x, g.rows, g.cols);
                // σ(x) = silu(x) / x avoids a second exponential
                let d = g.data.iter().zip(xv).zip(yv).map(|((gv, &v), &y)| {
                    let s = if v.abs() > 1e-300 { y / v } else { sigmoid(v) };
                    gv * (s + y * (1.0 - s))
                });
                put_all(&mut gx.data, d, fresh);
            }
            Op::Scale(x, s) => self.pass_through(grads, *x, g, *s),
            Op::GatherRows(x, idx) => {
                let xv = self.value(*x);
                let gx = zeroed_slot(grads, *x, xv.rows, xv.cols);
                for (e, &i) in idx.iter().enumerate() {
                    for (o, v) in gx.row_mut(i).iter_mut().zip(g.row(e)) {
                        *o += v;
                    }
                }
            }
            Op::EdgeSum { a, b, c, dst, src } => {
                for (v, idx) in [(*a, dst), (*b, src)] {
                    if self.wants(v) {
                        let rows = self.value(v).rows;
                        let gv = zeroed_slot(grads, v, rows, g.cols);
                        for (e, &i) in idx.iter().enumerate() {
                            for (o, x) in gv.row_mut(i).iter_mut().zip(g.row(e)) {
                                *o += x;
                            }
                        }
                    }
                }
                self.pass_through(grads, *c, g, 1.0);
            }
            Op::ScatterMean { x, dst, inv_degree } => {
                let xv = self.value(*x);
                let (gx, fresh) = slot(grads, *x, xv.rows, xv.cols);
                for (e, &i) in dst.iter().enumerate() {
                    let w = inv_degree[i];
                    for (o, v) in gx.row_mut(e).iter_mut().zip(g.row(i)) {
                        put(o, w * v, fresh);
                    }
                }
            }
            Op::ConcatCols(xs) => {
                let mut off = 0;
                for v in xs {
                    let cols = self.value(*v).cols;
                    if self.wants(*v) {
                        let (gv, fresh) = slot(grads, *v, g.rows, cols);
                        for i in 0..g.rows {
                            let src = &g.data[i * g.cols + off..i * g.cols + off + cols];
                            put_all(gv.row_mut(i), src.iter().copied(), fresh);
                        }
                    }
                    off += cols;
                }
            }
            Op::SliceRows(x, start) => {
                let xv = self.value(*x);
                let gx = zeroed_slot(grads, *x, xv.rows, xv.cols);
                let base = start * xv.cols;
                for (o, v) in gx.data[base..base + g.data.len()].iter_mut().zip(&g.data) {
                    *o += v;
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                self.affine_param_grads(g, xhat, *gamma, *beta, grads);
                if self.wants(*x) {
                    let gam = &self.value(*gamma).data;
                    let cols = g.cols;
                    let (gx, fresh) = slot(grads, *x, g.rows, cols);
                    let mut dxhat = vec![0.0; cols];
                    for i in 0..g.rows {
                        let gr = g.row(i);
                        let xr = xhat.row(i);
                        let (mut s1, mut s2) = (0.0, 0.0);
                        for c in 0..cols {
                            dxhat[c] = gr[c] * gam[c];
                            s1 += dxhat[c];
                            s2 += dxhat[c] * xr[c];
                        }
                        let k = inv_std[i] / cols as f64;
                        for (c, o) in gx.row_mut(i).iter_mut().enumerate() {
                            put(o, k * (cols as f64 * dxhat[c] - s1 - xr[c] * s2), fresh);
                        }
                    }
                }
            }
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                segments,
                xhat,
                inv_std,
            } => {
                self.affine_param_grads(g, xhat, *gamma, *beta, grads);
                if self.wants(*x) {
                    let gam = &self.value(*gamma).data;
                    let cols = g.cols;
                    let (gx, fresh) = slot(grads, *x, g.rows, cols);
                    let mut s1 = vec![0.0; cols];
                    let mut s2 = vec![0.0; cols];
                    for (seg, &(start, len)) in segments.iter().enumerate() {
                        s1.iter_mut().for_each(|v| *v = 0.0);
                        s2.iter_mut().for_each(|v| *v = 0.0);
                        for i in start..start + len {
                            let (gr, xr) = (g.row(i), xhat.row(i));
                            for c in 0..cols {
                                let d = gr[c] * gam[c];
                                s1[c] += d;
                                s2[c] += d * xr[c];
                            }
                        }
                        let is = &inv_std[seg * cols..(seg + 1) * cols];
                        let nf = len as f64;
                        for i in start..start + len {
                            let (gr, xr) = (g.row(i), xhat.row(i));
                            let out = &mut gx.data[i * cols..(i + 1) * cols];
                            for c in 0..cols {
                                let d = gr[c] * gam[c];
                                put(&mut out[c], is[c] / nf * (nf * d - s1[c] - xr[c] * s2[c]), fresh);
                            }
                        }
                    }
                }
            }
            Op::WeightedSqErr {
                pred,
                target,
                row_w,
                col_w,
            } => {
                let p = self.value(*pred);
                let scale = 2.0 * g.data[0];
                let (gp, fresh) = slot(grads, *pred, p.rows, p.cols);
                for i in 0..p.rows {
                    let w = scale * row_w[i];
                    let (pr, tr) = (p.row(i), target.row(i));
                    for (c, o) in gp.row_mut(i).iter_mut().enumerate() {
                        put(o, w * col_w[c] * (pr[c] - tr[c]), fresh);
                    }
                }
            }
            Op::Sum(x) => {
                let xv = self.value(*x);
                let s = g.data[0];
                let (gx, fresh) = slot(grads, *x, xv.rows, xv.cols);
                put_all(&mut gx.data, std::iter::repeat(s), fresh);
            }
        }
    }

    fn matmul_grads(&self, a: Var, b: Var, g: &Mat, grads: &mut [Option<Mat>]) {
        let (av, bv) = (self.value(a), self.value(b));
        if self.wants(a) {
            let (ga, fresh) = slot(grads, a, av.rows, av.cols);
            gemm(1.0, g, false, bv, true, if fresh { 0.0 } else { 1.0 }, ga);
        }
        if self.wants(b) {
            let (gb, fresh) = slot(grads, b, bv.rows, bv.cols);
            gemm(1.0, av, true, g, false, if fresh { 0.0 } else { 1.0 }, gb);
        }
    }

    fn affine_param_grads(&self, g: &Mat, xhat: &Mat, gamma: Var, beta: Var, grads: &mut [Option<Mat>]) {
        let cols = g.cols;
        if self.wants(gamma) {
            let gg = zeroed_slot(grads, gamma, 1, cols);
            for i in 0..g.rows {
                for ((o, gv), xv) in gg.data.iter_mut().zip(g.row(i)).zip(xhat.row(i)) {
                    *o += gv * xv;
                }
            }
        }
        if self.wants(beta) {
            col_sums_into(grads, beta, g);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
        Mat::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Max relative error between the tape gradient of `f` and central
    /// differences with step 1e-6, over every entry of every input.
    fn fd_check(inputs: &[Mat], f: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
        let loss = f(&mut tape, &vars);
        let grads = tape.backward(loss).unwrap();
        let eval = |xs: &[Mat]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = xs.iter().map(|m| t.leaf(m.clone())).collect();
            let l = f(&mut t, &vs);
            t.value(l).data[0]
        };
        let h = 1e-6;
        let mut worst = 0.0f64;
        for (k, m) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Mat::zeros(m.rows, m.cols));
            for e in 0..m.data.len() {
                let mut plus = inputs.to_vec();
                plus[k].data[e] += h;
                let mut minus = inputs.to_vec();
                minus[k].data[e] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data[e];
                let err = (a - numeric).abs() / (a.abs().max(numeric.abs()).max(1e-3));
                worst = worst.max(err);
            }
        }
        worst
    }

    /// Random weighted reduction so every output entry matters.
    fn reduce(t: &mut Tape, x: Var, seed: u64) -> Var {
        let (r, c) = t.value(x).shape();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = t.constant(random(r, c, &mut rng));
        let p = t.mul(x, w);
        t.sum(p)
    }

    #[test]
    fn sum_of_squares_gradient_is_exact() {
        let w = Mat::from_vec(1, 3, vec![0.5, -2.0, 3.0]);
        let mut t = Tape::new();
        let v = t.leaf(w.clone());
        let sq = t.mul(v, v);
        let loss = t.sum(sq);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(v).unwrap().data, vec![1.0, -4.0, 6.0]);
    }

    #[test]
    fn silu_values_and_derivative() {
        let mut t = Tape::new();
        let x = t.leaf(Mat::from_vec(1, 3, vec![0.0, 20.0, -0.7]));
        let y = t.silu(x);
        assert_eq!(t.value(y).data[0], 0.0);
        // silu(20) = 20 - 20·σ(-20), about 4.1e-8 below 20
        let tail = 20.0 * (-20.0f64).exp() / (1.0 + (-20.0f64).exp());
        assert!((t.value(y).data[1] - (20.0 - tail)).abs() < 1e-12);
        assert!((t.value(y).data[1] - 20.0).abs() < 1e-7);
        let loss = t.sum(y);
        let g = t.backward(loss).unwrap();
        let v: f64 = -0.7;
        let s = 1.0 / (1.0 + (-v).exp());
        assert!((g.get(x).unwrap().data[2] - (s + v * s * (1.0 - s))).abs() < 1e-12);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(Mat::zeros(2, 2));
        assert_eq!(t.backward(x).err(), Some(TapeError::NonScalarLoss(2, 2)));
    }

    #[test]
    fn matmul_bias_silu_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inputs = [random(5, 4, &mut rng), random(4, 3, &mut rng), random(1, 3, &mut rng)];
        let err = fd_check(&inputs, |t, v| {
            let z = t.matmul(v[0], v[1]);
            let z = t.add_bias(z, v[2]);
            let y = t.silu(z);
            reduce(t, y, 2)
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn two_layer_mlp_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inputs = [
            random(6, 4, &mut rng),
            random(4, 5, &mut rng),
            random(1, 5, &mut rng),
            random(5, 2, &mut rng),
            random(1, 2, &mut rng),
        ];
        let target = Rc::new(random(6, 2, &mut rng));
        let err = fd_check(&inputs, |t, v| {
            let h = t.matmul(v[0], v[1]);
            let h = t.add_bias(h, v[2]);
            let h = t.silu(h);
            let o = t.matmul(h, v[3]);
            let o = t.add_bias(o, v[4]);
            t.weighted_sq_err(o, target.clone(), vec![1.0 / 6.0; 6].into(), vec![1.0, 3.0].into())
        });
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn elementwise_and_structural_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let inputs = [random(4, 3, &mut rng), random(4, 3, &mut rng), random(4, 2, &mut rng)];
        let err = fd_check(&inputs, |t, v| {
            let a = t.add(v[0], v[1]);
            let s = t.sub(a, v[1]);
            let m = t.mul(s, v[1]);
            let m = t.scale(m, 1.7);
            let c = t.concat_cols(&[m, v[2]]);
            let r = t.slice_rows(c, 1, 2);
            reduce(t, r, 5)
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn gather_scatter_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let inputs = [random(4, 3, &mut rng)];
        let src: Rc<[usize]> = vec![1, 0, 2, 1, 3, 2].into();
        let dst: Rc<[usize]> = vec![0, 1, 1, 2, 2, 3].into();
        let inv: Rc<[f64]> = vec![1.0, 0.5, 0.5, 1.0].into();
        let err = fd_check(&inputs, |t, v| {
            let e = t.gather_rows(v[0], src.clone());
            let e = t.silu(e);
            let n = t.scatter_mean(e, dst.clone(), inv.clone());
            reduce(t, n, 7)
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn linear_and_edge_sum_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let inputs = [
            random(4, 3, &mut rng),
            random(3, 3, &mut rng),
            random(6, 2, &mut rng),
            random(2, 3, &mut rng),
            random(1, 3, &mut rng),
        ];
        let src: Rc<[usize]> = vec![1, 0, 2, 1, 3, 2].into();
        let dst: Rc<[usize]> = vec![0, 1, 1, 2, 2, 3].into();
        let err = fd_check(&inputs, |t, v| {
            let h = t.linear(v[0], v[1], v[4]);
            let off = t.linear(v[2], v[3], v[4]);
            // h feeds both ends of every edge, so its gradient accumulates
            let m = t.edge_sum(h, dst.clone(), h, src.clone(), off);
            let m = t.silu(m);
            let g = t.gather_rows(v[0], src.clone());
            let m = t.mul(m, g);
            reduce(t, m, 12)
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let inputs = [random(7, 4, &mut rng), random(1, 4, &mut rng), random(1, 4, &mut rng)];
        let segments: Rc<[(usize, usize)]> = vec![(0, 3), (3, 4)].into();
        let err = fd_check(&inputs, |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2]);
            let y = t.silu(y);
            let z = t.instance_norm(y, v[1], v[2], segments.clone());
            reduce(t, z, 9)
        });
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn instance_norm_statistics_and_constant_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut x = random(50, 3, &mut rng);
        // wide columns so the eps guard shifts the variance by < 1e-6
        x.data.iter_mut().for_each(|v| *v *= 100.0);
        for i in 0..50 {
            x.set(i, 2, 4.2);
        }
        let mut t = Tape::new();
        let xv = t.constant(x);
        let g = t.constant(Mat::from_vec(1, 3, vec![1.0; 3]));
        let b = t.constant(Mat::from_vec(1, 3, vec![0.0, 0.0, 0.25]));
        let y = t.instance_norm(xv, g, b, vec![(0, 50)].into());
        let y = t.value(y);
        for c in 0..2 {
            let col: Vec<f64> = (0..50).map(|i| y.get(i, c)).collect();
            let mean = col.iter().sum::<f64>() / 50.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 50.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-6, "{var}");
        }
        assert!((0..50).all(|i| (y.get(i, 2) - 0.25).abs() < 1e-12));
    }

    #[test]
    fn instance_norm_single_row_is_shift() {
        let mut t = Tape::new();
        let x = t.constant(Mat::from_vec(1, 2, vec![3.0, -1.0]));
        let g = t.constant(Mat::from_vec(1, 2, vec![2.0, 2.0]));
        let b = t.constant(Mat::from_vec(1, 2, vec![0.5, -0.5]));
        let y = t.instance_norm(x, g, b, vec![(0, 1)].into());
        assert_eq!(t.value(y).data, vec![0.5, -0.5]);
    }

    #[test]
    fn scatter_mean_of_identical_messages() {
        let mut t = Tape::new();
        let m = t.constant(Mat::from_fn(5, 2, |_, j| j as f64 + 1.0));
        let dst: Rc<[usize]> = vec![0, 0, 0, 1, 2].into();
        let inv: Rc<[f64]> = vec![1.0 / 3.0, 1.0, 1.0].into();
        let y = t.scatter_mean(m, dst, inv);
        for i in 0..3 {
            assert!((t.value(y).get(i, 0) - 1.0).abs() < 1e-15);
            assert!((t.value(y).get(i, 1) - 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(Mat::scalar(2.0));
        let w = t.leaf(Mat::scalar(3.0));
        let p = t.mul(c, w);
        let g = t.backward(p).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(w).unwrap().data[0], 2.0);
    }
}
