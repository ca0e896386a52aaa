//! Minimal reverse-mode autodiff on a dynamic tape.
//!
//! A [`Tape`] records every operation of one forward pass; [`Tape::backward`]
//! walks it in reverse and accumulates exact analytic gradients into the
//! leaves that were created with `requires_grad`. Tapes are rebuilt per
//! forward pass and are single-threaded at the API level; heavy kernels
//! (matmul, segment aggregation, convolution) parallelize internally over
//! fixed-size chunks, so values and gradients are bit-identical for any
//! worker count.
//!
//! Everything is `f64`; 32-bit floats appear only at the disk boundary.

use std::sync::Arc;

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2, Axis};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::parallel::{for_chunks_mut, ROW_CHUNK};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tensor {
    id: usize,
}

/// Bipartite aggregation structure for [`Tape::csr_mean`]: `n_out` rows,
/// each a non-empty list of source-row indices into an `(n_in, d)` matrix.
/// The reverse adjacency is built once so the backward pass can gather
/// per-source contributions in a fixed order.
#[derive(Debug, Clone)]
pub struct Adjacency {
    pub n_in: usize,
    pub n_out: usize,
    pub offsets: Vec<usize>,
    pub indices: Vec<u32>,
    rev_offsets: Vec<usize>,
    rev_indices: Vec<u32>,
}

impl Adjacency {
    pub fn new(n_in: usize, offsets: Vec<usize>, indices: Vec<u32>) -> Result<Self> {
        if offsets.is_empty() || *offsets.last().unwrap() != indices.len() {
            return Err(Error::Graph("adjacency offsets inconsistent".into()));
        }
        let n_out = offsets.len() - 1;
        for v in 0..n_out {
            if offsets[v + 1] <= offsets[v] {
                return Err(Error::Graph(format!(
                    "aggregation row {v} is empty; every node needs at least one neighbor"
                )));
            }
        }
        if indices.iter().any(|&u| u as usize >= n_in) {
            return Err(Error::Graph("adjacency index out of range".into()));
        }
        // Reverse CSR by counting sort; forward rows visited ascending.
        let mut counts = vec![0usize; n_in + 1];
        for &u in &indices {
            counts[u as usize + 1] += 1;
        }
        for i in 1..counts.len() {
            counts[i] += counts[i - 1];
        }
        let rev_offsets = counts.clone();
        let mut rev_indices = vec![0u32; indices.len()];
        let mut cursor = counts;
        for v in 0..n_out {
            for &u in &indices[offsets[v]..offsets[v + 1]] {
                rev_indices[cursor[u as usize]] = v as u32;
                cursor[u as usize] += 1;
            }
        }
        Ok(Adjacency {
            n_in,
            n_out,
            offsets,
            indices,
            rev_offsets,
            rev_indices,
        })
    }

    pub fn degree(&self, v: usize) -> usize {
        self.offsets[v + 1] - self.offsets[v]
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    Linear { x: usize, w: usize, b: usize },
    Relu(usize),
    ConcatCols(usize, usize),
    MeanRows(usize),
    Reshape(usize),
    CsrMean { x: usize, adj: Arc<Adjacency> },
    Conv3dValid { x: usize, kernels: usize, bias: usize },
    MseLoss { pred: usize, target: usize },
}

#[derive(Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f64>,
    grad: Option<Vec<f64>>,
    needs_grad: bool,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

// --- chunk-parallel GEMM wrappers -------------------------------------------

/// `out = a @ b + beta * out` over fixed row chunks of `out`.
fn gemm_into(out: &mut [f64], beta: f64, a: ArrayView2<f64>, b: ArrayView2<f64>) {
    let (m, _) = a.dim();
    let (_, n) = b.dim();
    let mut out_view = ArrayViewMut2::from_shape((m, n), out).expect("gemm out shape");
    if m <= ROW_CHUNK {
        general_mat_mul(1.0, &a, &b, beta, &mut out_view);
        return;
    }
    rayon::scope(|scope| {
        let mut rest_out = out_view.view_mut();
        let mut rest_a = a;
        let mut rows_left = m;
        while rows_left > 0 {
            let take = ROW_CHUNK.min(rows_left);
            let (top_out, bot_out) = rest_out.split_at(Axis(0), take);
            let (top_a, bot_a) = rest_a.split_at(Axis(0), take);
            rest_out = bot_out;
            rest_a = bot_a;
            rows_left -= take;
            scope.spawn(move |_| {
                let mut top_out = top_out;
                general_mat_mul(1.0, &top_a, &b, beta, &mut top_out);
            });
        }
    });
}

/// `out += a^T @ b` where the contraction dimension `m` is long: per-chunk
/// partial products summed in fixed chunk order.
fn gemm_acc_transposed(out: &mut [f64], a: ArrayView2<f64>, b: ArrayView2<f64>) {
    let (m, k) = a.dim();
    let (_, n) = b.dim();
    if m <= ROW_CHUNK {
        let mut out_view = ArrayViewMut2::from_shape((k, n), out).expect("gemm out shape");
        general_mat_mul(1.0, &a.t(), &b, 1.0, &mut out_view);
        return;
    }
    let starts: Vec<usize> = (0..m).step_by(ROW_CHUNK).collect();
    let partials: Vec<Vec<f64>> = starts
        .par_iter()
        .map(|&start| {
            let end = (start + ROW_CHUNK).min(m);
            let mut partial = vec![0.0; k * n];
            let mut view = ArrayViewMut2::from_shape((k, n), &mut partial).unwrap();
            let a_chunk = a.slice(ndarray::s![start..end, ..]);
            let b_chunk = b.slice(ndarray::s![start..end, ..]);
            general_mat_mul(1.0, &a_chunk.t(), &b_chunk, 0.0, &mut view);
            partial
        })
        .collect();
    for partial in partials {
        for (o, p) in out.iter_mut().zip(&partial) {
            *o += p;
        }
    }
}

fn view2(data: &[f64], rows: usize, cols: usize) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((rows, cols), data).expect("matrix view")
}

/// Reverse-mode tape. Build tensors with [`Tape::leaf`], compose with the
/// recorded ops, then call [`Tape::backward`] on a scalar loss.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>, needs_grad: bool) -> Tensor {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            op,
            shape,
            value,
            grad: None,
            needs_grad,
        });
        Tensor {
            id: self.nodes.len() - 1,
        }
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes[id].needs_grad
    }

    pub fn leaf(&mut self, shape: &[usize], data: Vec<f64>, requires_grad: bool) -> Result<Tensor> {
        if numel(shape) != data.len() {
            return Err(shape_err(
                "leaf",
                format!(
                    "shape {:?} implies {} values, got {}",
                    shape,
                    numel(shape),
                    data.len()
                ),
            ));
        }
        Ok(self.push(Op::Leaf, shape.to_vec(), data, requires_grad))
    }

    pub fn value(&self, t: Tensor) -> &[f64] {
        &self.nodes[t.id].value
    }

    pub fn shape(&self, t: Tensor) -> &[usize] {
        &self.nodes[t.id].shape
    }

    pub fn grad(&self, t: Tensor) -> Option<&[f64]> {
        self.nodes[t.id].grad.as_deref()
    }

    fn mat_dims(&self, op: &'static str, t: Tensor) -> Result<(usize, usize)> {
        match self.nodes[t.id].shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(shape_err(op, format!("expected a matrix, got {other:?}"))),
        }
    }

    // --- elementwise ---------------------------------------------------------

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                "add",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let value = crate::parallel::zip_elems(self.value(a), self.value(b), |x, y| x + y);
        let needs = self.needs(a.id) || self.needs(b.id);
        let shape = self.nodes[a.id].shape.clone();
        Ok(self.push(Op::Add(a.id, b.id), shape, value, needs))
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                "mul",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let value = crate::parallel::zip_elems(self.value(a), self.value(b), |x, y| x * y);
        let needs = self.needs(a.id) || self.needs(b.id);
        let shape = self.nodes[a.id].shape.clone();
        Ok(self.push(Op::Mul(a.id, b.id), shape, value, needs))
    }

    pub fn scale(&mut self, a: Tensor, c: f64) -> Tensor {
        let value = crate::parallel::map_elems(self.value(a), |x| c * x);
        let needs = self.needs(a.id);
        let shape = self.nodes[a.id].shape.clone();
        self.push(Op::Scale(a.id, c), shape, value, needs)
    }

    pub fn relu(&mut self, a: Tensor) -> Tensor {
        let value = crate::parallel::map_elems(self.value(a), |x| x.max(0.0));
        let needs = self.needs(a.id);
        let shape = self.nodes[a.id].shape.clone();
        self.push(Op::Relu(a.id), shape, value, needs)
    }

    // --- matrix ops ------------------------------------------------------------

    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (m, ka) = self.mat_dims("matmul", a)?;
        let (kb, n) = self.mat_dims("matmul", b)?;
        if ka != kb {
            return Err(shape_err(
                "matmul",
                format!("inner dims differ: ({m}, {ka}) @ ({kb}, {n})"),
            ));
        }
        let mut value = vec![0.0; m * n];
        gemm_into(
            &mut value,
            0.0,
            view2(self.value(a), m, ka),
            view2(self.value(b), kb, n),
        );
        let needs = self.needs(a.id) || self.needs(b.id);
        Ok(self.push(Op::MatMul(a.id, b.id), vec![m, n], value, needs))
    }

    /// `x @ w + b` with `b` broadcast over rows.
    pub fn linear(&mut self, x: Tensor, w: Tensor, b: Tensor) -> Result<Tensor> {
        let (m, inp) = self.mat_dims("linear", x)?;
        let (win, out) = self.mat_dims("linear", w)?;
        if inp != win {
            return Err(shape_err(
                "linear",
                format!("x is ({m}, {inp}) but w is ({win}, {out})"),
            ));
        }
        match self.shape(b) {
            [len] if *len == out => {}
            other => {
                return Err(shape_err(
                    "linear",
                    format!("bias shape {other:?} does not match output dim {out}"),
                ))
            }
        }
        let mut value = vec![0.0; m * out];
        gemm_into(
            &mut value,
            0.0,
            view2(self.value(x), m, inp),
            view2(self.value(w), win, out),
        );
        let bias = self.value(b).to_vec();
        for_chunks_mut(&mut value, ROW_CHUNK * out, |_, slice| {
            for row in slice.chunks_exact_mut(out) {
                for (v, bv) in row.iter_mut().zip(&bias) {
                    *v += bv;
                }
            }
        });
        let needs = self.needs(x.id) || self.needs(w.id) || self.needs(b.id);
        Ok(self.push(
            Op::Linear {
                x: x.id,
                w: w.id,
                b: b.id,
            },
            vec![m, out],
            value,
            needs,
        ))
    }

    pub fn concat_cols(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (ra, ca) = self.mat_dims("concat_cols", a)?;
        let (rb, cb) = self.mat_dims("concat_cols", b)?;
        if ra != rb {
            return Err(shape_err(
                "concat_cols",
                format!("row counts differ: {ra} vs {rb}"),
            ));
        }
        let cols = ca + cb;
        let mut value = vec![0.0; ra * cols];
        {
            let av = self.value(a);
            let bv = self.value(b);
            let value_slice = &mut value;
            for_chunks_mut(value_slice, ROW_CHUNK * cols, |start, slice| {
                let row0 = start / cols;
                for (i, row) in slice.chunks_exact_mut(cols).enumerate() {
                    let r = row0 + i;
                    row[..ca].copy_from_slice(&av[r * ca..(r + 1) * ca]);
                    row[ca..].copy_from_slice(&bv[r * cb..(r + 1) * cb]);
                }
            });
        }
        let needs = self.needs(a.id) || self.needs(b.id);
        Ok(self.push(Op::ConcatCols(a.id, b.id), vec![ra, cols], value, needs))
    }

    /// Column means over all rows: `(r, c) -> (1, c)`. A single-row input is
    /// returned unchanged (degenerate aggregation).
    pub fn mean_rows(&mut self, a: Tensor) -> Result<Tensor> {
        let (r, c) = self.mat_dims("mean_rows", a)?;
        if r == 0 {
            return Err(shape_err("mean_rows", "no rows to average".into()));
        }
        let av = self.value(a);
        let mut value = vec![0.0; c];
        for row in av.chunks_exact(c) {
            for (v, x) in value.iter_mut().zip(row) {
                *v += x;
            }
        }
        let inv = 1.0 / r as f64;
        for v in &mut value {
            *v *= inv;
        }
        let needs = self.needs(a.id);
        Ok(self.push(Op::MeanRows(a.id), vec![1, c], value, needs))
    }

    pub fn reshape(&mut self, a: Tensor, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.value(a).len() {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {:?} changes element count", self.shape(a), shape),
            ));
        }
        let value = self.value(a).to_vec();
        let needs = self.needs(a.id);
        Ok(self.push(Op::Reshape(a.id), shape.to_vec(), value, needs))
    }

    /// Per-row mean aggregation over an [`Adjacency`]: output row `v` is the
    /// mean of the input rows listed for `v`. Summation follows list order.
    pub fn csr_mean(&mut self, x: Tensor, adj: Arc<Adjacency>) -> Result<Tensor> {
        let (n, d) = self.mat_dims("csr_mean", x)?;
        if n != adj.n_in {
            return Err(shape_err(
                "csr_mean",
                format!("input has {n} rows but adjacency expects {}", adj.n_in),
            ));
        }
        let n_out = adj.n_out;
        let mut value = vec![0.0; n_out * d];
        {
            let xv = self.value(x);
            let adj_ref = &adj;
            for_chunks_mut(&mut value, 256 * d, |start, slice| {
                let v0 = start / d;
                for (i, out_row) in slice.chunks_exact_mut(d).enumerate() {
                    let v = v0 + i;
                    for &u in &adj_ref.indices[adj_ref.offsets[v]..adj_ref.offsets[v + 1]] {
                        let src = &xv[u as usize * d..(u as usize + 1) * d];
                        for (o, s) in out_row.iter_mut().zip(src) {
                            *o += s;
                        }
                    }
                    let inv = 1.0 / adj_ref.degree(v) as f64;
                    for o in out_row.iter_mut() {
                        *o *= inv;
                    }
                }
            });
        }
        let needs = self.needs(x.id);
        Ok(self.push(Op::CsrMean { x: x.id, adj }, vec![n_out, d], value, needs))
    }

    /// Valid (no padding) cross-correlation of `(n, d, h, w)` inputs with
    /// `(kc, kd, kh, kw)` kernels plus per-channel bias, giving
    /// `(n, kc, od, oh, ow)`.
    pub fn conv3d_valid(&mut self, x: Tensor, kernels: Tensor, bias: Tensor) -> Result<Tensor> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernels).to_vec();
        let (n, d, h, w) = match xs.as_slice() {
            [n, d, h, w] => (*n, *d, *h, *w),
            other => {
                return Err(shape_err(
                    "conv3d_valid",
                    format!("input must be (n, d, h, w), got {other:?}"),
                ))
            }
        };
        let (kc, kd, kh, kw) = match ks.as_slice() {
            [kc, kd, kh, kw] => (*kc, *kd, *kh, *kw),
            other => {
                return Err(shape_err(
                    "conv3d_valid",
                    format!("kernels must be (kc, kd, kh, kw), got {other:?}"),
                ))
            }
        };
        if kd > d || kh > h || kw > w {
            return Err(shape_err(
                "conv3d_valid",
                format!("kernel ({kd}, {kh}, {kw}) larger than patch ({d}, {h}, {w})"),
            ));
        }
        if self.shape(bias) != [kc] {
            return Err(shape_err(
                "conv3d_valid",
                format!(
                    "bias shape {:?} does not match {kc} kernels",
                    self.shape(bias)
                ),
            ));
        }
        let (od, oh, ow) = (d - kd + 1, h - kh + 1, w - kw + 1);
        let out_per_sample = kc * od * oh * ow;
        let mut value = vec![0.0; n * out_per_sample];
        {
            let xv = self.value(x);
            let kv = self.value(kernels);
            let bv = self.value(bias);
            let in_per_sample = d * h * w;
            for_chunks_mut(&mut value, 64 * out_per_sample, |start, slice| {
                let s0 = start / out_per_sample;
                for (i, out_s) in slice.chunks_exact_mut(out_per_sample).enumerate() {
                    let xin = &xv[(s0 + i) * in_per_sample..(s0 + i + 1) * in_per_sample];
                    let mut o = 0usize;
                    for c in 0..kc {
                        let kern = &kv[c * kd * kh * kw..(c + 1) * kd * kh * kw];
                        for z in 0..od {
                            for y in 0..oh {
                                for xx in 0..ow {
                                    let mut acc = bv[c];
                                    let mut ki = 0usize;
                                    for dz in 0..kd {
                                        for dy in 0..kh {
                                            let base = (z + dz) * h * w + (y + dy) * w + xx;
                                            for dxk in 0..kw {
                                                acc += kern[ki] * xin[base + dxk];
                                                ki += 1;
                                            }
                                        }
                                    }
                                    out_s[o] = acc;
                                    o += 1;
                                }
                            }
                        }
                    }
                }
            });
        }
        let needs = self.needs(x.id) || self.needs(kernels.id) || self.needs(bias.id);
        Ok(self.push(
            Op::Conv3dValid {
                x: x.id,
                kernels: kernels.id,
                bias: bias.id,
            },
            vec![n, kc, od, oh, ow],
            value,
            needs,
        ))
    }

    /// Mean squared error over all elements; returns a scalar (shape `[1]`).
    pub fn mse_loss(&mut self, pred: Tensor, target: Tensor) -> Result<Tensor> {
        if self.shape(pred) != self.shape(target) {
            return Err(shape_err(
                "mse_loss",
                format!("{:?} vs {:?}", self.shape(pred), self.shape(target)),
            ));
        }
        let p = self.value(pred);
        let t = self.value(target);
        let n = p.len() as f64;
        let mut sum = 0.0;
        for (a, b) in p.iter().zip(t) {
            let d = a - b;
            sum += d * d;
        }
        let needs = self.needs(pred.id) || self.needs(target.id);
        Ok(self.push(
            Op::MseLoss {
                pred: pred.id,
                target: target.id,
            },
            vec![1],
            vec![sum / n],
            needs,
        ))
    }

    // --- backward --------------------------------------------------------------

    fn grad_buf(&mut self, id: usize) -> &mut Vec<f64> {
        // Sized from the shape: backward rules may temporarily move a node's
        // value out while borrowing its grad.
        let len = numel(&self.nodes[id].shape);
        self.nodes[id].grad.get_or_insert_with(|| vec![0.0; len])
    }

    /// Accumulates `d loss / d leaf` into every `requires_grad` leaf reachable
    /// from `loss`. Repeated calls keep accumulating.
    pub fn backward(&mut self, loss: Tensor) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(shape_err("backward", "empty tape".into()));
        }
        if numel(&self.nodes[loss.id].shape) != 1 {
            return Err(Error::NonScalarLoss {
                shape: self.nodes[loss.id].shape.clone(),
            });
        }
        self.grad_buf(loss.id)[0] += 1.0;
        for id in (0..=loss.id).rev() {
            if self.nodes[id].grad.is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            self.propagate(id);
        }
        Ok(())
    }

    fn propagate(&mut self, id: usize) {
        // Take the output grad out of the node so input grads can be updated
        // without aliasing it.
        let grad = self.nodes[id].grad.take().expect("caller checked");
        match &self.nodes[id].op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                for which in [a, b] {
                    if self.needs(which) {
                        let buf = self.grad_buf(which);
                        for (g, d) in buf.iter_mut().zip(&grad) {
                            *g += d;
                        }
                    }
                }
            }
            &Op::Mul(a, b) => {
                if self.needs(a) {
                    let bv = self.nodes[b].value.clone();
                    let buf = self.grad_buf(a);
                    for ((g, d), x) in buf.iter_mut().zip(&grad).zip(&bv) {
                        *g += d * x;
                    }
                }
                if self.needs(b) {
                    let av = self.nodes[a].value.clone();
                    let buf = self.grad_buf(b);
                    for ((g, d), x) in buf.iter_mut().zip(&grad).zip(&av) {
                        *g += d * x;
                    }
                }
            }
            &Op::Scale(a, c) => {
                if self.needs(a) {
                    let buf = self.grad_buf(a);
                    for (g, d) in buf.iter_mut().zip(&grad) {
                        *g += c * d;
                    }
                }
            }
            &Op::Relu(a) => {
                if self.needs(a) {
                    let av = std::mem::take(&mut self.nodes[a].value);
                    {
                        let buf = self.grad_buf(a);
                        for ((g, d), x) in buf.iter_mut().zip(&grad).zip(&av) {
                            if *x > 0.0 {
                                *g += d;
                            }
                        }
                    }
                    self.nodes[a].value = av;
                }
            }
            &Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                let n = self.nodes[b].shape[1];
                if self.needs(a) {
                    // da += grad @ b^T
                    let bt = transpose(&self.nodes[b].value, k, n);
                    let mut da = std::mem::take(self.grad_buf(a));
                    gemm_into(&mut da, 1.0, view2(&grad, m, n), view2(&bt, n, k));
                    self.nodes[a].grad = Some(da);
                }
                if self.needs(b) {
                    // db += a^T @ grad
                    let av = std::mem::take(&mut self.nodes[a].value);
                    let mut db = std::mem::take(self.grad_buf(b));
                    gemm_acc_transposed(&mut db, view2(&av, m, k), view2(&grad, m, n));
                    self.nodes[a].value = av;
                    self.nodes[b].grad = Some(db);
                }
            }
            &Op::Linear { x, w, b } => {
                let (m, inp) = (self.nodes[x].shape[0], self.nodes[x].shape[1]);
                let out = self.nodes[w].shape[1];
                if self.needs(x) {
                    let wt = transpose(&self.nodes[w].value, inp, out);
                    let mut dx = std::mem::take(self.grad_buf(x));
                    gemm_into(&mut dx, 1.0, view2(&grad, m, out), view2(&wt, out, inp));
                    self.nodes[x].grad = Some(dx);
                }
                if self.needs(w) {
                    let xv = std::mem::take(&mut self.nodes[x].value);
                    let mut dw = std::mem::take(self.grad_buf(w));
                    gemm_acc_transposed(&mut dw, view2(&xv, m, inp), view2(&grad, m, out));
                    self.nodes[x].value = xv;
                    self.nodes[w].grad = Some(dw);
                }
                if self.needs(b) {
                    let buf = self.grad_buf(b);
                    for row in grad.chunks_exact(out) {
                        for (g, d) in buf.iter_mut().zip(row) {
                            *g += d;
                        }
                    }
                }
            }
            &Op::ConcatCols(a, b) => {
                let ca = self.nodes[a].shape[1];
                let cb = self.nodes[b].shape[1];
                let cols = ca + cb;
                if self.needs(a) {
                    let buf = self.grad_buf(a);
                    for (r, row) in grad.chunks_exact(cols).enumerate() {
                        for (g, d) in buf[r * ca..(r + 1) * ca].iter_mut().zip(&row[..ca]) {
                            *g += d;
                        }
                    }
                }
                if self.needs(b) {
                    let buf = self.grad_buf(b);
                    for (r, row) in grad.chunks_exact(cols).enumerate() {
                        for (g, d) in buf[r * cb..(r + 1) * cb].iter_mut().zip(&row[ca..]) {
                            *g += d;
                        }
                    }
                }
            }
            &Op::MeanRows(a) => {
                if self.needs(a) {
                    let r = self.nodes[a].shape[0];
                    let c = self.nodes[a].shape[1];
                    let inv = 1.0 / r as f64;
                    let buf = self.grad_buf(a);
                    for row in buf.chunks_exact_mut(c) {
                        for (g, d) in row.iter_mut().zip(&grad) {
                            *g += d * inv;
                        }
                    }
                }
            }
            &Op::Reshape(a) => {
                if self.needs(a) {
                    let buf = self.grad_buf(a);
                    for (g, d) in buf.iter_mut().zip(&grad) {
                        *g += d;
                    }
                }
            }
            Op::CsrMean { x, adj } => {
                let (x, adj) = (*x, Arc::clone(adj));
                if self.needs(x) {
                    let d = self.nodes[x].shape[1];
                    let buf = self.grad_buf(x);
                    let grad_ref = &grad;
                    let adj_ref = &adj;
                    for_chunks_mut(buf, 256 * d, |start, slice| {
                        let u0 = start / d;
                        for (i, row) in slice.chunks_exact_mut(d).enumerate() {
                            let u = u0 + i;
                            let lo = adj_ref.rev_offsets[u];
                            let hi = adj_ref.rev_offsets[u + 1];
                            for &v in &adj_ref.rev_indices[lo..hi] {
                                let inv = 1.0 / adj_ref.degree(v as usize) as f64;
                                let src = &grad_ref[v as usize * d..(v as usize + 1) * d];
                                for (g, s) in row.iter_mut().zip(src) {
                                    *g += inv * s;
                                }
                            }
                        }
                    });
                }
            }
            &Op::Conv3dValid { x, kernels, bias } => {
                self.conv3d_backward(x, kernels, bias, &grad);
            }
            &Op::MseLoss { pred, target } => {
                let scale = 2.0 * grad[0] / self.nodes[pred].value.len() as f64;
                if self.needs(pred) {
                    let pv = self.nodes[pred].value.clone();
                    let tv = self.nodes[target].value.clone();
                    let buf = self.grad_buf(pred);
                    for ((g, p), t) in buf.iter_mut().zip(&pv).zip(&tv) {
                        *g += scale * (p - t);
                    }
                }
                if self.needs(target) {
                    let pv = self.nodes[pred].value.clone();
                    let tv = self.nodes[target].value.clone();
                    let buf = self.grad_buf(target);
                    for ((g, p), t) in buf.iter_mut().zip(&pv).zip(&tv) {
                        *g -= scale * (p - t);
                    }
                }
            }
        }
        self.nodes[id].grad = Some(grad);
    }

    fn conv3d_backward(&mut self, x: usize, kernels: usize, bias: usize, grad: &[f64]) {
        let xs = self.nodes[x].shape.clone();
        let ks = self.nodes[kernels].shape.clone();
        let (n, d, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (kc, kd, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        let (od, oh, ow) = (d - kd + 1, h - kh + 1, w - kw + 1);
        let in_per = d * h * w;
        let out_per = kc * od * oh * ow;
        let xv = self.nodes[x].value.clone();
        let kv = self.nodes[kernels].value.clone();

        if self.needs(bias) {
            let buf = self.grad_buf(bias);
            for s in 0..n {
                let gs = &grad[s * out_per..(s + 1) * out_per];
                for c in 0..kc {
                    let mut acc = 0.0;
                    for g in &gs[c * od * oh * ow..(c + 1) * od * oh * ow] {
                        acc += g;
                    }
                    buf[c] += acc;
                }
            }
        }
        if self.needs(kernels) {
            // Per-chunk partials reduced in fixed order.
            let starts: Vec<usize> = (0..n).step_by(64).collect();
            let partials: Vec<Vec<f64>> = starts
                .par_iter()
                .map(|&s0| {
                    let mut dk = vec![0.0; kc * kd * kh * kw];
                    for s in s0..(s0 + 64).min(n) {
                        let xin = &xv[s * in_per..(s + 1) * in_per];
                        let gs = &grad[s * out_per..(s + 1) * out_per];
                        let mut o = 0usize;
                        for c in 0..kc {
                            let dkern = &mut dk[c * kd * kh * kw..(c + 1) * kd * kh * kw];
                            for z in 0..od {
                                for y in 0..oh {
                                    for xx in 0..ow {
                                        let g = gs[o];
                                        o += 1;
                                        let mut ki = 0usize;
                                        for dz in 0..kd {
                                            for dy in 0..kh {
                                                let base = (z + dz) * h * w + (y + dy) * w + xx;
                                                for dxk in 0..kw {
                                                    dkern[ki] += g * xin[base + dxk];
                                                    ki += 1;
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    dk
                })
                .collect();
            let buf = self.grad_buf(kernels);
            for partial in partials {
                for (g, p) in buf.iter_mut().zip(&partial) {
                    *g += p;
                }
            }
        }
        if self.needs(x) {
            let buf = self.grad_buf(x);
            let kv_ref = &kv;
            for_chunks_mut(buf, 64 * in_per, |start, slice| {
                let s0 = start / in_per;
                for (i, dx) in slice.chunks_exact_mut(in_per).enumerate() {
                    let s = s0 + i;
                    let gs = &grad[s * out_per..(s + 1) * out_per];
                    let mut o = 0usize;
                    for c in 0..kc {
                        let kern = &kv_ref[c * kd * kh * kw..(c + 1) * kd * kh * kw];
                        for z in 0..od {
                            for y in 0..oh {
                                for xx in 0..ow {
                                    let g = gs[o];
                                    o += 1;
                                    let mut ki = 0usize;
                                    for dz in 0..kd {
                                        for dy in 0..kh {
                                            let base = (z + dz) * h * w + (y + dy) * w + xx;
                                            for dxk in 0..kw {
                                                dx[base + dxk] += g * kern[ki];
                                                ki += 1;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            });
        }
    }
}

fn transpose(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

/// Finite-difference gradient checking used by tests.
pub mod check {
    /// Central difference `(f(x+h) - f(x-h)) / 2h` per coordinate of `x`.
    pub fn central_diff(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
        let mut grad = vec![0.0; x.len()];
        let mut work = x.to_vec();
        for i in 0..x.len() {
            work[i] = x[i] + h;
            let up = f(&work);
            work[i] = x[i] - h;
            let down = f(&work);
            work[i] = x[i];
            grad[i] = (up - down) / (2.0 * h);
        }
        grad
    }

    /// `max_i |a_i - n_i| / max(1, |a_i|, |n_i|)`.
    pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
        assert_eq!(analytic.len(), numeric.len());
        analytic
            .iter()
            .zip(numeric)
            .map(|(&a, &n)| (a - n).abs() / 1.0f64.max(a.abs()).max(n.abs()))
            .fold(0.0, f64::max)
    }
}
