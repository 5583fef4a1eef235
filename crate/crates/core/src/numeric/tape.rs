//! Reverse-mode differentiation over a linear operation record.
//!
//! Every op evaluates eagerly, stores its result on the tape and remembers its
//! inputs. [`Tape::backward`] walks the record in reverse and accumulates
//! vector-Jacobian products into per-node gradients. Nodes built only from
//! constants are skipped.

use super::tensor::{gemm, sigmoid_scalar, softmax_rows, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBroadcast(Var, Var),
    MulColBroadcast(Var, Var),
    Affine(Var, f64),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    Log(Var),
    Exp(Var),
    Sigmoid(Var),
    Relu(Var),
    Powf(Var, f64),
    Clamp(Var, f64, f64),
    SoftmaxRows(Var),
    Conv1d { x: Var, w: Var, b: Var },
    NormalizeRows(Var, f64),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Operation record for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the differentiated scalar with respect to `v`, if any flowed.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(t) => t.add_assign(&g),
        None => *slot = Some(g),
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A trainable leaf; gradients are reported for it.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant leaf; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn matrix(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.value(v).expect_matrix(op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = super::tensor::matmul(self.value(a), self.value(b))?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul_nt")?;
        let (n, k2) = self.matrix(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::dim("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            1,
            k as isize,
            &mut out,
            false,
        );
        let ng = self.needs(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulNT(a, b), ng))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    /// `x[T×n] + bias[1×n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (t, n) = self.matrix(x, "add_row")?;
        if self.shape(bias) != [1, n] {
            return Err(Error::dim("add_row", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n) {
            for (v, bv) in row.iter_mut().zip(&b) {
                *v += bv;
            }
        }
        let ng = self.needs(&[x, bias]);
        Ok(self.push(Tensor::from_parts(vec![t, n], out), Op::AddRowBroadcast(x, bias), ng))
    }

    /// `x[T×n] ⊙ w[T×1]` broadcast over columns.
    pub fn mul_col(&mut self, x: Var, w: Var) -> Result<Var> {
        let (t, n) = self.matrix(x, "mul_col")?;
        if self.shape(w) != [t, 1] {
            return Err(Error::dim("mul_col", self.shape(x), self.shape(w)));
        }
        let wv = self.value(w).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for (row, s) in out.chunks_mut(n).zip(&wv) {
            for v in row.iter_mut() {
                *v *= s;
            }
        }
        let ng = self.needs(&[x, w]);
        Ok(self.push(Tensor::from_parts(vec![t, n], out), Op::MulColBroadcast(x, w), ng))
    }

    /// `scale · x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(x).map(|v| scale * v + shift);
        let ng = self.needs(&[x]);
        self.push(out, Op::Affine(x, scale), ng)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    /// Concatenation along the feature (column) axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidTensor("concat of zero tensors".into()))?;
        let (t, _) = self.matrix(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (tp, c) = self.matrix(p, "concat_cols")?;
            if tp != t {
                return Err(Error::dim("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(t * total);
        for r in 0..t {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let ng = self.needs(parts);
        Ok(self.push(
            Tensor::from_parts(vec![t, total], out),
            Op::ConcatCols(parts.to_vec()),
            ng,
        ))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (t, c) = self.matrix(x, "slice_cols")?;
        if start >= end || end > c {
            return Err(Error::dim("slice_cols", self.shape(x), &[start, end]));
        }
        let w = end - start;
        let src = self.value(x);
        let mut out = Vec::with_capacity(t * w);
        for r in 0..t {
            out.extend_from_slice(&src.row(r)[start..end]);
        }
        let ng = self.needs(&[x]);
        Ok(self.push(Tensor::from_parts(vec![t, w], out), Op::SliceCols(x, start), ng))
    }

    /// Selects rows by index (duplicates allowed).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (t, c) = self.matrix(x, "gather_rows")?;
        if rows.is_empty() || rows.iter().any(|&r| r >= t) {
            return Err(Error::dim("gather_rows", self.shape(x), &[rows.len()]));
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            out.extend_from_slice(src.row(r));
        }
        let ng = self.needs(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![rows.len(), c], out),
            Op::GatherRows(x, rows.to_vec()),
            ng,
        ))
    }

    /// Sum of all entries, as a 1×1 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    /// Mean of all entries, as a 1×1 tensor.
    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.sum() / v.len() as f64;
        let ng = self.needs(&[x]);
        self.push(Tensor::scalar(m), Op::Mean(x), ng)
    }

    /// Per-column mean over rows: `T×n → 1×n`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (t, n) = self.matrix(x, "mean_rows")?;
        let mut out = vec![0.0; n];
        for row in self.value(x).data().chunks(n) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in out.iter_mut() {
            *o /= t as f64;
        }
        let ng = self.needs(&[x]);
        Ok(self.push(Tensor::from_parts(vec![1, n], out), Op::MeanRows(x), ng))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v <= 0.0) {
            return Err(Error::NonFinite("log of non-positive value".into()));
        }
        let out = self.value(x).map(f64::ln);
        let ng = self.needs(&[x]);
        Ok(self.push(out, Op::Log(x), ng))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::exp);
        if !out.is_finite() {
            return Err(Error::NonFinite("exp overflow".into()));
        }
        let ng = self.needs(&[x]);
        Ok(self.push(out, Op::Exp(x), ng))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid_scalar);
        let ng = self.needs(&[x]);
        self.push(out, Op::Sigmoid(x), ng)
    }

    /// Elementwise `max(0, x)`.
    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let ng = self.needs(&[x]);
        self.push(out, Op::Relu(x), ng)
    }

    /// Elementwise `x^e`; inputs must be positive unless `e` is a
    /// nonnegative integer.
    pub fn powf(&mut self, x: Var, e: f64) -> Var {
        let out = self.value(x).map(|v| v.powf(e));
        let ng = self.needs(&[x]);
        self.push(out, Op::Powf(x, e), ng)
    }

    /// Elementwise clamp to `[lo, hi]`; the gradient is zero where clamping is
    /// active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(x).map(|v| v.clamp(lo, hi));
        let ng = self.needs(&[x]);
        self.push(out, Op::Clamp(x, lo, hi), ng)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.matrix(x, "softmax_rows")?;
        let out = softmax_rows(self.value(x));
        let ng = self.needs(&[x]);
        Ok(self.push(out, Op::SoftmaxRows(x), ng))
    }

    /// Temporal 1-D convolution with zero "same" padding.
    ///
    /// `x` is `T×c_in`, `w` is `k×c_in×c_out` (odd `k`) and `b` is `1×c_out`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (t, cin) = self.matrix(x, "conv1d")?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 3 || ws[1] != cin || ws[0] % 2 == 0 {
            return Err(Error::dim("conv1d", self.shape(x), &ws));
        }
        let (k, cout) = (ws[0], ws[2]);
        if self.shape(b) != [1, cout] {
            return Err(Error::dim("conv1d", &ws, self.shape(b)));
        }
        let pad = k / 2;
        let mut out = vec![0.0; t * cout];
        for row in out.chunks_mut(cout) {
            row.copy_from_slice(self.value(b).data());
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        for kk in 0..k {
            let (lo, hi) = conv_range(t, kk, pad);
            if lo >= hi {
                continue;
            }
            let src = lo + kk - pad;
            gemm(
                hi - lo,
                cin,
                cout,
                &xv[src * cin..],
                cin as isize,
                1,
                &wv[kk * cin * cout..],
                cout as isize,
                1,
                &mut out[lo * cout..],
                true,
            );
        }
        let ng = self.needs(&[x, w, b]);
        Ok(self.push(Tensor::from_parts(vec![t, cout], out), Op::Conv1d { x, w, b }, ng))
    }

    /// Scales each row to unit length: `x / sqrt(|x|² + eps)`.
    pub fn normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (_, c) = self.matrix(x, "normalize_rows")?;
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(c) {
            let n = (row.iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
            for v in row.iter_mut() {
                *v /= n;
            }
        }
        let shape = self.shape(x).to_vec();
        let ng = self.needs(&[x]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::NormalizeRows(x, eps), ng))
    }

    /// Back-propagates from the scalar `loss` and returns every gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::dim("backward", self.shape(loss), &[1, 1]));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let send = |grads: &mut [Option<Tensor>], v: Var, t: Tensor| {
            if self.nodes[v.0].needs_grad {
                accumulate(&mut grads[v.0], t);
            }
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                let (m, k) = (av.rows(), av.cols());
                let n = bv.cols();
                if self.nodes[a.0].needs_grad {
                    let mut da = vec![0.0; m * k];
                    gemm(
                        m,
                        n,
                        k,
                        g.data(),
                        n as isize,
                        1,
                        bv.data(),
                        1,
                        n as isize,
                        &mut da,
                        false,
                    );
                    send(grads, a, Tensor::from_parts(vec![m, k], da));
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = vec![0.0; k * n];
                    gemm(
                        k,
                        m,
                        n,
                        av.data(),
                        1,
                        k as isize,
                        g.data(),
                        n as isize,
                        1,
                        &mut db,
                        false,
                    );
                    send(grads, b, Tensor::from_parts(vec![k, n], db));
                }
            }
            &Op::MatMulNT(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                let (m, k) = (av.rows(), av.cols());
                let n = bv.rows();
                if self.nodes[a.0].needs_grad {
                    let mut da = vec![0.0; m * k];
                    gemm(
                        m,
                        n,
                        k,
                        g.data(),
                        n as isize,
                        1,
                        bv.data(),
                        k as isize,
                        1,
                        &mut da,
                        false,
                    );
                    send(grads, a, Tensor::from_parts(vec![m, k], da));
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = vec![0.0; n * k];
                    gemm(
                        n,
                        m,
                        k,
                        g.data(),
                        1,
                        n as isize,
                        av.data(),
                        k as isize,
                        1,
                        &mut db,
                        false,
                    );
                    send(grads, b, Tensor::from_parts(vec![n, k], db));
                }
            }
            &Op::Add(a, b) => {
                send(grads, a, g.clone());
                send(grads, b, g.clone());
            }
            &Op::Sub(a, b) => {
                send(grads, a, g.clone());
                send(grads, b, g.scale(-1.0));
            }
            &Op::Mul(a, b) => {
                send(grads, a, g.zip_map(self.value(b), |x, y| x * y));
                send(grads, b, g.zip_map(self.value(a), |x, y| x * y));
            }
            &Op::AddRowBroadcast(x, bias) => {
                send(grads, x, g.clone());
                let n = g.cols();
                let mut db = vec![0.0; n];
                for row in g.data().chunks(n) {
                    for (o, v) in db.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                send(grads, bias, Tensor::from_parts(vec![1, n], db));
            }
            &Op::MulColBroadcast(x, w) => {
                let n = g.cols();
                let wv = self.value(w).data();
                let mut dx = g.data().to_vec();
                for (row, s) in dx.chunks_mut(n).zip(wv) {
                    for v in row.iter_mut() {
                        *v *= s;
                    }
                }
                send(grads, x, Tensor::from_parts(g.shape().to_vec(), dx));
                let dw: Vec<f64> = g
                    .data()
                    .chunks(n)
                    .zip(self.value(x).data().chunks(n))
                    .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
                    .collect();
                send(grads, w, Tensor::from_parts(vec![dw.len(), 1], dw));
            }
            &Op::Affine(x, s) => send(grads, x, g.scale(s)),
            Op::ConcatCols(parts) => {
                let t = g.rows();
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if self.nodes[p.0].needs_grad {
                        let mut d = Vec::with_capacity(t * c);
                        for r in 0..t {
                            d.extend_from_slice(&g.data()[r * total + offset..r * total + offset + c]);
                        }
                        send(grads, p, Tensor::from_parts(vec![t, c], d));
                    }
                    offset += c;
                }
            }
            &Op::SliceCols(x, start) => {
                let xv = self.value(x);
                let (t, c) = (xv.rows(), xv.cols());
                let w = g.cols();
                let mut d = vec![0.0; t * c];
                for r in 0..t {
                    d[r * c + start..r * c + start + w].copy_from_slice(g.row(r));
                }
                send(grads, x, Tensor::from_parts(vec![t, c], d));
            }
            Op::GatherRows(x, rows) => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut d = vec![0.0; xv.len()];
                for (i, &r) in rows.iter().enumerate() {
                    for (o, v) in d[r * c..(r + 1) * c].iter_mut().zip(g.row(i)) {
                        *o += v;
                    }
                }
                send(grads, *x, Tensor::from_parts(xv.shape().to_vec(), d));
            }
            &Op::Sum(x) => {
                let s = g.item();
                send(grads, x, Tensor::full(self.shape(x), s));
            }
            &Op::Mean(x) => {
                let n = self.value(x).len() as f64;
                send(grads, x, Tensor::full(self.shape(x), g.item() / n));
            }
            &Op::MeanRows(x) => {
                let xv = self.value(x);
                let (t, n) = (xv.rows(), xv.cols());
                let mut d = Vec::with_capacity(t * n);
                for _ in 0..t {
                    d.extend(g.data().iter().map(|v| v / t as f64));
                }
                send(grads, x, Tensor::from_parts(vec![t, n], d));
            }
            &Op::Log(x) => send(grads, x, g.zip_map(self.value(x), |gv, xv| gv / xv)),
            &Op::Exp(x) => send(grads, x, g.zip_map(&node.value, |gv, yv| gv * yv)),
            &Op::Sigmoid(x) => send(grads, x, g.zip_map(&node.value, |gv, s| gv * s * (1.0 - s))),
            &Op::Relu(x) => send(
                grads,
                x,
                g.zip_map(self.value(x), |gv, xv| if xv > 0.0 { gv } else { 0.0 }),
            ),
            &Op::Powf(x, e) => send(
                grads,
                x,
                g.zip_map(
                    self.value(x),
                    |gv, xv| {
                        if e == 0.0 {
                            0.0
                        } else {
                            gv * e * xv.powf(e - 1.0)
                        }
                    },
                ),
            ),
            &Op::Clamp(x, lo, hi) => send(
                grads,
                x,
                g.zip_map(self.value(x), |gv, xv| if xv > lo && xv < hi { gv } else { 0.0 }),
            ),
            &Op::SoftmaxRows(x) => {
                let s = &node.value;
                let n = s.cols();
                let mut d = vec![0.0; s.len()];
                for ((dr, sr), gr) in d.chunks_mut(n).zip(s.data().chunks(n)).zip(g.data().chunks(n)) {
                    let dot: f64 = sr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, sv), gv) in dr.iter_mut().zip(sr).zip(gr) {
                        *o = sv * (gv - dot);
                    }
                }
                send(grads, x, Tensor::from_parts(s.shape().to_vec(), d));
            }
            &Op::Conv1d { x, w, b } => {
                let xv = self.value(x);
                let wv = self.value(w);
                let (t, cin) = (xv.rows(), xv.cols());
                let (k, cout) = (wv.shape()[0], wv.shape()[2]);
                let pad = k / 2;
                let gd = g.data();
                if self.nodes[x.0].needs_grad {
                    let mut dx = vec![0.0; t * cin];
                    for kk in 0..k {
                        let (lo, hi) = conv_range(t, kk, pad);
                        if lo >= hi {
                            continue;
                        }
                        let src = lo + kk - pad;
                        // dx[src..] += g[lo..hi] · W_kᵀ
                        gemm(
                            hi - lo,
                            cout,
                            cin,
                            &gd[lo * cout..],
                            cout as isize,
                            1,
                            &wv.data()[kk * cin * cout..],
                            1,
                            cout as isize,
                            &mut dx[src * cin..],
                            true,
                        );
                    }
                    send(grads, x, Tensor::from_parts(vec![t, cin], dx));
                }
                if self.nodes[w.0].needs_grad {
                    let mut dw = vec![0.0; k * cin * cout];
                    for kk in 0..k {
                        let (lo, hi) = conv_range(t, kk, pad);
                        if lo >= hi {
                            continue;
                        }
                        let src = lo + kk - pad;
                        // dW_k = x[src..]ᵀ · g[lo..hi]
                        gemm(
                            cin,
                            hi - lo,
                            cout,
                            &xv.data()[src * cin..],
                            1,
                            cin as isize,
                            &gd[lo * cout..],
                            cout as isize,
                            1,
                            &mut dw[kk * cin * cout..],
                            false,
                        );
                    }
                    send(grads, w, Tensor::from_parts(vec![k, cin, cout], dw));
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = vec![0.0; cout];
                    for row in gd.chunks(cout) {
                        for (o, v) in db.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    send(grads, b, Tensor::from_parts(vec![1, cout], db));
                }
            }
            &Op::NormalizeRows(x, eps) => {
                let xv = self.value(x);
                let c = xv.cols();
                let mut d = vec![0.0; xv.len()];
                for ((dr, xr), gr) in d.chunks_mut(c).zip(xv.data().chunks(c)).zip(g.data().chunks(c)) {
                    let n2 = xr.iter().map(|v| v * v).sum::<f64>() + eps;
                    let n = n2.sqrt();
                    let xg: f64 = xr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, xv), gv) in dr.iter_mut().zip(xr).zip(gr) {
                        *o = gv / n - xv * xg / (n2 * n);
                    }
                }
                send(grads, x, Tensor::from_parts(xv.shape().to_vec(), d));
            }
        }
    }
}

/// Output rows `[lo, hi)` whose source row `t + kk - pad` is inside `[0, t)`.
fn conv_range(t: usize, kk: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kk);
    let hi = (t + pad).saturating_sub(kk).min(t);
    (lo, hi)
}
