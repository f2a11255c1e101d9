//! Define-by-run reverse-mode tape.
//!
//! Every primitive appends one node holding its value and enough saved state
//! to run its adjoint. Node ids are handed out in creation order, so the node
//! list is already topologically sorted and `backward` is a single reverse
//! sweep over it.

use std::cell::RefCell;
use std::rc::Rc;

use super::kernels::{axpy, gemm};
use super::tensor::Tensor;
use crate::error::{contract_err, dim_err, Error, Result};

/// Epsilon inside the root-mean-square normalizer.
pub const RMS_EPS: f64 = 1e-6;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    /// `a * b^T`
    MatMulT(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Silu(usize),
    Softmax(usize),
    RmsNorm {
        x: usize,
        gain: usize,
        inv_rms: Vec<f64>,
    },
    SliceCols {
        a: usize,
        start: usize,
    },
    ConcatCols(Vec<usize>),
    SliceRows {
        a: usize,
        start: usize,
    },
    ConcatRows(Vec<usize>),
    Reshape(usize),
    Gather {
        table: usize,
        ids: Vec<usize>,
    },
    Sum(usize),
    Mean(usize),
    RotatePairs {
        a: usize,
        cos: Rc<Vec<f64>>,
        sin: Rc<Vec<f64>>,
        head_dim: usize,
    },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
}

/// Single-owner recording of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(Rc::new(value), Op::Leaf)
    }

    /// Records a leaf without copying the buffer.
    pub fn leaf_shared(&self, value: Rc<Tensor>) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    /// Row lookup into `table` (an embedding matrix).
    pub fn gather<'t>(&'t self, table: Var<'t>, ids: &[usize]) -> Result<Var<'t>> {
        let t = table.value();
        let (rows, cols) = (t.rows(), t.cols());
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(dim_err!("embedding id {} out of range {}", id, rows));
            }
            out.extend_from_slice(t.row(id));
        }
        let value = Tensor::new(&[ids.len(), cols], out)?;
        Ok(self.push(
            Rc::new(value),
            Op::Gather {
                table: table.id,
                ids: ids.to_vec(),
            },
        ))
    }

    fn push(&self, value: Rc<Tensor>, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(contract_err!("loss belongs to another tape"));
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(contract_err!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            backprop_node(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `v`, or `None` when no path reaches it.
    pub fn get(&self, v: Var<'_>) -> Option<Tensor> {
        self.grads[v.id]
            .as_ref()
            .map(|g| Tensor::new(&self.shapes[v.id], g.clone()).expect("gradient shape"))
    }

    /// Gradient with respect to `v`, zero-filled when unreachable.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        self.get(v)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.id]))
    }

    pub fn raw(&self, v: Var<'_>) -> Option<&[f64]> {
        self.grads[v.id].as_deref()
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], id: usize, len: usize) -> &mut Vec<f64> {
    grads[id].get_or_insert_with(|| vec![0.0; len])
}

fn backprop_node(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let val = |i: usize| -> &Tensor { &nodes[i].value };
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul(a, b) => {
            let (ta, tb) = (val(a), val(b));
            let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
            gemm(m, n, k, g, false, tb.data(), true, acc(grads, a, m * k), 1.0);
            gemm(k, m, n, ta.data(), true, g, false, acc(grads, b, k * n), 1.0);
        }
        &Op::MatMulT(a, b) => {
            let (ta, tb) = (val(a), val(b));
            let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
            gemm(m, n, k, g, false, tb.data(), false, acc(grads, a, m * k), 1.0);
            gemm(n, m, k, g, true, ta.data(), false, acc(grads, b, n * k), 1.0);
        }
        &Op::Transpose(a) => {
            let ta = val(a);
            let (r, c) = (ta.shape()[0], ta.shape()[1]);
            let ga = acc(grads, a, r * c);
            for i in 0..r {
                for j in 0..c {
                    ga[i * c + j] += g[j * r + i];
                }
            }
        }
        &Op::Add(a, b) => {
            axpy(1.0, g, acc(grads, a, g.len()));
            axpy(1.0, g, acc(grads, b, g.len()));
        }
        &Op::Sub(a, b) => {
            axpy(1.0, g, acc(grads, a, g.len()));
            axpy(-1.0, g, acc(grads, b, g.len()));
        }
        &Op::Mul(a, b) => {
            let (va, vb) = (val(a).data(), val(b).data());
            let ga = acc(grads, a, g.len());
            for ((gi, x), gy) in ga.iter_mut().zip(vb).zip(g) {
                *gi += gy * x;
            }
            let gb = acc(grads, b, g.len());
            for ((gi, x), gy) in gb.iter_mut().zip(va).zip(g) {
                *gi += gy * x;
            }
        }
        &Op::Scale(a, c) => axpy(c, g, acc(grads, a, g.len())),
        &Op::AddRow(a, row) => {
            axpy(1.0, g, acc(grads, a, g.len()));
            let cols = val(row).len();
            let gr = acc(grads, row, cols);
            for chunk in g.chunks(cols) {
                axpy(1.0, chunk, gr);
            }
        }
        &Op::MulRow(a, row) => {
            let r = val(row).data();
            let x = val(a).data();
            let cols = r.len();
            let ga = acc(grads, a, g.len());
            for (gchunk, gachunk) in g.chunks(cols).zip(ga.chunks_mut(cols)) {
                for j in 0..cols {
                    gachunk[j] += gchunk[j] * r[j];
                }
            }
            let gr = acc(grads, row, cols);
            for (gchunk, xchunk) in g.chunks(cols).zip(x.chunks(cols)) {
                for j in 0..cols {
                    gr[j] += gchunk[j] * xchunk[j];
                }
            }
        }
        &Op::Silu(a) => {
            let x = val(a).data();
            let ga = acc(grads, a, g.len());
            for ((gi, &xi), gy) in ga.iter_mut().zip(x).zip(g) {
                let s = sigmoid(xi);
                *gi += gy * s * (1.0 + xi * (1.0 - s));
            }
        }
        &Op::Softmax(a) => {
            let y = node.value.data();
            let cols = node.value.cols();
            let ga = acc(grads, a, g.len());
            for ((yr, gr), gar) in y.chunks(cols).zip(g.chunks(cols)).zip(ga.chunks_mut(cols)) {
                let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                for j in 0..cols {
                    gar[j] += yr[j] * (gr[j] - dot);
                }
            }
        }
        Op::RmsNorm { x, gain, inv_rms } => {
            let (x, gain) = (*x, *gain);
            let xs = val(x).data();
            let w = val(gain).data();
            let cols = w.len();
            let n = cols as f64;
            let mut gw = vec![0.0; cols];
            let gx = acc(grads, x, g.len());
            for (r, ((xr, gr), gxr)) in xs
                .chunks(cols)
                .zip(g.chunks(cols))
                .zip(gx.chunks_mut(cols))
                .enumerate()
            {
                let inv = inv_rms[r];
                let mut dot = 0.0;
                for j in 0..cols {
                    dot += gr[j] * w[j] * xr[j];
                    gw[j] += gr[j] * xr[j] * inv;
                }
                let k = inv * inv * inv * dot / n;
                for j in 0..cols {
                    gxr[j] += inv * w[j] * gr[j] - k * xr[j];
                }
            }
            axpy(1.0, &gw, acc(grads, gain, cols));
        }
        &Op::SliceCols { a, start } => {
            let ta = val(a);
            let (rows, cols) = (ta.rows(), ta.cols());
            let width = node.value.cols();
            let ga = acc(grads, a, rows * cols);
            for r in 0..rows {
                axpy(
                    1.0,
                    &g[r * width..(r + 1) * width],
                    &mut ga[r * cols + start..r * cols + start + width],
                );
            }
        }
        Op::ConcatCols(parts) => {
            let total = node.value.cols();
            let rows = node.value.rows();
            let mut offset = 0;
            for &p in parts {
                let width = val(p).cols();
                let gp = acc(grads, p, rows * width);
                for r in 0..rows {
                    axpy(
                        1.0,
                        &g[r * total + offset..r * total + offset + width],
                        &mut gp[r * width..(r + 1) * width],
                    );
                }
                offset += width;
            }
        }
        &Op::SliceRows { a, start } => {
            let ta = val(a);
            let cols = ta.cols();
            let ga = acc(grads, a, ta.len());
            axpy(1.0, g, &mut ga[start * cols..start * cols + g.len()]);
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let n = val(p).len();
                axpy(1.0, &g[offset..offset + n], acc(grads, p, n));
                offset += n;
            }
        }
        &Op::Reshape(a) => axpy(1.0, g, acc(grads, a, g.len())),
        Op::Gather { table, ids } => {
            let t = val(*table);
            let cols = t.cols();
            let gt = acc(grads, *table, t.len());
            for (r, &id) in ids.iter().enumerate() {
                axpy(
                    1.0,
                    &g[r * cols..(r + 1) * cols],
                    &mut gt[id * cols..(id + 1) * cols],
                );
            }
        }
        &Op::Sum(a) => {
            let n = val(a).len();
            let ga = acc(grads, a, n);
            ga.iter_mut().for_each(|x| *x += g[0]);
        }
        &Op::Mean(a) => {
            let n = val(a).len();
            let ga = acc(grads, a, n);
            let s = g[0] / n as f64;
            ga.iter_mut().for_each(|x| *x += s);
        }
        Op::RotatePairs {
            a,
            cos,
            sin,
            head_dim,
        } => {
            let cols = node.value.cols();
            let ga = acc(grads, *a, g.len());
            rotate_rows(g, ga, cols, *head_dim, cos, sin, true);
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Rotates every adjacent pair `(2m, 2m+1)` of each head by the angle whose
/// cosine/sine sit at `[row * half + m]`; accumulates into `out`.
/// `inverse` applies the transposed rotation (used by the adjoint).
pub(crate) fn rotate_rows(
    x: &[f64],
    out: &mut [f64],
    cols: usize,
    head_dim: usize,
    cos: &[f64],
    sin: &[f64],
    inverse: bool,
) {
    let half = head_dim / 2;
    let sign = if inverse { -1.0 } else { 1.0 };
    for (r, (xr, or)) in x.chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
        let c = &cos[r * half..(r + 1) * half];
        let s = &sin[r * half..(r + 1) * half];
        for h in 0..cols / head_dim {
            let base = h * head_dim;
            for m in 0..half {
                let (x0, x1) = (xr[base + 2 * m], xr[base + 2 * m + 1]);
                let (cm, sm) = (c[m], sign * s[m]);
                or[base + 2 * m] += x0 * cm - x1 * sm;
                or[base + 2 * m + 1] += x0 * sm + x1 * cm;
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'t> {
        self.tape.push(Rc::new(value), op)
    }

    fn same_tape(&self, other: &Var<'t>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(contract_err!("operands recorded on different tapes"))
        }
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let value = self.value().matmul(&other.value())?;
        Ok(self.push(value, Op::MatMul(self.id, other.id)))
    }

    /// `self * other^T` without materializing the transpose.
    pub fn matmul_t(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let (a, b) = (self.value(), other.value());
        if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[1] {
            return Err(dim_err!("matmul_t {:?} x {:?}^T", a.shape(), b.shape()));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[0]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, a.data(), false, b.data(), true, &mut out, 0.0);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMulT(self.id, other.id)))
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let a = self.value();
        if a.shape().len() != 2 {
            return Err(dim_err!("transpose needs a matrix, got {:?}", a.shape()));
        }
        let (r, c) = (a.shape()[0], a.shape()[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = a.data()[i * c + j];
            }
        }
        Ok(self.push(Tensor::new(&[c, r], out)?, Op::Transpose(self.id)))
    }

    fn elementwise(
        &self,
        other: Var<'t>,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let value = self.value().zip_map(&other.value(), f)?;
        Ok(self.push(value, op))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        let value = self.value().map(|x| c * x);
        self.push(value, Op::Scale(self.id, c))
    }

    fn check_row(&self, row: &Var<'t>) -> Result<(Rc<Tensor>, Rc<Tensor>)> {
        self.same_tape(row)?;
        let (a, r) = (self.value(), row.value());
        if r.len() != a.cols() {
            return Err(dim_err!(
                "row of length {} cannot broadcast over last axis {}",
                r.len(),
                a.cols()
            ));
        }
        Ok((a, r))
    }

    /// Adds a vector to every row (last-axis broadcast).
    pub fn add_row(&self, row: Var<'t>) -> Result<Var<'t>> {
        let (a, r) = self.check_row(&row)?;
        let cols = r.len();
        let mut data = a.data().to_vec();
        for chunk in data.chunks_mut(cols) {
            axpy(1.0, r.data(), chunk);
        }
        Ok(self.push(Tensor::new(a.shape(), data)?, Op::AddRow(self.id, row.id)))
    }

    /// Multiplies every row by a vector (last-axis broadcast).
    pub fn mul_row(&self, row: Var<'t>) -> Result<Var<'t>> {
        let (a, r) = self.check_row(&row)?;
        let cols = r.len();
        let mut data = a.data().to_vec();
        for chunk in data.chunks_mut(cols) {
            for (x, w) in chunk.iter_mut().zip(r.data()) {
                *x *= w;
            }
        }
        Ok(self.push(Tensor::new(a.shape(), data)?, Op::MulRow(self.id, row.id)))
    }

    pub fn silu(&self) -> Var<'t> {
        let value = self.value().map(|x| x * sigmoid(x));
        self.push(value, Op::Silu(self.id))
    }

    /// Softmax along the last axis with row-max subtraction.
    pub fn softmax_rows(&self) -> Result<Var<'t>> {
        let a = self.value();
        let cols = a.cols();
        if cols == 0 {
            return Err(dim_err!("softmax over an empty axis"));
        }
        if !a.is_finite() {
            return Err(Error::Numeric("softmax input is not finite".into()));
        }
        let mut data = a.data().to_vec();
        for row in data.chunks_mut(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        Ok(self.push(Tensor::new(a.shape(), data)?, Op::Softmax(self.id)))
    }

    /// `x / sqrt(mean(x^2) + 1e-6) * gain` over the last axis.
    pub fn rms_norm(&self, gain: Var<'t>) -> Result<Var<'t>> {
        let (a, w) = self.check_row(&gain)?;
        let cols = w.len();
        let mut data = a.data().to_vec();
        let mut inv_rms = Vec::with_capacity(a.rows());
        for row in data.chunks_mut(cols) {
            let ms = row.iter().map(|x| x * x).sum::<f64>() / cols as f64;
            let inv = 1.0 / (ms + RMS_EPS).sqrt();
            inv_rms.push(inv);
            for (x, g) in row.iter_mut().zip(w.data()) {
                *x *= inv * g;
            }
        }
        Ok(self.push(
            Tensor::new(a.shape(), data)?,
            Op::RmsNorm {
                x: self.id,
                gain: gain.id,
                inv_rms,
            },
        ))
    }

    pub fn slice_cols(&self, start: usize, width: usize) -> Result<Var<'t>> {
        let a = self.value();
        let cols = a.cols();
        if start + width > cols {
            return Err(dim_err!("column slice {}..{} of {}", start, start + width, cols));
        }
        let mut data = Vec::with_capacity(a.rows() * width);
        for row in a.data().chunks(cols) {
            data.extend_from_slice(&row[start..start + width]);
        }
        Ok(self.push(
            Tensor::new(&[a.rows(), width], data)?,
            Op::SliceCols { a: self.id, start },
        ))
    }

    pub fn slice_rows(&self, start: usize, count: usize) -> Result<Var<'t>> {
        let a = self.value();
        let (rows, cols) = (a.rows(), a.cols());
        if start + count > rows {
            return Err(dim_err!("row slice {}..{} of {}", start, start + count, rows));
        }
        let data = a.data()[start * cols..(start + count) * cols].to_vec();
        Ok(self.push(
            Tensor::new(&[count, cols], data)?,
            Op::SliceRows { a: self.id, start },
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let value = (*self.value()).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(self.id)))
    }

    pub fn sum(&self) -> Var<'t> {
        let s = self.value().data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'t> {
        let a = self.value();
        let s = a.data().iter().sum::<f64>() / a.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(self.id))
    }

    /// Rotates adjacent pairs within each `head_dim`-wide head. `cos`/`sin`
    /// hold `rows * head_dim / 2` entries (one angle per row and pair).
    pub fn rotate_pairs(
        &self,
        cos: Rc<Vec<f64>>,
        sin: Rc<Vec<f64>>,
        head_dim: usize,
    ) -> Result<Var<'t>> {
        let a = self.value();
        let cols = a.cols();
        if head_dim == 0 || !head_dim.is_multiple_of(2) || !cols.is_multiple_of(head_dim) {
            return Err(dim_err!("head_dim {} does not tile width {}", head_dim, cols));
        }
        let need = a.rows() * head_dim / 2;
        if cos.len() != need || sin.len() != need {
            return Err(dim_err!("rotation table has {} angles, need {}", cos.len(), need));
        }
        let mut out = vec![0.0; a.len()];
        rotate_rows(a.data(), &mut out, cols, head_dim, &cos, &sin, false);
        Ok(self.push(
            Tensor::new(a.shape(), out)?,
            Op::RotatePairs {
                a: self.id,
                cos,
                sin,
                head_dim,
            },
        ))
    }
}

/// Concatenates matrices with equal row counts along the last axis.
pub fn concat_cols<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts.first().ok_or_else(|| contract_err!("concat of nothing"))?;
    let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
    let rows = values[0].rows();
    if values.iter().any(|v| v.rows() != rows) {
        return Err(dim_err!("concat_cols with unequal row counts"));
    }
    let total: usize = values.iter().map(|v| v.cols()).sum();
    let mut data = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for v in &values {
            data.extend_from_slice(v.row(r));
        }
    }
    for p in parts {
        first.same_tape(p)?;
    }
    Ok(first.push(
        Tensor::new(&[rows, total], data)?,
        Op::ConcatCols(parts.iter().map(|p| p.id).collect()),
    ))
}

/// Stacks matrices with equal column counts along the first axis.
pub fn concat_rows<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts.first().ok_or_else(|| contract_err!("concat of nothing"))?;
    let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
    let cols = values[0].cols();
    if values.iter().any(|v| v.cols() != cols) {
        return Err(dim_err!("concat_rows with unequal column counts"));
    }
    for p in parts {
        first.same_tape(p)?;
    }
    let data: Vec<f64> = values.iter().flat_map(|v| v.data().iter().copied()).collect();
    let rows = data.len() / cols.max(1);
    Ok(first.push(
        Tensor::new(&[rows, cols], data)?,
        Op::ConcatRows(parts.iter().map(|p| p.id).collect()),
    ))
}

/// Sinusoidal embedding of a scalar time, `[1, dim]` laid out as
/// `[cos(w_k t) .., sin(w_k t) ..]` with `w_k = 10000^(-k / (dim/2))`.
pub fn timestep_embedding(t: f64, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = vec![0.0; dim];
    for k in 0..half {
        let w = (-(10000f64.ln()) * k as f64 / half as f64).exp();
        let arg = 1000.0 * t * w;
        data[k] = arg.cos();
        data[half + k] = arg.sin();
    }
    Tensor::new(&[1, dim], data).expect("embedding shape")
}
