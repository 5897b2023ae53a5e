use std::collections::HashMap;

use super::params::{Gradients, ParamId, ParamStore};
use super::value::{matmul_nt, matmul_raw, matmul_tn};
use super::Tensor;
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
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Abs(Var),
    Softplus(Var),
    Softmax(Var, Axis),
    LogSoftmax(Var),
    LayerNorm(Var, f64),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    Transpose(Var),
    Reshape(Var),
    SumAll(Var),
    MeanAll(Var),
    SumRows(Var),
    MaxRows(Var, Vec<usize>),
    RowSum(Var),
    RowCosine(Var, Var, f64),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation and replays it in reverse for gradients.
///
/// Every op checks its output for NaN/Inf and fails with
/// [`Error::NonFinite`] at the op boundary.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    grads: Vec<Option<Tensor>>,
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

    /// Drops every recorded op and gradient.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.params.clear();
        self.grads.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    fn push(&mut self, value: Tensor, op: Op, op_name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Param => true,
            other => other.inputs().iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A value that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, "constant")
    }

    /// A leaf that receives gradient (used for inputs under test).
    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        let v = self.push(t, Op::Leaf, "input")?;
        self.nodes[v.0].requires_grad = true;
        Ok(v)
    }

    /// Leaf bound to a stored parameter; repeated calls return the same var.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.params.get(&id) {
            return Ok(v);
        }
        let v = self.push(store.get(id).clone(), Op::Param, "param")?;
        self.params.insert(id, v);
        Ok(v)
    }

    // ---- linear algebra ---------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, k2, n) = (ta.rows(), ta.cols(), tb.rows(), tb.cols());
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("{m}×{k} · {k2}×{n}: inner dimensions differ"),
            ));
        }
        let out = matmul_raw(ta.data(), tb.data(), m, k, n);
        self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transposed();
        self.push(t, Op::Transpose(a), "transpose")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshaped(shape)?;
        self.push(t, Op::Reshape(a), "reshape")
    }

    // ---- elementwise ------------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(t, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(t, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(t, Op::Mul(a, b), "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let t = self.value(a).zip_map(self.value(b), |x, y| x / y);
        self.push(t, Op::Div(a, b), "div")
    }

    /// Adds a `1 × n` (or length-`n`) row to every row of an `m × n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        let n = ta.cols();
        if tr.numel() != n {
            return Err(Error::dim(
                "add_row",
                format!("row of {} values for {} columns", tr.numel(), n),
            ));
        }
        let mut t = ta.clone();
        for chunk in t.data_mut().chunks_mut(n) {
            for (x, &b) in chunk.iter_mut().zip(tr.data()) {
                *x += b;
            }
        }
        self.push(t, Op::AddRow(a, row), "add_row")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let t = self.value(a).map(|x| x * s);
        self.push(t, Op::Scale(a, s), "scale")
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let t = self.value(a).map(|x| x + s);
        self.push(t, Op::AddScalar(a), "add_scalar")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(|x| x.max(0.0));
        self.push(t, Op::Relu(a), "relu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(sigmoid);
        self.push(t, Op::Sigmoid(a), "sigmoid")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(f64::exp);
        self.push(t, Op::Exp(a), "exp")
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(f64::ln);
        self.push(t, Op::Ln(a), "ln")
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(f64::abs);
        self.push(t, Op::Abs(a), "abs")
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(softplus);
        self.push(t, Op::Softplus(a), "softplus")
    }

    // ---- normalization ----------------------------------------------------

    /// Softmax over rows (`Axis::Cols`, each row sums to 1) or over columns.
    pub fn softmax(&mut self, a: Var, axis: Axis) -> Result<Var> {
        let t = self.value(a);
        let mut out = t.clone();
        for_each_slice(t.rows(), t.cols(), axis, |idx| {
            let m = idx.clone().map(|i| t.data()[i]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for i in idx.clone() {
                let e = (t.data()[i] - m).exp();
                out.data_mut()[i] = e;
                z += e;
            }
            for i in idx {
                out.data_mut()[i] /= z;
            }
        });
        self.push(out, Op::Softmax(a, axis), "softmax")
    }

    /// Row-wise `log softmax`.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let mut out = t.clone();
        for_each_slice(t.rows(), t.cols(), Axis::Cols, |idx| {
            let m = idx.clone().map(|i| t.data()[i]).fold(f64::NEG_INFINITY, f64::max);
            let lse = m + idx.clone().map(|i| (t.data()[i] - m).exp()).sum::<f64>().ln();
            for i in idx {
                out.data_mut()[i] = t.data()[i] - lse;
            }
        });
        self.push(out, Op::LogSoftmax(a), "log_softmax")
    }

    /// Row-wise layer normalization without affine terms.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let t = self.value(a);
        let c = t.cols();
        let mut out = t.clone();
        for (src, dst) in t.data().chunks(c).zip(out.data_mut().chunks_mut(c)) {
            let mean = src.iter().sum::<f64>() / c as f64;
            let var = src.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (d, s) in dst.iter_mut().zip(src) {
                *d = (s - mean) * inv;
            }
        }
        self.push(out, Op::LayerNorm(a, eps), "layer_norm")
    }

    // ---- structural -------------------------------------------------------

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(Error::dim("concat_cols", "row counts differ"));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        self.push(
            Tensor::matrix(rows, total, out)?,
            Op::ConcatCols(parts.to_vec()),
            "concat_cols",
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        if parts.iter().any(|&p| self.value(p).cols() != cols) {
            return Err(Error::dim("concat_rows", "column counts differ"));
        }
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let rows = out.len() / cols;
        self.push(
            Tensor::matrix(rows, cols, out)?,
            Op::ConcatRows(parts.to_vec()),
            "concat_rows",
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        if start + len > c || len == 0 {
            return Err(Error::dim("slice_cols", format!("[{start}, {}) of {c}", start + len)));
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&t.row_slice(i)[start..start + len]);
        }
        self.push(Tensor::matrix(r, len, out)?, Op::SliceCols(a, start), "slice_cols")
    }

    /// Selects rows by index; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        if idx.is_empty() || idx.iter().any(|&i| i >= r) {
            return Err(Error::dim("gather_rows", format!("index out of {r} rows")));
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(t.row_slice(i));
        }
        self.push(
            Tensor::matrix(idx.len(), c, out)?,
            Op::GatherRows(a, idx.to_vec()),
            "gather_rows",
        )
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::SumAll(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.sum() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::MeanAll(a), "mean")
    }

    /// Sums over rows, giving a `1 × n` row.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let c = t.cols();
        let mut out = vec![0.0; c];
        for chunk in t.data().chunks(c) {
            for (o, x) in out.iter_mut().zip(chunk) {
                *o += x;
            }
        }
        self.push(Tensor::row(out)?, Op::SumRows(a), "sum_rows")
    }

    /// Column-wise maximum over rows, giving a `1 × n` row. Ties pick the first row.
    pub fn max_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        let mut best = t.row_slice(0).to_vec();
        let mut arg = vec![0usize; c];
        for i in 1..r {
            for (j, &x) in t.row_slice(i).iter().enumerate() {
                if x > best[j] {
                    best[j] = x;
                    arg[j] = i;
                }
            }
        }
        self.push(Tensor::row(best)?, Op::MaxRows(a, arg), "max_rows")
    }

    /// Sums each row, giving an `m × 1` column.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let out: Vec<f64> = t.data().chunks(t.cols()).map(|c| c.iter().sum()).collect();
        let m = out.len();
        self.push(Tensor::matrix(m, 1, out)?, Op::RowSum(a), "row_sum")
    }

    /// Cosine similarity of matching rows, `a·b / (|a||b| + eps)`, as an `m × 1` column.
    pub fn row_cosine(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        self.same_shape("row_cosine", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let c = ta.cols();
        let out: Vec<f64> = ta
            .data()
            .chunks(c)
            .zip(tb.data().chunks(c))
            .map(|(x, y)| {
                let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
                dot / (l2(x) * l2(y) + eps)
            })
            .collect();
        let m = out.len();
        self.push(Tensor::matrix(m, 1, out)?, Op::RowCosine(a, b, eps), "row_cosine")
    }

    // ---- reverse pass -----------------------------------------------------

    /// Computes gradients of the scalar `loss` with respect to every var
    /// that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::filled(self.shape(loss), 1.0));

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradients of stored parameters touched by the last `backward`.
    pub fn param_gradients(&self, store: &ParamStore) -> Gradients {
        let mut out = vec![None; store.len()];
        for (&pid, &v) in &self.params {
            if let Some(g) = self.grad(v) {
                out[pid.0] = Some(g.clone());
            }
        }
        Gradients::from_vec(out)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &self.nodes[id].value;
        match &self.nodes[id].op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.requires_grad(*a) {
                    let da = matmul_nt(g.data(), tb.data(), m, n, k);
                    self.accumulate(grads, *a, with_shape(ta, da));
                }
                if self.requires_grad(*b) {
                    let db = matmul_tn(ta.data(), g.data(), m, k, n);
                    self.accumulate(grads, *b, with_shape(tb, db));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, g.zip_map(tb, |x, y| x * y));
                self.accumulate(grads, *b, g.zip_map(ta, |x, y| x * y));
            }
            Op::Div(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, g.zip_map(tb, |x, y| x / y));
                let mut db = g.zip_map(ta, |x, y| -x * y);
                for (d, y) in db.data_mut().iter_mut().zip(tb.data()) {
                    *d /= y * y;
                }
                self.accumulate(grads, *b, db);
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.requires_grad(*row) {
                    let c = g.cols();
                    let mut dr = vec![0.0; c];
                    for chunk in g.data().chunks(c) {
                        for (d, x) in dr.iter_mut().zip(chunk) {
                            *d += x;
                        }
                    }
                    let tr = self.value(*row);
                    self.accumulate(grads, *row, with_shape(tr, dr));
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.map(|x| x * s)),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Relu(a) => {
                let ta = self.value(*a);
                self.accumulate(grads, *a, g.zip_map(ta, |x, y| if y > 0.0 { x } else { 0.0 }));
            }
            Op::Sigmoid(a) => {
                self.accumulate(grads, *a, g.zip_map(out, |x, y| x * y * (1.0 - y)));
            }
            Op::Exp(a) => self.accumulate(grads, *a, g.zip_map(out, |x, y| x * y)),
            Op::Ln(a) => {
                let ta = self.value(*a);
                self.accumulate(grads, *a, g.zip_map(ta, |x, y| x / y));
            }
            Op::Abs(a) => {
                let ta = self.value(*a);
                self.accumulate(grads, *a, g.zip_map(ta, |x, y| x * sign(y)));
            }
            Op::Softplus(a) => {
                let ta = self.value(*a);
                self.accumulate(grads, *a, g.zip_map(ta, |x, y| x * sigmoid(y)));
            }
            Op::Softmax(a, axis) => {
                let mut dx = g.clone();
                for_each_slice(out.rows(), out.cols(), *axis, |idx| {
                    let dot: f64 = idx.clone().map(|i| g.data()[i] * out.data()[i]).sum();
                    for i in idx {
                        dx.data_mut()[i] = out.data()[i] * (g.data()[i] - dot);
                    }
                });
                self.accumulate(grads, *a, dx);
            }
            Op::LogSoftmax(a) => {
                let mut dx = g.clone();
                for_each_slice(out.rows(), out.cols(), Axis::Cols, |idx| {
                    let gs: f64 = idx.clone().map(|i| g.data()[i]).sum();
                    for i in idx {
                        dx.data_mut()[i] = g.data()[i] - out.data()[i].exp() * gs;
                    }
                });
                self.accumulate(grads, *a, dx);
            }
            Op::LayerNorm(a, eps) => {
                let ta = self.value(*a);
                let c = ta.cols();
                let mut dx = g.clone();
                for ((src, y), (gr, d)) in ta
                    .data()
                    .chunks(c)
                    .zip(out.data().chunks(c))
                    .zip(g.data().chunks(c).zip(dx.data_mut().chunks_mut(c)))
                {
                    let mean = src.iter().sum::<f64>() / c as f64;
                    let var = src.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let gm = gr.iter().sum::<f64>() / c as f64;
                    let gy = gr.iter().zip(y).map(|(p, q)| p * q).sum::<f64>() / c as f64;
                    for ((dd, &gg), &yy) in d.iter_mut().zip(gr).zip(y) {
                        *dd = inv * (gg - gm - yy * gy);
                    }
                }
                self.accumulate(grads, *a, dx);
            }
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let mut off = 0;
                for &p in parts {
                    let tp = self.value(p);
                    let pc = tp.cols();
                    if self.requires_grad(p) {
                        let mut d = Vec::with_capacity(rows * pc);
                        for r in 0..rows {
                            d.extend_from_slice(&g.row_slice(r)[off..off + pc]);
                        }
                        self.accumulate(grads, p, with_shape(tp, d));
                    }
                    off += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let tp = self.value(p);
                    let n = tp.numel();
                    if self.requires_grad(p) {
                        self.accumulate(grads, p, with_shape(tp, g.data()[off..off + n].to_vec()));
                    }
                    off += n;
                }
            }
            Op::SliceCols(a, start) => {
                let ta = self.value(*a);
                let (r, c) = (ta.rows(), ta.cols());
                let len = g.cols();
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    d[i * c + start..i * c + start + len].copy_from_slice(g.row_slice(i));
                }
                self.accumulate(grads, *a, with_shape(ta, d));
            }
            Op::GatherRows(a, idx) => {
                let ta = self.value(*a);
                let c = ta.cols();
                let mut d = vec![0.0; ta.numel()];
                for (k, &i) in idx.iter().enumerate() {
                    for (dst, src) in d[i * c..(i + 1) * c].iter_mut().zip(g.row_slice(k)) {
                        *dst += src;
                    }
                }
                self.accumulate(grads, *a, with_shape(ta, d));
            }
            Op::Transpose(a) => {
                let ta = self.value(*a);
                let d = g.transposed().into_data();
                self.accumulate(grads, *a, with_shape(ta, d));
            }
            Op::Reshape(a) => {
                let ta = self.value(*a);
                self.accumulate(grads, *a, with_shape(ta, g.data().to_vec()));
            }
            Op::SumAll(a) => {
                let ta = self.value(*a);
                self.accumulate(grads, *a, Tensor::filled(ta.shape(), g.item()));
            }
            Op::MeanAll(a) => {
                let ta = self.value(*a);
                let v = g.item() / ta.numel() as f64;
                self.accumulate(grads, *a, Tensor::filled(ta.shape(), v));
            }
            Op::SumRows(a) => {
                let ta = self.value(*a);
                let d: Vec<f64> = (0..ta.rows()).flat_map(|_| g.data().iter().copied()).collect();
                self.accumulate(grads, *a, with_shape(ta, d));
            }
            Op::MaxRows(a, arg) => {
                let ta = self.value(*a);
                let c = ta.cols();
                let mut d = vec![0.0; ta.numel()];
                for (j, &i) in arg.iter().enumerate() {
                    d[i * c + j] = g.data()[j];
                }
                self.accumulate(grads, *a, with_shape(ta, d));
            }
            Op::RowSum(a) => {
                let ta = self.value(*a);
                let c = ta.cols();
                let d: Vec<f64> = g
                    .data()
                    .iter()
                    .flat_map(|&x| std::iter::repeat(x).take(c))
                    .collect();
                self.accumulate(grads, *a, with_shape(ta, d));
            }
            Op::RowCosine(a, b, eps) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let c = ta.cols();
                let mut da = vec![0.0; ta.numel()];
                let mut db = vec![0.0; tb.numel()];
                for (r, (x, y)) in ta.data().chunks(c).zip(tb.data().chunks(c)).enumerate() {
                    let (nx, ny) = (l2(x), l2(y));
                    let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
                    let den = nx * ny + eps;
                    let gr = g.data()[r];
                    for k in 0..c {
                        let mut ga = y[k] / den;
                        if nx > 0.0 {
                            ga -= dot * ny * x[k] / (nx * den * den);
                        }
                        let mut gb = x[k] / den;
                        if ny > 0.0 {
                            gb -= dot * nx * y[k] / (ny * den * den);
                        }
                        da[r * c + k] = gr * ga;
                        db[r * c + k] = gr * gb;
                    }
                }
                self.accumulate(grads, *a, with_shape(ta, da));
                self.accumulate(grads, *b, with_shape(tb, db));
            }
        }
    }
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Param => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::AddRow(a, b)
            | Op::RowCosine(a, b, _) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::Abs(a)
            | Op::Softplus(a)
            | Op::Softmax(a, _)
            | Op::LogSoftmax(a)
            | Op::LayerNorm(a, _)
            | Op::SliceCols(a, _)
            | Op::GatherRows(a, _)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::SumAll(a)
            | Op::MeanAll(a)
            | Op::SumRows(a)
            | Op::MaxRows(a, _)
            | Op::RowSum(a) => vec![*a],
            Op::ConcatCols(parts) | Op::ConcatRows(parts) => parts.clone(),
        }
    }
}

fn with_shape(like: &Tensor, data: Vec<f64>) -> Tensor {
    Tensor::new(like.shape().to_vec(), data).expect("gradient shape follows its input")
}

/// Calls `f` with the flat indices of every softmax slice.
fn for_each_slice(
    rows: usize,
    cols: usize,
    axis: Axis,
    mut f: impl FnMut(std::iter::StepBy<std::ops::Range<usize>>),
) {
    match axis {
        Axis::Cols => {
            for r in 0..rows {
                f((r * cols..(r + 1) * cols).step_by(1));
            }
        }
        Axis::Rows => {
            for c in 0..cols {
                f((c..rows * cols).step_by(cols));
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn l2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}
