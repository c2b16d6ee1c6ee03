//! Reverse-mode automatic differentiation over a linear operation tape.
//!
//! Every forward primitive records one node holding its inputs and result.
//! Nodes are appended in execution order, so every operand of node `i` was
//! produced by a node `< i`; replaying the tape backwards visits each node
//! exactly once and accumulates exact vector-Jacobian products into the
//! gradient buffers of grad-requiring leaves.
//!
//! A tape is single-threaded by construction. Parameter snapshots entering a
//! tape are copied, so the source maps stay immutable and shareable.

use crate::error::{Error, Result};
use crate::tensor::{column_stats, dgemm_rowmajor_t, global_stats, Tensor};

/// Clamp applied to probabilities before the logs inside the BCE loss.
pub const BCE_CLAMP: f64 = 1e-7;

/// Threshold below which a normalization column counts as collapsed.
pub const DEGENERATE_STD: f64 = 1e-10;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `(B x C) + (1 x C)`, bias broadcast over rows.
    AddBias(Var, Var),
    ConcatCols(Vec<Var>),
    /// Columns `[start, end)` of the input.
    SliceCols(Var, usize, usize),
    /// Rows `[start, end)` of the input.
    SliceRows(Var, usize, usize),
    Mean(Var),
    Sum(Var),
    Scale(Var, f64),
    #[allow(dead_code)] // constant kept so tape records stay replayable
    AddScalar(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    /// Hard sign; gradient is zero everywhere (evaluation-phase use only).
    #[allow(dead_code)]
    Sign(Var),
    /// Per-column standardization over the batch; aux holds column stds.
    NormCols(Var),
    /// Standardization over all elements jointly; aux holds the scalar std.
    NormAll(Var),
    /// `(x - mean[c]) / sd[c]` with frozen statistics; only the stds feed
    /// the backward rule.
    AffineCols(Var, #[allow(dead_code)] Vec<f64>, Vec<f64>),
    /// Mean binary cross-entropy of (probabilities, targets).
    BceLoss(Var, Var),
    /// Mean squared error of (predictions, targets).
    MseLoss(Var, Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBias(..) => "add_bias",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceCols(..) => "slice_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::Mean(..) => "mean",
            Op::Sum(..) => "sum",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Sign(..) => "sign",
            Op::NormCols(..) => "norm_cols",
            Op::NormAll(..) => "norm_all",
            Op::AffineCols(..) => "affine_cols",
            Op::BceLoss(..) => "bce_loss",
            Op::MseLoss(..) => "mse_loss",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
    /// Forward-pass statistics some backward rules reuse (normalization stds).
    aux: Vec<f64>,
}

/// Gradients of a scalar loss with respect to grad-requiring leaves.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, if the loss depends on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

/// Linear record of executed primitives. See the module docs.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Record an input tensor. Only leaves with `requires_grad` receive
    /// gradients from [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Op::Leaf, value, requires_grad, Vec::new())
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool, aux: Vec<f64>) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
            aux,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn shape_err(&self, op: &str, detail: String) -> Error {
        Error::Config(format!("{op}: {detail}"))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMul(a, b), value, needs, Vec::new()))
    }

    fn binary_elementwise(&mut self, op_name: &str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(self.shape_err(op_name, format!("shapes {:?} and {:?} differ", ta.shape(), tb.shape())));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary_elementwise("add", a, b, |x, y| x + y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), value, needs, Vec::new()))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary_elementwise("sub", a, b, |x, y| x - y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Sub(a, b), value, needs, Vec::new()))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary_elementwise("mul", a, b, |x, y| x * y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul(a, b), value, needs, Vec::new()))
    }

    /// Add a `1 x C` bias row to every row of a `B x C` matrix.
    pub fn add_bias(&mut self, m: Var, bias: Var) -> Result<Var> {
        let (tm, tb) = (self.value(m), self.value(bias));
        if !tm.is_matrix() || !tb.is_matrix() || tb.rows() != 1 || tb.cols() != tm.cols() {
            return Err(self.shape_err(
                "add_bias",
                format!("matrix {:?} with bias {:?}", tm.shape(), tb.shape()),
            ));
        }
        let (rows, cols) = (tm.rows(), tm.cols());
        let mut data = tm.data().to_vec();
        for r in 0..rows {
            for c in 0..cols {
                data[r * cols + c] += tb.data()[c];
            }
        }
        let needs = self.needs(m) || self.needs(bias);
        let value = Tensor::matrix(rows, cols, data)?;
        Ok(self.push(Op::AddBias(m, bias), value, needs, Vec::new()))
    }

    /// Concatenate matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(self.shape_err("concat_cols", "no operands".into()));
        }
        let rows = self.value(parts[0]).rows();
        let total_cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(self.shape_err(
                    "concat_cols",
                    format!("row counts differ: {} vs {}", rows, self.value(p).rows()),
                ));
            }
        }
        let mut data = vec![0.0; rows * total_cols];
        let mut offset = 0;
        for &p in parts {
            let t = self.value(p);
            let c = t.cols();
            for r in 0..rows {
                data[r * total_cols + offset..r * total_cols + offset + c]
                    .copy_from_slice(&t.data()[r * c..(r + 1) * c]);
            }
            offset += c;
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        let value = Tensor::matrix(rows, total_cols, data)?;
        Ok(self.push(Op::ConcatCols(parts.to_vec()), value, needs, Vec::new()))
    }

    pub fn slice_cols(&mut self, v: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(v);
        if !t.is_matrix() || start >= end || end > t.cols() {
            return Err(self.shape_err(
                "slice_cols",
                format!("range {start}..{end} of shape {:?}", t.shape()),
            ));
        }
        let (rows, cols, width) = (t.rows(), t.cols(), end - start);
        let mut data = vec![0.0; rows * width];
        for r in 0..rows {
            data[r * width..(r + 1) * width].copy_from_slice(&t.data()[r * cols + start..r * cols + end]);
        }
        let needs = self.needs(v);
        let value = Tensor::matrix(rows, width, data)?;
        Ok(self.push(Op::SliceCols(v, start, end), value, needs, Vec::new()))
    }

    pub fn slice_rows(&mut self, v: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(v);
        if !t.is_matrix() || start >= end || end > t.rows() {
            return Err(self.shape_err(
                "slice_rows",
                format!("range {start}..{end} of shape {:?}", t.shape()),
            ));
        }
        let cols = t.cols();
        let data = t.data()[start * cols..end * cols].to_vec();
        let needs = self.needs(v);
        let value = Tensor::matrix(end - start, cols, data)?;
        Ok(self.push(Op::SliceRows(v, start, end), value, needs, Vec::new()))
    }

    pub fn mean(&mut self, v: Var) -> Result<Var> {
        let t = self.value(v);
        if t.numel() == 0 {
            return Err(self.shape_err("mean", "empty tensor".into()));
        }
        let value = Tensor::scalar(t.data().iter().sum::<f64>() / t.numel() as f64);
        let needs = self.needs(v);
        Ok(self.push(Op::Mean(v), value, needs, Vec::new()))
    }

    pub fn sum(&mut self, v: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(v).data().iter().sum::<f64>());
        let needs = self.needs(v);
        Ok(self.push(Op::Sum(v), value, needs, Vec::new()))
    }

    pub fn scale(&mut self, v: Var, c: f64) -> Var {
        let value = self.value(v).map(|x| c * x);
        let needs = self.needs(v);
        self.push(Op::Scale(v, c), value, needs, Vec::new())
    }

    pub fn add_scalar(&mut self, v: Var, c: f64) -> Var {
        let value = self.value(v).map(|x| x + c);
        let needs = self.needs(v);
        self.push(Op::AddScalar(v, c), value, needs, Vec::new())
    }

    pub fn sigmoid(&mut self, v: Var) -> Var {
        let value = self.value(v).map(sigmoid_scalar);
        let needs = self.needs(v);
        self.push(Op::Sigmoid(v), value, needs, Vec::new())
    }

    pub fn tanh(&mut self, v: Var) -> Var {
        let value = self.value(v).map(f64::tanh);
        let needs = self.needs(v);
        self.push(Op::Tanh(v), value, needs, Vec::new())
    }

    pub fn sign(&mut self, v: Var) -> Var {
        let value = self.value(v).map(|x| if x >= 0.0 { 1.0 } else { -1.0 });
        let needs = self.needs(v);
        self.push(Op::Sign(v), value, needs, Vec::new())
    }

    /// Training-phase bit-wise power normalization: standardize each column
    /// over the batch rows. Errors when a column has (near-)zero variance,
    /// which signals a collapsed encoder.
    pub fn norm_cols(&mut self, v: Var) -> Result<Var> {
        let t = self.value(v);
        if !t.is_matrix() || t.rows() < 2 {
            return Err(self.shape_err(
                "norm_cols",
                format!("requires a matrix with >= 2 rows, got {:?}", t.shape()),
            ));
        }
        let (value, sd) = normalize_columns(t)?;
        let needs = self.needs(v);
        Ok(self.push(Op::NormCols(v), value, needs, sd))
    }

    /// Training-phase block-wise power normalization: standardize over every
    /// element of the batch jointly.
    pub fn norm_all(&mut self, v: Var) -> Result<Var> {
        let t = self.value(v);
        if t.numel() < 2 {
            return Err(self.shape_err("norm_all", "requires >= 2 elements".into()));
        }
        let (value, sd) = normalize_global(t)?;
        let needs = self.needs(v);
        Ok(self.push(Op::NormAll(v), value, needs, vec![sd]))
    }

    /// Evaluation-phase normalization with frozen per-column statistics.
    pub fn affine_cols(&mut self, v: Var, mean: &[f64], sd: &[f64]) -> Result<Var> {
        let t = self.value(v);
        if !t.is_matrix() || t.cols() != mean.len() || t.cols() != sd.len() {
            return Err(self.shape_err(
                "affine_cols",
                format!("stats of length {} for shape {:?}", mean.len(), t.shape()),
            ));
        }
        let (rows, cols) = (t.rows(), t.cols());
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                data[r * cols + c] = (t.at(r, c) - mean[c]) / sd[c];
            }
        }
        let needs = self.needs(v);
        let value = Tensor::matrix(rows, cols, data)?;
        Ok(self.push(
            Op::AffineCols(v, mean.to_vec(), sd.to_vec()),
            value,
            needs,
            Vec::new(),
        ))
    }

    /// Mean binary cross-entropy. Probabilities are clamped to
    /// `[BCE_CLAMP, 1 - BCE_CLAMP]` before the logs; targets must be exactly
    /// 0 or 1 and must not require gradients.
    pub fn bce_loss(&mut self, probs: Var, targets: Var) -> Result<Var> {
        let (tp, tt) = (self.value(probs), self.value(targets));
        if tp.shape() != tt.shape() {
            return Err(self.shape_err(
                "bce_loss",
                format!("shapes {:?} and {:?} differ", tp.shape(), tt.shape()),
            ));
        }
        if tt.data().iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(Error::Input("bce_loss: targets must be exactly 0 or 1".into()));
        }
        if self.needs(targets) {
            return Err(Error::Usage("bce_loss: targets cannot require gradients".into()));
        }
        let n = tp.numel() as f64;
        let mut acc = 0.0;
        for (&p, &y) in tp.data().iter().zip(tt.data()) {
            let pc = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            acc -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
        }
        let needs = self.needs(probs);
        Ok(self.push(Op::BceLoss(probs, targets), Tensor::scalar(acc / n), needs, Vec::new()))
    }

    /// Mean squared error.
    pub fn mse_loss(&mut self, preds: Var, targets: Var) -> Result<Var> {
        let (tp, tt) = (self.value(preds), self.value(targets));
        if tp.shape() != tt.shape() {
            return Err(Error::Input(format!(
                "mse_loss: shapes {:?} and {:?} differ",
                tp.shape(),
                tt.shape()
            )));
        }
        let n = tp.numel() as f64;
        let acc: f64 = tp
            .data()
            .iter()
            .zip(tt.data())
            .map(|(&p, &y)| (p - y) * (p - y))
            .sum();
        let needs = self.needs(preds) || self.needs(targets);
        Ok(self.push(Op::MseLoss(preds, targets), Tensor::scalar(acc / n), needs, Vec::new()))
    }

    /// Reverse pass: exact gradients of the scalar `loss` with respect to
    /// every grad-requiring leaf reachable from it.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Usage("backward: loss was not produced on this tape".into()));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = grads[i].take().unwrap();
            self.accumulate_inputs(i, &g, &mut grads);
            // Re-store for leaves so callers can read them out.
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate_inputs(&self, i: usize, g: &Tensor, grads: &mut Vec<Option<Tensor>>) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.needs(*a) {
                    // dA = dC @ B^T
                    let buf = self.grad_buf(*a, grads);
                    dgemm_rowmajor_t(m, n, k, 1.0, g.data(), false, tb.data(), true, 1.0, buf.data_mut());
                }
                if self.needs(*b) {
                    // dB = A^T @ dC
                    let buf = self.grad_buf(*b, grads);
                    dgemm_rowmajor_t(k, m, n, 1.0, ta.data(), true, g.data(), false, 1.0, buf.data_mut());
                }
            }
            Op::Add(a, b) => {
                self.add_grad(*a, g.data(), grads);
                self.add_grad(*b, g.data(), grads);
            }
            Op::Sub(a, b) => {
                self.add_grad(*a, g.data(), grads);
                if self.needs(*b) {
                    let buf = self.grad_buf(*b, grads);
                    for (o, &gi) in buf.data_mut().iter_mut().zip(g.data()) {
                        *o -= gi;
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let tb = self.value(*b).data().to_vec();
                    let buf = self.grad_buf(*a, grads);
                    for ((o, &gi), &bv) in buf.data_mut().iter_mut().zip(g.data()).zip(&tb) {
                        *o += gi * bv;
                    }
                }
                if self.needs(*b) {
                    let ta = self.value(*a).data().to_vec();
                    let buf = self.grad_buf(*b, grads);
                    for ((o, &gi), &av) in buf.data_mut().iter_mut().zip(g.data()).zip(&ta) {
                        *o += gi * av;
                    }
                }
            }
            Op::AddBias(m, bias) => {
                self.add_grad(*m, g.data(), grads);
                if self.needs(*bias) {
                    let cols = self.value(*bias).cols();
                    let rows = g.numel() / cols;
                    let buf = self.grad_buf(*bias, grads);
                    for r in 0..rows {
                        for c in 0..cols {
                            buf.data_mut()[c] += g.data()[r * cols + c];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let rows = node.value.rows();
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if self.needs(p) {
                        let buf = self.grad_buf(p, grads);
                        for r in 0..rows {
                            for j in 0..c {
                                buf.data_mut()[r * c + j] += g.data()[r * total + offset + j];
                            }
                        }
                    }
                    offset += c;
                }
            }
            Op::SliceCols(v, start, end) => {
                if self.needs(*v) {
                    let cols = self.value(*v).cols();
                    let width = end - start;
                    let rows = node.value.rows();
                    let buf = self.grad_buf(*v, grads);
                    for r in 0..rows {
                        for j in 0..width {
                            buf.data_mut()[r * cols + start + j] += g.data()[r * width + j];
                        }
                    }
                }
            }
            Op::SliceRows(v, start, _end) => {
                if self.needs(*v) {
                    let cols = self.value(*v).cols();
                    let buf = self.grad_buf(*v, grads);
                    for (j, &gi) in g.data().iter().enumerate() {
                        buf.data_mut()[start * cols + j] += gi;
                    }
                }
            }
            Op::Mean(v) => {
                if self.needs(*v) {
                    let n = self.value(*v).numel() as f64;
                    let gi = g.item() / n;
                    let buf = self.grad_buf(*v, grads);
                    for o in buf.data_mut() {
                        *o += gi;
                    }
                }
            }
            Op::Sum(v) => {
                if self.needs(*v) {
                    let gi = g.item();
                    let buf = self.grad_buf(*v, grads);
                    for o in buf.data_mut() {
                        *o += gi;
                    }
                }
            }
            Op::Scale(v, c) => {
                if self.needs(*v) {
                    let c = *c;
                    let buf = self.grad_buf(*v, grads);
                    for (o, &gi) in buf.data_mut().iter_mut().zip(g.data()) {
                        *o += c * gi;
                    }
                }
            }
            Op::AddScalar(v, _) => self.add_grad(*v, g.data(), grads),
            Op::Sigmoid(v) => {
                if self.needs(*v) {
                    let y = node.value.data().to_vec();
                    let buf = self.grad_buf(*v, grads);
                    for ((o, &gi), &yi) in buf.data_mut().iter_mut().zip(g.data()).zip(&y) {
                        *o += gi * yi * (1.0 - yi);
                    }
                }
            }
            Op::Tanh(v) => {
                if self.needs(*v) {
                    let y = node.value.data().to_vec();
                    let buf = self.grad_buf(*v, grads);
                    for ((o, &gi), &yi) in buf.data_mut().iter_mut().zip(g.data()).zip(&y) {
                        *o += gi * (1.0 - yi * yi);
                    }
                }
            }
            Op::Sign(_) => {}
            Op::NormCols(v) => {
                if self.needs(*v) {
                    let (rows, cols) = (node.value.rows(), node.value.cols());
                    let y = node.value.data();
                    let sd = &node.aux;
                    // For yc = (xc - mu)/sd per column:
                    // dx = (g - mean(g) - y * mean(g .* y)) / sd
                    let mut gbar = vec![0.0; cols];
                    let mut gybar = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            gbar[c] += g.data()[r * cols + c];
                            gybar[c] += g.data()[r * cols + c] * y[r * cols + c];
                        }
                    }
                    for c in 0..cols {
                        gbar[c] /= rows as f64;
                        gybar[c] /= rows as f64;
                    }
                    let y = y.to_vec();
                    let buf = self.grad_buf(*v, grads);
                    for r in 0..rows {
                        for c in 0..cols {
                            let idx = r * cols + c;
                            buf.data_mut()[idx] += (g.data()[idx] - gbar[c] - y[idx] * gybar[c]) / sd[c];
                        }
                    }
                }
            }
            Op::NormAll(v) => {
                if self.needs(*v) {
                    let n = node.value.numel() as f64;
                    let y = node.value.data();
                    let sd = node.aux[0];
                    let gbar = g.data().iter().sum::<f64>() / n;
                    let gybar = g.data().iter().zip(y).map(|(&gi, &yi)| gi * yi).sum::<f64>() / n;
                    let y = y.to_vec();
                    let buf = self.grad_buf(*v, grads);
                    for ((o, &gi), &yi) in buf.data_mut().iter_mut().zip(g.data()).zip(&y) {
                        *o += (gi - gbar - yi * gybar) / sd;
                    }
                }
            }
            Op::AffineCols(v, _, sd) => {
                if self.needs(*v) {
                    let cols = sd.len();
                    let sd = sd.clone();
                    let buf = self.grad_buf(*v, grads);
                    for (idx, (o, &gi)) in buf.data_mut().iter_mut().zip(g.data()).enumerate() {
                        *o += gi / sd[idx % cols];
                    }
                }
            }
            Op::BceLoss(probs, targets) => {
                if self.needs(*probs) {
                    let gi = g.item();
                    let tt = self.value(*targets).data().to_vec();
                    let tp = self.value(*probs).data().to_vec();
                    let n = tp.len() as f64;
                    let buf = self.grad_buf(*probs, grads);
                    for ((o, &p), &y) in buf.data_mut().iter_mut().zip(&tp).zip(&tt) {
                        // Zero gradient in the clamped region.
                        if p > BCE_CLAMP && p < 1.0 - BCE_CLAMP {
                            *o += gi * (p - y) / (p * (1.0 - p)) / n;
                        }
                    }
                }
            }
            Op::MseLoss(preds, targets) => {
                let gi = g.item();
                let tp = self.value(*preds).data().to_vec();
                let tt = self.value(*targets).data().to_vec();
                let n = tp.len() as f64;
                if self.needs(*preds) {
                    let buf = self.grad_buf(*preds, grads);
                    for ((o, &p), &y) in buf.data_mut().iter_mut().zip(&tp).zip(&tt) {
                        *o += gi * 2.0 * (p - y) / n;
                    }
                }
                if self.needs(*targets) {
                    let buf = self.grad_buf(*targets, grads);
                    for ((o, &p), &y) in buf.data_mut().iter_mut().zip(&tp).zip(&tt) {
                        *o -= gi * 2.0 * (p - y) / n;
                    }
                }
            }
        }
    }

    fn add_grad(&self, v: Var, g: &[f64], grads: &mut Vec<Option<Tensor>>) {
        if self.needs(v) {
            let buf = self.grad_buf(v, grads);
            for (o, &gi) in buf.data_mut().iter_mut().zip(g) {
                *o += gi;
            }
        }
    }

    fn grad_buf<'g>(&self, v: Var, grads: &'g mut Vec<Option<Tensor>>) -> &'g mut Tensor {
        if grads[v.0].is_none() {
            grads[v.0] = Some(Tensor::zeros(self.value(v).shape().to_vec()));
        }
        grads[v.0].as_mut().unwrap()
    }

    /// Debug helper naming the op that produced a value.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Standardize each column over the rows (population std). Shared by the
/// tape op and the off-tape calibration/regularizer paths.
pub fn normalize_columns(t: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    let (mean, sd) = column_stats(t);
    if let Some(c) = sd.iter().position(|&s| s < DEGENERATE_STD) {
        return Err(Error::DegenerateEncoder(format!(
            "column {c} has (near-)zero standard deviation {:.3e}",
            sd[c]
        )));
    }
    let (rows, cols) = (t.rows(), t.cols());
    let mut data = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            data[r * cols + c] = (t.at(r, c) - mean[c]) / sd[c];
        }
    }
    Ok((Tensor::matrix(rows, cols, data)?, sd))
}

/// Standardize over every element jointly (population std).
pub fn normalize_global(t: &Tensor) -> Result<(Tensor, f64)> {
    let (mean, sd) = global_stats(t);
    if sd < DEGENERATE_STD {
        return Err(Error::DegenerateEncoder(format!(
            "global standard deviation {sd:.3e} is (near-)zero"
        )));
    }
    Ok((t.map(|x| (x - mean) / sd), sd))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0), false);
        let y = tape.sigmoid(x);
        assert_eq!(tape.value(y).item(), 0.5);
    }

    #[test]
    fn tanh_of_zero_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0), false);
        let y = tape.tanh(x);
        assert_eq!(tape.value(y).item(), 0.0);
    }

    #[test]
    fn bce_half_prob_is_ln2() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::scalar(0.5), false);
        let y = tape.leaf(Tensor::scalar(1.0), false);
        let l = tape.bce_loss(p, y).unwrap();
        assert!((tape.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn bce_mixed_targets_mean() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::matrix(1, 2, vec![0.5, 0.5]).unwrap(), false);
        let y = tape.leaf(Tensor::matrix(1, 2, vec![0.0, 1.0]).unwrap(), false);
        let l = tape.bce_loss(p, y).unwrap();
        assert!((tape.value(l).item() - 0.693147).abs() < 1e-6);
    }

    #[test]
    fn bce_perfect_prediction_is_tiny() {
        let mut tape = Tape::new();
        let vals = vec![BCE_CLAMP, 1.0 - BCE_CLAMP];
        let p = tape.leaf(Tensor::matrix(1, 2, vals.clone()).unwrap(), false);
        let y = tape.leaf(Tensor::matrix(1, 2, vec![0.0, 1.0]).unwrap(), false);
        let l = tape.bce_loss(p, y).unwrap();
        assert!(tape.value(l).item() <= -(1.0 - BCE_CLAMP_F()).ln() + 1e-15);
    }

    #[allow(non_snake_case)]
    fn BCE_CLAMP_F() -> f64 {
        BCE_CLAMP
    }

    #[test]
    fn bce_rejects_non_binary_targets() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::scalar(0.5), false);
        let y = tape.leaf(Tensor::scalar(0.25), false);
        assert!(matches!(tape.bce_loss(p, y), Err(Error::Input(_))));
    }

    #[test]
    fn mse_examples() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap(), false);
        let t = tape.leaf(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap(), false);
        let l = tape.mse_loss(p, t).unwrap();
        assert_eq!(tape.value(l).item(), 0.5);

        let p2 = tape.leaf(Tensor::scalar(2.0), false);
        let t2 = tape.leaf(Tensor::scalar(0.0), false);
        let l2 = tape.mse_loss(p2, t2).unwrap();
        assert_eq!(tape.value(l2).item(), 4.0);

        let l3 = tape.mse_loss(p, p).unwrap();
        assert_eq!(tape.value(l3).item(), 0.0);
    }

    #[test]
    fn mean_weighted_gradient_is_x_over_n() {
        // loss = mean(w .* x) with fixed x => dloss/dw = x / numel
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::matrix(1, 4, vec![0.3, -0.2, 0.9, 0.5]).unwrap(), true);
        let x = tape.leaf(Tensor::matrix(1, 4, vec![2.0, -1.0, 0.5, 3.0]).unwrap(), false);
        let prod = tape.mul(w, x).unwrap();
        let loss = tape.mean(prod).unwrap();
        let grads = tape.backward(loss).unwrap();
        let gw = grads.get(w).unwrap();
        for (i, &xv) in [2.0, -1.0, 0.5, 3.0].iter().enumerate() {
            assert!((gw.data()[i] - xv / 4.0).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap(), true);
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn norm_cols_matches_hand_example() {
        // Batch column [1, 3] -> [-1, 1] with population std.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(2, 1, vec![1.0, 3.0]).unwrap(), false);
        let y = tape.norm_cols(x).unwrap();
        assert_eq!(tape.value(y).data(), &[-1.0, 1.0]);
    }

    #[test]
    fn norm_cols_rejects_constant_column() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(3, 1, vec![2.0, 2.0, 2.0]).unwrap(), false);
        assert!(matches!(tape.norm_cols(x), Err(Error::DegenerateEncoder(_))));
    }

    #[test]
    fn add_shape_mismatch_is_config_error() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(vec![2, 2]), false);
        let b = tape.leaf(Tensor::zeros(vec![2, 3]), false);
        match tape.add(a, b) {
            Err(Error::Config(msg)) => assert!(msg.contains("add")),
            other => panic!("expected config error, got {other:?}"),
        }
    }
}
