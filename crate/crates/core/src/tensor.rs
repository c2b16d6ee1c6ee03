//! Dense row-major tensors of f64 scalars.
//!
//! This is the value type everything numerical in the crate is built on:
//! network activations, parameters, gradients, and channel symbols. Most of
//! the crate works with 2-D tensors where rows are the batch dimension.

use crate::error::{Error, Result};

/// A dense multi-dimensional array of `f64` values, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Config(format!(
                "tensor shape {:?} implies {} elements but {} were provided",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
        }
    }

    /// A scalar tensor of shape `[1]`.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Build a `rows x cols` matrix from a flat row-major slice.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    /// Row count of a 2-D tensor.
    pub fn rows(&self) -> usize {
        assert!(self.is_matrix(), "rows() on non-matrix shape {:?}", self.shape);
        self.shape[0]
    }

    /// Column count of a 2-D tensor.
    pub fn cols(&self) -> usize {
        assert!(self.is_matrix(), "cols() on non-matrix shape {:?}", self.shape);
        self.shape[1]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    /// The single value of a scalar tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor with {} elements", self.numel());
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Matrix product `self @ rhs` for 2-D operands.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        if !self.is_matrix() || !rhs.is_matrix() {
            return Err(Error::Config(format!(
                "matmul: operands must be matrices, got {:?} and {:?}",
                self.shape, rhs.shape
            )));
        }
        let (m, k) = (self.rows(), self.cols());
        let (k2, n) = (rhs.rows(), rhs.cols());
        if k != k2 {
            return Err(Error::Config(format!(
                "matmul: inner dimensions differ, {:?} vs {:?}",
                self.shape, rhs.shape
            )));
        }
        let mut out = vec![0.0; m * n];
        dgemm_rowmajor(m, k, n, 1.0, &self.data, &rhs.data, 0.0, &mut out);
        Tensor::matrix(m, n, out)
    }
}

/// Row-major `C = alpha * A @ B + beta * C` with optional logical transposes.
///
/// Transposition is expressed by swapping strides, so no operand is copied.
pub fn dgemm_rowmajor_t(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn dgemm_rowmajor(m: usize, k: usize, n: usize, alpha: f64, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    dgemm_rowmajor_t(m, k, n, alpha, a, false, b, false, beta, c);
}

/// Per-column mean and population standard deviation of a matrix.
pub fn column_stats(t: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (rows, cols) = (t.rows(), t.cols());
    let mut mean = vec![0.0; cols];
    let mut sd = vec![0.0; cols];
    for r in 0..rows {
        for c in 0..cols {
            mean[c] += t.at(r, c);
        }
    }
    for c in 0..cols {
        mean[c] /= rows as f64;
    }
    for r in 0..rows {
        for c in 0..cols {
            let d = t.at(r, c) - mean[c];
            sd[c] += d * d;
        }
    }
    for c in 0..cols {
        sd[c] = (sd[c] / rows as f64).sqrt();
    }
    (mean, sd)
}

/// Mean and population standard deviation over every element.
pub fn global_stats(t: &Tensor) -> (f64, f64) {
    let n = t.numel() as f64;
    let mean = t.data().iter().sum::<f64>() / n;
    let var = t.data().iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_returns_operand() {
        let eye = Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let a = Tensor::matrix(3, 3, vec![2.0, -1.0, 0.5, 3.0, 4.0, -2.0, 0.0, 7.0, 1.5]).unwrap();
        assert_eq!(eye.matmul(&a).unwrap(), a);
    }

    #[test]
    fn matmul_rejects_mismatched_inner_dims() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![4, 2]);
        assert!(a.matmul(&b).is_err());
    }

    #[test]
    fn shape_must_match_data_length() {
        assert!(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn column_stats_population() {
        let t = Tensor::matrix(2, 1, vec![1.0, 3.0]).unwrap();
        let (mean, sd) = column_stats(&t);
        assert_eq!(mean[0], 2.0);
        assert_eq!(sd[0], 1.0);
    }
}
