use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major tensor of `f64` values.
///
/// Most operations treat a tensor as a matrix whose columns are the last
/// dimension and whose rows are the product of the leading dimensions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {n} values but {} were given",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Tensor {
            shape: vec![rows, cols],
            data,
        }
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// Size of the last dimension (1 for scalars).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Product of all but the last dimension.
    pub fn rows(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.shape[..self.shape.len() - 1].iter().product()
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Leading `n` rows as a new matrix.
    pub fn head_rows(&self, n: usize) -> Tensor {
        let c = self.cols();
        Tensor::from_parts(vec![n, c], self.data[..n * c].to_vec())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }
}

/// Row-wise `log Σ exp`, reducing the last dimension.
pub fn logsumexp_lastdim(x: &Tensor) -> Result<Tensor> {
    let cols = x.cols();
    if cols == 0 {
        return Err(Error::EmptyDimension);
    }
    let out: Vec<f64> = (0..x.rows()).map(|r| logsumexp(x.row(r))).collect();
    let shape = if x.shape().is_empty() {
        vec![]
    } else {
        x.shape()[..x.shape().len() - 1].to_vec()
    };
    Ok(Tensor::from_parts(shape, out))
}

/// Row-wise softmax over the last dimension.
pub fn softmax_lastdim(x: &Tensor) -> Result<Tensor> {
    let cols = x.cols();
    if cols == 0 {
        return Err(Error::EmptyDimension);
    }
    let mut out = vec![0.0; x.len()];
    for r in 0..x.rows() {
        softmax_into(x.row(r), &mut out[r * cols..(r + 1) * cols]);
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Row-wise log-softmax over the last dimension.
pub fn log_softmax_lastdim(x: &Tensor) -> Result<Tensor> {
    let cols = x.cols();
    if cols == 0 {
        return Err(Error::EmptyDimension);
    }
    let mut out = vec![0.0; x.len()];
    for r in 0..x.rows() {
        let row = x.row(r);
        let lse = logsumexp(row);
        for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
            *o = v - lse;
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub(crate) fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + xs.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

pub(crate) fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

pub(crate) fn softmax_into(xs: &[f64], out: &mut [f64]) {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(xs) {
        *o = (v - m).exp();
        sum += *o;
    }
    let inv = 1.0 / sum;
    for o in out.iter_mut() {
        *o *= inv;
    }
}
