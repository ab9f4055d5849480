//! Dense row-major f64 tensors and the batched numeric primitives the rest of
//! the stack is built on.
//!
//! Everything is 64-bit: the verification story (gradient checks, merge
//! round-trips, bitwise-reproducible runs) depends on high precision, and the
//! models involved are small enough that speed is a non-issue.

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Dense tensor: a shape plus a flat row-major array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch {
                context: "Tensor::from_vec",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Gaussian init with the given standard deviation.
    pub fn randn(shape: &[usize], std: f64, rng: &mut Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.next_normal_scaled(std)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Rows of a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Columns of a 2-D tensor.
    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.shape[1] + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let w = self.shape[1];
        &self.data[r * w..(r + 1) * w]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let w = self.shape[1];
        &mut self.data[r * w..(r + 1) * w]
    }

    pub fn transpose(&self) -> Tensor {
        debug_assert_eq!(self.shape.len(), 2);
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = Tensor::zeros(&[n, m]);
        for i in 0..m {
            for j in 0..n {
                out.data[j * m + i] = self.data[i * n + j];
            }
        }
        out
    }

    pub fn scale(&mut self, s: f64) {
        for x in &mut self.data {
            *x *= s;
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                context: "Tensor::add_assign",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// self += s * other
    pub fn add_scaled(&mut self, other: &Tensor, s: f64) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                context: "Tensor::add_scaled",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// c[i][j] = sum_t a[i][t] * b[t][j]
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.cols() != b.rows() {
        return Err(Error::ShapeMismatch {
            context: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut c = Tensor::zeros(&[m, n]);
    for i in 0..m {
        for t in 0..k {
            let av = a.data[i * k + t];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[t * n..(t + 1) * n];
            let crow = &mut c.data[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    Ok(c)
}

/// Row-wise softmax with max subtraction for stability.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let n = x.cols();
    for r in 0..x.rows() {
        softmax_in_place(&mut out.data[r * n..(r + 1) * n]);
    }
    out
}

/// In-place stable softmax over a single slice.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// Mean negative log-likelihood over rows plus its logit gradient.
///
/// loss = mean_i -log softmax(logits[i])[targets[i]]
/// dlogits = (softmax - onehot) / m
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<(f64, Tensor)> {
    let (m, v) = (logits.rows(), logits.cols());
    if targets.len() != m {
        return Err(Error::ShapeMismatch {
            context: "cross_entropy",
            lhs: vec![m],
            rhs: vec![targets.len()],
        });
    }
    for &t in targets {
        if t >= v {
            return Err(Error::IndexOutOfRange {
                context: "cross_entropy target",
                index: t,
                bound: v,
            });
        }
    }
    let probs = softmax_rows(logits);
    let mut loss = 0.0;
    let mut dlogits = probs.clone();
    for (i, &t) in targets.iter().enumerate() {
        loss -= probs.at(i, t).ln();
        *dlogits.at_mut(i, t) -= 1.0;
    }
    let inv_m = 1.0 / m as f64;
    dlogits.scale(inv_m);
    Ok((loss * inv_m, dlogits))
}
