//! Per-layer forward/backward kernels: RMSNorm, SiLU, embedding lookup.
//!
//! Each backward is hand-derived and checked against central finite
//! differences in the test suite.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const RMSNORM_EPS: f64 = 1e-6;

/// RMSNorm over each row of `x` with elementwise gain `g`.
///
/// Returns the output and the per-row RMS values needed by the backward pass.
pub fn rmsnorm_fwd(x: &Tensor, gain: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    let n = x.cols();
    if gain.len() != n {
        return Err(Error::ShapeMismatch {
            context: "rmsnorm_fwd",
            lhs: x.shape().to_vec(),
            rhs: gain.shape().to_vec(),
        });
    }
    let mut y = Tensor::zeros(x.shape());
    let mut rms = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / n as f64;
        let rv = (ms + RMSNORM_EPS).sqrt();
        rms.push(rv);
        let out = y.row_mut(r);
        for i in 0..n {
            out[i] = gain.data()[i] * row[i] / rv;
        }
    }
    Ok((y, rms))
}

/// Backward of [`rmsnorm_fwd`]. Returns (dx, dgain).
pub fn rmsnorm_bwd(x: &Tensor, gain: &Tensor, rms: &[f64], dy: &Tensor) -> Result<(Tensor, Tensor)> {
    if x.shape() != dy.shape() {
        return Err(Error::ShapeMismatch {
            context: "rmsnorm_bwd",
            lhs: x.shape().to_vec(),
            rhs: dy.shape().to_vec(),
        });
    }
    let n = x.cols();
    let mut dx = Tensor::zeros(x.shape());
    let mut dgain = Tensor::zeros(gain.shape());
    for r in 0..x.rows() {
        let xr = x.row(r);
        let dyr = dy.row(r);
        let rv = rms[r];
        // dot = sum_i g_i * dy_i * x_i
        let mut dot = 0.0;
        for i in 0..n {
            dot += gain.data()[i] * dyr[i] * xr[i];
            dgain.data_mut()[i] += dyr[i] * xr[i] / rv;
        }
        let c = dot / (n as f64 * rv * rv * rv);
        let dxr = dx.row_mut(r);
        for i in 0..n {
            dxr[i] = gain.data()[i] * dyr[i] / rv - xr[i] * c;
        }
    }
    Ok((dx, dgain))
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// SiLU (swish): x * sigmoid(x), elementwise.
pub fn silu_fwd(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    for v in y.data_mut() {
        *v = *v * sigmoid(*v);
    }
    y
}

/// Backward of SiLU: dy * sigmoid(x) * (1 + x * (1 - sigmoid(x))).
pub fn silu_bwd(x: &Tensor, dy: &Tensor) -> Result<Tensor> {
    if x.shape() != dy.shape() {
        return Err(Error::ShapeMismatch {
            context: "silu_bwd",
            lhs: x.shape().to_vec(),
            rhs: dy.shape().to_vec(),
        });
    }
    let mut dx = dy.clone();
    for (d, &xv) in dx.data_mut().iter_mut().zip(x.data()) {
        let s = sigmoid(xv);
        *d *= s * (1.0 + xv * (1.0 - s));
    }
    Ok(dx)
}

/// Gather rows `table[id]` for each token id.
pub fn embedding_fwd(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
    let (vocab, d) = (table.rows(), table.cols());
    let mut y = Tensor::zeros(&[ids.len(), d]);
    for (r, &id) in ids.iter().enumerate() {
        if id >= vocab {
            return Err(Error::IndexOutOfRange {
                context: "embedding_fwd",
                index: id,
                bound: vocab,
            });
        }
        y.row_mut(r).copy_from_slice(table.row(id));
    }
    Ok(y)
}

/// Scatter-add of `dy` rows back into the table gradient.
pub fn embedding_bwd(table_shape: &[usize], ids: &[usize], dy: &Tensor) -> Result<Tensor> {
    if dy.rows() != ids.len() || dy.cols() != table_shape[1] {
        return Err(Error::ShapeMismatch {
            context: "embedding_bwd",
            lhs: dy.shape().to_vec(),
            rhs: table_shape.to_vec(),
        });
    }
    let mut dt = Tensor::zeros(table_shape);
    for (r, &id) in ids.iter().enumerate() {
        let src = dy.row(r);
        let dst = dt.row_mut(id);
        for i in 0..src.len() {
            dst[i] += src[i];
        }
    }
    Ok(dt)
}
