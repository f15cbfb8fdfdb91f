//! Dense f64 tensors and the reverse-mode graph built on top of them.
//!
//! Everything downstream (the decoder model, relevance propagation, the
//! delta optimizer) runs on these two pieces. Values are row-major `Vec<f64>`
//! and all math is f64; at the scales this project targets, throughput is
//! dominated by a handful of small matmuls, so there is no point in anything
//! fancier.

use thiserror::Error;

pub mod graph;

pub use graph::{Graph, NodeId, OpSpec};

/// Denominators with magnitude below this are treated as singular when no
/// epsilon stabilizer is in effect. Also the cutoff for `log` domain checks.
pub const STABILIZER_BAND: f64 = 1e-12;

/// Sign convention used by the epsilon stabilizer: zero counts as positive,
/// so a stabilized denominator can never be exactly zero.
#[inline]
pub fn stabilizer_sign(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: &'static str,
    },
    #[error("domain error in {op} at flat index {index}: value {value}")]
    Domain {
        op: &'static str,
        index: usize,
        value: f64,
    },
    #[error("{op} produced a non-finite value at flat index {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error("singular denominator in {op} at output unit {index} (|{value:e}| < {band:e}, epsilon = 0)")]
    Singular {
        op: &'static str,
        index: usize,
        value: f64,
        band: f64,
    },
    #[error("gradient output must be scalar, got shape {shape:?}")]
    NonScalarOutput { shape: Vec<usize> },
    #[error("{op}: node {node} out of bounds for graph of {len} nodes")]
    BadNode {
        op: &'static str,
        node: usize,
        len: usize,
    },
    #[error("{op}: {reason}")]
    Contract { op: &'static str, reason: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Row-major dense tensor. Rank 1 and 2 are what the graph operates on;
/// rank 3 shows up only as storage (the KV cache).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let count: usize = shape.iter().product();
        if shape.is_empty() || count != data.len() {
            return Err(TensorError::InvalidShape {
                op: "new",
                shape,
                reason: "element count does not match data length",
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let count: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; count],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn vector(v: Vec<f64>) -> Self {
        Tensor {
            shape: vec![v.len()],
            data: v,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn scalar_value(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        self.shape[1]
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[row * self.shape[1] + col]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let w = self.shape[self.shape.len() - 1];
        &self.data[r * w..(r + 1) * w]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let w = self.shape[self.shape.len() - 1];
        &mut self.data[r * w..(r + 1) * w]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Index of the first non-finite element, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    pub fn byte_size(&self) -> usize {
        self.data.len() * std::mem::size_of::<f64>()
    }
}

// ---------------------------------------------------------------------------
// Shared numeric kernels.
//
// The incremental (cache-driven) decoder path and the graph path must agree
// bit-for-bit, so both call into these kernels. Accumulation order is always
// ascending over the contracted index and nothing here may be rewritten in a
// way that reassociates floating-point sums.
// ---------------------------------------------------------------------------

/// out[i][j] += sum_k a[i][k] * b[k][j], ikj order.
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// Numerically stable softmax of one slice into `out`.
pub(crate) fn softmax_row(xs: &[f64], out: &mut [f64]) {
    let mut m = f64::NEG_INFINITY;
    for &v in xs {
        if v > m {
            m = v;
        }
    }
    let mut denom = 0.0;
    for (o, &v) in out.iter_mut().zip(xs.iter()) {
        let e = (v - m).exp();
        *o = e;
        denom += e;
    }
    let inv = 1.0 / denom;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

/// Mean and 1/sqrt(var + eps) of a slice (population variance).
pub(crate) fn layer_norm_stats_row(xs: &[f64], epsilon: f64) -> (f64, f64) {
    let n = xs.len() as f64;
    let mut s = 0.0;
    for &v in xs {
        s += v;
    }
    let mu = s * (1.0 / n);
    let mut var = 0.0;
    for &v in xs {
        let d = v - mu;
        var += d * d;
    }
    var *= 1.0 / n;
    let rstd = 1.0 / (var + epsilon).sqrt();
    (mu, rstd)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_shape_checks() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![], vec![]).is_err());
    }

    #[test]
    fn stabilizer_sign_is_positive_at_zero() {
        assert_eq!(stabilizer_sign(0.0), 1.0);
        assert_eq!(stabilizer_sign(-0.0), 1.0);
        assert_eq!(stabilizer_sign(3.5), 1.0);
        assert_eq!(stabilizer_sign(-2.0), -1.0);
    }

    #[test]
    fn softmax_row_matches_uniform_case() {
        let mut out = [0.0; 2];
        softmax_row(&[0.0, 0.0], &mut out);
        assert_eq!(out, [0.5, 0.5]);
    }
}
