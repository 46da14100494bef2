use nalgebra::DMatrix;

use super::signal::ImpulseResponse;
use crate::error::{AncError, Result};

/// Lower-triangular Toeplitz matrix of an impulse response.
///
/// Entry `(i, j)` is `h[i - j]` for `j <= i` and zero above the diagonal, so
/// multiplying a length-`L` block is the first `L` samples of the linear
/// convolution with `h`. Only the first column is stored.
#[derive(Debug, Clone, PartialEq)]
pub struct ToeplitzOperator {
    column: Vec<f64>,
}

impl ToeplitzOperator {
    pub fn from_column(column: Vec<f64>) -> Result<Self> {
        if column.is_empty() {
            return Err(AncError::InvalidDimension("Toeplitz operator of size 0".into()));
        }
        Ok(Self { column })
    }

    pub fn dim(&self) -> usize {
        self.column.len()
    }

    pub fn column(&self) -> &[f64] {
        &self.column
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        if j > i {
            0.0
        } else {
            self.column[i - j]
        }
    }

    /// `T x` (truncated causal convolution).
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let l = self.dim();
        assert_eq!(x.len(), l, "Toeplitz apply: dimension mismatch");
        let mut out = vec![0.0; l];
        for (j, &xj) in x.iter().enumerate() {
            if xj == 0.0 {
                continue;
            }
            for (o, &c) in out[j..].iter_mut().zip(&self.column) {
                *o += c * xj;
            }
        }
        out
    }

    /// `Tᵀ x` (truncated correlation).
    pub fn apply_transpose(&self, x: &[f64]) -> Vec<f64> {
        let l = self.dim();
        assert_eq!(x.len(), l, "Toeplitz apply_transpose: dimension mismatch");
        (0..l)
            .map(|j| self.column[..l - j].iter().zip(&x[j..]).map(|(c, v)| c * v).sum())
            .collect()
    }

    /// Product of two lower-triangular Toeplitz operators of equal size (they commute).
    pub fn compose(&self, other: &ToeplitzOperator) -> ToeplitzOperator {
        assert_eq!(self.dim(), other.dim());
        ToeplitzOperator { column: self.apply(&other.column) }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let l = self.dim();
        DMatrix::from_fn(l, l, |i, j| self.entry(i, j))
    }
}

/// Builds the `L x L` Toeplitz operator of `h`, zero-padding or truncating to `L` taps.
pub fn make_toeplitz(h: &ImpulseResponse, l: usize) -> Result<ToeplitzOperator> {
    if l == 0 {
        return Err(AncError::InvalidDimension("Toeplitz size L must be at least 1".into()));
    }
    let mut column = h.taps().to_vec();
    column.resize(l, 0.0);
    ToeplitzOperator::from_column(column)
}
