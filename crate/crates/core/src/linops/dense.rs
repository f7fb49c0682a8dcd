//! Dense-matrix operator, mainly for small-scale oracles and tests.

use super::LinOp;
use nalgebra::DMatrix;

/// Wraps an explicit matrix as a [`LinOp`]: `apply` multiplies by the matrix,
/// `apply_adjoint` by its transpose.
#[derive(Debug, Clone)]
pub struct DenseOp {
    matrix: DMatrix<f64>,
}

impl DenseOp {
    pub fn new(matrix: DMatrix<f64>) -> Self {
        Self { matrix }
    }

    /// Builds the operator from a row-major flat slice.
    pub fn from_rows(rows: usize, cols: usize, data: &[f64]) -> Self {
        assert_eq!(rows * cols, data.len(), "shape/data mismatch");
        Self {
            matrix: DMatrix::from_row_slice(rows, cols, data),
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }
}

impl LinOp for DenseOp {
    fn domain_dim(&self) -> usize {
        self.matrix.ncols()
    }

    fn range_dim(&self) -> usize {
        self.matrix.nrows()
    }

    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        assert_eq!(x.len(), self.domain_dim());
        assert_eq!(out.len(), self.range_dim());
        for (r, slot) in out.iter_mut().enumerate() {
            *slot = (0..self.matrix.ncols())
                .map(|c| self.matrix[(r, c)] * x[c])
                .sum();
        }
    }

    fn apply_adjoint_into(&self, y: &[f64], out: &mut [f64]) {
        assert_eq!(y.len(), self.range_dim());
        assert_eq!(out.len(), self.domain_dim());
        for (c, slot) in out.iter_mut().enumerate() {
            *slot = (0..self.matrix.nrows())
                .map(|r| self.matrix[(r, c)] * y[r])
                .sum();
        }
    }
}
