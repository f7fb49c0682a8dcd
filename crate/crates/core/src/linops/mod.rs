//! Matrix-free linear operators and a conjugate-gradient solver.
//!
//! Operators act on plain `&[f64]` slices. Object-domain vectors hold an
//! n×n image in row-major order; measurement-domain vectors stack complex
//! k-space samples as consecutive (re, im) pairs.

mod cg;
mod dense;
mod design;
mod fourier;
mod haar;

pub use cg::{conjugate_gradient, preconditioned_cg, CgSolution, CG_MAX_ITER, CG_TOL};
pub use dense::DenseOp;
pub use design::{half_scan_lines, low_freq_block_lines, make_design, DesignKind, SamplingMask};
pub use fourier::{make_mri_operator, MriOperator};
pub use haar::HaarTransform;

/// A real linear operator with an adjoint, evaluated matrix-free.
///
/// Implementations must satisfy the adjoint identity
/// ⟨A x, y⟩ = ⟨x, A† y⟩ for all x, y (verified property-style in tests).
pub trait LinOp: Send + Sync {
    /// Dimension of the input (object) space.
    fn domain_dim(&self) -> usize;
    /// Dimension of the output (range) space.
    fn range_dim(&self) -> usize;
    /// out = A x. `x.len() == domain_dim()`, `out.len() == range_dim()`.
    fn apply_into(&self, x: &[f64], out: &mut [f64]);
    /// out = A† y. `y.len() == range_dim()`, `out.len() == domain_dim()`.
    fn apply_adjoint_into(&self, y: &[f64], out: &mut [f64]);

    /// Allocating convenience wrapper around [`LinOp::apply_into`].
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.range_dim()];
        self.apply_into(x, &mut out);
        out
    }

    /// Allocating convenience wrapper around [`LinOp::apply_adjoint_into`].
    fn apply_adjoint(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.domain_dim()];
        self.apply_adjoint_into(y, &mut out);
        out
    }
}

/// Materializes an operator as a dense matrix by applying it to unit vectors.
///
/// Intended for small-instance oracles and diagnostics, not production paths.
pub fn to_dense(op: &dyn LinOp) -> nalgebra::DMatrix<f64> {
    let (m, n) = (op.range_dim(), op.domain_dim());
    let mut a = nalgebra::DMatrix::zeros(m, n);
    let mut e = vec![0.0; n];
    let mut col = vec![0.0; m];
    for j in 0..n {
        e[j] = 1.0;
        op.apply_into(&e, &mut col);
        e[j] = 0.0;
        for i in 0..m {
            a[(i, j)] = col[i];
        }
    }
    a
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// y += alpha * x
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}
