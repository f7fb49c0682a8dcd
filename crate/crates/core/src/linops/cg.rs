//! Conjugate gradient for symmetric positive-definite systems, matrix-free.

use super::{axpy, dot, norm2};
use crate::{Result, SdoError};

/// Outcome of a converged CG solve.
///
/// `residual` is the *recomputed* relative residual ‖Ax − b‖/‖b‖ (one extra
/// operator application at the end), not the recurrence estimate, so it can
/// be trusted against round-off drift.
#[derive(Debug, Clone)]
pub struct CgSolution {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
}

/// Solves A x = b for symmetric positive-definite A given as a closure.
///
/// Stops when the relative residual ‖Ax − b‖/‖b‖ drops to `tol`; errors with
/// the final residual when `max_iter` is exhausted. `b = 0` returns `x = 0`
/// immediately.
pub fn conjugate_gradient<F>(apply_a: F, b: &[f64], tol: f64, max_iter: usize) -> Result<CgSolution>
where
    F: Fn(&[f64], &mut [f64]),
{
    preconditioned_cg(apply_a, None, b, tol, max_iter)
}

/// CG with an optional Jacobi (diagonal) preconditioner.
///
/// `precond_diag` holds the diagonal of A (not its inverse); `None` recovers
/// plain CG. The convergence criterion is identical to
/// [`conjugate_gradient`]: true relative residual ≤ `tol`.
pub fn preconditioned_cg<F>(
    apply_a: F,
    precond_diag: Option<&[f64]>,
    b: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<CgSolution>
where
    F: Fn(&[f64], &mut [f64]),
{
    if tol <= 0.0 {
        return Err(SdoError::InvalidParameter(format!(
            "cg tolerance must be positive, got {tol}"
        )));
    }
    let n = b.len();
    let b_norm = norm2(b);
    if b_norm == 0.0 {
        return Ok(CgSolution {
            x: vec![0.0; n],
            iterations: 0,
            residual: 0.0,
        });
    }
    if let Some(d) = precond_diag {
        if d.len() != n {
            return Err(SdoError::Dimension {
                context: "preconditioned_cg diagonal",
                expected: n,
                got: d.len(),
            });
        }
        if d.iter().any(|&di| di <= 0.0) {
            return Err(SdoError::InvalidParameter(
                "jacobi preconditioner requires a strictly positive diagonal".into(),
            ));
        }
    }
    let solve_m = |r: &[f64], z: &mut [f64]| match precond_diag {
        Some(d) => {
            for i in 0..n {
                z[i] = r[i] / d[i];
            }
        }
        None => z.copy_from_slice(r),
    };

    let mut x = vec![0.0; n];
    let mut r = b.to_vec(); // r = b - A*0
    let mut z = vec![0.0; n];
    solve_m(&r, &mut z);
    let mut p = z.clone();
    let mut ap = vec![0.0; n];
    let mut rz = dot(&r, &z);
    let mut iterations = 0;

    while iterations < max_iter {
        iterations += 1;
        apply_a(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !pap.is_finite() || pap <= 0.0 {
            return Err(SdoError::NonFinite(format!(
                "cg curvature p'Ap = {pap:.3e} at iteration {iterations} (operator not SPD?)"
            )));
        }
        let alpha = rz / pap;
        axpy(alpha, &p, &mut x);
        axpy(-alpha, &ap, &mut r);

        if norm2(&r) <= tol * b_norm {
            // Validate against the recurrence's round-off drift before
            // declaring success; on drift, refresh r = b - Ax and continue.
            apply_a(&x, &mut ap);
            let mut true_r = b.to_vec();
            axpy(-1.0, &ap, &mut true_r);
            let true_rel = norm2(&true_r) / b_norm;
            if true_rel <= tol {
                return Ok(CgSolution {
                    x,
                    iterations,
                    residual: true_rel,
                });
            }
            r = true_r;
        }

        solve_m(&r, &mut z);
        let rz_next = dot(&r, &z);
        let beta = rz_next / rz;
        rz = rz_next;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }

    apply_a(&x, &mut ap);
    let mut true_r = b.to_vec();
    axpy(-1.0, &ap, &mut true_r);
    Err(SdoError::CgNoConvergence {
        iterations,
        residual: norm2(&true_r) / b_norm,
        tol,
    })
}

/// Default relative-residual tolerance for CG solves.
pub const CG_TOL: f64 = 1e-8;
/// Default iteration cap for CG solves.
pub const CG_MAX_ITER: usize = 500;
