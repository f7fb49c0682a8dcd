//! Image estimators: sparsity-penalized least squares (exact ℓ1 and its
//! fitted-Gaussian quadratic surrogate), ridge-penalized least squares, the
//! zero-fill pseudoinverse, and SSIM scoring.

use crate::linops::{
    conjugate_gradient, make_mri_operator, preconditioned_cg, LinOp, SamplingMask, CG_TOL,
};
use crate::priors::GaussianBoundParams;
use crate::{Result, SdoError};

/// Iteration budget for reconstruction CG solves.
const RECON_CG_MAX_ITER: usize = 1500;

/// A reconstruction together with its convergence record.
#[derive(Debug, Clone)]
pub struct ReconResult {
    pub image: Vec<f64>,
    /// Objective values, non-increasing for the iterative estimators.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
}

fn soft(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// Minimizes ‖g − Hf‖² + 2σ²τ‖Bf‖₁ over f = B†u with an accelerated
/// proximal-gradient method (soft-threshold prox in the orthonormal
/// coefficient domain, majorization backtracking on the step size, momentum
/// restart whenever a candidate would raise the objective — so the trace is
/// monotone). Starts from the zero-fill coefficients u₀ = B H†g and stops
/// once the prox-gradient residual falls below `tol` relative to its
/// initial value.
pub fn pls_l1(
    g: &[f64],
    h: &dyn LinOp,
    b: &dyn LinOp,
    sigma: f64,
    tau: f64,
    max_iters: usize,
    tol: f64,
) -> Result<ReconResult> {
    if !(sigma > 0.0) || !(tau > 0.0) || !(tol > 0.0) {
        return Err(SdoError::InvalidParameter(format!(
            "pls_l1 needs sigma, tau, tol > 0 (got {sigma}, {tau}, {tol})"
        )));
    }
    if g.len() != h.range_dim() {
        return Err(SdoError::Dimension {
            context: "pls_l1: measurement length",
            expected: h.range_dim(),
            got: g.len(),
        });
    }
    if h.domain_dim() != b.domain_dim() {
        return Err(SdoError::Dimension {
            context: "pls_l1: H and B domain",
            expected: b.domain_dim(),
            got: h.domain_dim(),
        });
    }
    let lambda = 2.0 * sigma * sigma * tau;

    // s(u) = ‖g − HB†u‖² and its gradient 2·B H†(HB†u − g).
    let smooth = |u: &[f64]| -> (f64, Vec<f64>) {
        let f = b.apply_adjoint(u);
        let mut r = h.apply(&f);
        for (ri, gi) in r.iter_mut().zip(g) {
            *ri -= gi;
        }
        let val = r.iter().map(|v| v * v).sum::<f64>();
        let back = h.apply_adjoint(&r);
        let mut grad = b.apply(&back);
        for gv in grad.iter_mut() {
            *gv *= 2.0;
        }
        (val, grad)
    };
    let objective = |s_val: f64, u: &[f64]| s_val + lambda * u.iter().map(|v| v.abs()).sum::<f64>();

    let mut u = b.apply(&h.apply_adjoint(g));
    let (s_u, _) = smooth(&u);
    let mut f_u = objective(s_u, &u);
    if !f_u.is_finite() {
        return Err(SdoError::NonFinite(format!(
            "pls_l1 objective at the initializer ({f_u})"
        )));
    }
    let mut trace = vec![f_u];
    let mut lip = 2.0f64;
    let mut momentum = 1.0f64;
    let mut v = u.clone();
    let mut iterations = 0;
    let mut residual0: Option<f64> = None;

    for it in 1..=max_iters {
        // One backtracked prox step from a base point.
        let step_from = |base: &[f64], lip: &mut f64| -> Result<(Vec<f64>, f64, f64)> {
            let (s_base, grad) = smooth(base);
            loop {
                let t = 1.0 / *lip;
                let w: Vec<f64> = base
                    .iter()
                    .zip(&grad)
                    .map(|(bi, gi)| soft(bi - t * gi, t * lambda))
                    .collect();
                let (s_w, _) = smooth(&w);
                if !s_w.is_finite() {
                    return Err(SdoError::NonFinite(format!(
                        "pls_l1 objective diverged ({s_w})"
                    )));
                }
                let mut lin = 0.0;
                let mut sq = 0.0;
                for ((wi, bi), gi) in w.iter().zip(base).zip(&grad) {
                    let d = wi - bi;
                    lin += gi * d;
                    sq += d * d;
                }
                let major = s_base + lin + 0.5 * *lip * sq;
                if s_w <= major + 1e-12 * major.abs().max(1.0) {
                    // Residual of the composite gradient map at the base point.
                    let res = *lip * sq.sqrt();
                    return Ok((w, s_w, res));
                }
                *lip *= 2.0;
                if *lip > 1e16 {
                    return Err(SdoError::NonFinite(
                        "pls_l1 backtracking exhausted; the problem scaling is degenerate".into(),
                    ));
                }
            }
        };

        let (mut w, mut s_w, mut res) = step_from(&v, &mut lip)?;
        let mut f_w = objective(s_w, &w);
        if f_w > f_u {
            // Momentum overshot: restart from the current iterate, which the
            // majorization guarantees can only descend.
            (w, s_w, res) = step_from(&u, &mut lip)?;
            f_w = objective(s_w, &w);
            momentum = 1.0;
            if f_w > f_u + 1e-12 * f_u.abs().max(1.0) {
                break; // numerically stationary
            }
            f_w = f_w.min(f_u);
        }
        let r0 = *residual0.get_or_insert(res.max(1e-300));
        let next_momentum = 0.5 * (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt());
        let coef = (momentum - 1.0) / next_momentum;
        v = w
            .iter()
            .zip(&u)
            .map(|(wi, ui)| wi + coef * (wi - ui))
            .collect();
        momentum = next_momentum;
        u = w;
        f_u = f_w;
        trace.push(f_u);
        iterations = it;
        if res <= tol * r0 {
            break;
        }
    }

    Ok(ReconResult {
        image: b.apply_adjoint(&u),
        objective_trace: trace,
        iterations,
    })
}

/// Quadratic surrogate of [`pls_l1`] under fitted Gaussian-bound widths:
/// minimizes ‖g − Hf‖²/σ² + f†B†Γ̂⁻¹Bf by a Jacobi-preconditioned CG solve
/// of the normal equations in the coefficient domain.
pub fn pls_l1_approx(
    g: &[f64],
    h: &dyn LinOp,
    b: &dyn LinOp,
    sigma: f64,
    gamma_hat: &GaussianBoundParams,
) -> Result<ReconResult> {
    if !(sigma > 0.0) {
        return Err(SdoError::InvalidParameter(format!(
            "pls_l1_approx needs sigma > 0, got {sigma}"
        )));
    }
    let q = b.range_dim();
    if gamma_hat.len() != q {
        return Err(SdoError::Dimension {
            context: "pls_l1_approx: gamma length",
            expected: q,
            got: gamma_hat.len(),
        });
    }
    if g.len() != h.range_dim() {
        return Err(SdoError::Dimension {
            context: "pls_l1_approx: measurement length",
            expected: h.range_dim(),
            got: g.len(),
        });
    }
    let inv_s2 = 1.0 / (sigma * sigma);
    let gamma = gamma_hat.gamma();

    let rhs = {
        let mut back = h.apply_adjoint(g);
        for v in back.iter_mut() {
            *v *= inv_s2;
        }
        b.apply(&back)
    };
    let apply_a = |v: &[f64], out: &mut [f64]| {
        let img = b.apply_adjoint(v);
        let meas = h.apply(&img);
        let back = h.apply_adjoint(&meas);
        b.apply_into(&back, out);
        for (o, (vi, gi)) in out.iter_mut().zip(v.iter().zip(gamma)) {
            *o = *o * inv_s2 + vi / gi;
        }
    };
    let precond: Vec<f64> = crate::varinf::kernel_diagonal(h, b, sigma)?
        .iter()
        .zip(gamma)
        .map(|(di, gi)| di + 1.0 / gi)
        .collect();
    let sol = preconditioned_cg(apply_a, Some(&precond), &rhs, CG_TOL, RECON_CG_MAX_ITER)?;

    let quadratic = |u: &[f64]| {
        let f = b.apply_adjoint(u);
        let mut r = h.apply(&f);
        for (ri, gi) in r.iter_mut().zip(g) {
            *ri -= gi;
        }
        r.iter().map(|v| v * v).sum::<f64>() * inv_s2
            + u.iter().zip(gamma).map(|(ui, gi)| ui * ui / gi).sum::<f64>()
    };
    let start = g.iter().map(|v| v * v).sum::<f64>() * inv_s2;
    let end = quadratic(&sol.x);
    Ok(ReconResult {
        image: b.apply_adjoint(&sol.x),
        objective_trace: vec![start, end],
        iterations: sol.iterations,
    })
}

/// Ridge-penalized least squares: minimizes ‖g − Hf‖² + β‖f‖² via CG on
/// (H†H + βI)f = H†g. With β = 0 and consistent data this returns the
/// minimum-norm least-squares solution (CG from a zero start stays in the
/// row space of H).
pub fn pls_l2(g: &[f64], h: &dyn LinOp, beta: f64) -> Result<ReconResult> {
    if !(beta >= 0.0) || !beta.is_finite() {
        return Err(SdoError::InvalidParameter(format!(
            "pls_l2 needs beta ≥ 0, got {beta}"
        )));
    }
    if g.len() != h.range_dim() {
        return Err(SdoError::Dimension {
            context: "pls_l2: measurement length",
            expected: h.range_dim(),
            got: g.len(),
        });
    }
    let rhs = h.apply_adjoint(g);
    let apply_a = |v: &[f64], out: &mut [f64]| {
        let meas = h.apply(v);
        h.apply_adjoint_into(&meas, out);
        for (o, vi) in out.iter_mut().zip(v) {
            *o += beta * vi;
        }
    };
    let sol = conjugate_gradient(apply_a, &rhs, CG_TOL, RECON_CG_MAX_ITER)?;
    let objective = |f: &[f64]| {
        let mut r = h.apply(f);
        for (ri, gi) in r.iter_mut().zip(g) {
            *ri -= gi;
        }
        r.iter().map(|v| v * v).sum::<f64>() + beta * f.iter().map(|v| v * v).sum::<f64>()
    };
    let start = g.iter().map(|v| v * v).sum::<f64>();
    let end = objective(&sol.x);
    Ok(ReconResult {
        image: sol.x,
        objective_trace: vec![start, end],
        iterations: sol.iterations,
    })
}

/// Zero-fill pseudoinverse: embeds the sampled lines into an otherwise zero
/// k-space grid, applies the inverse unitary 2-D DFT, and takes the real
/// part. Identical to H†g under the stacked-real convention.
pub fn zero_fill(g: &[f64], mask: &SamplingMask) -> Result<Vec<f64>> {
    let h = make_mri_operator(mask.clone(), mask.n())?;
    if g.len() != h.range_dim() {
        return Err(SdoError::Dimension {
            context: "zero_fill: measurement length",
            expected: h.range_dim(),
            got: g.len(),
        });
    }
    Ok(h.apply_adjoint(g))
}

/// Mean structural similarity over sliding 8×8 windows with the canonical
/// constants C₁ = (0.01·L)² and C₂ = (0.03·L)², L = `dynamic_range`.
/// Inputs are square row-major images of equal size, at least 8×8.
pub fn ssim(a: &[f64], b: &[f64], dynamic_range: f64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(SdoError::Dimension {
            context: "ssim: image sizes",
            expected: a.len(),
            got: b.len(),
        });
    }
    if !(dynamic_range > 0.0) {
        return Err(SdoError::InvalidParameter(format!(
            "ssim needs a positive dynamic range, got {dynamic_range}"
        )));
    }
    let n = (a.len() as f64).sqrt().round() as usize;
    if n * n != a.len() {
        return Err(SdoError::InvalidParameter(format!(
            "ssim expects square images, got length {}",
            a.len()
        )));
    }
    const W: usize = 8;
    if n < W {
        return Err(SdoError::InvalidParameter(format!(
            "ssim needs images of at least {W}×{W}, got {n}×{n}"
        )));
    }
    let c1 = (0.01 * dynamic_range).powi(2);
    let c2 = (0.03 * dynamic_range).powi(2);
    let area = (W * W) as f64;
    let mut total = 0.0;
    let mut windows = 0usize;
    for r0 in 0..=(n - W) {
        for c0 in 0..=(n - W) {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for r in r0..r0 + W {
                let row = r * n + c0;
                for (av, bv) in a[row..row + W].iter().zip(&b[row..row + W]) {
                    sa += av;
                    sb += bv;
                    saa += av * av;
                    sbb += bv * bv;
                    sab += av * bv;
                }
            }
            let (ma, mb) = (sa / area, sb / area);
            let va = saa / area - ma * ma;
            let vb = sbb / area - mb * mb;
            let cov = sab / area - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            windows += 1;
        }
    }
    Ok(total / windows as f64)
}
