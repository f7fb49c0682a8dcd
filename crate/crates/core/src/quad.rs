//! Scalar numerical integration utilities: an adaptive Simpson scheme with
//! embedded error control (Gauss–Kronrod-style accept/refine logic) and a
//! streaming log-sum-exp accumulator.

use crate::{Result, SdoError};

const MAX_DEPTH: usize = 60;

/// Integrates `f` over [a, b] to absolute tolerance `abs_tol`.
///
/// Uses adaptive Simpson with the standard Richardson error estimate; each
/// panel is accepted when |S_fine − S_coarse| ≤ 15·(panel tolerance).
/// Integrands must evaluate finite everywhere on [a, b]; callers should
/// split at known kinks (e.g. |x| at 0) for fast convergence.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, abs_tol: f64) -> Result<f64> {
    if !(abs_tol > 0.0) {
        return Err(SdoError::InvalidParameter(format!(
            "quadrature tolerance must be positive, got {abs_tol}"
        )));
    }
    if a == b {
        return Ok(0.0);
    }
    let (fa, fb) = (eval(&f, a)?, eval(&f, b)?);
    let m = 0.5 * (a + b);
    let fm = eval(&f, m)?;
    let whole = simpson(a, b, fa, fm, fb);
    adaptive(&f, a, fa, m, fm, b, fb, whole, abs_tol, MAX_DEPTH)
}

fn eval<F: Fn(f64) -> f64>(f: &F, x: f64) -> Result<f64> {
    let v = f(x);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(SdoError::Quadrature(format!(
            "integrand non-finite at x = {x}"
        )))
    }
}

fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

#[allow(clippy::too_many_arguments)]
fn adaptive<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    fa: f64,
    m: f64,
    fm: f64,
    b: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: usize,
) -> Result<f64> {
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let (flm, frm) = (eval(f, lm)?, eval(f, rm)?);
    let left = simpson(a, m, fa, flm, fm);
    let right = simpson(m, b, fm, frm, fb);
    let refined = left + right;
    if (refined - whole).abs() <= 15.0 * tol || (b - a) < 1e-300 {
        return Ok(refined + (refined - whole) / 15.0);
    }
    if depth == 0 {
        return Err(SdoError::Quadrature(format!(
            "max subdivision depth reached on [{a}, {b}] (estimate {refined:.6e})"
        )));
    }
    let half = 0.5 * tol;
    Ok(adaptive(f, a, fa, lm, flm, m, fm, left, half, depth - 1)?
        + adaptive(f, m, fm, rm, frm, b, fb, right, half, depth - 1)?)
}

/// Streaming log(Σ exp(vᵢ)) with online max-rescaling; safe for values whose
/// exponentials overflow f64.
#[derive(Debug, Clone)]
pub struct LogSumExp {
    max: f64,
    sum: f64,
}

impl LogSumExp {
    pub fn new() -> Self {
        Self {
            max: f64::NEG_INFINITY,
            sum: 0.0,
        }
    }

    /// Adds exp(v), optionally scaled by a nonnegative weight.
    pub fn push_weighted(&mut self, v: f64, weight: f64) {
        if weight == 0.0 || v == f64::NEG_INFINITY {
            return;
        }
        let lv = v + weight.ln();
        if lv <= self.max {
            self.sum += (lv - self.max).exp();
        } else {
            self.sum = self.sum * (self.max - lv).exp() + 1.0;
            self.max = lv;
        }
    }

    pub fn push(&mut self, v: f64) {
        self.push_weighted(v, 1.0);
    }

    /// log(Σ exp); −∞ when nothing was pushed.
    pub fn value(&self) -> f64 {
        if self.max == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            self.max + self.sum.ln()
        }
    }
}

impl Default for LogSumExp {
    fn default() -> Self {
        Self::new()
    }
}
