//! Fully analytic 1-D validation of the variational approximation.
//!
//! The scalar model is y = x + ñ with ñ ~ N(0, σ²) and a Laplacian prior
//! p(x) ∝ exp(−τ|x|). Its true posterior is known up to a normalizer that a
//! quadrature evaluates exactly; the variational machinery approximates it
//! with the Gaussian N(y/(1+σ²/γ), σ²/(1+σ²/γ)) whose width γ maximizes the
//! bound-based marginal likelihood. The gap between the two densities is
//! measured with a KL divergence — a complete, closed-loop check of every
//! ingredient the high-dimensional pipeline uses.

use crate::quad::integrate;
use crate::{Result, SdoError};
use std::fmt::Write as _;
use std::path::Path;

/// Scalar inference problem: observation, prior scale, noise std.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OneDimProblem {
    pub y: f64,
    pub tau: f64,
    pub sigma: f64,
}

impl OneDimProblem {
    pub fn new(y: f64, tau: f64, sigma: f64) -> Result<Self> {
        if !(tau > 0.0) || !(sigma > 0.0) || !y.is_finite() {
            return Err(SdoError::InvalidParameter(format!(
                "1-d problem needs tau > 0, sigma > 0, finite y (got tau={tau}, sigma={sigma}, y={y})"
            )));
        }
        Ok(Self { y, tau, sigma })
    }

    /// Integration window: generous for both the Gaussian and Laplacian
    /// length scales.
    pub fn support(&self) -> (f64, f64) {
        let half = 10.0 * self.sigma + 10.0 / self.tau;
        (self.y - half, self.y + half)
    }

    fn log_unnormalized(&self, x: f64) -> f64 {
        let r = self.y - x;
        -self.tau * x.abs() - r * r / (2.0 * self.sigma * self.sigma)
    }
}

/// The true posterior with its quadrature-computed normalizer cached.
#[derive(Debug, Clone)]
pub struct TruePosterior {
    prob: OneDimProblem,
    z: f64,
}

impl TruePosterior {
    pub fn new(prob: OneDimProblem) -> Result<Self> {
        let (lo, hi) = prob.support();
        let f = |x: f64| prob.log_unnormalized(x).exp();
        // Split at the |x| kink when it lies inside the window.
        let z = if lo < 0.0 && hi > 0.0 {
            integrate(f, lo, 0.0, 1e-13)? + integrate(f, 0.0, hi, 1e-13)?
        } else {
            integrate(f, lo, hi, 1e-13)?
        };
        if !(z > 0.0) || !z.is_finite() {
            return Err(SdoError::Quadrature(format!(
                "true-posterior normalizer came out as {z}"
            )));
        }
        Ok(Self { prob, z })
    }

    pub fn pdf(&self, x: f64) -> f64 {
        self.prob.log_unnormalized(x).exp() / self.z
    }

    pub fn problem(&self) -> &OneDimProblem {
        &self.prob
    }
}

/// Normalized true posterior density at a point (convenience wrapper; batch
/// callers should hold a [`TruePosterior`] to reuse its normalizer).
pub fn true_posterior_pdf(x: f64, prob: &OneDimProblem) -> Result<f64> {
    Ok(TruePosterior::new(*prob)?.pdf(x))
}

/// The Gaussian approximate posterior N(y/(1+σ²/γ), σ²/(1+σ²/γ)).
pub fn approx_posterior_pdf(x: f64, prob: &OneDimProblem, gamma: f64) -> Result<f64> {
    let (mean, var) = approx_posterior_moments(prob, gamma)?;
    let d = x - mean;
    Ok((-d * d / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt())
}

/// Mean and variance of the approximate posterior for a given width γ.
pub fn approx_posterior_moments(prob: &OneDimProblem, gamma: f64) -> Result<(f64, f64)> {
    if !(gamma > 0.0) {
        return Err(SdoError::InvalidParameter(format!(
            "approximate posterior needs gamma > 0, got {gamma}"
        )));
    }
    let s2 = prob.sigma * prob.sigma;
    let shrink = 1.0 + s2 / gamma;
    Ok((prob.y / shrink, s2 / shrink))
}

/// Log of the bound-based marginal likelihood P̃(y | γ):
/// ln(τ/2) − ½ln(1+σ²/γ) − τ²γ/2 − y²/(2σ²) + y²/(2σ²(1+σ²/γ)).
pub fn log_marginal_bound(prob: &OneDimProblem, gamma: f64) -> f64 {
    let s2 = prob.sigma * prob.sigma;
    let shrink = 1.0 + s2 / gamma;
    (prob.tau / 2.0).ln() - 0.5 * shrink.ln() - prob.tau * prob.tau * gamma / 2.0
        - prob.y * prob.y / (2.0 * s2)
        + prob.y * prob.y / (2.0 * s2 * shrink)
}

/// Fits γ by maximizing [`log_marginal_bound`]: a coarse log-spaced scan
/// brackets the optimum, then golden-section search refines it far below
/// 1e-8 relative precision.
pub fn fit_gamma_1d(prob: &OneDimProblem) -> Result<f64> {
    let (lo, hi) = (1e-9f64.ln(), 1e9f64.ln());
    let scan = 400usize;
    let mut best_i = 0usize;
    let mut best_v = f64::NEG_INFINITY;
    for i in 0..=scan {
        let lg = lo + (hi - lo) * i as f64 / scan as f64;
        let v = log_marginal_bound(prob, lg.exp());
        if !v.is_finite() {
            return Err(SdoError::NonFinite(format!(
                "marginal bound objective at gamma = {}",
                lg.exp()
            )));
        }
        if v > best_v {
            best_v = v;
            best_i = i;
        }
    }
    let step = (hi - lo) / scan as f64;
    let mut a = lo + step * (best_i.saturating_sub(1)) as f64;
    let mut b = (lo + step * (best_i + 1) as f64).min(hi);
    // Golden-section search on log γ.
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let mut fc = log_marginal_bound(prob, c.exp());
    let mut fd = log_marginal_bound(prob, d.exp());
    while (b - a).abs() > 1e-12 {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = log_marginal_bound(prob, c.exp());
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = log_marginal_bound(prob, d.exp());
        }
    }
    Ok((0.5 * (a + b)).exp())
}

/// KL(p ∥ q) = ∫ p ln(p/q) over `support` by adaptive quadrature.
///
/// Requires q > 0 wherever p is materially positive; the integrand treats
/// p below 1e-300 as an exact zero.
pub fn kl_divergence_1d<P, Q>(p: P, q: Q, support: (f64, f64)) -> Result<f64>
where
    P: Fn(f64) -> f64,
    Q: Fn(f64) -> f64,
{
    let (lo, hi) = support;
    if !(hi > lo) {
        return Err(SdoError::InvalidParameter(format!(
            "empty KL support [{lo}, {hi}]"
        )));
    }
    let integrand = |x: f64| {
        let px = p(x);
        if px <= 1e-300 {
            return 0.0;
        }
        let qx = q(x);
        if qx <= 0.0 {
            return f64::NAN; // surfaces as a quadrature error
        }
        px * (px.ln() - qx.ln())
    };
    let result = if lo < 0.0 && hi > 0.0 {
        integrate(integrand, lo, 0.0, 5e-13).and_then(|l| Ok(l + integrate(integrand, 0.0, hi, 5e-13)?))
    } else {
        integrate(integrand, lo, hi, 1e-12)
    };
    result.map_err(|e| match e {
        SdoError::Quadrature(msg) => SdoError::Quadrature(format!(
            "KL integrand failed (is q > 0 wherever p > 0?): {msg}"
        )),
        other => other,
    })
}

/// Which sweep of the validation study to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StudyKind {
    /// y = 0, σ = 1, τ ∈ {0.14, 0.7, 1.9}.
    Unbiased,
    /// τ = 0.7, σ = 1, y ∈ {0, 2, 4}.
    Biased,
}

/// One row of the study: the swept parameter, the fitted width, the KL gap,
/// and both densities sampled for plotting.
#[derive(Debug, Clone)]
pub struct OneDimCase {
    pub label: String,
    pub param: f64,
    pub gamma_hat: f64,
    pub kl: f64,
    /// 1001 samples of (x, p_true(x), p_approx(x)).
    pub curve: Vec<[f64; 3]>,
}

/// Runs the three-case study for `kind`, returning per-case fits, KL values,
/// and plot curves.
pub fn run_onedim_study(kind: StudyKind) -> Result<Vec<OneDimCase>> {
    let cases: Vec<(String, f64, OneDimProblem)> = match kind {
        StudyKind::Unbiased => [0.14, 0.7, 1.9]
            .into_iter()
            .map(|tau| {
                Ok((
                    format!("tau={tau}"),
                    tau,
                    OneDimProblem::new(0.0, tau, 1.0)?,
                ))
            })
            .collect::<Result<_>>()?,
        StudyKind::Biased => [0.0, 2.0, 4.0]
            .into_iter()
            .map(|y| Ok((format!("y={y}"), y, OneDimProblem::new(y, 0.7, 1.0)?)))
            .collect::<Result<_>>()?,
    };

    cases
        .into_iter()
        .map(|(label, param, prob)| {
            let gamma_hat = fit_gamma_1d(&prob)?;
            let truth = TruePosterior::new(prob)?;
            let (mean, var) = approx_posterior_moments(&prob, gamma_hat)?;
            let qn = (2.0 * std::f64::consts::PI * var).sqrt();
            let q = move |x: f64| (-(x - mean) * (x - mean) / (2.0 * var)).exp() / qn;
            let kl = kl_divergence_1d(|x| truth.pdf(x), q, prob.support())?;
            let (lo, hi) = prob.support();
            let curve = (0..1001)
                .map(|i| {
                    let x = lo + (hi - lo) * i as f64 / 1000.0;
                    [x, truth.pdf(x), q(x)]
                })
                .collect();
            Ok(OneDimCase {
                label,
                param,
                gamma_hat,
                kl,
                curve,
            })
        })
        .collect()
}

/// Writes `onedim.csv` (`case,param,gamma_hat,kl`) plus one
/// `onedim_curve_<case>.csv` (`x,p_true,p_approx`) per case into `dir`.
pub fn write_study_csv(cases: &[OneDimCase], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut summary = String::from("case,param,gamma_hat,kl\n");
    for c in cases {
        writeln!(summary, "{},{},{},{}", c.label, c.param, c.gamma_hat, c.kl)
            .expect("string write");
    }
    std::fs::write(dir.join("onedim.csv"), summary)?;
    for c in cases {
        let safe: String = c
            .label
            .chars()
            .map(|ch| if ch.is_ascii_alphanumeric() { ch } else { '_' })
            .collect();
        let mut body = String::from("x,p_true,p_approx\n");
        for row in &c.curve {
            writeln!(body, "{},{},{}", row[0], row[1], row[2]).expect("string write");
        }
        std::fs::write(dir.join(format!("onedim_curve_{safe}.csv")), body)?;
    }
    Ok(())
}
