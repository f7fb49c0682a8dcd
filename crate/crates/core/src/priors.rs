//! The i.i.d. Laplacian prior on transform coefficients, estimation of its
//! scale τ from training images, and the parameterized Gaussian lower bound
//! that the variational machinery optimizes.

use crate::linops::LinOp;
use crate::{Result, SdoError};
use serde::{Deserialize, Serialize};

/// Lower clamp applied wherever a bound width γ is consumed. The outer-loop
/// update γ_i = τ⁻¹√(z_i + w_i²) can drive γ_i toward zero for coefficients
/// pinned at the origin; the floor keeps Γ⁻¹ finite.
pub const GAMMA_FLOOR: f64 = 1e-10;

/// i.i.d. Laplacian prior p(w) ∝ ∏ exp(−τ|w_i|) on Q coefficients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaplacianPrior {
    pub tau: f64,
    pub q: usize,
}

impl LaplacianPrior {
    pub fn new(tau: f64, q: usize) -> Result<Self> {
        if !(tau > 0.0) {
            return Err(SdoError::InvalidParameter(format!(
                "laplacian scale must be positive, got {tau}"
            )));
        }
        Ok(Self { tau, q })
    }
}

/// Per-coefficient widths γ of the Gaussian lower bound; always ≥
/// [`GAMMA_FLOOR`] by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBoundParams {
    gamma: Vec<f64>,
}

impl GaussianBoundParams {
    /// Clamps every width to the floor; rejects non-finite entries.
    pub fn new(gamma: Vec<f64>) -> Result<Self> {
        if gamma.iter().any(|g| !g.is_finite()) {
            return Err(SdoError::NonFinite("gaussian bound widths".into()));
        }
        let gamma = gamma.into_iter().map(|g| g.max(GAMMA_FLOOR)).collect();
        Ok(Self { gamma })
    }

    /// Constant widths (used for initialization and limit checks).
    pub fn constant(value: f64, q: usize) -> Result<Self> {
        Self::new(vec![value; q])
    }

    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }

    pub fn len(&self) -> usize {
        self.gamma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gamma.is_empty()
    }
}

/// How to exclude outlier coefficients before estimating τ.
///
/// The estimator τ = √(2/var(w)) is moment-based, so a handful of huge
/// coefficients (image mean, strong edges) would otherwise dominate var(w).
/// Note that any truncation biases the estimate slightly upward even on
/// clean Laplacian data; tests that check unbiasedness use `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum OutlierPolicy {
    /// Use every pooled coefficient.
    None,
    /// Drop coefficients whose magnitude exceeds this pooled-|w| quantile
    /// (0 < q < 1). The study default is 0.999.
    Percentile(f64),
    /// Drop coefficients with |w| above an absolute magnitude.
    Magnitude(f64),
}

impl Default for OutlierPolicy {
    fn default() -> Self {
        OutlierPolicy::Percentile(0.999)
    }
}

/// Estimates the Laplacian scale from training images: pools the transform
/// coefficients w = Bf of every image, drops outliers per `policy`, and
/// returns τ = √(2 / var(w)) with var the population variance E[w²] − E[w]².
pub fn estimate_tau(
    training_images: &[Vec<f64>],
    b: &dyn LinOp,
    policy: OutlierPolicy,
) -> Result<f64> {
    if training_images.is_empty() {
        return Err(SdoError::DegenerateData(
            "tau estimation needs at least one training image".into(),
        ));
    }
    let mut pooled = Vec::with_capacity(training_images.len() * b.range_dim());
    for (idx, f) in training_images.iter().enumerate() {
        if f.len() != b.domain_dim() {
            return Err(SdoError::Dimension {
                context: "estimate_tau training image",
                expected: b.domain_dim(),
                got: f.len(),
            });
        }
        let w = b.apply(f);
        if w.iter().any(|v| !v.is_finite()) {
            return Err(SdoError::NonFinite(format!(
                "transform coefficients of training image {idx}"
            )));
        }
        pooled.extend(w);
    }

    let kept: Vec<f64> = match policy {
        OutlierPolicy::None => pooled,
        OutlierPolicy::Magnitude(t) => {
            if !(t > 0.0) {
                return Err(SdoError::InvalidParameter(format!(
                    "outlier magnitude threshold must be positive, got {t}"
                )));
            }
            pooled.into_iter().filter(|w| w.abs() <= t).collect()
        }
        OutlierPolicy::Percentile(q) => {
            if !(0.0 < q && q < 1.0) {
                return Err(SdoError::InvalidParameter(format!(
                    "outlier percentile must lie in (0,1), got {q}"
                )));
            }
            let mut mags: Vec<f64> = pooled.iter().map(|w| w.abs()).collect();
            mags.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
            // Type-1 empirical quantile (smallest magnitude whose CDF ≥ q):
            // exactly invariant under duplicating the pooled sample.
            let pos = (mags.len() as f64 * q).ceil() as usize;
            let cutoff = mags[pos.clamp(1, mags.len()) - 1];
            pooled.into_iter().filter(|w| w.abs() <= cutoff).collect()
        }
    };
    if kept.is_empty() {
        return Err(SdoError::DegenerateData(
            "all coefficients removed by the outlier policy".into(),
        ));
    }
    let n = kept.len() as f64;
    let mean = kept.iter().sum::<f64>() / n;
    let var = kept.iter().map(|w| (w - mean) * (w - mean)).sum::<f64>() / n;
    if var <= 0.0 {
        return Err(SdoError::DegenerateData(format!(
            "pooled coefficient variance is {var}; cannot estimate a Laplacian scale"
        )));
    }
    Ok((2.0 / var).sqrt())
}

/// Log-density of the Laplacian prior at w (exact, including the τ/2
/// normalizer): Σ_i [ln(τ/2) − τ|w_i|].
pub fn laplacian_log_density(w: &[f64], tau: f64) -> f64 {
    let log_norm = (tau / 2.0).ln();
    w.iter().map(|wi| log_norm - tau * wi.abs()).sum()
}

/// Log of the parameterized Gaussian lower bound at w:
/// Σ_i [ln(τ/2) − τ²γ_i/2 − w_i²/(2γ_i)].
///
/// For every admissible γ this is ≤ [`laplacian_log_density`], with equality
/// iff γ_i = |w_i|/τ for all i (AM–GM on τ²γ/2 + w²/(2γ)).
pub fn gaussian_bound_log_density(
    w: &[f64],
    gamma: &GaussianBoundParams,
    tau: f64,
) -> Result<f64> {
    if w.len() != gamma.len() {
        return Err(SdoError::Dimension {
            context: "gaussian_bound_log_density",
            expected: gamma.len(),
            got: w.len(),
        });
    }
    if !(tau > 0.0) {
        return Err(SdoError::InvalidParameter(format!(
            "laplacian scale must be positive, got {tau}"
        )));
    }
    let log_norm = (tau / 2.0).ln();
    let mut acc = 0.0;
    for (wi, gi) in w.iter().zip(gamma.gamma()) {
        acc += log_norm - tau * tau * gi / 2.0 - wi * wi / (2.0 * gi);
    }
    Ok(acc)
}
