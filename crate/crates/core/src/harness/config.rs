//! Study configuration: JSON-backed, schema-checked, with defaults matching
//! the desk-scale detection study.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::linops::DesignKind;
use crate::priors::OutlierPolicy;
use crate::varinf::{DoubleLoopOptions, InnerLoopConfig};
use crate::{Result, SdoError};

/// Noise level: either a fraction of the signal's peak k-space magnitude
/// (the portable default, 0.2) or an absolute complex standard deviation
/// tied to the phantom intensity scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseSpec {
    /// σ = fraction · max_k |(H_full f_s)(k)|.
    Fraction(f64),
    /// σ given directly (complex standard deviation).
    Absolute(f64),
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec::Fraction(0.2)
    }
}

/// Shape of the known signal added under the signal-present hypothesis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalShape {
    /// Hard-edged disk of uniform contrast.
    Disk,
    /// Gaussian blob; `radius` is its standard deviation.
    Blob,
}

/// The known signal f_s: position and size are fractions of the grid side so
/// one spec scales across n.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SignalSpec {
    pub shape: SignalShape,
    /// Center as (row, col) fractions of n.
    pub center: [f64; 2],
    /// Radius as a fraction of n.
    pub radius: f64,
    /// Peak amplitude added on top of the background.
    pub contrast: f64,
}

impl Default for SignalSpec {
    fn default() -> Self {
        SignalSpec {
            shape: SignalShape::Disk,
            center: [0.5, 0.5],
            radius: 0.07,
            // With fractional noise the noise level scales with the signal
            // peak, so contrast sets the signal-to-clutter ratio. 0.1 keeps
            // desk-scale AUCs in the informative band rather than saturated.
            contrast: 0.1,
        }
    }
}

/// Iteration budgets and tolerances for the per-measurement solves.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSpec {
    /// Outer double-loop budget k₀.
    pub outer_iters: usize,
    /// Early exit once the relative γ change drops below this.
    pub early_exit_tol: Option<f64>,
    /// Inner-loop iteration cap.
    pub inner_max_iters: usize,
    /// Inner-loop relative gradient tolerance.
    pub inner_grad_tol: f64,
    /// Optional scaled off-diagonal cutoff for the marginal-variance solve.
    pub variance_threshold: Option<f64>,
    /// Hotelling covariance shrinkage ε (times tr(K)/M on the diagonal).
    pub shrinkage: f64,
}

impl Default for SolverSpec {
    fn default() -> Self {
        SolverSpec {
            outer_iters: 16,
            early_exit_tol: Some(1e-4),
            inner_max_iters: 200,
            inner_grad_tol: 1e-6,
            variance_threshold: None,
            shrinkage: 1e-6,
        }
    }
}

impl SolverSpec {
    /// The double-loop options this spec stands for.
    pub fn double_loop_options(&self) -> DoubleLoopOptions {
        DoubleLoopOptions {
            outer_iters: self.outer_iters,
            early_exit_tol: self.early_exit_tol,
            inner: InnerLoopConfig {
                max_iters: self.inner_max_iters,
                grad_tol: self.inner_grad_tol,
                ..InnerLoopConfig::default()
            },
            variance_threshold: self.variance_threshold,
            ..DoubleLoopOptions::default()
        }
    }
}

/// Knobs for the reconstruction study.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReconConfig {
    /// Ridge weight β for the quadratic estimator.
    pub beta: f64,
    /// Iteration cap for the ℓ1 solver.
    pub l1_max_iters: usize,
    /// Relative prox-gradient tolerance for the ℓ1 solver.
    pub l1_tol: f64,
}

impl Default for ReconConfig {
    fn default() -> Self {
        ReconConfig {
            beta: 1e-3,
            l1_max_iters: 600,
            l1_tol: 1e-6,
        }
    }
}

/// Top-level study configuration. Unknown JSON keys are rejected so typos
/// fail loudly instead of silently running defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    /// Grid side; must be a power of two ≥ 8.
    pub n: usize,
    /// Acquisition designs to compare, in report order.
    pub designs: Vec<DesignKind>,
    /// Number of training phantoms (τ estimation and Hotelling training).
    pub n_train: usize,
    /// Signal-present test measurements.
    pub n_pos: usize,
    /// Signal-absent test measurements.
    pub n_neg: usize,
    /// Master seed; every phantom/mask/noise stream is derived from it.
    pub seed: u64,
    #[serde(default)]
    pub noise: NoiseSpec,
    /// Fixed Laplacian scale; `None` estimates it from the training set.
    #[serde(default)]
    pub tau_override: Option<f64>,
    #[serde(default)]
    pub signal: SignalSpec,
    #[serde(default)]
    pub solver: SolverSpec,
    #[serde(default)]
    pub recon: ReconConfig,
    /// Texture features per phantom.
    #[serde(default = "default_detail_level")]
    pub detail_level: usize,
    /// Outlier policy for τ estimation.
    #[serde(default)]
    pub outlier_policy: OutlierPolicy,
    /// Artifact directory; CLI `--out` overrides.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Worker threads for the evaluation loop; `None` uses every core.
    #[serde(default)]
    pub workers: Option<usize>,
}

fn default_detail_level() -> usize {
    12
}

impl StudyConfig {
    /// A ready-to-run desk-scale configuration.
    pub fn desk_scale(seed: u64) -> Self {
        StudyConfig {
            n: 32,
            designs: vec![
                DesignKind::FS,
                DesignKind::UH,
                DesignKind::RH,
                DesignKind::LH,
            ],
            n_train: 40,
            n_pos: 25,
            n_neg: 25,
            seed,
            noise: NoiseSpec::default(),
            tau_override: None,
            signal: SignalSpec::default(),
            solver: SolverSpec::default(),
            recon: ReconConfig::default(),
            detail_level: default_detail_level(),
            outlier_policy: OutlierPolicy::default(),
            output_dir: None,
            workers: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.n.is_power_of_two() || self.n < 8 {
            return Err(SdoError::Config(format!(
                "n must be a power of two ≥ 8, got {}",
                self.n
            )));
        }
        if self.designs.is_empty() {
            return Err(SdoError::Config("designs list is empty".into()));
        }
        for (i, d) in self.designs.iter().enumerate() {
            if self.designs[..i].contains(d) {
                return Err(SdoError::Config(format!(
                    "design {} listed twice; artifacts are keyed by design name",
                    d.name()
                )));
            }
        }
        if self.n_pos < 1 || self.n_neg < 1 {
            return Err(SdoError::Config(format!(
                "need at least one test measurement per class (n_pos {}, n_neg {})",
                self.n_pos, self.n_neg
            )));
        }
        if self.n_train < 2 {
            return Err(SdoError::Config(format!(
                "n_train must be ≥ 2 (Hotelling training needs a covariance), got {}",
                self.n_train
            )));
        }
        match self.noise {
            NoiseSpec::Fraction(f) if !(f >= 0.0) || !f.is_finite() => {
                return Err(SdoError::Config(format!("noise fraction must be ≥ 0, got {f}")));
            }
            NoiseSpec::Absolute(s) if !(s >= 0.0) || !s.is_finite() => {
                return Err(SdoError::Config(format!("noise sigma must be ≥ 0, got {s}")));
            }
            _ => {}
        }
        if let Some(t) = self.tau_override {
            if !(t > 0.0) || !t.is_finite() {
                return Err(SdoError::Config(format!("tau_override must be > 0, got {t}")));
            }
        }
        if !(self.signal.radius > 0.0 && self.signal.radius < 0.5) {
            return Err(SdoError::Config(format!(
                "signal radius must lie in (0, 0.5) as a fraction of n, got {}",
                self.signal.radius
            )));
        }
        if !self.signal.contrast.is_finite() || self.signal.contrast == 0.0 {
            return Err(SdoError::Config(format!(
                "signal contrast must be finite and nonzero, got {}",
                self.signal.contrast
            )));
        }
        for c in self.signal.center {
            if !(0.0..=1.0).contains(&c) {
                return Err(SdoError::Config(format!(
                    "signal center components must lie in [0, 1], got {c}"
                )));
            }
        }
        if self.solver.outer_iters == 0 || self.solver.inner_max_iters == 0 {
            return Err(SdoError::Config(
                "solver iteration budgets must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Number of Haar levels used throughout the study (level 4 where the
    /// grid allows it).
    pub fn haar_levels(&self) -> usize {
        let max = self.n.trailing_zeros() as usize;
        4.min(max).max(1)
    }
}

/// Loads and validates a JSON config.
pub fn load_config(path: &Path) -> Result<StudyConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| SdoError::Config(format!("cannot read {}: {e}", path.display())))?;
    let cfg: StudyConfig = serde_json::from_str(&text)
        .map_err(|e| SdoError::Config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}
