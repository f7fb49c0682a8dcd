//! Sparsity-driven observer (SDO) toolkit.
//!
//! This crate implements a signal-detection pipeline for comparing k-space
//! data-acquisition designs in simulated MRI:
//!
//! * matrix-free linear operators — an undersampled Fourier forward model and
//!   an orthonormal multilevel Haar transform ([`linops`]);
//! * an i.i.d. Laplacian prior on transform coefficients together with its
//!   parameterized Gaussian lower bound ([`priors`]);
//! * the double-loop variational algorithm that fits the per-coefficient
//!   bound widths γ to a given measurement ([`varinf`]);
//! * observer test statistics: the sparsity-driven observer, a Hotelling
//!   observer baseline, and small-scale brute-force oracles ([`observers`]);
//! * sparse and quadratic image reconstruction plus SSIM ([`recon`]);
//! * ROC/AUC analysis and design ranking ([`rocstat`]);
//! * a fully analytic 1-D validation study ([`onedim`]);
//! * experiment orchestration, phantoms, noise simulation, and persistence
//!   ([`harness`]).
//!
//! All measurement-domain algebra is real-valued: complex k-space samples are
//! stacked as (re, im) pairs, so a complex noise standard deviation σ becomes
//! a per-component variance of σ²/2.

// Parameter guards are written `!(x > 0.0)` rather than `x <= 0.0` so that NaN
// inputs are rejected along with non-positive ones.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod harness;
pub mod linops;
pub mod observers;
pub mod onedim;
pub mod priors;
pub mod quad;
pub mod recon;
pub mod rocstat;
pub mod varinf;

pub use error::SdoError;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, SdoError>;
