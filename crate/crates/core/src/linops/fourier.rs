//! The MRI forward model: unitary 2-D DFT followed by phase-encoding-line
//! selection, with complex outputs stacked as real pairs.

use super::{design::SamplingMask, LinOp};
use crate::{Result, SdoError};
use rustfft::{num_complex::Complex, Fft, FftPlanner};
use std::sync::Arc;

/// H: R^(n²) → R^(2·n·m), where m lines of k-space are sampled.
///
/// The 2-D DFT is unitary (scale 1/n overall), so with a full mask H is an
/// isometry and H†H = I. Sampled lines are rows of k-space in DC-centered
/// order (the mask's convention); each line contributes n complex samples
/// serialized as (re, im) pairs, column-major within the line.
///
/// The adjoint embeds measurement pairs back at their k-space positions,
/// applies the inverse unitary DFT, and keeps the real part — the adjoint of
/// the real-to-stacked-real composite.
pub struct MriOperator {
    n: usize,
    mask: SamplingMask,
    /// Unshifted row index of each sampled line, in ascending shifted order.
    rows_unshifted: Vec<usize>,
    fft_fwd: Arc<dyn Fft<f64>>,
    fft_inv: Arc<dyn Fft<f64>>,
}

/// Builds the forward model for a sampling mask on an n×n grid.
pub fn make_mri_operator(mask: SamplingMask, n: usize) -> Result<MriOperator> {
    if !n.is_power_of_two() || n < 2 {
        return Err(SdoError::InvalidParameter(format!(
            "grid side must be a power of two >= 2, got {n}"
        )));
    }
    if mask.n() != n {
        return Err(SdoError::Dimension {
            context: "make_mri_operator mask length",
            expected: n,
            got: mask.n(),
        });
    }
    let mut planner = FftPlanner::new();
    let rows_unshifted = mask
        .sampled_lines()
        .into_iter()
        .map(|s| (s + n / 2) % n)
        .collect();
    Ok(MriOperator {
        n,
        mask,
        rows_unshifted,
        fft_fwd: planner.plan_fft_forward(n),
        fft_inv: planner.plan_fft_inverse(n),
    })
}

impl MriOperator {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn mask(&self) -> &SamplingMask {
        &self.mask
    }

    /// Number of sampled complex k-space values (= range_dim / 2).
    pub fn complex_dim(&self) -> usize {
        self.n * self.mask.sampled_count()
    }

    /// In-place unitary 2-D transform of a row-major n×n complex grid.
    fn fft2(&self, grid: &mut [Complex<f64>], inverse: bool) {
        let n = self.n;
        let fft = if inverse { &self.fft_inv } else { &self.fft_fwd };
        // All rows in one pass (rustfft processes the buffer in chunks of n).
        fft.process(grid);
        // Columns via transpose, batch transform, transpose back.
        let mut t = vec![Complex::new(0.0, 0.0); n * n];
        for r in 0..n {
            for c in 0..n {
                t[c * n + r] = grid[r * n + c];
            }
        }
        fft.process(&mut t);
        let scale = 1.0 / n as f64;
        for r in 0..n {
            for c in 0..n {
                grid[r * n + c] = t[c * n + r] * scale;
            }
        }
    }
}

impl LinOp for MriOperator {
    fn domain_dim(&self) -> usize {
        self.n * self.n
    }

    fn range_dim(&self) -> usize {
        2 * self.complex_dim()
    }

    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        assert_eq!(x.len(), self.domain_dim(), "mri operator input length");
        assert_eq!(out.len(), self.range_dim(), "mri operator output length");
        let n = self.n;
        let mut grid: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
        self.fft2(&mut grid, false);
        for (k, &u) in self.rows_unshifted.iter().enumerate() {
            for c in 0..n {
                let z = grid[u * n + c];
                out[2 * (k * n + c)] = z.re;
                out[2 * (k * n + c) + 1] = z.im;
            }
        }
    }

    fn apply_adjoint_into(&self, y: &[f64], out: &mut [f64]) {
        assert_eq!(y.len(), self.range_dim(), "mri adjoint input length");
        assert_eq!(out.len(), self.domain_dim(), "mri adjoint output length");
        let n = self.n;
        let mut grid = vec![Complex::new(0.0, 0.0); n * n];
        for (k, &u) in self.rows_unshifted.iter().enumerate() {
            for c in 0..n {
                grid[u * n + c] = Complex::new(y[2 * (k * n + c)], y[2 * (k * n + c) + 1]);
            }
        }
        self.fft2(&mut grid, true);
        for (o, z) in out.iter_mut().zip(&grid) {
            *o = z.re;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linops::{dot, make_design, norm2, DesignKind};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_vec(len: usize, rng: &mut impl Rng) -> Vec<f64> {
        (0..len).map(|_| rng.random::<f64>() - 0.5).collect()
    }

    #[test]
    fn full_mask_is_an_isometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 8;
        let mask = make_design(DesignKind::FS, n, 0).unwrap();
        let h = make_mri_operator(mask, n).unwrap();
        let f = random_vec(n * n, &mut rng);
        let g = h.apply(&f);
        assert!((norm2(&g) - norm2(&f)).abs() < 1e-12);
        let back = h.apply_adjoint(&g);
        for i in 0..f.len() {
            assert!((back[i] - f[i]).abs() < 1e-10, "H†H should be identity");
        }
    }

    #[test]
    fn adjoint_identity_on_random_probes() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 8;
        for kind in [DesignKind::UH, DesignKind::RH, DesignKind::LH] {
            let h = make_mri_operator(make_design(kind, n, 3).unwrap(), n).unwrap();
            for _ in 0..25 {
                let x = random_vec(h.domain_dim(), &mut rng);
                let y = random_vec(h.range_dim(), &mut rng);
                let lhs = dot(&h.apply(&x), &y);
                let rhs = dot(&x, &h.apply_adjoint(&y));
                assert!(
                    (lhs - rhs).abs() <= 1e-10 * norm2(&x) * norm2(&y),
                    "{kind}: <Hx,y>={lhs} vs <x,H'y>={rhs}"
                );
            }
        }
    }

    #[test]
    fn constant_image_energy_sits_on_the_dc_line() {
        let n = 16;
        let f = vec![0.75; n * n];

        // LH contains DC: all the energy is captured.
        let lh = make_mri_operator(make_design(DesignKind::LH, n, 0).unwrap(), n).unwrap();
        let g = lh.apply(&f);
        assert!((dot(&g, &g) - dot(&f, &f)).abs() < 1e-10);

        // A mask that excludes the DC line sees nothing.
        let mut flags = vec![false; n];
        flags[0] = true; // most negative frequency, far from DC at n/2
        flags[1] = true;
        let no_dc = make_mri_operator(SamplingMask::from_flags(flags).unwrap(), n).unwrap();
        let g0 = no_dc.apply(&f);
        assert!(norm2(&g0) < 1e-12);
    }

    #[test]
    fn dc_sample_value_of_a_constant_image() {
        // Unitary DFT of a constant c is c·n at the DC bin, zero elsewhere.
        let n = 8;
        let c = 0.5;
        let f = vec![c; n * n];
        let h = make_mri_operator(make_design(DesignKind::FS, n, 0).unwrap(), n).unwrap();
        let g = h.apply(&f);
        // DC line sits at shifted index n/2; within the line, DC column is
        // column 0 of the unshifted grid.
        let line_pos = n / 2; // sampled lines are all lines, shifted order
        let idx = 2 * (line_pos * n); // column 0 within the DC line
        assert!((g[idx] - c * n as f64).abs() < 1e-12);
        assert!(g[idx + 1].abs() < 1e-12);
        let total: f64 = g.iter().map(|v| v * v).sum();
        assert!((total - (c * n as f64).powi(2)) < 1e-10);
    }

    #[test]
    fn rejects_bad_geometry() {
        let mask = make_design(DesignKind::FS, 16, 0).unwrap();
        assert!(make_mri_operator(mask.clone(), 12).is_err());
        assert!(make_mri_operator(mask, 32).is_err());
    }
}
