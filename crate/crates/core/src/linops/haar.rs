//! Orthonormal multilevel 2-D Haar wavelet transform.

use super::LinOp;
use crate::{Result, SdoError};

/// Level-`levels` orthonormal Haar analysis operator B on n×n images.
///
/// `apply_into` computes coefficients w = B f (standard Mallat layout: each
/// level splits the current low-pass quadrant into LL/LH/HL/HH);
/// `apply_adjoint_into` is the exact inverse since B is orthonormal
/// (B†B = BB† = I). The filter pair is (x₀+x₁)/√2, (x₀−x₁)/√2.
pub struct HaarTransform {
    n: usize,
    levels: usize,
}

impl HaarTransform {
    /// `n` must be divisible by 2^levels (and ≥ 2 per level of splitting).
    pub fn new(n: usize, levels: usize) -> Result<Self> {
        if levels == 0 {
            return Err(SdoError::InvalidParameter(
                "haar transform needs at least one level".into(),
            ));
        }
        if n == 0 || !n.is_multiple_of(1usize << levels) {
            return Err(SdoError::InvalidParameter(format!(
                "grid side {n} is not divisible by 2^{levels}"
            )));
        }
        Ok(Self { n, levels })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    /// One forward split of the leading `m` entries of a strided lane.
    fn split_lane(data: &mut [f64], scratch: &mut [f64], offset: usize, stride: usize, m: usize) {
        let half = m / 2;
        let s = std::f64::consts::FRAC_1_SQRT_2;
        for i in 0..half {
            let x0 = data[offset + 2 * i * stride];
            let x1 = data[offset + (2 * i + 1) * stride];
            scratch[i] = s * (x0 + x1);
            scratch[half + i] = s * (x0 - x1);
        }
        for i in 0..m {
            data[offset + i * stride] = scratch[i];
        }
    }

    /// One inverse split of the leading `m` entries of a strided lane.
    fn merge_lane(data: &mut [f64], scratch: &mut [f64], offset: usize, stride: usize, m: usize) {
        let half = m / 2;
        let s = std::f64::consts::FRAC_1_SQRT_2;
        for i in 0..half {
            let a = data[offset + i * stride];
            let d = data[offset + (half + i) * stride];
            scratch[2 * i] = s * (a + d);
            scratch[2 * i + 1] = s * (a - d);
        }
        for i in 0..m {
            data[offset + i * stride] = scratch[i];
        }
    }
}

impl LinOp for HaarTransform {
    fn domain_dim(&self) -> usize {
        self.n * self.n
    }

    fn range_dim(&self) -> usize {
        self.n * self.n
    }

    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        assert_eq!(x.len(), self.domain_dim(), "haar input length");
        assert_eq!(out.len(), self.range_dim(), "haar output length");
        out.copy_from_slice(x);
        let n = self.n;
        let mut scratch = vec![0.0; n];
        let mut m = n;
        for _ in 0..self.levels {
            for row in 0..m {
                Self::split_lane(out, &mut scratch, row * n, 1, m);
            }
            for col in 0..m {
                Self::split_lane(out, &mut scratch, col, n, m);
            }
            m /= 2;
        }
    }

    fn apply_adjoint_into(&self, y: &[f64], out: &mut [f64]) {
        assert_eq!(y.len(), self.range_dim(), "haar input length");
        assert_eq!(out.len(), self.domain_dim(), "haar output length");
        out.copy_from_slice(y);
        let n = self.n;
        let mut scratch = vec![0.0; n];
        let mut m = n >> (self.levels - 1);
        for _ in 0..self.levels {
            for col in 0..m {
                Self::merge_lane(out, &mut scratch, col, n, m);
            }
            for row in 0..m {
                Self::merge_lane(out, &mut scratch, row * n, 1, m);
            }
            m *= 2;
        }
    }
}
