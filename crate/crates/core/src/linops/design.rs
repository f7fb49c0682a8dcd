//! K-space acquisition designs: which phase-encoding lines are sampled.

use crate::{Result, SdoError};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// The four acquisition designs under comparison.
///
/// Line counts scale with the grid side n: the full scan samples all n
/// lines; the three half scans sample round(0.5625·n) lines (144 at n=256),
/// of which the hybrid designs reserve round(0.28125·n) (72 at n=256) for a
/// contiguous low-frequency block centered on DC.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DesignKind {
    /// Full scan: every phase-encoding line.
    FS,
    /// Uniform hybrid: low-frequency block + uniformly spaced remainder.
    UH,
    /// Random hybrid: low-frequency block + seeded random remainder.
    RH,
    /// Low-frequency half scan: one contiguous block around DC.
    LH,
}

impl DesignKind {
    pub fn name(self) -> &'static str {
        match self {
            DesignKind::FS => "FS",
            DesignKind::UH => "UH",
            DesignKind::RH => "RH",
            DesignKind::LH => "LH",
        }
    }
}

impl std::fmt::Display for DesignKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for DesignKind {
    type Err = SdoError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "FS" => Ok(DesignKind::FS),
            "UH" => Ok(DesignKind::UH),
            "RH" => Ok(DesignKind::RH),
            "LH" => Ok(DesignKind::LH),
            other => Err(SdoError::InvalidParameter(format!(
                "unknown design kind {other:?} (expected FS, UH, RH, or LH)"
            ))),
        }
    }
}

/// Phase-encoding line mask in DC-centered (fftshifted) line order: index
/// ⌊n/2⌋ is the DC line, index 0 the most negative frequency.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplingMask {
    line_flags: Vec<bool>,
    sampled_count: usize,
}

impl SamplingMask {
    pub fn from_flags(line_flags: Vec<bool>) -> Result<Self> {
        let sampled_count = line_flags.iter().filter(|&&f| f).count();
        if sampled_count == 0 {
            return Err(SdoError::InvalidParameter(
                "sampling mask must select at least one line".into(),
            ));
        }
        Ok(Self {
            line_flags,
            sampled_count,
        })
    }

    pub fn n(&self) -> usize {
        self.line_flags.len()
    }

    pub fn sampled_count(&self) -> usize {
        self.sampled_count
    }

    pub fn is_sampled(&self, line: usize) -> bool {
        self.line_flags[line]
    }

    pub fn flags(&self) -> &[bool] {
        &self.line_flags
    }

    /// Sampled line indices in increasing (DC-centered) order.
    pub fn sampled_lines(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.line_flags[i]).collect()
    }

    pub fn is_full(&self) -> bool {
        self.sampled_count == self.n()
    }
}

/// Number of lines in a half-scan design at grid side n.
pub fn half_scan_lines(n: usize) -> usize {
    (0.5625 * n as f64).round() as usize
}

/// Number of lines in the hybrid designs' low-frequency block at grid side n.
pub fn low_freq_block_lines(n: usize) -> usize {
    (0.28125 * n as f64).round() as usize
}

/// Builds the sampling mask for a design. `seed` only affects RH; the other
/// designs are fully determined by (kind, n).
pub fn make_design(kind: DesignKind, n: usize, seed: u64) -> Result<SamplingMask> {
    if n < 8 {
        return Err(SdoError::InvalidParameter(format!(
            "grid side {n} too small for designs (need n >= 8)"
        )));
    }
    let total = half_scan_lines(n);
    let block = low_freq_block_lines(n);
    if block < 1 || total <= block {
        return Err(SdoError::InvalidParameter(format!(
            "grid side {n} yields degenerate design counts (total {total}, block {block})"
        )));
    }
    let dc = n / 2;
    let mut flags = vec![false; n];
    match kind {
        DesignKind::FS => flags.iter_mut().for_each(|f| *f = true),
        DesignKind::LH => {
            let start = dc - total / 2;
            flags[start..start + total].iter_mut().for_each(|f| *f = true);
        }
        DesignKind::UH | DesignKind::RH => {
            let start = dc - block / 2;
            flags[start..start + block].iter_mut().for_each(|f| *f = true);
            let complement: Vec<usize> = (0..n).filter(|&i| !flags[i]).collect();
            let extra = total - block;
            match kind {
                DesignKind::UH => {
                    // Stratified midpoints spread the extra lines evenly from
                    // the most negative to the most positive leftover
                    // frequency.
                    for i in 0..extra {
                        let pos = ((i as f64 + 0.5) * complement.len() as f64 / extra as f64)
                            .floor() as usize;
                        flags[complement[pos.min(complement.len() - 1)]] = true;
                    }
                }
                DesignKind::RH => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let mut pool = complement;
                    for i in 0..extra {
                        let j = rng.random_range(i..pool.len());
                        pool.swap(i, j);
                        flags[pool[i]] = true;
                    }
                }
                _ => unreachable!(),
            }
        }
    }
    let mask = SamplingMask::from_flags(flags)?;
    debug_assert_eq!(
        mask.sampled_count(),
        match kind {
            DesignKind::FS => n,
            _ => total,
        }
    );
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_scale_counts() {
        let fs = make_design(DesignKind::FS, 256, 0).unwrap();
        assert_eq!(fs.sampled_count(), 256);

        let uh = make_design(DesignKind::UH, 256, 0).unwrap();
        assert_eq!(uh.sampled_count(), 144);
        // 72 contiguous low-frequency lines centered on DC = 128.
        let block: Vec<usize> = (92..164).collect();
        assert!(block.iter().all(|&l| uh.is_sampled(l)));

        let lh = make_design(DesignKind::LH, 256, 0).unwrap();
        assert_eq!(lh.sampled_count(), 144);
        let lines = lh.sampled_lines();
        assert_eq!(lines, (56..200).collect::<Vec<_>>());
        assert!(lh.is_sampled(128));
    }

    #[test]
    fn desk_scale_counts() {
        assert_eq!(half_scan_lines(32), 18);
        assert_eq!(low_freq_block_lines(32), 9);
        let uh = make_design(DesignKind::UH, 32, 0).unwrap();
        assert_eq!(uh.sampled_count(), 18);
        for l in 12..21 {
            assert!(uh.is_sampled(l), "low-frequency line {l} must be sampled");
        }
    }

    #[test]
    fn rh_is_seeded_and_keeps_the_block() {
        let a = make_design(DesignKind::RH, 64, 1).unwrap();
        let b = make_design(DesignKind::RH, 64, 1).unwrap();
        let c = make_design(DesignKind::RH, 64, 2).unwrap();
        assert_eq!(a, b, "same seed must reproduce the mask");
        assert_ne!(a, c, "different seeds should differ (w.h.p.)");
        let block = low_freq_block_lines(64);
        let start = 32 - block / 2;
        for l in start..start + block {
            assert!(a.is_sampled(l) && c.is_sampled(l));
        }
        assert_eq!(a.sampled_count(), c.sampled_count());
    }

    #[test]
    fn uh_remainder_is_spread_out() {
        let uh = make_design(DesignKind::UH, 256, 0).unwrap();
        let outside: Vec<usize> = uh
            .sampled_lines()
            .into_iter()
            .filter(|&l| !(92..164).contains(&l))
            .collect();
        assert_eq!(outside.len(), 72);
        // Both frequency extremes get coverage.
        assert!(outside.iter().any(|&l| l < 8));
        assert!(outside.iter().any(|&l| l >= 248));
        // Gaps between consecutive extra lines stay small on each side of the
        // low-frequency block (the jump across the block itself is expected).
        let max_gap = outside
            .windows(2)
            .filter(|w| w[1] < 92 || w[0] >= 164)
            .map(|w| w[1] - w[0])
            .max()
            .unwrap();
        assert!(max_gap <= 4, "uniform spacing should not leave gaps > 4, got {max_gap}");
    }

    #[test]
    fn rejects_degenerate_sizes() {
        assert!(make_design(DesignKind::UH, 4, 0).is_err());
        assert!("XX".parse::<DesignKind>().is_err());
        assert_eq!("UH".parse::<DesignKind>().unwrap(), DesignKind::UH);
    }
}
