//! Synthetic wavelet-sparse phantoms, the on-disk phantom format, the known
//! signal, and noisy measurement simulation.

use std::io::{Read as _, Write as _};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use super::config::{SignalShape, SignalSpec};
use crate::linops::{HaarTransform, LinOp};
use crate::{Result, SdoError};

const MAGIC: &[u8; 4] = b"SDOP";
const VERSION: u16 = 1;

/// Deterministic piecewise-smooth phantom on an n×n grid with values in
/// [0, 1]: a rotated outer ellipse, two nested interior ellipses, and
/// `detail_level` small axis-aligned texture features. The construction is
/// piecewise constant, so its multilevel Haar spectrum is dominated by a
/// boundary-proportional number of coefficients — wavelet-sparse by design.
pub fn generate_sparse_phantom(n: usize, seed: u64, detail_level: usize) -> Result<Vec<f64>> {
    if !n.is_power_of_two() || n < 8 {
        return Err(SdoError::InvalidParameter(format!(
            "phantom grid side must be a power of two ≥ 8, got {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nf = n as f64;
    let mut img = vec![0.0f64; n * n];

    // (center, semi-axes, rotation, fill) for the nested ellipses, outermost
    // first; later fills overwrite earlier ones.
    let cx = 0.5 + rng.random_range(-0.04..0.04);
    let cy = 0.5 + rng.random_range(-0.04..0.04);
    let theta = rng.random_range(-0.4..0.4f64);
    let (a0, b0) = (
        rng.random_range(0.34..0.42),
        rng.random_range(0.30..0.38),
    );
    let shells = [
        (a0, b0, rng.random_range(0.18..0.28)),
        (0.72 * a0, 0.70 * b0, rng.random_range(0.40..0.52)),
        (0.38 * a0, 0.40 * b0, rng.random_range(0.58..0.72)),
    ];
    let (sin_t, cos_t) = theta.sin_cos();
    for r in 0..n {
        for c in 0..n {
            let x = (c as f64 + 0.5) / nf - cx;
            let y = (r as f64 + 0.5) / nf - cy;
            let u = cos_t * x + sin_t * y;
            let v = -sin_t * x + cos_t * y;
            for &(sa, sb, fill) in &shells {
                if (u / sa).powi(2) + (v / sb).powi(2) <= 1.0 {
                    img[r * n + c] = fill;
                }
            }
        }
    }

    // Texture: small square blocks confined to the ellipse's bounding box so
    // they land on tissue. Sides are dyadic (2 or 4) and positions snap to
    // multiples of the side, so a block's interior carries no fine-scale Haar
    // detail at all — the spectrum stays compact.
    for _ in 0..detail_level {
        let s = if rng.random_range(0..2) == 0 { 2 } else { 4 }.min((n / 8).max(1));
        let lo_r = (((cy - 0.3) * nf) as usize) / s;
        let lo_c = (((cx - 0.3) * nf) as usize) / s;
        let span = ((0.6 * nf) as usize / s).max(1);
        let r0 = ((lo_r + rng.random_range(0..span)) * s).min(n - s);
        let c0 = ((lo_c + rng.random_range(0..span)) * s).min(n - s);
        let val = rng.random_range(0.1..0.95);
        for r in r0..r0 + s {
            for c in c0..c0 + s {
                if img[r * n + c] > 0.0 {
                    img[r * n + c] = val;
                }
            }
        }
    }

    for v in img.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(img)
}

/// Fraction of multilevel Haar coefficients with magnitude below 1% of the
/// largest — the sparsity census used to qualify phantoms.
pub fn haar_sparsity_fraction(img: &[f64], n: usize, levels: usize) -> Result<f64> {
    let b = HaarTransform::new(n, levels)?;
    if img.len() != b.domain_dim() {
        return Err(SdoError::Dimension {
            context: "sparsity census image length",
            expected: b.domain_dim(),
            got: img.len(),
        });
    }
    let w = b.apply(img);
    let max = w.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max == 0.0 {
        return Ok(1.0);
    }
    let small = w.iter().filter(|v| v.abs() < 0.01 * max).count();
    Ok(small as f64 / w.len() as f64)
}

/// Rasterizes the known signal onto an n×n grid.
pub fn signal_image(n: usize, spec: &SignalSpec) -> Vec<f64> {
    let nf = n as f64;
    let (cy, cx) = (spec.center[0] * nf, spec.center[1] * nf);
    let radius = spec.radius * nf;
    let mut img = vec![0.0f64; n * n];
    for r in 0..n {
        for c in 0..n {
            let d2 = ((r as f64 + 0.5) - cy).powi(2) + ((c as f64 + 0.5) - cx).powi(2);
            img[r * n + c] = match spec.shape {
                SignalShape::Disk => {
                    if d2 <= radius * radius {
                        spec.contrast
                    } else {
                        0.0
                    }
                }
                SignalShape::Blob => spec.contrast * (-0.5 * d2 / (radius * radius)).exp(),
            };
        }
    }
    img
}

/// Simulates g = Hf + n where every stacked-real component is i.i.d.
/// N(0, σ²/2) — σ being the *complex* noise standard deviation. σ = 0
/// returns Hf exactly. Deterministic per seed.
pub fn simulate_measurement(f: &[f64], h: &dyn LinOp, sigma: f64, seed: u64) -> Result<Vec<f64>> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(SdoError::InvalidParameter(format!(
            "noise sigma must be ≥ 0 and finite, got {sigma}"
        )));
    }
    if f.len() != h.domain_dim() {
        return Err(SdoError::Dimension {
            context: "simulate_measurement object length",
            expected: h.domain_dim(),
            got: f.len(),
        });
    }
    let mut g = h.apply(f);
    if sigma > 0.0 {
        let per_component = sigma / std::f64::consts::SQRT_2;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in g.iter_mut() {
            *v += per_component * rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
    }
    Ok(g)
}

/// Writes an image as a PhantomFile: magic "SDOP", version u16, rows u32,
/// cols u32, then row-major little-endian f64 values.
pub fn write_phantom(path: &Path, rows: usize, cols: usize, data: &[f64]) -> Result<()> {
    if rows * cols != data.len() {
        return Err(SdoError::Dimension {
            context: "write_phantom payload",
            expected: rows * cols,
            got: data.len(),
        });
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(SdoError::NonFinite("phantom payload".into()));
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(rows as u32).to_le_bytes())?;
    out.write_all(&(cols as u32).to_le_bytes())?;
    for v in data {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Reads a PhantomFile, returning (rows, cols, row-major values). Rejects a
/// wrong magic, an unknown version, truncated payloads (naming the expected
/// byte count), and non-finite values.
pub fn read_phantom(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut header = [0u8; 14];
    file.read_exact(&mut header)
        .map_err(|_| SdoError::Format(format!("{}: shorter than the 14-byte header", path.display())))?;
    if &header[..4] != MAGIC {
        return Err(SdoError::Format(format!(
            "{}: bad magic {:?} (expected \"SDOP\")",
            path.display(),
            &header[..4]
        )));
    }
    let version = u16::from_le_bytes([header[4], header[5]]);
    if version != VERSION {
        return Err(SdoError::Format(format!(
            "{}: unsupported version {version} (expected {VERSION})",
            path.display()
        )));
    }
    let rows = u32::from_le_bytes(header[6..10].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(header[10..14].try_into().unwrap()) as usize;
    let expected = rows
        .checked_mul(cols)
        .and_then(|c| c.checked_mul(8))
        .ok_or_else(|| SdoError::Format(format!("{}: header overflows", path.display())))?;
    let mut payload = Vec::new();
    file.read_to_end(&mut payload)?;
    if payload.len() != expected {
        return Err(SdoError::Format(format!(
            "{}: payload is {} bytes, expected {expected} ({rows}×{cols} doubles)",
            path.display(),
            payload.len()
        )));
    }
    let data: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(SdoError::Format(format!(
            "{}: payload contains non-finite values",
            path.display()
        )));
    }
    Ok((rows, cols, data))
}
