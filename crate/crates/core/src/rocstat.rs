//! ROC analysis: empirical (Mann–Whitney) and moment plug-in binormal AUC,
//! Hanley–McNeil confidence intervals, 101-point ROC curves, and design
//! rank-ordering with separation flags.
//!
//! The binormal fit is a plug-in on sample moments rather than a full
//! maximum-likelihood curve fit; the empirical AUC is always reported
//! alongside so discrepancies between the two stay visible.

use std::io::Write as _;
use std::path::Path;

use statrs::distribution::{ContinuousCDF, Normal};

use crate::{Result, SdoError};

/// Observer scores split by ground-truth hypothesis.
#[derive(Debug, Clone)]
pub struct ScoreSet {
    positives: Vec<f64>,
    negatives: Vec<f64>,
}

impl ScoreSet {
    /// Both classes must be non-empty and every score finite.
    pub fn new(positives: Vec<f64>, negatives: Vec<f64>) -> Result<Self> {
        if positives.is_empty() || negatives.is_empty() {
            return Err(SdoError::InvalidParameter(format!(
                "score set needs both classes non-empty (got {} positive, {} negative)",
                positives.len(),
                negatives.len()
            )));
        }
        if positives
            .iter()
            .chain(&negatives)
            .any(|v| !v.is_finite())
        {
            return Err(SdoError::InvalidParameter(
                "score set contains a non-finite score".into(),
            ));
        }
        Ok(Self {
            positives,
            negatives,
        })
    }

    pub fn positives(&self) -> &[f64] {
        &self.positives
    }

    pub fn negatives(&self) -> &[f64] {
        &self.negatives
    }
}

/// Mann–Whitney AUC with its Hanley–McNeil 95% interval.
#[derive(Debug, Clone, Copy)]
pub struct AucEstimate {
    pub auc: f64,
    /// Hanley–McNeil standard error.
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl AucEstimate {
    pub fn ci_half_width(&self) -> f64 {
        0.5 * (self.ci_high - self.ci_low)
    }
}

/// Empirical AUC: the fraction of (positive, negative) pairs the positive
/// score wins, ties counting one half. Computed rank-based in
/// O((m+n)·log(m+n)) with midranks, which is exactly pair counting.
pub fn empirical_auc(s: &ScoreSet) -> Result<AucEstimate> {
    let np = s.positives.len();
    let nn = s.negatives.len();
    let mut pooled: Vec<(f64, bool)> = s
        .positives
        .iter()
        .map(|&v| (v, true))
        .chain(s.negatives.iter().map(|&v| (v, false)))
        .collect();
    pooled.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite scores"));

    // Midranks: equal scores share the average of their 1-based positions.
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i;
        while j + 1 < pooled.len() && pooled[j + 1].0 == pooled[i].0 {
            j += 1;
        }
        let midrank = 0.5 * ((i + 1) + (j + 1)) as f64;
        for item in &pooled[i..=j] {
            if item.1 {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let auc = (rank_sum_pos - 0.5 * (np * (np + 1)) as f64) / (np as f64 * nn as f64);

    // Hanley–McNeil (1982) standard error.
    let a = auc;
    let q1 = a / (2.0 - a);
    let q2 = 2.0 * a * a / (1.0 + a);
    let var = (a * (1.0 - a)
        + (np as f64 - 1.0) * (q1 - a * a)
        + (nn as f64 - 1.0) * (q2 - a * a))
        / (np as f64 * nn as f64);
    let se = var.max(0.0).sqrt();
    Ok(AucEstimate {
        auc,
        se,
        ci_low: (auc - 1.96 * se).max(0.0),
        ci_high: (auc + 1.96 * se).min(1.0),
    })
}

/// Plug-in binormal parameters: a = (μ_P − μ_N)/σ_P, b = σ_N/σ_P, and the
/// implied AUC = Φ(a/√(1+b²)).
#[derive(Debug, Clone, Copy)]
pub struct BinormalFit {
    pub a: f64,
    pub b: f64,
    pub auc: f64,
}

fn mean_std(scores: &[f64]) -> (f64, f64) {
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let var = scores.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Fits the binormal model from sample moments. Needs at least two scores
/// per class and nonzero variance in both.
pub fn binormal_fit(s: &ScoreSet) -> Result<BinormalFit> {
    if s.positives.len() < 2 || s.negatives.len() < 2 {
        return Err(SdoError::InvalidParameter(format!(
            "binormal fit needs ≥ 2 scores per class (got {} positive, {} negative)",
            s.positives.len(),
            s.negatives.len()
        )));
    }
    let (mu_p, sd_p) = mean_std(&s.positives);
    let (mu_n, sd_n) = mean_std(&s.negatives);
    if sd_p <= 0.0 || sd_n <= 0.0 {
        return Err(SdoError::DegenerateData(
            "binormal fit: zero variance in a score class".into(),
        ));
    }
    let a = (mu_p - mu_n) / sd_p;
    let b = sd_n / sd_p;
    let std_normal = Normal::standard();
    let auc = std_normal.cdf(a / (1.0 + b * b).sqrt());
    Ok(BinormalFit { a, b, auc })
}

/// One ROC sample: empirical and binormal true-positive fractions at a
/// common false-positive fraction.
#[derive(Debug, Clone, Copy)]
pub struct RocPoint {
    pub fpf: f64,
    pub tpf_empirical: f64,
    pub tpf_binormal: f64,
}

/// ROC curve sampled at FPF = 0.00, 0.01, …, 1.00.
#[derive(Debug, Clone)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
}

/// Builds the 101-point curve: the empirical staircase evaluated from the
/// threshold sweep (TPF at the largest achievable FPF ≤ the grid value) and
/// the binormal curve TPF = Φ(a + b·Φ⁻¹(FPF)).
pub fn roc_curve(s: &ScoreSet, fit: &BinormalFit) -> Result<RocCurve> {
    // Threshold sweep over pooled distinct scores, descending: operating
    // points (FPF, TPF) for the rule "call positive when score ≥ t".
    let mut thresholds: Vec<f64> = s
        .positives
        .iter()
        .chain(&s.negatives)
        .copied()
        .collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).expect("finite scores"));
    thresholds.dedup();
    let np = s.positives.len() as f64;
    let nn = s.negatives.len() as f64;
    let mut staircase = vec![(0.0f64, 0.0f64)];
    for t in thresholds {
        let tpf = s.positives.iter().filter(|&&v| v >= t).count() as f64 / np;
        let fpf = s.negatives.iter().filter(|&&v| v >= t).count() as f64 / nn;
        staircase.push((fpf, tpf));
    }
    staircase.push((1.0, 1.0));

    let std_normal = Normal::standard();
    let points = (0..=100)
        .map(|i| {
            let fpf = i as f64 / 100.0;
            let tpf_empirical = staircase
                .iter()
                .filter(|(f, _)| *f <= fpf + 1e-12)
                .map(|(_, t)| *t)
                .fold(0.0, f64::max);
            let tpf_binormal = if i == 0 {
                0.0
            } else if i == 100 {
                1.0
            } else {
                std_normal.cdf(fit.a + fit.b * std_normal.inverse_cdf(fpf))
            };
            RocPoint {
                fpf,
                tpf_empirical,
                tpf_binormal,
            }
        })
        .collect();
    Ok(RocCurve { points })
}

/// Writes a curve as CSV with header `fpf,tpf_empirical,tpf_binormal`.
pub fn write_roc_csv(curve: &RocCurve, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "fpf,tpf_empirical,tpf_binormal")?;
    for p in &curve.points {
        writeln!(out, "{:.2},{:.6},{:.6}", p.fpf, p.tpf_empirical, p.tpf_binormal)?;
    }
    Ok(())
}

/// Per-design AUC summary feeding the ranking.
#[derive(Debug, Clone)]
pub struct DesignSummary {
    pub name: String,
    pub empirical: AucEstimate,
    pub binormal: BinormalFit,
}

/// Designs sorted by empirical AUC (descending, names breaking ties), plus
/// the pairs whose 95% intervals overlap and are therefore not separated.
#[derive(Debug, Clone)]
pub struct RankReport {
    pub entries: Vec<DesignSummary>,
    /// Name pairs (higher-ranked first) with overlapping intervals.
    pub not_separated: Vec<(String, String)>,
}

impl RankReport {
    pub fn order(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.name.as_str()).collect()
    }
}

/// Deterministic ranking: descending empirical AUC, lexicographic names on
/// ties; every pair with overlapping confidence intervals is flagged.
pub fn rank_designs(mut designs: Vec<DesignSummary>) -> Result<RankReport> {
    if designs.is_empty() {
        return Err(SdoError::InvalidParameter(
            "rank_designs needs at least one design".into(),
        ));
    }
    designs.sort_by(|x, y| {
        y.empirical
            .auc
            .partial_cmp(&x.empirical.auc)
            .expect("finite AUCs")
            .then_with(|| x.name.cmp(&y.name))
    });
    let mut not_separated = Vec::new();
    for i in 0..designs.len() {
        for j in i + 1..designs.len() {
            let (hi, lo) = (&designs[i].empirical, &designs[j].empirical);
            if hi.ci_low <= lo.ci_high && lo.ci_low <= hi.ci_high {
                not_separated.push((designs[i].name.clone(), designs[j].name.clone()));
            }
        }
    }
    Ok(RankReport {
        entries: designs,
        not_separated,
    })
}
