//! The detection-ranking and reconstruction studies: deterministic
//! end-to-end orchestration from a [`StudyConfig`] to scores, ROC curves,
//! rankings, reconstructions, and JSON/CSV artifacts.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::config::{NoiseSpec, StudyConfig};
use super::phantom::{generate_sparse_phantom, signal_image, simulate_measurement, write_phantom};
use crate::linops::{make_design, make_mri_operator, DesignKind, HaarTransform, LinOp};
use crate::observers::{hotelling_log_stat, sdo_log_lr_with, train_hotelling};
use crate::priors::{estimate_tau, GaussianBoundParams};
use crate::recon::{pls_l1, pls_l1_approx, pls_l2, ssim, zero_fill};
use crate::rocstat::{
    binormal_fit, empirical_auc, rank_designs, roc_curve, write_roc_csv, AucEstimate,
    BinormalFit, DesignSummary, RankReport, ScoreSet,
};
use crate::varinf::{double_loop_full, MarginalVarianceSolver};
use crate::{Result, SdoError};

/// Derives an independent stream seed from the master seed and a label
/// path. Work items get their randomness by name, so neither evaluation
/// order nor worker count can change any result.
pub fn derive_seed(master: u64, parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    for p in parts {
        h.update([0u8]);
        h.update(p.as_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// One observer score with its provenance, as serialized to scores.csv.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub design: String,
    pub observer: String,
    /// True under the signal-present hypothesis.
    pub positive: bool,
    pub score: f64,
}

/// Writes the score table: header `design,observer,hypothesis,score`.
pub fn write_scores_csv(path: &Path, rows: &[ScoreRow]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "design,observer,hypothesis,score")?;
    for r in rows {
        let hyp = if r.positive { "present" } else { "absent" };
        writeln!(out, "{},{},{},{}", r.design, r.observer, hyp, r.score)?;
    }
    Ok(())
}

/// Parses a scores.csv back into rows (inverse of [`write_scores_csv`]).
pub fn read_scores_csv(path: &Path) -> Result<Vec<ScoreRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some("design,observer,hypothesis,score") => {}
        other => {
            return Err(SdoError::Format(format!(
                "{}: expected header design,observer,hypothesis,score, got {other:?}",
                path.display()
            )));
        }
    }
    let mut rows = Vec::new();
    for (idx, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(SdoError::Format(format!(
                "{} line {}: expected 4 fields, got {}",
                path.display(),
                idx + 2,
                fields.len()
            )));
        }
        let positive = match fields[2] {
            "present" => true,
            "absent" => false,
            other => {
                return Err(SdoError::Format(format!(
                    "{} line {}: hypothesis must be present/absent, got {other:?}",
                    path.display(),
                    idx + 2
                )));
            }
        };
        let score: f64 = fields[3].parse().map_err(|e| {
            SdoError::Format(format!("{} line {}: bad score: {e}", path.display(), idx + 2))
        })?;
        rows.push(ScoreRow {
            design: fields[0].to_string(),
            observer: fields[1].to_string(),
            positive,
            score,
        });
    }
    Ok(rows)
}

/// Fitted widths cached on disk, keyed by a content hash of the measurement
/// and every solver input that affects the result.
struct GammaCache {
    dir: PathBuf,
}

impl GammaCache {
    fn new(dir: PathBuf) -> Result<Self> {
        std::fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    fn key(cfg: &StudyConfig, design: &str, tau: f64, sigma: f64, g: &[f64]) -> String {
        let mut h = Sha256::new();
        h.update(b"gamma-v1");
        h.update(design.as_bytes());
        h.update((cfg.n as u64).to_le_bytes());
        h.update(tau.to_le_bytes());
        h.update(sigma.to_le_bytes());
        h.update((cfg.solver.outer_iters as u64).to_le_bytes());
        h.update(cfg.solver.early_exit_tol.unwrap_or(-1.0).to_le_bytes());
        h.update((cfg.solver.inner_max_iters as u64).to_le_bytes());
        h.update(cfg.solver.inner_grad_tol.to_le_bytes());
        h.update(cfg.solver.variance_threshold.unwrap_or(-1.0).to_le_bytes());
        for v in g {
            h.update(v.to_le_bytes());
        }
        let digest = h.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    fn load(&self, key: &str, q: usize) -> Option<GaussianBoundParams> {
        let bytes = std::fs::read(self.dir.join(key)).ok()?;
        if bytes.len() != q * 8 {
            return None;
        }
        let gamma: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        GaussianBoundParams::new(gamma).ok()
    }

    fn store(&self, key: &str, gamma: &GaussianBoundParams) {
        let tmp = self.dir.join(format!("{key}.tmp"));
        let path = self.dir.join(key);
        let mut bytes = Vec::with_capacity(gamma.len() * 8);
        for v in gamma.gamma() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        // Best-effort: a cache miss later just recomputes.
        if std::fs::write(&tmp, &bytes).is_ok() {
            let _ = std::fs::rename(&tmp, &path);
        }
    }
}

/// Per-design, per-observer AUC block of the summary.
#[derive(Debug, Clone, Serialize)]
pub struct ObserverSummary {
    pub auc_empirical: f64,
    pub auc_binormal: f64,
    /// 95% interval on the empirical AUC.
    pub ci: [f64; 2],
    pub n_pos: usize,
    pub n_neg: usize,
}

#[derive(Serialize)]
struct SummaryJson<'a> {
    n: usize,
    seed: u64,
    designs: Vec<String>,
    tau: f64,
    /// Complex noise standard deviation actually used.
    sigma: f64,
    /// Per-real-component standard deviation σ/√2.
    sigma_component: f64,
    results: &'a BTreeMap<String, BTreeMap<String, ObserverSummary>>,
    ordering: BTreeMap<String, Vec<String>>,
    not_separated: BTreeMap<String, Vec<(String, String)>>,
    failures: &'a Vec<(String, String)>,
}

/// Everything the ranking study produces, besides the on-disk artifacts.
#[derive(Debug)]
pub struct RankingOutput {
    /// Ranking under the sparsity-driven observer.
    pub sdo: RankReport,
    /// Ranking under the Hotelling observer.
    pub ho: RankReport,
    pub tau: f64,
    /// Complex noise standard deviation used for every design.
    pub sigma: f64,
    pub results: BTreeMap<String, BTreeMap<String, ObserverSummary>>,
    /// (design, error) pairs for designs that aborted; the rest proceeded.
    pub failures: Vec<(String, String)>,
    pub out_dir: PathBuf,
}

struct WorkItem {
    /// Index into the score vector; stable across execution orders.
    positive: bool,
    object: Vec<f64>,
    noise_seed: u64,
}

/// Resolves the complex noise std from the spec and the signal's full-scan
/// k-space peak.
fn resolve_sigma(cfg: &StudyConfig, f_s: &[f64]) -> Result<f64> {
    match cfg.noise {
        NoiseSpec::Absolute(s) => Ok(s),
        NoiseSpec::Fraction(fr) => {
            let full = make_mri_operator(make_design(DesignKind::FS, cfg.n, 0)?, cfg.n)?;
            let spectrum = full.apply(f_s);
            let peak = spectrum
                .chunks_exact(2)
                .map(|p| (p[0] * p[0] + p[1] * p[1]).sqrt())
                .fold(0.0f64, f64::max);
            if !(peak > 0.0) {
                return Err(SdoError::Config(
                    "fractional noise needs a nonzero signal spectrum".into(),
                ));
            }
            Ok(fr * peak)
        }
    }
}

/// Per-design score vectors: (SDO positives, SDO negatives, HO positives, HO negatives).
type DesignScores = (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>);

fn run_items<F>(items: &[WorkItem], workers: Option<usize>, eval: F) -> Vec<Result<(f64, f64)>>
where
    F: Fn(&WorkItem) -> Result<(f64, f64)> + Send + Sync,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        let run = || items.par_iter().map(&eval).collect();
        match workers {
            Some(w) => match rayon::ThreadPoolBuilder::new().num_threads(w.max(1)).build() {
                Ok(pool) => pool.install(run),
                Err(_) => run(),
            },
            None => run(),
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = workers;
        items.iter().map(eval).collect()
    }
}

/// Runs the full detection study: per design, simulates signal-absent and
/// signal-present measurements of random phantoms, fits the variational
/// widths per measurement, scores the SDO and Hotelling observers, and
/// ranks the designs by AUC. All artifacts land in the output directory:
/// `scores.csv`, `roc_<design>_<observer>.csv`, `summary.json` (bit-identical
/// across reruns of the same config), and `run_meta.json` (the one file
/// carrying a timestamp).
///
/// A failing design is recorded and skipped; the others proceed.
pub fn run_ranking_study(cfg: &StudyConfig) -> Result<RankingOutput> {
    cfg.validate()?;
    let out_dir = cfg
        .output_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("sdo_out"));
    std::fs::create_dir_all(&out_dir)?;
    let cache = GammaCache::new(out_dir.join("cache"))?;

    let n = cfg.n;
    let b = HaarTransform::new(n, cfg.haar_levels())?;
    let q = b.range_dim();

    let train: Vec<Vec<f64>> = (0..cfg.n_train)
        .map(|i| {
            generate_sparse_phantom(n, derive_seed(cfg.seed, &["phantom", "train", &i.to_string()]), cfg.detail_level)
        })
        .collect::<Result<_>>()?;
    let tau = match cfg.tau_override {
        Some(t) => t,
        None => estimate_tau(&train, &b, cfg.outlier_policy)?,
    };
    let f_s = signal_image(n, &cfg.signal);
    let sigma = resolve_sigma(cfg, &f_s)?;
    if !(sigma > 0.0) {
        return Err(SdoError::Config(
            "the detection study needs a positive noise level".into(),
        ));
    }
    let sigma_component = sigma / std::f64::consts::SQRT_2;
    let opts = cfg.solver.double_loop_options();

    // Test objects are design-independent; noise is not.
    let neg_objects: Vec<Vec<f64>> = (0..cfg.n_neg)
        .map(|i| {
            generate_sparse_phantom(n, derive_seed(cfg.seed, &["phantom", "neg", &i.to_string()]), cfg.detail_level)
        })
        .collect::<Result<_>>()?;
    let pos_objects: Vec<Vec<f64>> = (0..cfg.n_pos)
        .map(|i| {
            let mut obj = generate_sparse_phantom(
                n,
                derive_seed(cfg.seed, &["phantom", "pos", &i.to_string()]),
                cfg.detail_level,
            )?;
            for (o, s) in obj.iter_mut().zip(&f_s) {
                *o += s;
            }
            Ok(obj)
        })
        .collect::<Result<_>>()?;

    let mut results: BTreeMap<String, BTreeMap<String, ObserverSummary>> = BTreeMap::new();
    let mut failures: Vec<(String, String)> = Vec::new();
    let mut sdo_summaries: Vec<DesignSummary> = Vec::new();
    let mut ho_summaries: Vec<DesignSummary> = Vec::new();
    let mut score_rows: Vec<ScoreRow> = Vec::new();

    for &kind in &cfg.designs {
        let name = kind.name().to_string();
        let design_result = (|| -> Result<DesignScores> {
            let mask = make_design(kind, n, derive_seed(cfg.seed, &["mask", &name]))?;
            let h = make_mri_operator(mask, n)?;
            let solver = match cfg.solver.variance_threshold {
                Some(t) => MarginalVarianceSolver::with_threshold(&h, &b, sigma_component, t)?,
                None => MarginalVarianceSolver::new(&h, &b, sigma_component)?,
            };
            let kernel_diag = solver.kernel_diagonal();
            let template = train_hotelling(&train, &f_s, &h, sigma_component, cfg.solver.shrinkage)?;

            let mut items = Vec::with_capacity(cfg.n_neg + cfg.n_pos);
            for (i, obj) in neg_objects.iter().enumerate() {
                items.push(WorkItem {
                    positive: false,
                    object: obj.clone(),
                    noise_seed: derive_seed(cfg.seed, &["noise", &name, "neg", &i.to_string()]),
                });
            }
            for (i, obj) in pos_objects.iter().enumerate() {
                items.push(WorkItem {
                    positive: true,
                    object: obj.clone(),
                    noise_seed: derive_seed(cfg.seed, &["noise", &name, "pos", &i.to_string()]),
                });
            }

            let eval = |item: &WorkItem| -> Result<(f64, f64)> {
                let g = simulate_measurement(&item.object, &h, sigma, item.noise_seed)?;
                let key = GammaCache::key(cfg, &name, tau, sigma_component, &g);
                let gamma = match cache.load(&key, q) {
                    Some(gamma) => gamma,
                    None => {
                        let state =
                            double_loop_full(&g, &h, &b, tau, sigma_component, &opts, Some(&solver))?;
                        cache.store(&key, &state.gamma);
                        state.gamma
                    }
                };
                let sdo =
                    sdo_log_lr_with(&g, &f_s, &h, &b, &gamma, sigma_component, &kernel_diag)?;
                let ho = hotelling_log_stat(&g, &template)?;
                Ok((sdo.value, ho.value))
            };
            let outcomes = run_items(&items, cfg.workers, eval);

            let mut sdo_pos = Vec::new();
            let mut sdo_neg = Vec::new();
            let mut ho_pos = Vec::new();
            let mut ho_neg = Vec::new();
            for (item, outcome) in items.iter().zip(outcomes) {
                let (sdo, ho) = outcome?;
                if item.positive {
                    sdo_pos.push(sdo);
                    ho_pos.push(ho);
                } else {
                    sdo_neg.push(sdo);
                    ho_neg.push(ho);
                }
            }
            Ok((sdo_pos, sdo_neg, ho_pos, ho_neg))
        })();

        let (sdo_pos, sdo_neg, ho_pos, ho_neg) = match design_result {
            Ok(v) => v,
            Err(e) => {
                failures.push((name, e.to_string()));
                continue;
            }
        };

        let mut per_observer = BTreeMap::new();
        for (observer, pos, neg) in [("sdo", &sdo_pos, &sdo_neg), ("ho", &ho_pos, &ho_neg)] {
            for (&score, positive) in pos.iter().zip(std::iter::repeat(true)) {
                score_rows.push(ScoreRow {
                    design: name.clone(),
                    observer: observer.to_string(),
                    positive,
                    score,
                });
            }
            for &score in neg {
                score_rows.push(ScoreRow {
                    design: name.clone(),
                    observer: observer.to_string(),
                    positive: false,
                    score,
                });
            }
            let set = ScoreSet::new(pos.clone(), neg.clone())?;
            let empirical = empirical_auc(&set)?;
            let fit = binormal_fit(&set)?;
            let curve = roc_curve(&set, &fit)?;
            write_roc_csv(&curve, &out_dir.join(format!("roc_{name}_{observer}.csv")))?;
            per_observer.insert(
                observer.to_string(),
                ObserverSummary {
                    auc_empirical: empirical.auc,
                    auc_binormal: fit.auc,
                    ci: [empirical.ci_low, empirical.ci_high],
                    n_pos: pos.len(),
                    n_neg: neg.len(),
                },
            );
            let summary = DesignSummary {
                name: name.clone(),
                empirical,
                binormal: fit,
            };
            if observer == "sdo" {
                sdo_summaries.push(summary);
            } else {
                ho_summaries.push(summary);
            }
        }
        results.insert(name.clone(), per_observer);
    }

    if sdo_summaries.is_empty() {
        return Err(SdoError::DegenerateData(format!(
            "every design failed: {failures:?}"
        )));
    }
    let sdo_report = rank_designs(sdo_summaries)?;
    let ho_report = rank_designs(ho_summaries)?;

    write_scores_csv(&out_dir.join("scores.csv"), &score_rows)?;
    let summary = SummaryJson {
        n,
        seed: cfg.seed,
        designs: cfg.designs.iter().map(|d| d.name().to_string()).collect(),
        tau,
        sigma,
        sigma_component,
        results: &results,
        ordering: BTreeMap::from([
            (
                "sdo".to_string(),
                sdo_report.order().iter().map(|s| s.to_string()).collect(),
            ),
            (
                "ho".to_string(),
                ho_report.order().iter().map(|s| s.to_string()).collect(),
            ),
        ]),
        not_separated: BTreeMap::from([
            ("sdo".to_string(), sdo_report.not_separated.clone()),
            ("ho".to_string(), ho_report.not_separated.clone()),
        ]),
        failures: &failures,
    };
    std::fs::write(
        out_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n",
    )?;
    // The only timestamped artifact, kept apart so summary.json stays
    // bit-identical across reruns.
    let stamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    std::fs::write(
        out_dir.join("run_meta.json"),
        format!("{{\n  \"generated_at_unix\": {stamp}\n}}\n"),
    )?;

    Ok(RankingOutput {
        sdo: sdo_report,
        ho: ho_report,
        tau,
        sigma,
        results,
        failures,
        out_dir,
    })
}

/// One cell of the reconstruction study.
#[derive(Debug, Clone)]
pub struct ReconRow {
    pub design: String,
    pub method: String,
    pub ssim: f64,
    pub rel_error: f64,
}

/// Reconstruction-study result: per (design, method) quality metrics plus
/// recorded per-cell failures.
#[derive(Debug)]
pub struct ReconOutput {
    pub rows: Vec<ReconRow>,
    pub failures: Vec<(String, String, String)>,
    pub tau: f64,
    pub sigma: f64,
    pub out_dir: PathBuf,
}

/// Reconstructs one signal-present phantom per design with the four
/// estimators and scores each against the ground truth (SSIM on the unit
/// intensity scale, plus relative ℓ2 error). Writes every reconstruction as
/// a PhantomFile and the table as `recon_summary.csv`
/// (`design,method,ssim,rel_error`). A failing cell is recorded and the
/// study continues.
pub fn run_recon_study(cfg: &StudyConfig) -> Result<ReconOutput> {
    cfg.validate()?;
    let out_dir = cfg
        .output_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("sdo_out"));
    std::fs::create_dir_all(&out_dir)?;
    let cache = GammaCache::new(out_dir.join("cache"))?;

    let n = cfg.n;
    let b = HaarTransform::new(n, cfg.haar_levels())?;
    let q = b.range_dim();
    let train: Vec<Vec<f64>> = (0..cfg.n_train)
        .map(|i| {
            generate_sparse_phantom(n, derive_seed(cfg.seed, &["phantom", "train", &i.to_string()]), cfg.detail_level)
        })
        .collect::<Result<_>>()?;
    let tau = match cfg.tau_override {
        Some(t) => t,
        None => estimate_tau(&train, &b, cfg.outlier_policy)?,
    };
    let f_s = signal_image(n, &cfg.signal);
    let sigma = resolve_sigma(cfg, &f_s)?;
    let sigma_component = sigma / std::f64::consts::SQRT_2;

    let mut truth = generate_sparse_phantom(n, derive_seed(cfg.seed, &["phantom", "recon"]), cfg.detail_level)?;
    for (t, s) in truth.iter_mut().zip(&f_s) {
        *t += s;
    }
    write_phantom(&out_dir.join("recon_truth.sdop"), n, n, &truth)?;
    let truth_norm = truth.iter().map(|v| v * v).sum::<f64>().sqrt();
    // The phantom family lives on the unit intensity scale.
    let dynamic_range = 1.0;

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for &kind in &cfg.designs {
        let name = kind.name().to_string();
        let mask = match make_design(kind, n, derive_seed(cfg.seed, &["mask", &name])) {
            Ok(m) => m,
            Err(e) => {
                failures.push((name, "mask".to_string(), e.to_string()));
                continue;
            }
        };
        let h = match make_mri_operator(mask.clone(), n) {
            Ok(h) => h,
            Err(e) => {
                failures.push((name, "operator".to_string(), e.to_string()));
                continue;
            }
        };
        let g = match simulate_measurement(
            &truth,
            &h,
            sigma,
            derive_seed(cfg.seed, &["noise", "recon", &name]),
        ) {
            Ok(g) => g,
            Err(e) => {
                failures.push((name, "measurement".to_string(), e.to_string()));
                continue;
            }
        };

        let mut recons: Vec<(&str, Result<Vec<f64>>)> = Vec::new();
        recons.push(("zero_fill", zero_fill(&g, &mask)));
        recons.push((
            "pls_l2",
            pls_l2(&g, &h, cfg.recon.beta).map(|r| r.image),
        ));
        recons.push((
            "pls_l1",
            pls_l1(
                &g,
                &h,
                &b,
                sigma_component,
                tau,
                cfg.recon.l1_max_iters,
                cfg.recon.l1_tol,
            )
            .map(|r| r.image),
        ));
        let approx = (|| {
            let key = GammaCache::key(cfg, &name, tau, sigma_component, &g);
            let gamma = match cache.load(&key, q) {
                Some(gamma) => gamma,
                None => {
                    let opts = cfg.solver.double_loop_options();
                    let state =
                        double_loop_full(&g, &h, &b, tau, sigma_component, &opts, None)?;
                    cache.store(&key, &state.gamma);
                    state.gamma
                }
            };
            pls_l1_approx(&g, &h, &b, sigma_component, &gamma).map(|r| r.image)
        })();
        recons.push(("pls_l1_approx", approx));

        for (method, outcome) in recons {
            match outcome {
                Ok(image) => {
                    let score = match ssim(&image, &truth, dynamic_range) {
                        Ok(s) => s,
                        Err(e) => {
                            failures.push((name.clone(), method.to_string(), e.to_string()));
                            continue;
                        }
                    };
                    let err = image
                        .iter()
                        .zip(&truth)
                        .map(|(a, t)| (a - t) * (a - t))
                        .sum::<f64>()
                        .sqrt()
                        / truth_norm;
                    if write_phantom(
                        &out_dir.join(format!("recon_{name}_{method}.sdop")),
                        n,
                        n,
                        &image,
                    )
                    .is_err()
                    {
                        failures.push((name.clone(), method.to_string(), "write failed".into()));
                    }
                    rows.push(ReconRow {
                        design: name.clone(),
                        method: method.to_string(),
                        ssim: score,
                        rel_error: err,
                    });
                }
                Err(e) => failures.push((name.clone(), method.to_string(), e.to_string())),
            }
        }
    }

    let mut csv = String::from("design,method,ssim,rel_error\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{:.6},{:.6}\n",
            r.design, r.method, r.ssim, r.rel_error
        ));
    }
    std::fs::write(out_dir.join("recon_summary.csv"), csv)?;

    Ok(ReconOutput {
        rows,
        failures,
        tau,
        sigma,
        out_dir,
    })
}

/// Recomputes per-(design, observer) AUC summaries and rankings from a
/// saved scores.csv. Returns (observer → rank report).
pub fn rank_from_scores(rows: &[ScoreRow]) -> Result<BTreeMap<String, RankReport>> {
    if rows.is_empty() {
        return Err(SdoError::Format("score table is empty".into()));
    }
    let mut grouped: BTreeMap<(String, String), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in rows {
        let entry = grouped
            .entry((r.observer.clone(), r.design.clone()))
            .or_default();
        if r.positive {
            entry.0.push(r.score);
        } else {
            entry.1.push(r.score);
        }
    }
    let mut by_observer: BTreeMap<String, Vec<DesignSummary>> = BTreeMap::new();
    for ((observer, design), (pos, neg)) in grouped {
        let set = ScoreSet::new(pos, neg)?;
        let empirical = empirical_auc(&set)?;
        let binormal = match binormal_fit(&set) {
            Ok(fit) => fit,
            // Degenerate score spread: report the empirical estimate alone.
            Err(_) => BinormalFit {
                a: f64::NAN,
                b: f64::NAN,
                auc: f64::NAN,
            },
        };
        by_observer.entry(observer).or_default().push(DesignSummary {
            name: design,
            empirical,
            binormal,
        });
    }
    by_observer
        .into_iter()
        .map(|(obs, summaries)| Ok((obs, rank_designs(summaries)?)))
        .collect()
}

/// Convenience used by the CLI: summarizes an [`AucEstimate`] as a short
/// fixed-width string.
pub fn format_auc(e: &AucEstimate) -> String {
    format!("{:.4} [{:.4}, {:.4}]", e.auc, e.ci_low, e.ci_high)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linops::DesignKind;

    #[test]
    fn derived_seeds_are_stable_and_distinct() {
        let a = derive_seed(7, &["noise", "FS", "neg", "0"]);
        let b = derive_seed(7, &["noise", "FS", "neg", "0"]);
        assert_eq!(a, b);
        assert_ne!(a, derive_seed(7, &["noise", "FS", "neg", "1"]));
        assert_ne!(a, derive_seed(8, &["noise", "FS", "neg", "0"]));
        // Label-path concatenation cannot collide across boundaries.
        assert_ne!(derive_seed(7, &["ab", "c"]), derive_seed(7, &["a", "bc"]));
    }

    #[test]
    fn scores_csv_round_trips() {
        let dir = std::env::temp_dir().join("sdo_scores_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("scores.csv");
        let rows = vec![
            ScoreRow {
                design: "FS".into(),
                observer: "sdo".into(),
                positive: true,
                score: 1.25,
            },
            ScoreRow {
                design: "UH".into(),
                observer: "ho".into(),
                positive: false,
                score: -0.5,
            },
        ];
        write_scores_csv(&path, &rows).unwrap();
        let back = read_scores_csv(&path).unwrap();
        assert_eq!(back, rows);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn rank_from_scores_groups_by_observer() {
        let mut rows = Vec::new();
        for (design, base) in [("FS", 2.0), ("UH", 0.5)] {
            for i in 0..6 {
                let jitter = 0.05 * i as f64;
                rows.push(ScoreRow {
                    design: design.into(),
                    observer: "sdo".into(),
                    positive: true,
                    score: base + jitter,
                });
                rows.push(ScoreRow {
                    design: design.into(),
                    observer: "sdo".into(),
                    positive: false,
                    score: jitter,
                });
            }
        }
        let reports = rank_from_scores(&rows).unwrap();
        assert_eq!(reports.len(), 1);
        let sdo = &reports["sdo"];
        assert_eq!(sdo.order()[0], "FS");
        assert_eq!(sdo.entries[0].empirical.auc, 1.0);
    }

    #[test]
    fn tiny_ranking_study_end_to_end_and_deterministic() {
        let dir = std::env::temp_dir().join("sdo_rank_smoke");
        std::fs::remove_dir_all(&dir).ok();
        let mut cfg = StudyConfig::desk_scale(11);
        cfg.n = 8;
        cfg.designs = vec![DesignKind::FS, DesignKind::UH];
        cfg.n_train = 4;
        cfg.n_pos = 3;
        cfg.n_neg = 3;
        cfg.detail_level = 4;
        cfg.signal.radius = 0.12;
        cfg.output_dir = Some(dir.clone());
        cfg.workers = Some(1);

        let out = run_ranking_study(&cfg).unwrap();
        assert!(out.failures.is_empty(), "{:?}", out.failures);
        assert_eq!(out.sdo.entries.len(), 2);
        assert_eq!(out.ho.entries.len(), 2);
        let summary1 = std::fs::read(dir.join("summary.json")).unwrap();
        let scores = read_scores_csv(&dir.join("scores.csv")).unwrap();
        // n_pos + n_neg scores per observer per design.
        assert_eq!(scores.len(), 2 * 2 * 6);
        for design in ["FS", "UH"] {
            for observer in ["sdo", "ho"] {
                let count = scores
                    .iter()
                    .filter(|r| r.design == design && r.observer == observer)
                    .count();
                assert_eq!(count, 6);
                assert!(dir.join(format!("roc_{design}_{observer}.csv")).exists());
            }
        }

        // Second run (warm cache) must reproduce the summary bit-for-bit.
        let out2 = run_ranking_study(&cfg).unwrap();
        let summary2 = std::fs::read(dir.join("summary.json")).unwrap();
        assert_eq!(summary1, summary2);
        assert_eq!(out.tau, out2.tau);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn tiny_recon_study_produces_all_cells() {
        let dir = std::env::temp_dir().join("sdo_recon_smoke");
        std::fs::remove_dir_all(&dir).ok();
        let mut cfg = StudyConfig::desk_scale(13);
        cfg.n = 8;
        cfg.designs = vec![DesignKind::FS, DesignKind::LH];
        cfg.n_train = 3;
        cfg.n_pos = 1;
        cfg.n_neg = 1;
        cfg.detail_level = 4;
        cfg.signal.radius = 0.12;
        cfg.output_dir = Some(dir.clone());

        let out = run_recon_study(&cfg).unwrap();
        assert!(out.failures.is_empty(), "{:?}", out.failures);
        assert_eq!(out.rows.len(), 2 * 4);
        for row in &out.rows {
            assert!(row.ssim.is_finite() && row.ssim <= 1.0 + 1e-12);
            assert!(row.rel_error.is_finite() && row.rel_error >= 0.0);
            assert!(dir
                .join(format!("recon_{}_{}.sdop", row.design, row.method))
                .exists());
        }
        let csv = std::fs::read_to_string(dir.join("recon_summary.csv")).unwrap();
        assert!(csv.starts_with("design,method,ssim,rel_error\n"));
        assert_eq!(csv.lines().count(), 1 + 8);
        // Full sampling reconstructs essentially exactly for the quadratic
        // and ℓ1 estimators at this noise level; zero-fill too (isometry).
        let fs_l2 = out
            .rows
            .iter()
            .find(|r| r.design == "FS" && r.method == "pls_l2")
            .unwrap();
        assert!(fs_l2.rel_error < 0.1, "rel error {}", fs_l2.rel_error);
        std::fs::remove_dir_all(&dir).ok();
    }
}
