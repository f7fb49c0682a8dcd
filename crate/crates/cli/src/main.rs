//! `sdo` — command-line front end for the sparsity-driven observer studies.
//!
//! Exit codes: 0 on success, 2 for configuration/input errors, 3 for
//! numerical failures.

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use sdo_core::harness::{
    format_auc, generate_sparse_phantom, haar_sparsity_fraction, load_config, rank_from_scores,
    read_scores_csv, run_ranking_study, run_recon_study, write_phantom,
};
use sdo_core::onedim::{run_onedim_study, write_study_csv, StudyKind};
use sdo_core::rocstat::RankReport;
use sdo_core::SdoError;

#[derive(Parser)]
#[command(
    name = "sdo",
    version,
    about = "Rank k-space acquisition designs with a sparsity-driven observer"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the detection study and rank designs by AUC.
    Rank {
        /// JSON study configuration.
        #[arg(long)]
        config: PathBuf,
        /// Artifact directory (overrides the config's output_dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads for the evaluation loop.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Run the scalar bound studies and write density/KL tables.
    Onedim {
        /// Output directory (default: onedim_out).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Reconstruct one phantom per design with every estimator.
    Recon {
        /// JSON study configuration.
        #[arg(long)]
        config: PathBuf,
        /// Artifact directory (overrides the config's output_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute AUC summaries and rankings from a saved score table.
    Roc {
        /// scores.csv produced by `sdo rank`.
        #[arg(long)]
        scores: PathBuf,
    },
    /// Phantom utilities.
    Phantom {
        #[command(subcommand)]
        cmd: PhantomCmd,
    },
}

#[derive(Subcommand)]
enum PhantomCmd {
    /// Generate a wavelet-sparse phantom and save it as a PhantomFile.
    Gen {
        /// Grid side (power of two ≥ 8).
        #[arg(long)]
        n: usize,
        /// Generator seed.
        #[arg(long)]
        seed: u64,
        /// Output path.
        #[arg(long)]
        out: PathBuf,
        /// Number of texture features.
        #[arg(long, default_value_t = 12)]
        detail: usize,
    },
}

fn print_report(observer: &str, report: &RankReport) {
    println!("{observer} ranking:");
    for (i, entry) in report.entries.iter().enumerate() {
        println!(
            "  {}. {:<3} AUC {}  (binormal {:.4})",
            i + 1,
            entry.name,
            format_auc(&entry.empirical),
            entry.binormal.auc
        );
    }
    for (a, b) in &report.not_separated {
        println!("  note: {a} and {b} are not separated at 95% confidence");
    }
}

fn run(cli: Cli) -> Result<(), SdoError> {
    match cli.cmd {
        Command::Rank {
            config,
            out,
            workers,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(out) = out {
                cfg.output_dir = Some(out);
            }
            if let Some(w) = workers {
                cfg.workers = Some(w);
            }
            let result = run_ranking_study(&cfg)?;
            println!(
                "study: n={}, tau={:.6}, sigma={:.6e} (complex)",
                cfg.n, result.tau, result.sigma
            );
            print_report("SDO", &result.sdo);
            print_report("Hotelling", &result.ho);
            for (design, err) in &result.failures {
                eprintln!("design {design} failed: {err}");
            }
            println!("artifacts: {}", result.out_dir.display());
            Ok(())
        }
        Command::Onedim { out } => {
            let dir = out.unwrap_or_else(|| PathBuf::from("onedim_out"));
            for (kind, sub) in [
                (StudyKind::Unbiased, "unbiased"),
                (StudyKind::Biased, "biased"),
            ] {
                let cases = run_onedim_study(kind)?;
                println!("{sub} study:");
                for c in &cases {
                    println!(
                        "  {:<9} gamma_hat {:.6}  kl {:.6}",
                        c.label, c.gamma_hat, c.kl
                    );
                }
                write_study_csv(&cases, &dir.join(sub))?;
            }
            println!("artifacts: {}", dir.display());
            Ok(())
        }
        Command::Recon { config, out } => {
            let mut cfg = load_config(&config)?;
            if let Some(out) = out {
                cfg.output_dir = Some(out);
            }
            let result = run_recon_study(&cfg)?;
            println!(
                "recon study: n={}, tau={:.6}, sigma={:.6e} (complex)",
                cfg.n, result.tau, result.sigma
            );
            println!("{:<4} {:<14} {:>8} {:>10}", "", "", "ssim", "rel_error");
            for row in &result.rows {
                println!(
                    "{:<4} {:<14} {:>8.4} {:>10.4}",
                    row.design, row.method, row.ssim, row.rel_error
                );
            }
            for (design, method, err) in &result.failures {
                eprintln!("{design}/{method} failed: {err}");
            }
            println!("artifacts: {}", result.out_dir.display());
            Ok(())
        }
        Command::Roc { scores } => {
            let rows = read_scores_csv(&scores)?;
            let reports = rank_from_scores(&rows)?;
            for (observer, report) in &reports {
                print_report(observer, report);
            }
            Ok(())
        }
        Command::Phantom {
            cmd: PhantomCmd::Gen {
                n,
                seed,
                out,
                detail,
            },
        } => {
            let img = generate_sparse_phantom(n, seed, detail)?;
            write_phantom(&out, n, n, &img)?;
            let levels = 4.min(n.trailing_zeros() as usize).max(1);
            let frac = haar_sparsity_fraction(&img, n, levels)?;
            println!(
                "wrote {} ({n}x{n}, {:.1}% of level-{levels} Haar coefficients near zero)",
                out.display(),
                100.0 * frac
            );
            Ok(())
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(if e.is_config() { 2 } else { 3 });
    }
}
