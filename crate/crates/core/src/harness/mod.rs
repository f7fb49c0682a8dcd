//! Experiment orchestration: phantom generation, measurement simulation,
//! study configuration, and the ranking / reconstruction studies.

pub mod config;
pub mod phantom;
pub mod study;

pub use config::{
    load_config, NoiseSpec, ReconConfig, SignalShape, SignalSpec, SolverSpec, StudyConfig,
};
pub use phantom::{
    generate_sparse_phantom, haar_sparsity_fraction, read_phantom, signal_image,
    simulate_measurement, write_phantom,
};
pub use study::{
    derive_seed, format_auc, rank_from_scores, read_scores_csv, run_ranking_study,
    run_recon_study, write_scores_csv, RankingOutput, ReconOutput, ReconRow, ScoreRow,
};
