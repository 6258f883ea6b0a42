//! Synthetic designs with known ATT, a Monte Carlo oracle for the target
//! and a replicated study harness reporting bias, SD, mean SE, coverage
//! and relative efficiency.

mod model;
mod oracle;
mod study;

pub use model::{
    dagger, expit, gen_model1, gen_model2, generate, generate_with, GaussianSampler, Model,
    ModelSpec, Propensity, Sizing, DAGGER_MEAN, DAGGER_SD, SIGNAL_DIM,
};
pub use oracle::{oracle_theta, OracleEstimate};
pub use study::{
    paper_table, replicate_rng, run_grid, run_replicate, run_study, summarize, MetricsRow,
    MetricsTable, ReplicateOutcome, StudyConfig, EXTERNAL_CONTROLS, FAILURE_FLAG_SHARE,
};
