//! Doubly robust estimation of the average treatment effect on the treated
//! when a primary study is augmented with external control subjects.
//!
//! The pipeline is: load a [`CombinedDataset`], fit the four penalized
//! nuisance models with [`fit_nuisances`], then form the naive, efficient
//! and safe estimates with [`infer`]. [`estimate`] runs all three steps.

pub mod dataset;
pub mod error;
pub mod estimators;
pub mod normal;
pub mod simulation;
pub mod solver;

pub use dataset::{
    csv_header, load_csv, load_csv_reader, standardize, ColumnSchema, CombinedDataset, MissingPolicy,
    ObservationRow, ScalingInfo,
};
pub use error::{DataError, Error, EstimatorError, Result, SolverError};
pub use estimators::{
    estimate_a, infer, influence_vectors, theta_eff, theta_nv, theta_safe, Components,
    EstimateReport, Estimates, InferOptions, InfluenceVectors, Method,
};
pub use solver::{
    fit_nuisances, minimize_l1, CoefficientVector, CvSettings, ExpTiltMethod, FitResult, GridSpec,
    LambdaPolicy, Loss, NuisanceFits, NuisanceKind, NuisanceOptions, PenalizedProblem,
    SolverOptions,
};

/// Options for [`estimate`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EstimateOptions {
    pub lambda: LambdaPolicy,
    pub nuisance: NuisanceOptions,
    pub infer: InferOptions,
}

/// Fits the nuisance models and returns the three estimates together with
/// the fits. `level` is the confidence level of the Wald intervals.
pub fn estimate(
    data: &CombinedDataset,
    level: f64,
    options: &EstimateOptions,
) -> Result<(Estimates, NuisanceFits)> {
    let fits = fit_nuisances(data, &options.lambda, &options.nuisance)?;
    let est = infer(data, &fits, level, options.infer)?;
    Ok((est, fits))
}
