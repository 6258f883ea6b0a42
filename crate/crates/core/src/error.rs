use thiserror::Error;

use crate::solver::NuisanceKind;

/// Problems found while ingesting or validating a combined dataset.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("column `{0}` not found in header")]
    MissingColumn(String),
    #[error("column `{column}` row {row}: indicator value `{value}` is not 0 or 1")]
    NonBinaryIndicator {
        column: String,
        row: usize,
        value: String,
    },
    #[error("row {row}: external-control subject (source = 0) marked as treated")]
    ExternalTreated { row: usize },
    #[error("column `{column}` row {row}: value `{value}` is not a finite number")]
    NonFiniteValue {
        column: String,
        row: usize,
        value: String,
    },
    #[error("dataset has no rows")]
    EmptyDataset,
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Failures of the penalized solvers and of cross-validation.
#[derive(Debug, Error)]
pub enum SolverError {
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("not converged after {iterations} iterations (kkt violation {kkt_violation:.3e})")]
    NotConverged {
        iterations: usize,
        kkt_violation: f64,
    },
    #[error("objective diverges: linear predictor reached the overflow guard at iteration {iteration}")]
    DivergentObjective { iteration: usize },
    #[error("cannot build {folds} folds: stratum {stratum} has only {count} rows")]
    FoldInfeasible {
        stratum: &'static str,
        count: usize,
        folds: usize,
    },
    #[error("{which} fit failed: {source}")]
    Nuisance {
        which: NuisanceKind,
        #[source]
        source: Box<SolverError>,
    },
}

/// Failures while evaluating the ATT estimators and their variances.
#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("row {row}: exp of linear predictor {value:.3} exceeds the overflow guard")]
    Overflow { row: usize, value: f64 },
    #[error("influence difference has degenerate second moment {0:.3e}")]
    DegenerateDenominator(f64),
    #[error("invalid input: {0}")]
    Invalid(String),
}

/// Top-level error carrying module provenance.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dataset: {0}")]
    Data(#[from] DataError),
    #[error("solver: {0}")]
    Solver(#[from] SolverError),
    #[error("estimator: {0}")]
    Estimator(#[from] EstimatorError),
    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub fn module(&self) -> &'static str {
        match self {
            Error::Data(_) => "dataset",
            Error::Solver(_) => "sparse_solver",
            Error::Estimator(_) => "estimators",
            Error::Config(_) => "config",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
