//! Shared fixtures for the benchmarks.

use dsdr_core::simulation::{gen_model1, gen_model2, Model, Sizing};
use dsdr_core::solver::build_problem;
use dsdr_core::{fit_nuisances, standardize, CombinedDataset, LambdaPolicy, NuisanceKind, NuisanceOptions, PenalizedProblem};

pub const SEED: u64 = 17;

/// Model 1 data with `n` rows and `d` covariates, standardized as the
/// estimator pipeline does before fitting.
pub fn model1(n: usize, d: usize) -> CombinedDataset {
    standardize(&gen_model1(n, d, SEED).expect("valid model 1 spec")).0
}

/// Model 2 case (i) data with `n` primary and 1000 external rows.
pub fn model2(n: usize, d: usize) -> CombinedDataset {
    gen_model2(Model::M2i, Sizing::Primary { n, m: 1000 }, d, SEED).expect("valid model 2 spec")
}

/// The γ problem of `data` at `frac`·λ_max.
pub fn tilt_problem(data: &CombinedDataset, frac: f64) -> PenalizedProblem<'_> {
    let p = build_problem(data, NuisanceKind::Gamma, None, 0.0).unwrap();
    p.with_lambda(frac * p.lambda_max())
}

/// The α_eff problem of `data` at `frac`·λ_max, weighted by a γ fit at
/// λ = 0.02.
pub fn outcome_problem(data: &CombinedDataset, frac: f64) -> PenalizedProblem<'_> {
    let fits = fit_nuisances(
        data,
        &LambdaPolicy::Fixed([0.02; 4]),
        &NuisanceOptions {
            standardize: false,
            ..NuisanceOptions::default()
        },
    )
    .unwrap();
    let p = build_problem(data, NuisanceKind::AlphaEff, Some(&fits.gamma.coefficients), 0.0).unwrap();
    p.with_lambda(frac * p.lambda_max())
}
