//! The four nuisance fits and their sequencing.
//!
//! * γ: exponential tilt of all controls (1 − r·t) towards treated primary
//!   subjects (r·t);
//! * β: exponential tilt of primary controls r(1 − t) towards treated
//!   primary subjects;
//! * α_eff: least squares on all controls weighted by exp(xᵀγ̂);
//! * α_nv: least squares on primary controls weighted by exp(xᵀβ̂).
//!
//! γ̂ and β̂ are fitted first and then held fixed inside the α problems.
//! All four are normalized by the combined row count N.

use std::fmt;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use super::cv::{cross_validate, default_grid, CvResult, Strata};
use super::{minimize_l1, CoefficientVector, FitResult, PenalizedProblem, SolverOptions};
use crate::dataset::{standardize, CombinedDataset, ScalingInfo};
use crate::error::SolverError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NuisanceKind {
    Gamma,
    Beta,
    AlphaEff,
    AlphaNv,
}

impl NuisanceKind {
    pub const ALL: [NuisanceKind; 4] = [
        NuisanceKind::Gamma,
        NuisanceKind::Beta,
        NuisanceKind::AlphaEff,
        NuisanceKind::AlphaNv,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            NuisanceKind::Gamma => "gamma",
            NuisanceKind::Beta => "beta",
            NuisanceKind::AlphaEff => "alpha_eff",
            NuisanceKind::AlphaNv => "alpha_nv",
        }
    }

    /// The tilt fit whose coefficients weight this outcome fit.
    pub fn weighting(self) -> Option<NuisanceKind> {
        match self {
            NuisanceKind::AlphaEff => Some(NuisanceKind::Gamma),
            NuisanceKind::AlphaNv => Some(NuisanceKind::Beta),
            _ => None,
        }
    }
}

impl fmt::Display for NuisanceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Builds the penalized problem for one nuisance fit on `data`'s design.
/// The outcome fits need the frozen tilt coefficients.
pub fn build_problem<'d>(
    data: &'d CombinedDataset,
    kind: NuisanceKind,
    frozen: Option<&CoefficientVector>,
    lambda: f64,
) -> Result<PenalizedProblem<'d>, SolverError> {
    let design = data.design();
    let tilt_weights = |selector: Array1<f64>| -> Result<Array1<f64>, SolverError> {
        let coefs = frozen.ok_or_else(|| {
            SolverError::InvalidProblem(format!("{kind} needs frozen tilt coefficients"))
        })?;
        if coefs.len() != data.d() + 1 {
            return Err(SolverError::InvalidProblem(format!(
                "frozen coefficients have length {}, expected {}",
                coefs.len(),
                data.d() + 1
            )));
        }
        let eta = data.linear_predictor(coefs.values());
        Ok(selector
            .iter()
            .zip(eta.iter())
            .map(|(&s, &h)| if s != 0.0 { s * h.exp() } else { 0.0 })
            .collect())
    };
    match kind {
        NuisanceKind::Gamma => {
            PenalizedProblem::exp_tilt(design, data.all_controls(), data.treated_primary(), lambda)
        }
        NuisanceKind::Beta => PenalizedProblem::exp_tilt(
            design,
            data.primary_control(),
            data.treated_primary(),
            lambda,
        ),
        NuisanceKind::AlphaEff => PenalizedProblem::weighted_ls(
            design,
            tilt_weights(data.all_controls())?,
            data.outcome().to_owned(),
            lambda,
        ),
        NuisanceKind::AlphaNv => PenalizedProblem::weighted_ls(
            design,
            tilt_weights(data.primary_control())?,
            data.outcome().to_owned(),
            lambda,
        ),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GridSpec {
    /// `points` log-spaced values from each problem's λ_max down to
    /// `ratio·λ_max`.
    Default { points: usize, ratio: f64 },
    Explicit(Vec<f64>),
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec::Default {
            points: 50,
            ratio: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvSettings {
    pub folds: usize,
    pub grid: GridSpec,
    pub seed: u64,
}

impl Default for CvSettings {
    fn default() -> Self {
        CvSettings {
            folds: 5,
            grid: GridSpec::default(),
            seed: 0,
        }
    }
}

/// How the four penalty levels are chosen. Fixed levels are in the order
/// γ, β, α_eff, α_nv and apply to the standardized design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LambdaPolicy {
    Cv(CvSettings),
    Fixed([f64; 4]),
}

impl Default for LambdaPolicy {
    fn default() -> Self {
        LambdaPolicy::Cv(CvSettings::default())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NuisanceOptions {
    pub solver: SolverOptions,
    /// Solve on centered and scaled covariates, report on the original scale.
    pub standardize: bool,
}

impl Default for NuisanceOptions {
    fn default() -> Self {
        NuisanceOptions {
            solver: SolverOptions::default(),
            standardize: true,
        }
    }
}

/// The four fitted nuisance models. Coefficients are on the original
/// covariate scale; λ, objective traces and KKT residuals refer to the
/// standardized problems that were actually solved.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NuisanceFits {
    pub gamma: FitResult,
    pub beta: FitResult,
    pub alpha_eff: FitResult,
    pub alpha_nv: FitResult,
    /// Selected λ in the order γ, β, α_eff, α_nv.
    pub lambdas: [f64; 4],
    pub scaling: ScalingInfo,
    #[serde(skip)]
    pub cv: Option<Vec<CvResult>>,
}

impl NuisanceFits {
    pub fn get(&self, kind: NuisanceKind) -> &FitResult {
        match kind {
            NuisanceKind::Gamma => &self.gamma,
            NuisanceKind::Beta => &self.beta,
            NuisanceKind::AlphaEff => &self.alpha_eff,
            NuisanceKind::AlphaNv => &self.alpha_nv,
        }
    }

    pub fn all_converged(&self) -> bool {
        NuisanceKind::ALL.iter().all(|&k| self.get(k).converged)
    }

    /// Coefficients of `kind` on the standardized design that was solved.
    pub fn standardized_coefficients(&self, kind: NuisanceKind) -> CoefficientVector {
        CoefficientVector::new(
            self.scaling
                .to_standardized(self.get(kind).coefficients.values()),
        )
    }
}

/// Runs the four penalized fits in order γ, β, α_eff, α_nv.
pub fn fit_nuisances(
    data: &CombinedDataset,
    policy: &LambdaPolicy,
    options: &NuisanceOptions,
) -> Result<NuisanceFits, SolverError> {
    let (work, scaling) = if options.standardize {
        standardize(data)
    } else {
        (data.clone(), ScalingInfo::identity(data.d() + 1))
    };
    let strata = Strata::from_dataset(&work);
    let mut fits: Vec<FitResult> = Vec::with_capacity(4);
    let mut lambdas = [0.0; 4];
    let mut cv_results = Vec::new();

    for kind in NuisanceKind::ALL {
        let tag = |e: SolverError| SolverError::Nuisance {
            which: kind,
            source: Box::new(e),
        };
        let frozen = kind
            .weighting()
            .map(|w| fits[w.index()].coefficients.clone());
        let problem = build_problem(&work, kind, frozen.as_ref(), 0.0).map_err(tag)?;
        let lambda = match policy {
            LambdaPolicy::Fixed(values) => values[kind.index()],
            LambdaPolicy::Cv(settings) => {
                let grid = match &settings.grid {
                    GridSpec::Default { points, ratio } => {
                        default_grid(problem.lambda_max(), *points, *ratio)
                    }
                    GridSpec::Explicit(values) => values.clone(),
                };
                let cv = cross_validate(
                    &problem,
                    &strata,
                    settings.folds,
                    &grid,
                    settings.seed,
                    &options.solver,
                )
                .map_err(tag)?;
                let selected = cv.selected;
                cv_results.push(cv);
                selected
            }
        };
        let problem = problem.with_lambda(lambda);
        problem.validate().map_err(tag)?;
        let fit = minimize_l1(&problem, &options.solver).map_err(tag)?;
        lambdas[kind.index()] = lambda;
        fits.push(fit);
    }

    let mut original = fits.into_iter().map(|mut fit| {
        fit.coefficients = CoefficientVector::new(scaling.to_original(fit.coefficients.values()));
        fit
    });
    Ok(NuisanceFits {
        gamma: original.next().unwrap(),
        beta: original.next().unwrap(),
        alpha_eff: original.next().unwrap(),
        alpha_nv: original.next().unwrap(),
        lambdas,
        scaling,
        cv: if cv_results.is_empty() {
            None
        } else {
            Some(cv_results)
        },
    })
}
