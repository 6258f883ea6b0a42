//! L1-penalized convex solvers for the four nuisance fits.
//!
//! Two smooth losses are supported, both with an unpenalized intercept in
//! column 0 of the design:
//!
//! * exponential tilt, `(1/N) Σ { e_i exp(x_iᵀc) − l_i x_iᵀc }`, whose
//!   stationarity conditions are covariate-balancing equations;
//! * weighted least squares, `(1/2N) Σ w_i (y_i − x_iᵀc)²`.
//!
//! The exponential-tilt loss is minimized by proximal Newton (Fisher
//! scoring with a coordinate-descent inner solver) or plain proximal
//! gradient; weighted least squares by cyclic coordinate descent. Every
//! returned fit carries its KKT residual as a convergence certificate.

mod columns;
pub mod cv;
mod exp_tilt;
pub mod nuisance;
mod weighted_ls;

use ndarray::{Array1, ArrayView2, Axis, CowArray, Ix2};
use serde::{Deserialize, Serialize};

use crate::error::SolverError;

pub use cv::{cross_validate, default_grid, select_lambda_cv, CvResult, Strata};
pub use nuisance::{
    build_problem, fit_nuisances, CvSettings, GridSpec, LambdaPolicy, NuisanceFits, NuisanceKind,
    NuisanceOptions,
};

/// Hard cap on |xᵀc| for rows that enter the exponential-tilt loss.
pub const EXP_GUARD: f64 = 40.0;

#[inline]
pub(crate) fn soft_threshold(z: f64, gamma: f64) -> f64 {
    if z > gamma {
        z - gamma
    } else if z < -gamma {
        z + gamma
    } else {
        0.0
    }
}

/// Linear coefficients, index 0 is the intercept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<f64>", into = "Vec<f64>")]
pub struct CoefficientVector {
    values: Vec<f64>,
    support: Vec<usize>,
}

impl CoefficientVector {
    pub fn new(values: Vec<f64>) -> Self {
        let support = values
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(j, _)| j)
            .collect();
        CoefficientVector { values, support }
    }

    pub fn zeros(len: usize) -> Self {
        Self::new(vec![0.0; len])
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Indices of nonzero entries.
    pub fn support(&self) -> &[usize] {
        &self.support
    }

    /// Number of nonzero slopes (intercept excluded).
    pub fn n_active_slopes(&self) -> usize {
        self.support.iter().filter(|&&j| j > 0).count()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

impl From<Vec<f64>> for CoefficientVector {
    fn from(v: Vec<f64>) -> Self {
        Self::new(v)
    }
}

impl From<CoefficientVector> for Vec<f64> {
    fn from(c: CoefficientVector) -> Self {
        c.values
    }
}

/// The smooth part of a penalized problem.
#[derive(Debug, Clone, PartialEq)]
pub enum Loss {
    /// `(1/N) Σ { exp_weights_i · exp(x_iᵀc) − lin_weights_i · x_iᵀc }`
    ExpTilt {
        exp_weights: Array1<f64>,
        lin_weights: Array1<f64>,
    },
    /// `(1/2N) Σ weights_i (response_i − x_iᵀc)²`
    WeightedLs {
        weights: Array1<f64>,
        response: Array1<f64>,
    },
}

impl Loss {
    fn select_rows(&self, rows: &[usize]) -> Loss {
        let pick = |a: &Array1<f64>| a.select(Axis(0), rows);
        match self {
            Loss::ExpTilt {
                exp_weights,
                lin_weights,
            } => Loss::ExpTilt {
                exp_weights: pick(exp_weights),
                lin_weights: pick(lin_weights),
            },
            Loss::WeightedLs { weights, response } => Loss::WeightedLs {
                weights: pick(weights),
                response: pick(response),
            },
        }
    }

    pub fn is_exp_tilt(&self) -> bool {
        matches!(self, Loss::ExpTilt { .. })
    }

    /// Unpenalized loss given the per-row linear predictor.
    pub fn value(&self, eta: &[f64]) -> f64 {
        let n = eta.len() as f64;
        match self {
            Loss::ExpTilt {
                exp_weights,
                lin_weights,
            } => {
                let mut s = 0.0;
                for ((&e, &l), &h) in exp_weights.iter().zip(lin_weights).zip(eta) {
                    if e != 0.0 {
                        s += e * h.exp();
                    }
                    if l != 0.0 {
                        s -= l * h;
                    }
                }
                s / n
            }
            Loss::WeightedLs { weights, response } => {
                let mut s = 0.0;
                for ((&w, &y), &h) in weights.iter().zip(response).zip(eta) {
                    if w != 0.0 {
                        s += w * (y - h) * (y - h);
                    }
                }
                s / (2.0 * n)
            }
        }
    }

    /// Derivative of the loss with respect to each row's linear predictor,
    /// scaled by N (so the gradient is `Xᵀ score / N`).
    fn score(&self, eta: &[f64]) -> Vec<f64> {
        match self {
            Loss::ExpTilt {
                exp_weights,
                lin_weights,
            } => exp_weights
                .iter()
                .zip(lin_weights)
                .zip(eta)
                .map(|((&e, &l), &h)| if e != 0.0 { e * h.exp() - l } else { -l })
                .collect(),
            Loss::WeightedLs { weights, response } => weights
                .iter()
                .zip(response)
                .zip(eta)
                .map(|((&w, &y), &h)| -w * (y - h))
                .collect(),
        }
    }

    /// Rows that influence the loss at all.
    fn active_row(&self, i: usize) -> bool {
        match self {
            Loss::ExpTilt {
                exp_weights,
                lin_weights,
            } => exp_weights[i] != 0.0 || lin_weights[i] != 0.0,
            Loss::WeightedLs { weights, .. } => weights[i] != 0.0,
        }
    }
}

/// A design matrix, a loss, a penalty level and a penalty mask.
#[derive(Debug, Clone)]
pub struct PenalizedProblem<'a> {
    design: CowArray<'a, f64, Ix2>,
    loss: Loss,
    lambda: f64,
    penalty_mask: Vec<bool>,
}

impl<'a> PenalizedProblem<'a> {
    pub fn exp_tilt(
        design: impl Into<CowArray<'a, f64, Ix2>>,
        exp_weights: Array1<f64>,
        lin_weights: Array1<f64>,
        lambda: f64,
    ) -> Result<Self, SolverError> {
        Self::new(
            design,
            Loss::ExpTilt {
                exp_weights,
                lin_weights,
            },
            lambda,
        )
    }

    pub fn weighted_ls(
        design: impl Into<CowArray<'a, f64, Ix2>>,
        weights: Array1<f64>,
        response: Array1<f64>,
        lambda: f64,
    ) -> Result<Self, SolverError> {
        Self::new(design, Loss::WeightedLs { weights, response }, lambda)
    }

    /// Penalizes every coefficient except the intercept.
    pub fn new(
        design: impl Into<CowArray<'a, f64, Ix2>>,
        loss: Loss,
        lambda: f64,
    ) -> Result<Self, SolverError> {
        let design = design.into();
        let p = design.ncols();
        let mut penalty_mask = vec![true; p];
        if let Some(first) = penalty_mask.first_mut() {
            *first = false;
        }
        let problem = PenalizedProblem {
            design,
            loss,
            lambda,
            penalty_mask,
        };
        problem.validate()?;
        Ok(problem)
    }

    pub fn with_penalty_mask(mut self, mask: Vec<bool>) -> Result<Self, SolverError> {
        self.penalty_mask = mask;
        self.validate()?;
        Ok(self)
    }

    pub fn with_lambda(&self, lambda: f64) -> Self {
        PenalizedProblem {
            lambda,
            ..self.clone()
        }
    }

    fn validate(&self) -> Result<(), SolverError> {
        let (n, p) = self.design.dim();
        let bad = |m: String| Err(SolverError::InvalidProblem(m));
        if n == 0 || p == 0 {
            return bad("empty design".into());
        }
        if self.penalty_mask.len() != p {
            return bad(format!("penalty mask has {} entries, expected {p}", self.penalty_mask.len()));
        }
        if self.penalty_mask[0] {
            return bad("intercept must not be penalized".into());
        }
        if self.design.column(0).iter().any(|&v| v != 1.0) {
            return bad("design column 0 must be the constant intercept".into());
        }
        if self.design.iter().any(|v| !v.is_finite()) {
            return bad("design has non-finite entries".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be finite and nonnegative, got {}", self.lambda));
        }
        let nonneg = |a: &Array1<f64>| a.iter().all(|&v| v >= 0.0 && v.is_finite());
        match &self.loss {
            Loss::ExpTilt {
                exp_weights,
                lin_weights,
            } => {
                if exp_weights.len() != n || lin_weights.len() != n {
                    return bad("selector length does not match design rows".into());
                }
                if !nonneg(exp_weights) || !nonneg(lin_weights) {
                    return bad("selectors must be finite and nonnegative".into());
                }
                if exp_weights.sum() <= 0.0 || lin_weights.sum() <= 0.0 {
                    return bad("both exponential and linear selectors need a positive entry".into());
                }
            }
            Loss::WeightedLs { weights, response } => {
                if weights.len() != n || response.len() != n {
                    return bad("weight/response length does not match design rows".into());
                }
                if !nonneg(weights) {
                    return bad("weights must be finite and nonnegative".into());
                }
                if weights.iter().all(|&w| w == 0.0) {
                    return bad("at least one weight must be positive".into());
                }
                if response.iter().any(|v| !v.is_finite()) {
                    return bad("response has non-finite entries".into());
                }
            }
        }
        Ok(())
    }

    pub fn design(&self) -> ArrayView2<'_, f64> {
        self.design.view()
    }

    pub fn loss(&self) -> &Loss {
        &self.loss
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn penalty_mask(&self) -> &[bool] {
        &self.penalty_mask
    }

    pub fn n_rows(&self) -> usize {
        self.design.nrows()
    }

    pub fn n_coefs(&self) -> usize {
        self.design.ncols()
    }

    /// Rows restricted to `rows`, normalized by the new row count.
    pub fn select_rows(&self, rows: &[usize]) -> PenalizedProblem<'static> {
        PenalizedProblem {
            design: CowArray::from(self.design.select(Axis(0), rows)),
            loss: self.loss.select_rows(rows),
            lambda: self.lambda,
            penalty_mask: self.penalty_mask.clone(),
        }
    }

    fn eta(&self, c: &[f64]) -> Vec<f64> {
        self.design.dot(&ndarray::ArrayView1::from(c)).to_vec()
    }

    pub fn penalty(&self, c: &[f64]) -> f64 {
        self.lambda
            * c.iter()
                .zip(&self.penalty_mask)
                .filter(|(_, &m)| m)
                .map(|(v, _)| v.abs())
                .sum::<f64>()
    }

    pub fn smooth_loss(&self, c: &[f64]) -> f64 {
        self.loss.value(&self.eta(c))
    }

    pub fn objective(&self, c: &[f64]) -> f64 {
        self.smooth_loss(c) + self.penalty(c)
    }

    /// Gradient of the smooth loss, recomputed from scratch.
    pub fn gradient(&self, c: &[f64]) -> Array1<f64> {
        let score = Array1::from(self.loss.score(&self.eta(c)));
        self.design.t().dot(&score) / self.n_rows() as f64
    }

    /// Largest violation of the subgradient optimality conditions.
    pub fn kkt_violation(&self, c: &[f64]) -> f64 {
        kkt_from_gradient(self.gradient(c).as_slice().unwrap(), c, self.lambda, &self.penalty_mask)
    }

    /// Largest |xᵀc| over rows that enter the loss.
    pub fn max_abs_predictor(&self, c: &[f64]) -> f64 {
        self.eta(c)
            .iter()
            .enumerate()
            .filter(|(i, _)| self.loss.active_row(*i))
            .fold(0.0, |m, (_, v)| m.max(v.abs()))
    }

    /// Minimizer over the intercept alone, all slopes zero.
    pub fn intercept_only(&self) -> Vec<f64> {
        let mut c = vec![0.0; self.n_coefs()];
        c[0] = match &self.loss {
            Loss::ExpTilt {
                exp_weights,
                lin_weights,
            } => (lin_weights.sum() / exp_weights.sum()).ln(),
            Loss::WeightedLs { weights, response } => {
                weights.dot(response) / weights.sum()
            }
        };
        c
    }

    /// Smallest λ at which the intercept-only fit is optimal.
    pub fn lambda_max(&self) -> f64 {
        let c = self.intercept_only();
        let g = self.gradient(&c);
        g.iter()
            .zip(&self.penalty_mask)
            .filter(|(_, &m)| m)
            .fold(0.0, |m, (v, _)| m.max(v.abs()))
    }
}

pub(crate) fn kkt_from_gradient(g: &[f64], c: &[f64], lambda: f64, mask: &[bool]) -> f64 {
    let mut worst: f64 = 0.0;
    for ((&gj, &cj), &pen) in g.iter().zip(c).zip(mask) {
        let v = if !pen {
            gj.abs()
        } else if cj == 0.0 {
            (gj.abs() - lambda).max(0.0)
        } else {
            (gj + lambda * cj.signum()).abs()
        };
        worst = worst.max(v);
    }
    worst
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExpTiltMethod {
    /// Fisher scoring: quadratic model solved by coordinate descent, then a
    /// line search on the true objective.
    #[default]
    ProximalNewton,
    /// Proximal gradient (ISTA) with backtracking.
    ProximalGradient,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Bound on the KKT residual.
    pub kkt_tol: f64,
    /// Bound on |ΔF| / max(1, |F|) between successive iterates.
    pub rel_tol: f64,
    pub max_iter: usize,
    pub exp_tilt_method: ExpTiltMethod,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            kkt_tol: 1e-6,
            rel_tol: 1e-9,
            max_iter: 10_000,
            exp_tilt_method: ExpTiltMethod::default(),
        }
    }
}

/// A solved (or best-effort) penalized problem.
#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub coefficients: CoefficientVector,
    pub lambda: f64,
    /// Objective at the start point and after every iteration.
    pub objective_trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub kkt_violation: f64,
}

impl FitResult {
    pub fn objective(&self) -> f64 {
        *self.objective_trace.last().unwrap_or(&f64::NAN)
    }

    /// Turns a flagged non-converged fit into [`SolverError::NotConverged`].
    pub fn into_converged(self) -> Result<Self, SolverError> {
        if self.converged {
            Ok(self)
        } else {
            Err(SolverError::NotConverged {
                iterations: self.iterations,
                kkt_violation: self.kkt_violation,
            })
        }
    }
}

#[derive(Serialize)]
struct FitResultJson<'a> {
    coefficients: &'a [f64],
    lambda: f64,
    objective: f64,
    converged: bool,
    iterations: usize,
    kkt_violation: f64,
    support_size: usize,
}

impl Serialize for FitResult {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        FitResultJson {
            coefficients: self.coefficients.values(),
            lambda: self.lambda,
            objective: self.objective(),
            converged: self.converged,
            iterations: self.iterations,
            kkt_violation: self.kkt_violation,
            support_size: self.coefficients.n_active_slopes(),
        }
        .serialize(s)
    }
}

/// Minimizes a penalized problem from the intercept-only start.
pub fn minimize_l1(
    problem: &PenalizedProblem<'_>,
    options: &SolverOptions,
) -> Result<FitResult, SolverError> {
    minimize_l1_from(problem, &problem.intercept_only(), options)
}

/// Minimizes a penalized problem from a given start (warm start).
///
/// A fit that hits `max_iter` is returned with `converged = false`; use
/// [`FitResult::into_converged`] to treat that as an error.
pub fn minimize_l1_from(
    problem: &PenalizedProblem<'_>,
    start: &[f64],
    options: &SolverOptions,
) -> Result<FitResult, SolverError> {
    if start.len() != problem.n_coefs() {
        return Err(SolverError::InvalidProblem(format!(
            "start has {} entries, expected {}",
            start.len(),
            problem.n_coefs()
        )));
    }
    if !(options.kkt_tol > 0.0) {
        return Err(SolverError::InvalidProblem("kkt_tol must be positive".into()));
    }
    let mut work = Workspace::new(problem);
    solve_prepared(problem, &mut work, start, options)
}

/// Data derived from a problem's design and weights that stays valid for
/// every λ, so a path can share it.
pub(crate) enum Workspace {
    Tilt(exp_tilt::TiltData),
    Ls(weighted_ls::Gram),
}

impl Workspace {
    pub(crate) fn new(problem: &PenalizedProblem<'_>) -> Self {
        match problem.loss() {
            Loss::ExpTilt { .. } => Workspace::Tilt(exp_tilt::TiltData::new(problem)),
            Loss::WeightedLs { .. } => Workspace::Ls(weighted_ls::Gram::new(problem)),
        }
    }
}

pub(crate) fn solve_prepared(
    problem: &PenalizedProblem<'_>,
    work: &mut Workspace,
    start: &[f64],
    options: &SolverOptions,
) -> Result<FitResult, SolverError> {
    match work {
        Workspace::Tilt(data) => match options.exp_tilt_method {
            ExpTiltMethod::ProximalNewton => exp_tilt::proximal_newton(problem, data, start, options),
            ExpTiltMethod::ProximalGradient => {
                exp_tilt::proximal_gradient(problem, data, start, options)
            }
        },
        Workspace::Ls(gram) => Ok(weighted_ls::coordinate_descent(problem, gram, start, options)),
    }
}

/// Fits a decreasing sequence of penalty levels with warm starts. Stops at
/// the first failure, returning the fits so far together with the error.
pub fn solve_path(
    problem: &PenalizedProblem<'_>,
    lambdas: &[f64],
    options: &SolverOptions,
) -> (Vec<FitResult>, Option<SolverError>) {
    let mut work = Workspace::new(problem);
    let mut start = problem.intercept_only();
    let mut fits = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        match solve_prepared(&problem.with_lambda(lambda), &mut work, &start, options) {
            Ok(fit) => {
                start.copy_from_slice(fit.coefficients.values());
                fits.push(fit);
            }
            Err(e) => return (fits, Some(e)),
        }
    }
    (fits, None)
}
