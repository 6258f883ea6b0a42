//! K-fold cross-validation over a λ grid.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::nuisance::{build_problem, NuisanceKind};
use super::{solve_prepared, CoefficientVector, PenalizedProblem, SolverOptions, Workspace};
use crate::dataset::CombinedDataset;
use crate::error::SolverError;

const STRATUM_NAMES: [&str; 3] = ["treated-primary", "control-primary", "external"];

/// Per-row (r, t) cell: 0 treated primary, 1 primary control, 2 external.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Strata(Vec<u8>);

impl Strata {
    pub fn from_dataset(data: &CombinedDataset) -> Self {
        Strata(
            data.source()
                .iter()
                .zip(data.treatment())
                .map(|(&r, &t)| match (r, t) {
                    (true, true) => 0,
                    (true, false) => 1,
                    _ => 2,
                })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Fold label per row. Rows are shuffled within each stratum by a
    /// seeded generator and dealt round-robin, so every non-empty stratum
    /// is spread over all folds. Empty strata are allowed.
    pub fn assign_folds(&self, folds: usize, seed: u64) -> Result<Vec<usize>, SolverError> {
        if folds < 2 {
            return Err(SolverError::InvalidProblem(format!(
                "need at least 2 folds, got {folds}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut labels = vec![0; self.0.len()];
        for cell in 0..3u8 {
            let mut idx: Vec<usize> = (0..self.0.len()).filter(|&i| self.0[i] == cell).collect();
            if idx.is_empty() {
                continue;
            }
            if idx.len() < folds {
                return Err(SolverError::FoldInfeasible {
                    stratum: STRATUM_NAMES[cell as usize],
                    count: idx.len(),
                    folds,
                });
            }
            idx.shuffle(&mut rng);
            for (k, &i) in idx.iter().enumerate() {
                labels[i] = k % folds;
            }
        }
        Ok(labels)
    }
}

/// `points` log-spaced values from `lambda_max` down to `ratio·lambda_max`.
pub fn default_grid(lambda_max: f64, points: usize, ratio: f64) -> Vec<f64> {
    match points {
        0 => Vec::new(),
        1 => vec![lambda_max],
        _ => {
            let (hi, lo) = (lambda_max.ln(), (lambda_max * ratio).ln());
            (0..points)
                .map(|k| (hi + (lo - hi) * k as f64 / (points - 1) as f64).exp())
                .collect()
        }
    }
}

/// Mean held-out loss for every grid value, plus the selection.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CvResult {
    /// Grid in decreasing order.
    pub grid: Vec<f64>,
    pub mean_loss: Vec<f64>,
    pub selected: f64,
    pub selected_index: usize,
    pub folds: usize,
}

fn checked_grid(grid: &[f64], problem: &PenalizedProblem<'_>) -> Result<Vec<f64>, SolverError> {
    if grid.is_empty() {
        return Err(SolverError::InvalidProblem("empty λ grid".into()));
    }
    if grid.iter().any(|&l| !(l >= 0.0 && l.is_finite())) {
        return Err(SolverError::InvalidProblem(
            "λ grid must be finite and nonnegative".into(),
        ));
    }
    let mut sorted = grid.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    sorted.dedup();
    if sorted.last() == Some(&0.0) {
        let rows = (0..problem.n_rows())
            .filter(|&i| problem.loss().active_row(i))
            .count();
        if problem.n_coefs() >= rows {
            return Err(SolverError::InvalidProblem(format!(
                "λ = 0 needs more active rows ({rows}) than coefficients ({})",
                problem.n_coefs()
            )));
        }
    }
    Ok(sorted)
}

/// Cross-validates `problem` over `grid`. Each fold's training fit runs the
/// whole grid from the largest λ down with warm starts; the held-out score
/// is the unpenalized loss on the validation rows. A training fit that
/// diverges scores +∞ for that λ and every smaller one. Ties go to the
/// larger λ.
pub fn cross_validate(
    problem: &PenalizedProblem<'_>,
    strata: &Strata,
    folds: usize,
    grid: &[f64],
    seed: u64,
    options: &SolverOptions,
) -> Result<CvResult, SolverError> {
    if strata.len() != problem.n_rows() {
        return Err(SolverError::InvalidProblem(
            "strata length does not match problem rows".into(),
        ));
    }
    let grid = checked_grid(grid, problem)?;
    if grid.len() == 1 {
        return Ok(CvResult {
            selected: grid[0],
            mean_loss: vec![f64::NAN],
            grid,
            selected_index: 0,
            folds,
        });
    }
    let labels = strata.assign_folds(folds, seed)?;
    let mut total = vec![0.0; grid.len()];
    for fold in 0..folds {
        let (train, valid): (Vec<usize>, Vec<usize>) =
            (0..labels.len()).partition(|&i| labels[i] != fold);
        let losses = fold_path(problem, &train, &valid, &grid, options);
        for (t, l) in total.iter_mut().zip(losses) {
            *t += l;
        }
    }
    let mean_loss: Vec<f64> = total.iter().map(|t| t / folds as f64).collect();
    let mut best = 0;
    for (k, &l) in mean_loss.iter().enumerate() {
        if l < mean_loss[best] {
            best = k;
        }
    }
    Ok(CvResult {
        selected: grid[best],
        selected_index: best,
        grid,
        mean_loss,
        folds,
    })
}

fn fold_path(
    problem: &PenalizedProblem<'_>,
    train: &[usize],
    valid: &[usize],
    grid: &[f64],
    options: &SolverOptions,
) -> Vec<f64> {
    let mut losses = vec![f64::INFINITY; grid.len()];
    let train_problem = problem.select_rows(train);
    if train_problem.validate().is_err() {
        return losses;
    }
    let valid_problem = problem.select_rows(valid);
    let mut work = Workspace::new(&train_problem);
    let mut start = train_problem.intercept_only();
    for (k, &lambda) in grid.iter().enumerate() {
        match solve_prepared(&train_problem.with_lambda(lambda), &mut work, &start, options) {
            Ok(fit) => {
                start.copy_from_slice(fit.coefficients.values());
                let loss = valid_problem.smooth_loss(&start);
                losses[k] = if loss.is_finite() { loss } else { f64::INFINITY };
            }
            Err(_) => break,
        }
    }
    losses
}

/// Selects λ for one of the four nuisance losses on `data` (used as given,
/// no rescaling). `frozen` carries γ̂ for the efficient outcome model or β̂
/// for the naive one, expressed on `data`'s design.
pub fn select_lambda_cv(
    data: &CombinedDataset,
    kind: NuisanceKind,
    frozen: Option<&CoefficientVector>,
    folds: usize,
    grid: &[f64],
    seed: u64,
    options: &SolverOptions,
) -> Result<CvResult, SolverError> {
    let problem = build_problem(data, kind, frozen, 0.0)?;
    cross_validate(
        &problem,
        &Strata::from_dataset(data),
        folds,
        grid,
        seed,
        options,
    )
}
