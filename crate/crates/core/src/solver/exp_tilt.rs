use super::columns::{axpy, dot, weighted_dot, weighted_sq, Columns};
use super::{kkt_from_gradient, soft_threshold, CoefficientVector, FitResult, Loss};
use super::{PenalizedProblem, SolverOptions, EXP_GUARD};
use crate::error::SolverError;

const ARMIJO: f64 = 1e-4;
const MIN_STEP: f64 = 1e-14;
/// Sweeps allowed per inner solve; an inexact direction is still a descent
/// direction and the line search takes care of the rest.
const MAX_INNER_SWEEPS: usize = 100;
/// Rounds of working-set growth per inner solve.
const MAX_EXPANSIONS: usize = 20;

/// Rows of an exponential-tilt problem that carry weight, with the
/// design restricted to them. The normalization stays 1/N.
#[derive(Debug, Clone)]
pub(crate) struct TiltData {
    cols: Columns,
    exp_w: Vec<f64>,
    lin_w: Vec<f64>,
    inv_n: f64,
}

impl TiltData {
    pub(crate) fn new(problem: &PenalizedProblem<'_>) -> Self {
        let Loss::ExpTilt {
            exp_weights,
            lin_weights,
        } = problem.loss()
        else {
            unreachable!("tilt data built for another loss")
        };
        let rows: Vec<usize> = (0..exp_weights.len())
            .filter(|&i| exp_weights[i] != 0.0 || lin_weights[i] != 0.0)
            .collect();
        TiltData {
            cols: Columns::from_rows(problem.design(), &rows),
            exp_w: rows.iter().map(|&i| exp_weights[i]).collect(),
            lin_w: rows.iter().map(|&i| lin_weights[i]).collect(),
            inv_n: 1.0 / exp_weights.len() as f64,
        }
    }
}

struct Tilt<'p> {
    exp_w: &'p [f64],
    lin_w: &'p [f64],
    mask: &'p [bool],
    lambda: f64,
    inv_n: f64,
}

impl<'p> Tilt<'p> {
    fn new(problem: &'p PenalizedProblem<'_>, data: &'p TiltData) -> Self {
        Tilt {
            exp_w: &data.exp_w,
            lin_w: &data.lin_w,
            mask: problem.penalty_mask(),
            lambda: problem.lambda(),
            inv_n: data.inv_n,
        }
    }

    fn within_guard(&self, eta: &[f64]) -> bool {
        eta.iter().all(|h| h.abs() <= EXP_GUARD)
    }

    fn max_active_eta(&self, eta: &[f64]) -> f64 {
        eta.iter().fold(0.0, |m, h| m.max(h.abs()))
    }

    fn smooth(&self, eta: &[f64]) -> f64 {
        let mut s = 0.0;
        for ((&e, &l), &h) in self.exp_w.iter().zip(self.lin_w).zip(eta) {
            if e != 0.0 {
                s += e * h.exp();
            }
            if l != 0.0 {
                s -= l * h;
            }
        }
        s * self.inv_n
    }

    fn penalty(&self, c: &[f64]) -> f64 {
        self.lambda
            * c.iter()
                .zip(self.mask)
                .filter(|(_, &m)| m)
                .map(|(v, _)| v.abs())
                .sum::<f64>()
    }

    /// Per-row exp term e_i·exp(η_i).
    fn exp_terms(&self, eta: &[f64]) -> Vec<f64> {
        self.exp_w
            .iter()
            .zip(eta)
            .map(|(&e, &h)| if e != 0.0 { e * h.exp() } else { 0.0 })
            .collect()
    }

    fn gradient(&self, cols: &Columns, mu: &[f64]) -> Vec<f64> {
        let score: Vec<f64> = mu.iter().zip(self.lin_w).map(|(m, l)| m - l).collect();
        cols.scaled_tmul(&score, self.inv_n)
    }
}

fn relative_change(old: f64, new: f64) -> f64 {
    (old - new).abs() / new.abs().max(1.0)
}

/// The step had to be shortened to respect the guard and the iterate now
/// sits against it: the objective keeps decreasing towards the boundary.
fn pinned(tilt: &Tilt<'_>, eta: &[f64], hit_guard: bool) -> bool {
    hit_guard && tilt.max_active_eta(eta) > 0.9 * EXP_GUARD
}

/// Picks a feasible start: the given one if it respects the guard,
/// otherwise the intercept-only point.
fn feasible_start(
    problem: &PenalizedProblem<'_>,
    tilt: &Tilt<'_>,
    cols: &Columns,
    start: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let c = start.to_vec();
    let eta = cols.mul(&c);
    if tilt.within_guard(&eta) {
        return (c, eta);
    }
    let c = problem.intercept_only();
    let eta = cols.mul(&c);
    (c, eta)
}

/// Fisher scoring with an L1-aware coordinate-descent inner solver.
pub(super) fn proximal_newton(
    problem: &PenalizedProblem<'_>,
    data: &TiltData,
    start: &[f64],
    options: &SolverOptions,
) -> Result<FitResult, SolverError> {
    let tilt = Tilt::new(problem, data);
    let cols = &data.cols;
    let p = cols.cols();
    let n = cols.rows();
    let (mut c, mut eta) = feasible_start(problem, &tilt, cols, start);
    let mut f_obj = tilt.smooth(&eta) + tilt.penalty(&c);
    let mut trace = vec![f_obj];
    let mut rel = f64::INFINITY;
    let mut converged = false;
    let mut kkt;
    let mut iterations = 0;

    let mut hess = vec![0.0; n];
    let mut diag = vec![0.0; p];
    let mut b = vec![0.0; p];
    let mut u = vec![0.0; n];

    loop {
        let mu = tilt.exp_terms(&eta);
        let g = tilt.gradient(cols, &mu);
        kkt = kkt_from_gradient(&g, &c, tilt.lambda, tilt.mask);
        if kkt <= options.kkt_tol && rel <= options.rel_tol {
            converged = true;
            break;
        }
        if iterations >= options.max_iter {
            break;
        }
        iterations += 1;

        for (h, m) in hess.iter_mut().zip(&mu) {
            *h = m * tilt.inv_n;
        }
        for (j, a) in diag.iter_mut().enumerate() {
            *a = weighted_sq(&hess, cols.col(j));
        }
        b.copy_from_slice(&c);
        u.iter_mut().for_each(|v| *v = 0.0);
        let inner_tol = 0.01 * kkt.min(1.0).max(options.kkt_tol);
        quadratic_step(cols, &hess, &diag, &g, &tilt, &mut b, &mut u, inner_tol);

        // directional derivative of the penalized model
        let delta: Vec<f64> = b.iter().zip(&c).map(|(bj, cj)| bj - cj).collect();
        let descent = dot(&g, &delta) + tilt.penalty(&b) - tilt.penalty(&c);

        let mut step = 1.0;
        let mut hit_guard = false;
        let mut accepted = None;
        let mut trial = vec![0.0; n];
        while step >= MIN_STEP {
            for ((t, h), du) in trial.iter_mut().zip(&eta).zip(&u) {
                *t = h + step * du;
            }
            if !tilt.within_guard(&trial) {
                hit_guard = true;
                step *= 0.5;
                continue;
            }
            let cand: Vec<f64> = c.iter().zip(&delta).map(|(cj, dj)| cj + step * dj).collect();
            let f_new = tilt.smooth(&trial) + tilt.penalty(&cand);
            let slack = 8.0 * f64::EPSILON * f_obj.abs().max(1.0);
            if f_new <= f_obj + ARMIJO * step * descent.min(0.0) + slack {
                accepted = Some((cand, f_new));
                break;
            }
            step *= 0.5;
        }
        match accepted {
            Some((cand, f_new)) => {
                rel = relative_change(f_obj, f_new);
                c = cand;
                std::mem::swap(&mut eta, &mut trial);
                f_obj = f_new;
                trace.push(f_obj);
                if pinned(&tilt, &eta, hit_guard) {
                    return Err(SolverError::DivergentObjective {
                        iteration: iterations,
                    });
                }
            }
            None if hit_guard => {
                return Err(SolverError::DivergentObjective {
                    iteration: iterations,
                });
            }
            None => {
                // no descent left along the Newton direction
                let mu = tilt.exp_terms(&eta);
                let g = tilt.gradient(cols, &mu);
                kkt = kkt_from_gradient(&g, &c, tilt.lambda, tilt.mask);
                converged = kkt <= options.kkt_tol;
                break;
            }
        }
    }
    if !converged && tilt.max_active_eta(&eta) > 0.99 * EXP_GUARD {
        return Err(SolverError::DivergentObjective {
            iteration: iterations,
        });
    }
    Ok(FitResult {
        coefficients: CoefficientVector::new(c),
        lambda: tilt.lambda,
        objective_trace: trace,
        converged,
        iterations,
        kkt_violation: kkt,
    })
}

/// Minimizes gᵀ(b−c) + ½(b−c)ᵀXᵀHX(b−c) + λ‖b‖₁ over `b` in place and
/// leaves X(b−c) in `u`. Coordinate descent runs on the Gram matrix of a
/// working set (current support plus KKT violators at `b`), which grows
/// until no outside coordinate violates the optimality conditions.
#[allow(clippy::too_many_arguments)]
fn quadratic_step(
    cols: &Columns,
    hess: &[f64],
    diag: &[f64],
    g: &[f64],
    tilt: &Tilt<'_>,
    b: &mut [f64],
    u: &mut [f64],
    tol: f64,
) {
    let p = b.len();
    let c: Vec<f64> = b.to_vec();
    let mut in_set = vec![false; p];
    let mut work: Vec<usize> = Vec::new();
    let violates = |j: usize, grad: f64| tilt.mask[j] && grad.abs() > tilt.lambda + tol;
    for j in 0..p {
        if c[j] != 0.0 || !tilt.mask[j] || violates(j, g[j]) {
            in_set[j] = true;
            work.push(j);
        }
    }
    for _ in 0..MAX_EXPANSIONS {
        let k = work.len();
        // Gram of the working set under the Hessian weights
        let hx: Vec<Vec<f64>> = work
            .iter()
            .map(|&j| hess.iter().zip(cols.col(j)).map(|(h, x)| h * x).collect())
            .collect();
        let mut gram = vec![0.0; k * k];
        for a in 0..k {
            for bb in a..k {
                let v = dot(&hx[a], cols.col(work[bb]));
                gram[a * k + bb] = v;
                gram[bb * k + a] = v;
            }
        }
        // v = G_W (b − c)_W
        let mut v = vec![0.0; k];
        for a in 0..k {
            let da = b[work[a]] - c[work[a]];
            if da != 0.0 {
                for (vv, gr) in v.iter_mut().zip(&gram[a * k..(a + 1) * k]) {
                    *vv += da * gr;
                }
            }
        }
        for _ in 0..MAX_INNER_SWEEPS {
            let mut change: f64 = 0.0;
            for a in 0..k {
                let j = work[a];
                let curv = diag[j];
                if curv <= 0.0 {
                    continue;
                }
                let z = curv * b[j] - (g[j] + v[a]);
                let new = if tilt.mask[j] {
                    soft_threshold(z, tilt.lambda) / curv
                } else {
                    z / curv
                };
                let d = new - b[j];
                if d != 0.0 {
                    b[j] = new;
                    for (vv, gr) in v.iter_mut().zip(&gram[a * k..(a + 1) * k]) {
                        *vv += d * gr;
                    }
                    change = change.max((curv * d).abs());
                }
            }
            if change <= tol {
                break;
            }
        }
        u.iter_mut().for_each(|x| *x = 0.0);
        for &j in &work {
            let d = b[j] - c[j];
            if d != 0.0 {
                axpy(d, cols.col(j), u);
            }
        }
        let mut added = false;
        for j in 0..p {
            if !in_set[j] && violates(j, g[j] + weighted_dot(hess, cols.col(j), u)) {
                in_set[j] = true;
                work.push(j);
                added = true;
            }
        }
        if !added {
            return;
        }
    }
}

/// Proximal gradient with backtracking on the quadratic upper bound.
pub(super) fn proximal_gradient(
    problem: &PenalizedProblem<'_>,
    data: &TiltData,
    start: &[f64],
    options: &SolverOptions,
) -> Result<FitResult, SolverError> {
    let tilt = Tilt::new(problem, data);
    let cols = &data.cols;
    let (mut c, mut eta) = feasible_start(problem, &tilt, cols, start);
    let mut smooth = tilt.smooth(&eta);
    let mut f_obj = smooth + tilt.penalty(&c);
    let mut trace = vec![f_obj];
    let mut rel = f64::INFINITY;
    let mut converged = false;
    let mut kkt;
    let mut iterations = 0;
    let mut step = 1.0;

    loop {
        let mu = tilt.exp_terms(&eta);
        let g = tilt.gradient(cols, &mu);
        kkt = kkt_from_gradient(&g, &c, tilt.lambda, tilt.mask);
        if kkt <= options.kkt_tol && rel <= options.rel_tol {
            converged = true;
            break;
        }
        if iterations >= options.max_iter {
            break;
        }
        iterations += 1;

        let mut hit_guard = false;
        let mut accepted = None;
        while step >= MIN_STEP * 1e-6 {
            let cand: Vec<f64> = c
                .iter()
                .zip(&g)
                .zip(tilt.mask)
                .map(|((cj, gj), &m)| {
                    let z = cj - step * gj;
                    if m {
                        soft_threshold(z, step * tilt.lambda)
                    } else {
                        z
                    }
                })
                .collect();
            let trial = cols.mul(&cand);
            if !tilt.within_guard(&trial) {
                hit_guard = true;
                step *= 0.5;
                continue;
            }
            let s_new = tilt.smooth(&trial);
            let diff: Vec<f64> = cand.iter().zip(&c).map(|(a, b)| a - b).collect();
            let bound = smooth + dot(&g, &diff) + dot(&diff, &diff) / (2.0 * step);
            if s_new <= bound + 8.0 * f64::EPSILON * smooth.abs().max(1.0) {
                accepted = Some((cand, trial, s_new));
                break;
            }
            step *= 0.5;
        }
        match accepted {
            Some((cand, trial, s_new)) => {
                let f_new = s_new + tilt.penalty(&cand);
                rel = relative_change(f_obj, f_new);
                c = cand;
                eta = trial;
                smooth = s_new;
                f_obj = f_new;
                trace.push(f_obj);
                if pinned(&tilt, &eta, hit_guard) {
                    return Err(SolverError::DivergentObjective {
                        iteration: iterations,
                    });
                }
                step *= 1.5;
            }
            None if hit_guard => {
                return Err(SolverError::DivergentObjective {
                    iteration: iterations,
                })
            }
            None => break,
        }
    }
    if !converged && tilt.max_active_eta(&eta) > 0.99 * EXP_GUARD {
        return Err(SolverError::DivergentObjective {
            iteration: iterations,
        });
    }
    Ok(FitResult {
        coefficients: CoefficientVector::new(c),
        lambda: tilt.lambda,
        objective_trace: trace,
        converged,
        iterations,
        kkt_violation: kkt,
    })
}
