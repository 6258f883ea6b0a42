use super::columns::{dot, Columns};
use super::{kkt_from_gradient, soft_threshold, CoefficientVector, FitResult, Loss};
use super::{PenalizedProblem, SolverOptions};

/// Weighted cross-products of a least-squares problem, restricted to the
/// rows with positive weight. Columns of G = XᵀWX/N are filled on demand,
/// so only coordinates that ever move pay for their column.
#[derive(Debug, Clone)]
pub(crate) struct Gram {
    cols: Columns,
    w: Vec<f64>,
    inv_n: f64,
    /// XᵀWy / N
    q: Vec<f64>,
    /// yᵀWy / N
    yy: f64,
    diag: Vec<f64>,
    cache: Vec<Vec<f64>>,
}

impl Gram {
    pub(crate) fn new(problem: &PenalizedProblem<'_>) -> Self {
        let Loss::WeightedLs { weights, response } = problem.loss() else {
            unreachable!("Gram built for a non-quadratic loss")
        };
        let rows: Vec<usize> = (0..weights.len()).filter(|&i| weights[i] > 0.0).collect();
        let cols = Columns::from_rows(problem.design(), &rows);
        let w: Vec<f64> = rows.iter().map(|&i| weights[i]).collect();
        let wy: Vec<f64> = rows.iter().map(|&i| weights[i] * response[i]).collect();
        let inv_n = 1.0 / weights.len() as f64;
        let p = cols.cols();
        let q = cols.scaled_tmul(&wy, inv_n);
        let yy = rows.iter().zip(&wy).map(|(&i, v)| v * response[i]).sum::<f64>() * inv_n;
        let diag = (0..p)
            .map(|j| {
                let x = cols.col(j);
                w.iter().zip(x).map(|(wi, xi)| wi * xi * xi).sum::<f64>() * inv_n
            })
            .collect();
        Gram {
            cols,
            w,
            inv_n,
            q,
            yy,
            diag,
            cache: vec![Vec::new(); p],
        }
    }

    fn ensure(&mut self, k: usize) {
        if self.cache[k].is_empty() {
            let wx: Vec<f64> = self.w.iter().zip(self.cols.col(k)).map(|(a, b)| a * b).collect();
            self.cache[k] = self.cols.scaled_tmul(&wx, self.inv_n);
        }
    }

    /// G c over the nonzero coordinates of `c`.
    fn times(&mut self, c: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; c.len()];
        for (k, &ck) in c.iter().enumerate() {
            if ck != 0.0 {
                self.ensure(k);
                for (o, g) in out.iter_mut().zip(&self.cache[k]) {
                    *o += ck * g;
                }
            }
        }
        out
    }
}

/// Cyclic coordinate descent with soft-thresholding on the Gram form
/// ½cᵀGc − qᵀc. One iteration is a full sweep over every coordinate
/// followed by sweeps over the active set.
pub(super) fn coordinate_descent(
    problem: &PenalizedProblem<'_>,
    gram: &mut Gram,
    start: &[f64],
    options: &SolverOptions,
) -> FitResult {
    let mask = problem.penalty_mask();
    let lambda = problem.lambda();
    let p = gram.q.len();

    let mut c = start.to_vec();
    let penalty = |c: &[f64]| -> f64 {
        lambda
            * c.iter()
                .zip(mask)
                .filter(|(_, &m)| m)
                .map(|(v, _)| v.abs())
                .sum::<f64>()
    };
    let objective = |c: &[f64], gc: &[f64], q: &[f64], yy: f64| -> f64 {
        0.5 * yy - dot(q, c) + 0.5 * dot(c, gc) + penalty(c)
    };

    let mut gc = gram.times(&c);
    let mut f_obj = objective(&c, &gc, &gram.q, gram.yy);
    let mut trace = vec![f_obj];
    let mut rel = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;
    let mut kkt;

    let update = |j: usize, c: &mut [f64], gc: &mut [f64], gram: &mut Gram| -> f64 {
        let a = gram.diag[j];
        if a <= 0.0 {
            return 0.0;
        }
        let rho = gram.q[j] - gc[j] + a * c[j];
        let new = if mask[j] {
            soft_threshold(rho, lambda) / a
        } else {
            rho / a
        };
        let d = new - c[j];
        if d != 0.0 {
            gram.ensure(j);
            c[j] = new;
            for (o, g) in gc.iter_mut().zip(&gram.cache[j]) {
                *o += d * g;
            }
        }
        (a * d).abs()
    };

    loop {
        let g: Vec<f64> = gc.iter().zip(&gram.q).map(|(a, b)| a - b).collect();
        kkt = kkt_from_gradient(&g, &c, lambda, mask);
        if kkt <= options.kkt_tol && rel <= options.rel_tol {
            converged = true;
            break;
        }
        if iterations >= options.max_iter {
            break;
        }
        iterations += 1;
        let inner_tol = 0.01 * kkt.min(1.0).max(options.kkt_tol);

        for j in 0..p {
            update(j, &mut c, &mut gc, gram);
        }
        let active: Vec<usize> = (0..p).filter(|&j| c[j] != 0.0 || !mask[j]).collect();
        for _ in 0..1000 {
            let mut change: f64 = 0.0;
            for &j in &active {
                change = change.max(update(j, &mut c, &mut gc, gram));
            }
            if change <= inner_tol {
                break;
            }
        }
        // rebuild to stop rounding drift in the running product
        gc = gram.times(&c);
        let f_new = objective(&c, &gc, &gram.q, gram.yy);
        rel = (f_obj - f_new).abs() / f_new.abs().max(1.0);
        f_obj = f_new;
        trace.push(f_obj);
    }

    FitResult {
        coefficients: CoefficientVector::new(c),
        lambda,
        objective_trace: trace,
        converged,
        iterations,
        kkt_violation: kkt,
    }
}
