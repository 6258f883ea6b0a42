use std::collections::BTreeMap;
use std::io::Write;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{generate_with, GaussianSampler, Model, ModelSpec, Sizing};
use super::oracle::{oracle_theta, OracleEstimate};
use crate::error::{DataError, Error};
use crate::estimators::{infer, InferOptions, Method};
use crate::solver::{fit_nuisances, LambdaPolicy, NuisanceOptions};

/// Share of failed replicates above which a cell is flagged.
pub const FAILURE_FLAG_SHARE: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub reps: usize,
    pub lambda: LambdaPolicy,
    pub nuisance: NuisanceOptions,
    pub level: f64,
    pub clip_a: bool,
    pub seed: u64,
    /// Worker threads; `None` uses the global pool.
    pub jobs: Option<usize>,
    pub oracle_draws: usize,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            reps: 400,
            lambda: LambdaPolicy::default(),
            nuisance: NuisanceOptions::default(),
            level: 0.95,
            clip_a: false,
            seed: 0,
            jobs: None,
            oracle_draws: 2_000_000,
        }
    }
}

/// What one replicate reports for each method, in the order nv, eff, safe.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicateOutcome {
    pub theta: [f64; 3],
    pub std_error: [f64; 3],
    /// V̂ = mean(φ²), before division by N.
    pub v: [f64; 3],
    pub ci: [[f64; 2]; 3],
    pub a_hat: f64,
    pub all_converged: bool,
}

impl ReplicateOutcome {
    pub fn covers(&self, method: Method, value: f64) -> bool {
        let [lo, hi] = self.ci[method_index(method)];
        lo <= value && value <= hi
    }
}

fn method_index(m: Method) -> usize {
    match m {
        Method::Nv => 0,
        Method::Eff => 1,
        Method::Safe => 2,
    }
}

/// Generator for replicate `rep`: stream `rep` of the ChaCha8 generator
/// keyed by `seed`.
pub fn replicate_rng(seed: u64, rep: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep);
    rng
}

/// Generates and analyses one replicate. A CV policy gets its fold seed
/// from the replicate stream.
pub fn run_replicate(
    spec: &ModelSpec,
    sampler: &GaussianSampler,
    rep: u64,
    config: &StudyConfig,
) -> Result<ReplicateOutcome, Error> {
    let mut rng = replicate_rng(config.seed, rep);
    let data = generate_with(spec, sampler, &mut rng)?;
    let policy = match &config.lambda {
        LambdaPolicy::Cv(cv) => {
            let mut cv = cv.clone();
            cv.seed = rng.next_u64();
            LambdaPolicy::Cv(cv)
        }
        fixed => fixed.clone(),
    };
    let fits = fit_nuisances(&data, &policy, &config.nuisance)?;
    let est = infer(
        &data,
        &fits,
        config.level,
        InferOptions {
            clip_a: config.clip_a,
        },
    )?;
    let r = est.reports();
    Ok(ReplicateOutcome {
        theta: r.map(|x| x.theta),
        std_error: r.map(|x| x.std_error),
        v: r.map(|x| x.variance * data.len() as f64),
        ci: r.map(|x| [x.ci_lower, x.ci_upper]),
        a_hat: est.a_hat,
        all_converged: fits.all_converged(),
    })
}

/// One (cell, method) line of a study.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub model: Model,
    /// N for Model 1, n for Model 2.
    pub size: usize,
    pub n_total: usize,
    pub d: usize,
    pub method: Method,
    pub bias: f64,
    pub sd: f64,
    pub mean_se: f64,
    pub coverage: f64,
    /// mean(V̂_method) / mean(V̂_nv).
    pub are: f64,
    pub reps: usize,
    pub failures: usize,
    pub theta_star: f64,
    pub theta_star_se: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsTable {
    pub rows: Vec<MetricsRow>,
    pub reps: usize,
    pub mc_seed: u64,
    /// Failure reasons over all cells, by message.
    pub failure_reasons: BTreeMap<String, usize>,
}

impl MetricsTable {
    pub const CSV_HEADER: &'static str = "model,size,n_total,d,method,bias,sd,mean_se,coverage,are,reps,failures,theta_star,theta_star_se,flagged";

    pub fn row(&self, model: Model, size: usize, d: usize, method: Method) -> Option<&MetricsRow> {
        self.rows
            .iter()
            .find(|r| r.model == model && r.size == size && r.d == d && r.method == method)
    }

    pub fn any_flagged(&self) -> bool {
        self.rows.iter().any(|r| r.flagged)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{:.6},{:.2e},{}",
                r.model.name(),
                r.size,
                r.n_total,
                r.d,
                r.method.name(),
                r.bias,
                r.sd,
                r.mean_se,
                r.coverage,
                r.are,
                r.reps,
                r.failures,
                r.theta_star,
                r.theta_star_se,
                r.flagged
            )?;
        }
        Ok(())
    }
}

/// Aggregates successful replicates of one cell against θ*.
pub fn summarize(
    spec: &ModelSpec,
    outcomes: &[ReplicateOutcome],
    failures: usize,
    oracle: OracleEstimate,
) -> Vec<MetricsRow> {
    let b = outcomes.len();
    let mean = |f: &dyn Fn(&ReplicateOutcome) -> f64| {
        outcomes.iter().map(f).sum::<f64>() / b as f64
    };
    let mean_v_nv = mean(&|o| o.v[0]);
    let flagged = failures as f64 > FAILURE_FLAG_SHARE * (b + failures) as f64;
    Method::ALL
        .iter()
        .map(|&method| {
            let k = method_index(method);
            let avg = mean(&|o| o.theta[k]);
            let sd = if b > 1 {
                (outcomes.iter().map(|o| (o.theta[k] - avg).powi(2)).sum::<f64>() / (b - 1) as f64)
                    .sqrt()
            } else {
                f64::NAN
            };
            MetricsRow {
                model: spec.model,
                size: spec.sizing.label(),
                n_total: spec.sizing.total(),
                d: spec.d,
                method,
                bias: avg - oracle.value,
                sd,
                mean_se: mean(&|o| o.std_error[k]),
                coverage: mean(&|o| o.covers(method, oracle.value) as u8 as f64),
                are: mean(&|o| o.v[k]) / mean_v_nv,
                reps: b,
                failures,
                theta_star: oracle.value,
                theta_star_se: oracle.mc_se,
                flagged,
            }
        })
        .collect()
}

fn reason(e: &Error) -> String {
    format!("{}: {}", e.module(), e)
        .split(|c: char| c.is_ascii_digit())
        .next()
        .unwrap_or_default()
        .trim_end()
        .to_string()
}

/// Runs every spec in `cells` for `config.reps` replicates. Replicate `b`
/// of every cell uses stream `b` of the seed, so each cell is reproducible
/// on its own. Replicates that error or leave a fit unconverged are
/// excluded and counted as failures.
pub fn run_grid(cells: &[ModelSpec], config: &StudyConfig) -> Result<MetricsTable, Error> {
    if config.reps < 2 {
        return Err(Error::Config("a study needs at least 2 replicates".into()));
    }
    let pool = match config.jobs {
        Some(j) => Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(j.max(1))
                .build()
                .map_err(|e| Error::Config(e.to_string()))?,
        ),
        None => None,
    };
    let mut rows = Vec::new();
    let mut failure_reasons = BTreeMap::new();
    let mut oracles: BTreeMap<&'static str, OracleEstimate> = BTreeMap::new();
    for spec in cells {
        spec.validate()?;
        let oracle = match oracles.get(spec.model.name()) {
            Some(o) => *o,
            None => {
                let o = oracle_theta(spec, config.oracle_draws, config.seed)?;
                oracles.insert(spec.model.name(), o);
                o
            }
        };
        let sampler = GaussianSampler::new(&spec.covariance(spec.d))
            .ok_or_else(|| DataError::InvalidSchema("covariance is not positive definite".into()))?;
        let work = || -> Vec<Result<ReplicateOutcome, Error>> {
            (0..config.reps as u64)
                .into_par_iter()
                .map(|rep| run_replicate(spec, &sampler, rep, config))
                .collect()
        };
        let results = match &pool {
            Some(p) => p.install(work),
            None => work(),
        };
        let mut ok = Vec::with_capacity(results.len());
        let mut failures = 0;
        for r in results {
            match r {
                Ok(o) if o.all_converged => ok.push(o),
                Ok(_) => {
                    failures += 1;
                    *failure_reasons.entry("solver: not converged".to_string()).or_insert(0) += 1;
                }
                Err(e) => {
                    failures += 1;
                    *failure_reasons.entry(reason(&e)).or_insert(0) += 1;
                }
            }
        }
        if ok.len() < 2 {
            return Err(Error::Config(format!(
                "cell {} size {} d {}: only {} of {} replicates succeeded",
                spec.model.name(),
                spec.sizing.label(),
                spec.d,
                ok.len(),
                config.reps
            )));
        }
        rows.extend(summarize(spec, &ok, failures, oracle));
    }
    Ok(MetricsTable {
        rows,
        reps: config.reps,
        mc_seed: config.seed,
        failure_reasons,
    })
}

/// One spec evaluated at several sizes.
pub fn run_study(spec: &ModelSpec, sizes: &[Sizing], config: &StudyConfig) -> Result<MetricsTable, Error> {
    let cells: Vec<ModelSpec> = sizes.iter().map(|&s| spec.with_sizing(s)).collect();
    run_grid(&cells, config)
}

/// External block size used by Model 2 cases (i) and (ii).
pub const EXTERNAL_CONTROLS: usize = 1000;

/// The nine cells of a published table: 2 (Model 1), 3 (Model 2 case i),
/// 4 (case ii) or 5 (case iii). Cells are ordered by size, then d.
pub fn paper_table(table: u8) -> Option<Vec<ModelSpec>> {
    let (model, sizes, dims): (Model, [usize; 3], [usize; 3]) = match table {
        2 => (Model::M1, [1000, 2000, 3000], [4, 150, 1000]),
        3 => (Model::M2i, [400, 800, 1200], [4, 100, 1000]),
        4 => (Model::M2ii, [400, 800, 1200], [4, 150, 1000]),
        5 => (Model::M2iii, [400, 800, 1200], [4, 150, 1000]),
        _ => return None,
    };
    let mut cells = Vec::with_capacity(9);
    for &size in &sizes {
        for &d in &dims {
            cells.push(match model {
                Model::M1 => ModelSpec::model1(size, d),
                _ => ModelSpec::model2(model, size, EXTERNAL_CONTROLS, d),
            });
        }
    }
    Some(cells)
}
