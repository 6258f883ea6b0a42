use nalgebra::DMatrix;
use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::CombinedDataset;
use crate::error::DataError;

/// Mean of U + ((U + 1)₊)² for U ~ N(0, 1), i.e. 2Φ(1) + φ(1).
pub const DAGGER_MEAN: f64 = 1.924_660_216_656_229_4;
/// Standard deviation of U + ((U + 1)₊)² for U ~ N(0, 1).
pub const DAGGER_SD: f64 = 3.390_312_189_249_219;

/// Number of leading covariates that drive the outcome and the shift.
pub const SIGNAL_DIM: usize = 4;

pub fn expit(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// The standardized transform used for the misspecified outcome model.
pub fn dagger(u: f64) -> f64 {
    let k = (u + 1.0).max(0.0);
    (u + k * k - DAGGER_MEAN) / DAGGER_SD
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Model {
    /// Correct tilt models, misspecified linear outcome model.
    M1,
    /// External mean shift with a covariate-dependent propensity; the
    /// combined-study treated probability is misspecified.
    M2i,
    /// External mean shift, constant propensity, m external rows.
    M2ii,
    /// As `M2ii` but source membership is random with a fixed share.
    M2iii,
}

impl Model {
    pub fn name(self) -> &'static str {
        match self {
            Model::M1 => "M1",
            Model::M2i => "M2i",
            Model::M2ii => "M2ii",
            Model::M2iii => "M2iii",
        }
    }

    pub fn parse(s: &str) -> Option<Model> {
        match s.to_ascii_lowercase().as_str() {
            "m1" | "1" => Some(Model::M1),
            "m2i" | "2i" => Some(Model::M2i),
            "m2ii" | "2ii" => Some(Model::M2ii),
            "m2iii" | "2iii" => Some(Model::M2iii),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sizing {
    /// N rows in total; source membership drawn per row.
    Total(usize),
    /// n primary rows and m external rows, both fixed.
    Primary { n: usize, m: usize },
    /// n/ratio rows in total with R ~ Bernoulli(ratio).
    PrimaryRatio { n: usize, ratio: f64 },
}

impl Sizing {
    pub fn total(&self) -> usize {
        match *self {
            Sizing::Total(n) => n,
            Sizing::Primary { n, m } => n + m,
            Sizing::PrimaryRatio { n, ratio } => (n as f64 / ratio).round() as usize,
        }
    }

    /// The size label used in tables: N for totals, n otherwise.
    pub fn label(&self) -> usize {
        match *self {
            Sizing::Total(n) => n,
            Sizing::Primary { n, .. } | Sizing::PrimaryRatio { n, .. } => n,
        }
    }
}

/// expit(intercept + slope·x_coord), or a constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Propensity {
    Logistic { intercept: f64, slope: f64, coord: usize },
    Constant(f64),
}

impl Propensity {
    /// `x` holds covariates without the intercept; `coord` is 1-based.
    pub fn eval(&self, x: &[f64]) -> f64 {
        match *self {
            Propensity::Logistic {
                intercept,
                slope,
                coord,
            } => expit(intercept + slope * x[coord - 1]),
            Propensity::Constant(p) => p,
        }
    }
}

/// Ground truth of one simulation design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub model: Model,
    pub d: usize,
    pub sizing: Sizing,
    /// Σ_jk = cov_decay^|j−k|.
    pub cov_decay: f64,
    /// External mean on the first four coordinates (Model 2).
    pub mu_shift: f64,
    pub outcome_coefs: [f64; SIGNAL_DIM],
    pub noise_var0: f64,
    pub noise_var1: f64,
    /// p(x) = pr(T = 1 | x, R = 1).
    pub propensity: Propensity,
    /// δ(x) = pr(T = 1, R = 1 | x); Model 1 only.
    pub delta: Option<Propensity>,
}

impl ModelSpec {
    /// Defaults for `model`. Model 1 uses p(x) = expit(−1 + 0.125x₁) so that
    /// about 27% of primary subjects are treated.
    pub fn new(model: Model, d: usize, sizing: Sizing) -> Self {
        let (propensity, delta) = match model {
            Model::M1 => (
                Propensity::Logistic {
                    intercept: -1.0,
                    slope: 0.125,
                    coord: 1,
                },
                Some(Propensity::Logistic {
                    intercept: -2.0,
                    slope: 0.125,
                    coord: 1,
                }),
            ),
            Model::M2i => (
                Propensity::Logistic {
                    intercept: -0.5,
                    slope: 0.125,
                    coord: 4,
                },
                None,
            ),
            Model::M2ii | Model::M2iii => (Propensity::Constant(0.7), None),
        };
        ModelSpec {
            model,
            d,
            sizing,
            cov_decay: 0.5,
            mu_shift: -3.0,
            outcome_coefs: [1.0, 0.5, 0.25, 0.125],
            noise_var0: 1.0,
            noise_var1: 0.5,
            propensity,
            delta,
        }
    }

    /// Model 1 with N rows.
    pub fn model1(n_total: usize, d: usize) -> Self {
        Self::new(Model::M1, d, Sizing::Total(n_total))
    }

    /// Model 2 case (i) or (ii) with n primary and m external rows, or
    /// case (iii) with n primary rows making up a third of the total.
    pub fn model2(model: Model, n: usize, m: usize, d: usize) -> Self {
        let sizing = match model {
            Model::M2iii => Sizing::PrimaryRatio { n, ratio: 1.0 / 3.0 },
            _ => Sizing::Primary { n, m },
        };
        Self::new(model, d, sizing)
    }

    pub fn with_sizing(&self, sizing: Sizing) -> Self {
        ModelSpec {
            sizing,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::InvalidSchema(m.to_string()));
        if self.d < SIGNAL_DIM {
            return bad("simulation needs d ≥ 4");
        }
        if !(self.noise_var0 > 0.0 && self.noise_var1 > 0.0) {
            return bad("noise variances must be positive");
        }
        if !(self.cov_decay.abs() < 1.0) {
            return bad("cov_decay must lie in (−1, 1)");
        }
        match (self.model, self.sizing) {
            (Model::M1, Sizing::Total(n)) if n > 0 => {}
            (Model::M2i | Model::M2ii, Sizing::Primary { n, .. }) if n > 0 => {}
            (Model::M2iii, Sizing::PrimaryRatio { n, ratio }) if n > 0 && ratio > 0.0 && ratio <= 1.0 => {}
            _ => return bad("sizing does not fit the model"),
        }
        if self.model == Model::M1 && self.delta.is_none() {
            return bad("Model 1 needs δ(x)");
        }
        Ok(())
    }

    /// μ₀(x) on the first four coordinates of `x` (already transformed).
    pub fn mu0(&self, x: &[f64]) -> f64 {
        self.outcome_coefs
            .iter()
            .zip(x)
            .map(|(b, v)| b * v)
            .sum()
    }

    /// The outcome mean of a control with raw covariates `u`.
    pub fn control_mean(&self, u: &[f64]) -> f64 {
        match self.model {
            Model::M1 => {
                let mut t = [0.0; SIGNAL_DIM];
                for (k, v) in t.iter_mut().enumerate() {
                    *v = dagger(u[k]);
                }
                self.mu0(&t)
            }
            _ => self.mu0(u),
        }
    }

    /// pr(R = 1 | x) under Model 2 case (iii), using only the first four
    /// coordinates (the shift is zero elsewhere).
    pub fn membership_probability(&self, x: &[f64]) -> Option<f64> {
        let Sizing::PrimaryRatio { ratio, .. } = self.sizing else {
            return None;
        };
        let sigma = self.covariance(SIGNAL_DIM);
        let mu1 = nalgebra::DVector::from_element(SIGNAL_DIM, self.mu_shift);
        let s_inv_mu = sigma.cholesky()?.solve(&mu1);
        let quad = mu1.dot(&s_inv_mu);
        let lin: f64 = (0..SIGNAL_DIM).map(|k| (x[k] - self.mu_shift) * s_inv_mu[k]).sum();
        Some(expit((ratio / (1.0 - ratio)).ln() - lin - 0.5 * quad))
    }

    pub fn covariance(&self, d: usize) -> DMatrix<f64> {
        DMatrix::from_fn(d, d, |j, k| self.cov_decay.powi((j as i32 - k as i32).abs()))
    }
}

/// Draws rows of N(0, Σ) through the lower Cholesky factor of Σ.
#[derive(Debug, Clone)]
pub struct GaussianSampler {
    lower: Vec<f64>,
    d: usize,
}

impl GaussianSampler {
    pub fn new(sigma: &DMatrix<f64>) -> Option<Self> {
        let d = sigma.nrows();
        let l = sigma.clone().cholesky()?.l();
        let mut lower = Vec::with_capacity(d * (d + 1) / 2);
        for j in 0..d {
            for k in 0..=j {
                lower.push(l[(j, k)]);
            }
        }
        Some(GaussianSampler { lower, d })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    /// Writes L·z into `out` for fresh standard normals z.
    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, z: &mut [f64], out: &mut [f64]) {
        for v in z.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let mut off = 0;
        for j in 0..self.d {
            let row = &self.lower[off..off + j + 1];
            out[j] = row.iter().zip(&z[..=j]).map(|(a, b)| a * b).sum();
            off += j + 1;
        }
    }
}

/// Generates one dataset. Rows are drawn in order; for fixed-size Model 2
/// designs the primary block comes first.
pub fn generate<R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Result<CombinedDataset, DataError> {
    let sampler = GaussianSampler::new(&spec.covariance(spec.d))
        .ok_or_else(|| DataError::InvalidSchema("covariance is not positive definite".into()))?;
    generate_with(spec, &sampler, rng)
}

/// As [`generate`] but reuses a sampler built for `spec.d`.
pub fn generate_with<R: Rng + ?Sized>(
    spec: &ModelSpec,
    sampler: &GaussianSampler,
    rng: &mut R,
) -> Result<CombinedDataset, DataError> {
    spec.validate()?;
    if sampler.dim() != spec.d {
        return Err(DataError::InvalidSchema("sampler dimension differs from d".into()));
    }
    let d = spec.d;
    let total = spec.sizing.total();
    let mut x = Array2::<f64>::zeros((total, d));
    let mut r = Vec::with_capacity(total);
    let mut t = Vec::with_capacity(total);
    let mut y = Array1::<f64>::zeros(total);
    let mut z = vec![0.0; d];
    let mut u = vec![0.0; d];
    let sd0 = spec.noise_var0.sqrt();
    let sd1 = spec.noise_var1.sqrt();

    for i in 0..total {
        sampler.sample_into(rng, &mut z, &mut u);
        let primary = match spec.sizing {
            Sizing::Total(_) => {
                let delta = spec.delta.expect("validated").eval(&u);
                let p = spec.propensity.eval(&u);
                rng.gen::<f64>() < delta / p
            }
            Sizing::Primary { n, .. } => i < n,
            Sizing::PrimaryRatio { ratio, .. } => rng.gen::<f64>() < ratio,
        };
        if !primary && spec.model != Model::M1 {
            for v in u.iter_mut().take(SIGNAL_DIM) {
                *v += spec.mu_shift;
            }
        }
        let treated = primary && rng.gen::<f64>() < spec.propensity.eval(&u);
        let e0: f64 = rng.sample(StandardNormal);
        let e1: f64 = rng.sample(StandardNormal);
        y[i] = if treated {
            sd1 * e1
        } else {
            spec.control_mean(&u) + sd0 * e0
        };
        x.row_mut(i).assign(&ndarray::ArrayView1::from(&u[..]));
        r.push(primary);
        t.push(treated);
    }
    CombinedDataset::from_covariates(x.view(), r, t, y)
}

/// Model 1 dataset with N rows from a fixed seed.
pub fn gen_model1(n_total: usize, d: usize, seed: u64) -> Result<CombinedDataset, DataError> {
    generate(&ModelSpec::model1(n_total, d), &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Model 2 dataset for `case` (M2i, M2ii or M2iii) from a fixed seed.
pub fn gen_model2(case: Model, sizing: Sizing, d: usize, seed: u64) -> Result<CombinedDataset, DataError> {
    if case == Model::M1 {
        return Err(DataError::InvalidSchema("gen_model2 needs a Model 2 case".into()));
    }
    let spec = ModelSpec::new(case, d, sizing);
    generate(&spec, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frac(v: impl Iterator<Item = bool>) -> f64 {
        let (mut k, mut n) = (0usize, 0usize);
        for b in v {
            k += b as usize;
            n += 1;
        }
        k as f64 / n as f64
    }

    #[test]
    fn deterministic_per_seed() {
        let a = gen_model1(300, 6, 11).unwrap();
        let b = gen_model1(300, 6, 11).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, gen_model1(300, 6, 12).unwrap());
    }

    #[test]
    fn model1_shares() {
        let data = gen_model1(100_000, 4, 5).unwrap();
        let pi = data.pi_hat();
        let p = data.p_hat();
        assert!((pi - 0.445).abs() < 0.01, "π = {pi}");
        assert!((p - 0.27).abs() < 0.01, "p = {p}");
    }

    #[test]
    fn dagger_is_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100_000;
        let v: Vec<f64> = (0..n).map(|_| dagger(rng.sample(StandardNormal))).collect();
        let mean = v.iter().sum::<f64>() / n as f64;
        let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02, "{mean}");
        assert!((var - 1.0).abs() < 0.03, "{var}");
    }

    #[test]
    fn model2_fixed_external_block() {
        let data = gen_model2(Model::M2ii, Sizing::Primary { n: 800, m: 1000 }, 4, 9).unwrap();
        assert_eq!(data.n_primary(), 800);
        assert_eq!(data.n_external(), 1000);
        assert!(data.source()[800..].iter().all(|r| !r));
        assert!(data.treatment()[800..].iter().all(|t| !t));
        // external rows are shifted on the first four coordinates only
        let x = data.design();
        let ext_mean = |j: usize| x.column(j).iter().skip(800).sum::<f64>() / 1000.0;
        assert!((ext_mean(1) + 3.0).abs() < 0.15);
        assert!((ext_mean(4) + 3.0).abs() < 0.15);
    }

    #[test]
    fn model2_treated_fractions() {
        let sizing = Sizing::Primary { n: 100_000, m: 10 };
        let ii = gen_model2(Model::M2ii, sizing, 4, 1).unwrap();
        assert!((ii.p_hat() - 0.7).abs() < 0.005);
        let i = gen_model2(Model::M2i, sizing, 4, 2).unwrap();
        assert!((i.p_hat() - 0.378).abs() < 0.01, "{}", i.p_hat());
    }

    #[test]
    fn model2_case_iii_share_and_membership_formula() {
        let spec = ModelSpec::model2(Model::M2iii, 30_000, 0, 4);
        let data = generate(&spec, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(data.len(), 90_000);
        assert!((data.pi_hat() - 1.0 / 3.0).abs() < 0.01);
        // the closed-form pr(R = 1 | x) averages to the share and is
        // calibrated against realized membership
        let x = data.design();
        let probs: Vec<f64> = (0..data.len())
            .map(|i| {
                let row: Vec<f64> = x.row(i).iter().skip(1).copied().collect();
                spec.membership_probability(&row).unwrap()
            })
            .collect();
        let mean = probs.iter().sum::<f64>() / probs.len() as f64;
        assert!((mean - 1.0 / 3.0).abs() < 0.01);
        let mid: Vec<usize> = (0..data.len()).filter(|&i| probs[i] > 0.2 && probs[i] < 0.8).collect();
        let expected = mid.iter().map(|&i| probs[i]).sum::<f64>() / mid.len() as f64;
        let realized = frac(mid.iter().map(|&i| data.source()[i]));
        assert!((expected - realized).abs() < 0.03, "{expected} vs {realized}");
    }

    #[test]
    fn covariance_structure() {
        let spec = ModelSpec::model2(Model::M2ii, 100_000, 0, 6);
        let sampler = GaussianSampler::new(&spec.covariance(6)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 100_000;
        let mut z = vec![0.0; 6];
        let mut u = vec![0.0; 6];
        let mut sums = [[0.0; 6]; 6];
        for _ in 0..n {
            sampler.sample_into(&mut rng, &mut z, &mut u);
            for j in 0..6 {
                for k in 0..6 {
                    sums[j][k] += u[j] * u[k];
                }
            }
        }
        for j in 0..6 {
            for k in 0..6 {
                let cov = sums[j][k] / n as f64;
                let corr = cov / (sums[j][j] / n as f64 * sums[k][k] / n as f64).sqrt();
                let target = 0.5f64.powi((j as i32 - k as i32).abs());
                assert!((corr - target).abs() < 0.01, "({j},{k}) {corr}");
            }
        }
    }

    #[test]
    fn invalid_specs() {
        let mut spec = ModelSpec::model1(100, 3);
        assert!(spec.validate().is_err());
        spec.d = 4;
        spec.noise_var1 = 0.0;
        assert!(spec.validate().is_err());
        let wrong = ModelSpec::new(Model::M2ii, 4, Sizing::Total(100));
        assert!(wrong.validate().is_err());
    }
}
