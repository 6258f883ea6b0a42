use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::model::{GaussianSampler, Model, ModelSpec, SIGNAL_DIM};
use crate::error::DataError;

/// Monte Carlo value of the target with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OracleEstimate {
    pub value: f64,
    pub mc_se: f64,
    pub draws: usize,
}

/// θ* = E(Y₁ − Y₀ | T = 1, R = 1) = −E[μ₀ | T = 1, R = 1].
///
/// Covariates are drawn from the unshifted N(0, Σ) law and reweighted by
/// pr(T = 1, R = 1 | x) up to a constant: δ(x) for Model 1 and p(x) for
/// Model 2, whose primary covariates follow that law. Only the first four
/// coordinates matter, so the result does not depend on d. The standard
/// error is the delta-method error of the ratio estimator.
pub fn oracle_theta(spec: &ModelSpec, draws: usize, seed: u64) -> Result<OracleEstimate, DataError> {
    spec.validate()?;
    if draws < 2 {
        return Err(DataError::InvalidSchema("oracle needs at least 2 draws".into()));
    }
    let sampler = GaussianSampler::new(&spec.covariance(SIGNAL_DIM))
        .ok_or_else(|| DataError::InvalidSchema("covariance is not positive definite".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = [0.0; SIGNAL_DIM];
    let mut u = [0.0; SIGNAL_DIM];
    // running sums of w, w·μ, w², w²μ, w²μ²
    let (mut sw, mut swm, mut sww, mut swwm, mut swwmm) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for _ in 0..draws {
        sampler.sample_into(&mut rng, &mut z, &mut u);
        let w = match spec.model {
            Model::M1 => spec.delta.expect("validated").eval(&u),
            _ => spec.propensity.eval(&u),
        };
        let mu = spec.control_mean(&u);
        sw += w;
        swm += w * mu;
        sww += w * w;
        swwm += w * w * mu;
        swwmm += w * w * mu * mu;
    }
    let n = draws as f64;
    let ratio = swm / sw;
    // influence of the ratio: w(μ − ratio)/E[w]
    let mean_w = sw / n;
    let second = (swwmm - 2.0 * ratio * swwm + ratio * ratio * sww) / n;
    let mc_se = (second / (mean_w * mean_w) / n).sqrt();
    Ok(OracleEstimate {
        value: -ratio,
        mc_se,
        draws,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulation::model::Sizing;

    #[test]
    fn zero_outcome_gives_zero() {
        let mut spec = ModelSpec::model1(100, 4);
        spec.outcome_coefs = [0.0; 4];
        let o = oracle_theta(&spec, 10_000, 1).unwrap();
        assert_eq!(o.value, 0.0);
    }

    #[test]
    fn constant_propensity_is_centered() {
        let spec = ModelSpec::new(Model::M2ii, 4, Sizing::Primary { n: 10, m: 10 });
        let o = oracle_theta(&spec, 1_000_000, 2).unwrap();
        assert!(o.value.abs() < 3.0 * o.mc_se, "{o:?}");
    }

    #[test]
    fn se_scales_with_draws() {
        let spec = ModelSpec::model1(100, 4);
        let small = oracle_theta(&spec, 200_000, 3).unwrap();
        let large = oracle_theta(&spec, 800_000, 3).unwrap();
        let ratio = small.mc_se / large.mc_se;
        assert!((ratio - 2.0).abs() < 0.1, "{ratio}");
    }

    #[test]
    fn independent_of_dimension() {
        let a = oracle_theta(&ModelSpec::model1(100, 4), 50_000, 7).unwrap();
        let b = oracle_theta(&ModelSpec::model1(100, 40), 50_000, 7).unwrap();
        assert_eq!(a, b);
    }
}
