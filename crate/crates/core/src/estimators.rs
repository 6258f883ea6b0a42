//! ATT point estimators, influence functions and Wald inference.
//!
//! Three estimators are produced from the fitted nuisance models:
//!
//! * `nv`: uses the primary study only (β̂, α̂_nv);
//! * `eff`: uses primary and external controls (γ̂, α̂_eff);
//! * `safe`: the combination â·θ̂_eff + (1 − â)·θ̂_nv with â chosen to
//!   minimize the estimated variance, so it is never less efficient than
//!   either ingredient.
//!
//! Variances are empirical second moments of the influence values, so the
//! reported variance of θ̂ is V̂/N.

use ndarray::Array1;
use serde::{Serialize, Serializer};

use crate::dataset::CombinedDataset;
use crate::error::EstimatorError;
use crate::normal::two_sided_critical;
use crate::solver::{CoefficientVector, NuisanceFits, EXP_GUARD};

/// Threshold on mean((φ_nv − φ_eff)²) below which â is undefined.
pub const DEGENERATE_DENOMINATOR: f64 = 1e-12;

fn check_len(data: &CombinedDataset, c: &CoefficientVector) -> Result<(), EstimatorError> {
    if c.len() != data.d() + 1 {
        return Err(EstimatorError::Invalid(format!(
            "coefficient length {} does not match d+1 = {}",
            c.len(),
            data.d() + 1
        )));
    }
    Ok(())
}

/// exp(xᵢᵀc) on rows where `selector` is true, 0 elsewhere.
fn guarded_odds(
    data: &CombinedDataset,
    coefs: &CoefficientVector,
    selector: impl Fn(bool, bool) -> bool,
) -> Result<Vec<f64>, EstimatorError> {
    let eta = data.linear_predictor(coefs.values());
    let mut out = vec![0.0; data.len()];
    for (i, ((&r, &t), h)) in data
        .source()
        .iter()
        .zip(data.treatment())
        .zip(eta.iter())
        .enumerate()
    {
        if selector(r, t) {
            if *h > EXP_GUARD {
                return Err(EstimatorError::Overflow { row: i, value: *h });
            }
            out[i] = h.exp();
        }
    }
    Ok(out)
}

/// Residuals y − xᵀα.
fn residuals(data: &CombinedDataset, alpha: &CoefficientVector) -> Array1<f64> {
    &data.outcome() - &data.linear_predictor(alpha.values())
}

/// Pieces shared by the point estimate and the influence values.
struct Augmented {
    resid: Array1<f64>,
    odds: Vec<f64>,
}

impl Augmented {
    fn eff(data: &CombinedDataset, alpha: &CoefficientVector, gamma: &CoefficientVector) -> Result<Self, EstimatorError> {
        check_len(data, alpha)?;
        check_len(data, gamma)?;
        Ok(Augmented {
            resid: residuals(data, alpha),
            odds: guarded_odds(data, gamma, |r, t| !(r && t))?,
        })
    }

    fn nv(data: &CombinedDataset, alpha: &CoefficientVector, beta: &CoefficientVector) -> Result<Self, EstimatorError> {
        check_len(data, alpha)?;
        check_len(data, beta)?;
        Ok(Augmented {
            resid: residuals(data, alpha),
            odds: guarded_odds(data, beta, |r, t| r && !t)?,
        })
    }

    /// Per-row numerator term, θ not yet subtracted: rt·e − w·e on the
    /// weighted rows.
    fn terms(&self, data: &CombinedDataset) -> Vec<f64> {
        data.source()
            .iter()
            .zip(data.treatment())
            .enumerate()
            .map(|(i, (&r, &t))| {
                if r && t {
                    self.resid[i]
                } else {
                    -self.odds[i] * self.resid[i]
                }
            })
            .collect()
    }
}

fn treated_count(data: &CombinedDataset) -> Result<f64, EstimatorError> {
    match data.n_treated() {
        0 => Err(EstimatorError::Invalid("no treated primary subjects".into())),
        k => Ok(k as f64),
    }
}

/// Efficient doubly robust estimate using all controls:
/// `Σ { r t (y − xᵀα) − (1 − r t) exp(xᵀγ)(y − xᵀα) } / Σ r t`.
pub fn theta_eff(
    data: &CombinedDataset,
    alpha_eff: &CoefficientVector,
    gamma: &CoefficientVector,
) -> Result<f64, EstimatorError> {
    let aug = Augmented::eff(data, alpha_eff, gamma)?;
    Ok(aug.terms(data).iter().sum::<f64>() / treated_count(data)?)
}

/// Naive doubly robust estimate from the primary study alone; external
/// rows contribute nothing.
pub fn theta_nv(
    data: &CombinedDataset,
    alpha_nv: &CoefficientVector,
    beta: &CoefficientVector,
) -> Result<f64, EstimatorError> {
    let aug = Augmented::nv(data, alpha_nv, beta)?;
    let terms = aug.terms(data);
    let sum: f64 = terms
        .iter()
        .zip(data.source())
        .filter(|(_, &r)| r)
        .map(|(v, _)| v)
        .sum();
    Ok(sum / treated_count(data)?)
}

/// Per-subject influence values on the combined-data scale.
#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceVectors {
    /// (rᵢ/π̂)·φ̃_nv,i; zero on external rows.
    pub phi_nv: Array1<f64>,
    pub phi_eff: Array1<f64>,
    pub theta_nv: f64,
    pub theta_eff: f64,
    pub pi_hat: f64,
    pub p_hat: f64,
}

impl InfluenceVectors {
    pub fn len(&self) -> usize {
        self.phi_eff.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phi_eff.is_empty()
    }

    /// V̂_nv = mean(φ_nv²).
    pub fn v_nv(&self) -> f64 {
        self.phi_nv.mapv(|v| v * v).mean().unwrap_or(f64::NAN)
    }

    /// V̂_eff = mean(φ_eff²).
    pub fn v_eff(&self) -> f64 {
        self.phi_eff.mapv(|v| v * v).mean().unwrap_or(f64::NAN)
    }

    /// (mean((φ_nv−φ_eff)φ_nv), mean((φ_nv−φ_eff)φ_eff), mean((φ_nv−φ_eff)²))
    pub fn cross_moments(&self) -> (f64, f64, f64) {
        let n = self.len() as f64;
        let (mut c1, mut c2, mut m) = (0.0, 0.0, 0.0);
        for (&a, &b) in self.phi_nv.iter().zip(self.phi_eff.iter()) {
            let d = a - b;
            c1 += d * a;
            c2 += d * b;
            m += d * d;
        }
        (c1 / n, c2 / n, m / n)
    }
}

/// Influence values from explicit coefficients and plugged θ values.
pub fn influence_from_coefficients(
    data: &CombinedDataset,
    alpha_eff: &CoefficientVector,
    gamma: &CoefficientVector,
    alpha_nv: &CoefficientVector,
    beta: &CoefficientVector,
    theta_nv: f64,
    theta_eff: f64,
) -> Result<InfluenceVectors, EstimatorError> {
    let pi_hat = data.pi_hat();
    let p_hat = data.p_hat();
    let eff = Augmented::eff(data, alpha_eff, gamma)?;
    let nv = Augmented::nv(data, alpha_nv, beta)?;
    let eff_terms = eff.terms(data);
    let nv_terms = nv.terms(data);
    let rows = data.len();
    let mut phi_eff = Array1::zeros(rows);
    let mut phi_nv = Array1::zeros(rows);
    for (i, (&r, &t)) in data.source().iter().zip(data.treatment()).enumerate() {
        let treated = r && t;
        let shift = |theta: f64| if treated { theta } else { 0.0 };
        phi_eff[i] = (eff_terms[i] - shift(theta_eff)) / (pi_hat * p_hat);
        if r {
            phi_nv[i] = (nv_terms[i] - shift(theta_nv)) / (pi_hat * p_hat);
        }
    }
    Ok(InfluenceVectors {
        phi_nv,
        phi_eff,
        theta_nv,
        theta_eff,
        pi_hat,
        p_hat,
    })
}

/// Influence values at the fitted nuisance parameters.
pub fn influence_vectors(
    data: &CombinedDataset,
    fits: &NuisanceFits,
    theta_nv: f64,
    theta_eff: f64,
) -> Result<InfluenceVectors, EstimatorError> {
    influence_from_coefficients(
        data,
        &fits.alpha_eff.coefficients,
        &fits.gamma.coefficients,
        &fits.alpha_nv.coefficients,
        &fits.beta.coefficients,
        theta_nv,
        theta_eff,
    )
}

/// â = mean((φ_nv − φ_eff)φ_nv) / mean((φ_nv − φ_eff)²), unclipped.
pub fn estimate_a(iv: &InfluenceVectors) -> Result<f64, EstimatorError> {
    if iv.phi_nv.len() != iv.phi_eff.len() {
        return Err(EstimatorError::Invalid("influence vectors differ in length".into()));
    }
    let (c1, _, m) = iv.cross_moments();
    if !(m >= DEGENERATE_DENOMINATOR) {
        return Err(EstimatorError::DegenerateDenominator(m));
    }
    Ok(c1 / m)
}

pub fn theta_safe(theta_eff: f64, theta_nv: f64, a_hat: f64) -> f64 {
    a_hat * theta_eff + (1.0 - a_hat) * theta_nv
}

/// V̂_a in both algebraic forms: `V̂_nv − c₁²/m` and `V̂_eff − c₂²/m`.
pub fn safe_variance_forms(iv: &InfluenceVectors) -> Option<(f64, f64)> {
    let (c1, c2, m) = iv.cross_moments();
    if !(m >= DEGENERATE_DENOMINATOR) {
        return None;
    }
    Some((iv.v_nv() - c1 * c1 / m, iv.v_eff() - c2 * c2 / m))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Nv,
    Eff,
    Safe,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Nv, Method::Eff, Method::Safe];

    pub fn name(self) -> &'static str {
        match self {
            Method::Nv => "nv",
            Method::Eff => "eff",
            Method::Safe => "safe",
        }
    }
}

/// Quantities shared by all three reports.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Components {
    pub theta_nv: f64,
    pub theta_eff: f64,
    #[serde(rename = "V_nv")]
    pub v_nv: f64,
    #[serde(rename = "V_eff")]
    pub v_eff: f64,
    #[serde(rename = "V_a")]
    pub v_a: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateReport {
    pub method: Method,
    pub theta: f64,
    /// Variance of θ̂, i.e. V̂/N.
    pub variance: f64,
    pub std_error: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub level: f64,
    /// Present on the safe report only.
    pub a_hat: Option<f64>,
    pub components: Components,
    pub are_vs_nv: f64,
}

#[derive(Serialize)]
struct ReportJson<'a> {
    method: Method,
    theta: f64,
    std_error: f64,
    ci: [f64; 2],
    level: f64,
    a_hat: Option<f64>,
    are_vs_nv: f64,
    components: &'a Components,
}

impl Serialize for EstimateReport {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        ReportJson {
            method: self.method,
            theta: self.theta,
            std_error: self.std_error,
            ci: [self.ci_lower, self.ci_upper],
            level: self.level,
            a_hat: self.a_hat,
            are_vs_nv: self.are_vs_nv,
            components: &self.components,
        }
        .serialize(s)
    }
}

impl EstimateReport {
    pub const CSV_HEADER: &'static str = "method,theta,std_error,ci_lower,ci_upper,level,a_hat,are_vs_nv,theta_nv,theta_eff,V_nv,V_eff,V_a";

    /// One CSV row matching [`Self::CSV_HEADER`]; a missing â is empty.
    pub fn csv_row(&self) -> String {
        let c = &self.components;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.method.name(),
            self.theta,
            self.std_error,
            self.ci_lower,
            self.ci_upper,
            self.level,
            self.a_hat.map(|a| a.to_string()).unwrap_or_default(),
            self.are_vs_nv,
            c.theta_nv,
            c.theta_eff,
            c.v_nv,
            c.v_eff,
            c.v_a
        )
    }

    pub fn contains(&self, value: f64) -> bool {
        self.ci_lower <= value && value <= self.ci_upper
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct InferOptions {
    /// Clip â to [0, 1]. Off by default; the variance then follows the
    /// clipped weight instead of the optimal one.
    pub clip_a: bool,
}

/// All three reports plus the ingredients they were built from.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimates {
    pub nv: EstimateReport,
    pub eff: EstimateReport,
    pub safe: EstimateReport,
    pub a_hat: f64,
    /// â could not be formed and defaulted to 1.
    pub a_fallback: bool,
    pub influence: InfluenceVectors,
}

impl Estimates {
    pub fn get(&self, method: Method) -> &EstimateReport {
        match method {
            Method::Nv => &self.nv,
            Method::Eff => &self.eff,
            Method::Safe => &self.safe,
        }
    }

    pub fn reports(&self) -> [&EstimateReport; 3] {
        [&self.nv, &self.eff, &self.safe]
    }
}

/// Point estimates, influence-function variances and Wald intervals for
/// the three estimators at confidence `level`.
pub fn infer(
    data: &CombinedDataset,
    fits: &NuisanceFits,
    level: f64,
    options: InferOptions,
) -> Result<Estimates, EstimatorError> {
    if !(level > 0.0 && level < 1.0) {
        return Err(EstimatorError::Invalid(format!("level must lie in (0,1), got {level}")));
    }
    let th_eff = theta_eff(data, &fits.alpha_eff.coefficients, &fits.gamma.coefficients)?;
    let th_nv = theta_nv(data, &fits.alpha_nv.coefficients, &fits.beta.coefficients)?;
    let iv = influence_vectors(data, fits, th_nv, th_eff)?;
    Ok(assemble(data.len(), th_nv, th_eff, iv, level, options))
}

/// Builds the three reports from point estimates and influence values.
pub fn assemble(
    rows: usize,
    th_nv: f64,
    th_eff: f64,
    iv: InfluenceVectors,
    level: f64,
    options: InferOptions,
) -> Estimates {
    let v_nv = iv.v_nv();
    let v_eff = iv.v_eff();
    let (a_hat, a_fallback, v_a) = match estimate_a(&iv) {
        Ok(a) => {
            let (c1, _, m) = iv.cross_moments();
            if options.clip_a && !(0.0..=1.0).contains(&a) {
                let a = a.clamp(0.0, 1.0);
                let v = iv
                    .phi_eff
                    .iter()
                    .zip(iv.phi_nv.iter())
                    .map(|(e, n)| (a * e + (1.0 - a) * n).powi(2))
                    .sum::<f64>()
                    / iv.len() as f64;
                (a, false, v)
            } else {
                (a, false, (v_nv - c1 * c1 / m).max(0.0))
            }
        }
        Err(_) => (1.0, true, v_eff),
    };
    let th_safe = if a_fallback {
        th_eff
    } else {
        theta_safe(th_eff, th_nv, a_hat)
    };
    let components = Components {
        theta_nv: th_nv,
        theta_eff: th_eff,
        v_nv,
        v_eff,
        v_a,
    };
    let z = two_sided_critical(level);
    let report = |method: Method, theta: f64, v: f64, a: Option<f64>| {
        let variance = v / rows as f64;
        let std_error = variance.sqrt();
        EstimateReport {
            method,
            theta,
            variance,
            std_error,
            ci_lower: theta - z * std_error,
            ci_upper: theta + z * std_error,
            level,
            a_hat: a,
            components,
            are_vs_nv: v / v_nv,
        }
    };
    Estimates {
        nv: report(Method::Nv, th_nv, v_nv, None),
        eff: report(Method::Eff, th_eff, v_eff, None),
        safe: report(Method::Safe, th_safe, v_a, Some(a_hat)),
        a_hat,
        a_fallback,
        influence: iv,
    }
}
