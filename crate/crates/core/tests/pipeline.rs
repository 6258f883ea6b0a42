use std::io::Write;

use dsdr_core::simulation::{gen_model1, oracle_theta, Model, ModelSpec};
use dsdr_core::{
    estimate, fit_nuisances, infer, load_csv, ColumnSchema, EstimateOptions, InferOptions,
    LambdaPolicy, Method, NuisanceOptions,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

// Values from one-dimensional quadrature of the closed-form conditional
// means, computed outside this crate.
const M1_TARGET: f64 = -0.139_223_026_307_776;
const M2I_TARGET: f64 = -0.038_733_960_822_990;

#[test]
fn oracle_matches_quadrature() {
    for (spec, exact) in [
        (ModelSpec::model1(1000, 4), M1_TARGET),
        (ModelSpec::model2(Model::M2i, 400, 1000, 4), M2I_TARGET),
    ] {
        let o = oracle_theta(&spec, 2_000_000, 19).unwrap();
        assert!(
            (o.value - exact).abs() < 4.0 * o.mc_se,
            "{:?}: {} vs {exact} (se {})",
            spec.model,
            o.value,
            o.mc_se
        );
        assert!(o.mc_se < 2e-3);
    }
}

/// Writes a CSV with the layout of a job-training evaluation: 289 primary
/// subjects of whom 111 are treated, and 554 external controls. Earnings
/// are in thousands.
fn job_training_csv(seed: u64) -> tempfile::NamedTempFile {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut file = tempfile::NamedTempFile::new().unwrap();
    writeln!(file, "sample,treat,re78,age,educ,black,hisp,married,nodegr,re74,re75").unwrap();
    let mut row = |r: u8, t: u8, external: bool| {
        let shift = if external { 1.0 } else { 0.0 };
        let age = 25.0 + 7.0 * rng.sample::<f64, _>(StandardNormal) + 3.0 * shift;
        let educ = (10.0 + 2.0 * rng.sample::<f64, _>(StandardNormal) + shift).round();
        let bin = |p: f64, rng: &mut ChaCha8Rng| (rng.gen::<f64>() < p) as u8;
        let black = bin(0.8 - 0.3 * shift, &mut rng);
        let hisp = bin(0.1, &mut rng);
        let married = bin(0.15 + 0.3 * shift, &mut rng);
        let nodegr = (educ < 12.0) as u8;
        let re74 = (2.0 + 3.0 * shift + 3.0 * rng.sample::<f64, _>(StandardNormal)).max(0.0);
        let re75 = (0.6 * re74 + 1.5 * rng.sample::<f64, _>(StandardNormal)).max(0.0);
        let re78 = (4.5 + 0.4 * re75 + 0.1 * (educ - 10.0) + 1.8 * t as f64
            + 5.0 * rng.sample::<f64, _>(StandardNormal))
        .max(0.0);
        format!("{r},{t},{re78:.4},{age:.0},{educ},{black},{hisp},{married},{nodegr},{re74:.4},{re75:.4}")
    };
    let mut lines = Vec::new();
    lines.extend((0..111).map(|_| row(1, 1, false)));
    lines.extend((0..178).map(|_| row(1, 0, false)));
    lines.extend((0..554).map(|_| row(0, 0, true)));
    for l in lines {
        writeln!(file, "{l}").unwrap();
    }
    file.flush().unwrap();
    file
}

#[test]
fn job_training_layout_end_to_end() {
    let file = job_training_csv(2);
    let schema = ColumnSchema::new(
        "re78",
        "treat",
        "sample",
        ["age", "educ", "black", "hisp", "married", "nodegr", "re74", "re75"],
    );
    let data = load_csv(file.path(), &schema).unwrap();
    assert_eq!(data.len(), 843);
    assert_eq!(data.n_primary(), 289);
    assert_eq!(data.n_treated(), 111);
    assert_eq!(data.n_external(), 554);

    let (est, fits) = estimate(&data, 0.95, &EstimateOptions::default()).unwrap();
    assert!(fits.all_converged());
    assert!(est.a_hat.is_finite() && !est.a_fallback);
    for r in est.reports() {
        assert!(r.theta.is_finite() && r.std_error > 0.0);
        assert!(r.contains(r.theta));
        let half = 1.959_963_984_540_054 * r.std_error;
        assert!((r.ci_upper - r.theta - half).abs() < 1e-9);
    }
    // the safe variance never exceeds either input variance
    let c = est.safe.components;
    assert!(c.v_a <= c.v_nv.min(c.v_eff) + 1e-12);

    // a fixed seed gives identical CV selections
    let (again, _) = estimate(&data, 0.95, &EstimateOptions::default()).unwrap();
    assert_eq!(again.safe.theta, est.safe.theta);
}

#[test]
fn level_only_changes_intervals() {
    let data = gen_model1(600, 6, 8).unwrap();
    let fits = fit_nuisances(&data, &LambdaPolicy::Fixed([0.02; 4]), &NuisanceOptions::default())
        .unwrap();
    let a = infer(&data, &fits, 0.95, InferOptions::default()).unwrap();
    let b = infer(&data, &fits, 0.80, InferOptions::default()).unwrap();
    for m in Method::ALL {
        assert_eq!(a.get(m).theta, b.get(m).theta);
        assert_eq!(a.get(m).std_error, b.get(m).std_error);
        let wa = a.get(m).ci_upper - a.get(m).ci_lower;
        let wb = b.get(m).ci_upper - b.get(m).ci_lower;
        assert!(wb < wa);
    }
}

#[test]
fn estimates_do_not_depend_on_covariate_units() {
    let data = gen_model1(500, 5, 13).unwrap();
    let mut rows: Vec<_> = data.rows().collect();
    for r in &mut rows {
        r.x[2] *= 1000.0;
        r.x[3] += 50.0;
    }
    let scaled = dsdr_core::CombinedDataset::from_rows(&rows).unwrap();
    let opts = EstimateOptions {
        lambda: LambdaPolicy::Fixed([0.03; 4]),
        ..EstimateOptions::default()
    };
    let (a, _) = estimate(&data, 0.95, &opts).unwrap();
    let (b, _) = estimate(&scaled, 0.95, &opts).unwrap();
    for m in Method::ALL {
        assert!((a.get(m).theta - b.get(m).theta).abs() < 1e-6);
        assert!((a.get(m).std_error - b.get(m).std_error).abs() < 1e-6);
    }
}
