use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use dsdr_core::simulation::{paper_table, run_grid, MetricsTable, Model, ModelSpec, Sizing, StudyConfig};
use dsdr_core::{
    csv_header, estimate, load_csv, ColumnSchema, CombinedDataset, EstimateOptions, EstimateReport,
    Estimates, Error, InferOptions, LambdaPolicy, MissingPolicy, NuisanceFits, NuisanceKind,
    NuisanceOptions, Result,
};
use serde::Serialize;

use crate::args::{Common, EstimateArgs, Format, Missing, SimulateArgs};

fn config_error(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn check_common(c: &Common) -> Result<()> {
    if !(c.level > 0.0 && c.level < 1.0) {
        return Err(config_error(format!("--level must lie in (0, 1), got {}", c.level)));
    }
    if c.cv_folds < 2 {
        return Err(config_error(format!("--cv-folds must be at least 2, got {}", c.cv_folds)));
    }
    Ok(())
}

fn format_name(f: Format) -> &'static str {
    match f {
        Format::Json => "json",
        Format::Csv => "csv",
    }
}

#[derive(Serialize)]
struct EstimateConfig<'a> {
    command: &'static str,
    data: &'a Path,
    schema: &'a ColumnSchema,
    level: f64,
    lambda: &'a LambdaPolicy,
    cv_folds: usize,
    seed: u64,
    clip_a: bool,
    format: &'static str,
    out: Option<&'a PathBuf>,
}

#[derive(Serialize)]
struct DataSummary {
    rows: usize,
    primary: usize,
    external: usize,
    treated: usize,
    primary_controls: usize,
    covariates: usize,
    pi_hat: f64,
    p_hat: f64,
}

impl DataSummary {
    fn of(data: &CombinedDataset) -> Self {
        DataSummary {
            rows: data.len(),
            primary: data.n_primary(),
            external: data.n_external(),
            treated: data.n_treated(),
            primary_controls: data.n_primary_control(),
            covariates: data.d(),
            pi_hat: data.pi_hat(),
            p_hat: data.p_hat(),
        }
    }
}

#[derive(Serialize)]
struct Flags {
    zero_external_rows: bool,
    a_hat_fallback: bool,
    all_converged: bool,
}

#[derive(Serialize)]
struct EstimateOutput<'a> {
    config: &'a EstimateConfig<'a>,
    data: DataSummary,
    flags: Flags,
    warnings: &'a [String],
    a_hat: f64,
    estimates: [&'a EstimateReport; 3],
    nuisance: &'a NuisanceFits,
}

fn schema_for(args: &EstimateArgs) -> Result<ColumnSchema> {
    let covariates = match &args.covariates {
        Some(c) => c.clone(),
        None => {
            let taken = [&args.outcome, &args.treatment, &args.source];
            csv_header(&args.data)?
                .into_iter()
                .filter(|h| !taken.contains(&h))
                .collect()
        }
    };
    let mut schema = ColumnSchema::new(&args.outcome, &args.treatment, &args.source, covariates);
    schema.missing_policy = match args.missing {
        Missing::Fail => MissingPolicy::Fail,
        Missing::DropRow => MissingPolicy::DropRow,
    };
    schema.validate().map_err(|e| config_error(e.to_string()))?;
    Ok(schema)
}

fn warnings(data: &CombinedDataset, est: &Estimates, fits: &NuisanceFits) -> Vec<String> {
    let mut out = Vec::new();
    if data.n_external() == 0 {
        out.push(
            "no external control rows: the efficient and safe estimates reduce to the naive one"
                .to_string(),
        );
    }
    if est.a_fallback {
        out.push("combination weight undefined (influence functions coincide); using a = 1".into());
    }
    for kind in NuisanceKind::ALL {
        if !fits.get(kind).converged {
            out.push(format!("{kind} fit did not converge"));
        }
    }
    out
}

pub fn run_estimate(args: &EstimateArgs) -> Result<()> {
    check_common(&args.common)?;
    let schema = schema_for(args)?;
    let lambda = args.common.lambda.policy(args.common.cv_folds, args.seed);
    let config = EstimateConfig {
        command: "estimate",
        data: &args.data,
        schema: &schema,
        level: args.common.level,
        lambda: &lambda,
        cv_folds: args.common.cv_folds,
        seed: args.seed,
        clip_a: args.common.clip_a,
        format: format_name(args.common.format),
        out: args.common.out.as_ref(),
    };

    let data = load_csv(&args.data, &schema)?;
    let options = EstimateOptions {
        lambda: lambda.clone(),
        nuisance: NuisanceOptions::default(),
        infer: InferOptions {
            clip_a: args.common.clip_a,
        },
    };
    let (est, fits) = estimate(&data, args.common.level, &options)?;
    let warnings = warnings(&data, &est, &fits);
    for w in &warnings {
        eprintln!("warning: {w}");
    }

    let output = EstimateOutput {
        config: &config,
        data: DataSummary::of(&data),
        flags: Flags {
            zero_external_rows: data.n_external() == 0,
            a_hat_fallback: est.a_fallback,
            all_converged: fits.all_converged(),
        },
        warnings: &warnings,
        a_hat: est.a_hat,
        estimates: est.reports(),
        nuisance: &fits,
    };
    write_output(args.common.out.as_deref(), |w| match args.common.format {
        Format::Json => write_json(w, &output),
        Format::Csv => {
            comment_json(w, "config", &config)?;
            comment_json(w, "data", &output.data)?;
            comment_json(w, "flags", &output.flags)?;
            for msg in &warnings {
                writeln!(w, "# warning: {msg}")?;
            }
            for kind in NuisanceKind::ALL {
                let f = fits.get(kind);
                writeln!(
                    w,
                    "# nuisance {kind}: lambda={} support={} converged={} iterations={} kkt={:.3e}",
                    f.lambda,
                    f.coefficients.n_active_slopes(),
                    f.converged,
                    f.iterations,
                    f.kkt_violation
                )?;
            }
            writeln!(w, "{}", EstimateReport::CSV_HEADER)?;
            for r in est.reports() {
                writeln!(w, "{}", r.csv_row())?;
            }
            Ok(())
        }
    })
}

#[derive(Serialize)]
struct SimulateConfig<'a> {
    command: &'static str,
    paper_table: Option<u8>,
    cells: &'a [ModelSpec],
    study: &'a StudyConfig,
    format: &'static str,
    out: Option<&'a PathBuf>,
}

#[derive(Serialize)]
struct SimulateOutput<'a> {
    config: &'a SimulateConfig<'a>,
    table: &'a MetricsTable,
}

fn cells_for(args: &SimulateArgs) -> Result<Vec<ModelSpec>> {
    if let Some(t) = args.paper_table {
        let sizing_given = !args.n_total.is_empty()
            || !args.n_primary.is_empty()
            || args.m_external.is_some()
            || !args.d.is_empty()
            || args.pi_ratio.is_some();
        if sizing_given {
            return Err(config_error("--paper-table fixes the grid; drop the sizing flags"));
        }
        return paper_table(t).ok_or_else(|| config_error(format!("no preset for table {t}")));
    }
    let name = args
        .model
        .as_deref()
        .ok_or_else(|| config_error("one of --paper-table or --model is required"))?;
    let model = Model::parse(name)
        .ok_or_else(|| config_error(format!("unknown model `{name}`; use m1, m2i, m2ii or m2iii")))?;
    let dims = if args.d.is_empty() { vec![4] } else { args.d.clone() };

    let sizings: Vec<Sizing> = match model {
        Model::M1 => {
            if !args.n_primary.is_empty() || args.m_external.is_some() || args.pi_ratio.is_some() {
                return Err(config_error("Model 1 is sized by --N only"));
            }
            if args.n_total.is_empty() {
                return Err(config_error("Model 1 needs --N"));
            }
            args.n_total.iter().map(|&n| Sizing::Total(n)).collect()
        }
        Model::M2i | Model::M2ii | Model::M2iii => {
            if !args.n_total.is_empty() {
                return Err(config_error("Model 2 is sized by --n (and --m or --pi-ratio)"));
            }
            if args.n_primary.is_empty() {
                return Err(config_error("Model 2 needs --n"));
            }
            if model == Model::M2iii {
                if args.m_external.is_some() {
                    return Err(config_error("case iii draws the external block; use --pi-ratio"));
                }
                let ratio = args.pi_ratio.unwrap_or(1.0 / 3.0);
                if !(ratio > 0.0 && ratio < 1.0) {
                    return Err(config_error(format!("--pi-ratio must lie in (0, 1), got {ratio}")));
                }
                args.n_primary
                    .iter()
                    .map(|&n| Sizing::PrimaryRatio { n, ratio })
                    .collect()
            } else {
                if args.pi_ratio.is_some() {
                    return Err(config_error("--pi-ratio applies to case iii only"));
                }
                let m = args.m_external.unwrap_or(dsdr_core::simulation::EXTERNAL_CONTROLS);
                args.n_primary
                    .iter()
                    .map(|&n| Sizing::Primary { n, m })
                    .collect()
            }
        }
    };
    let mut cells = Vec::with_capacity(sizings.len() * dims.len());
    for sizing in sizings {
        for &d in &dims {
            cells.push(ModelSpec::new(model, d, sizing));
        }
    }
    Ok(cells)
}

pub fn run_simulate(args: &SimulateArgs) -> Result<()> {
    check_common(&args.common)?;
    if args.reps < 2 {
        return Err(config_error("--reps must be at least 2"));
    }
    if args.jobs == Some(0) {
        return Err(config_error("--jobs must be positive"));
    }
    let cells = cells_for(args)?;
    for c in &cells {
        c.validate().map_err(|e| config_error(e.to_string()))?;
    }
    let study = StudyConfig {
        reps: args.reps,
        lambda: args.common.lambda.policy(args.common.cv_folds, args.seed),
        nuisance: NuisanceOptions::default(),
        level: args.common.level,
        clip_a: args.common.clip_a,
        seed: args.seed,
        jobs: args.jobs,
        oracle_draws: args.oracle_draws,
    };
    let config = SimulateConfig {
        command: "simulate",
        paper_table: args.paper_table,
        cells: &cells,
        study: &study,
        format: format_name(args.common.format),
        out: args.common.out.as_ref(),
    };

    let table = run_grid(&cells, &study)?;
    for (reason, count) in &table.failure_reasons {
        eprintln!("warning: {count} replicate(s) failed: {reason}");
    }
    if table.any_flagged() {
        eprintln!("warning: some cells lost more than 2% of replicates; see the `flagged` column");
    }
    write_output(args.common.out.as_deref(), |w| match args.common.format {
        Format::Json => write_json(
            w,
            &SimulateOutput {
                config: &config,
                table: &table,
            },
        ),
        Format::Csv => {
            comment_json(w, "config", &config)?;
            if !table.failure_reasons.is_empty() {
                comment_json(w, "failures", &table.failure_reasons)?;
            }
            table.write_csv(&mut *w)
        }
    })
}

fn comment_json<T: Serialize>(w: &mut dyn Write, key: &str, value: &T) -> io::Result<()> {
    writeln!(w, "# {key}: {}", serde_json::to_string(value)?)
}

fn write_json<T: Serialize>(w: &mut dyn Write, value: &T) -> io::Result<()> {
    serde_json::to_writer_pretty(&mut *w, value)?;
    writeln!(w)
}

fn write_output(
    path: Option<&Path>,
    body: impl FnOnce(&mut dyn Write) -> io::Result<()>,
) -> Result<()> {
    let result = match path {
        Some(p) => File::create(p).and_then(|f| {
            let mut w = BufWriter::new(f);
            body(&mut w)?;
            w.flush()
        }),
        None => {
            let stdout = io::stdout();
            let mut w = stdout.lock();
            body(&mut w).and_then(|_| w.flush())
        }
    };
    result.map_err(|e| match path {
        Some(p) => config_error(format!("cannot write {}: {e}", p.display())),
        None => config_error(format!("cannot write output: {e}")),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::args::{Cli, Command};
    use clap::Parser;

    fn simulate(argv: &[&str]) -> SimulateArgs {
        let mut full = vec!["dsdr", "simulate", "--seed", "1"];
        full.extend_from_slice(argv);
        match Cli::try_parse_from(full).unwrap().command {
            Command::Simulate(a) => a,
            _ => unreachable!(),
        }
    }

    #[test]
    fn paper_presets_have_nine_cells() {
        for t in ["2", "3", "4", "5"] {
            assert_eq!(cells_for(&simulate(&["--paper-table", t])).unwrap().len(), 9);
        }
        assert!(cells_for(&simulate(&["--paper-table", "2", "--d", "4"])).is_err());
    }

    #[test]
    fn model_grids() {
        let cells = cells_for(&simulate(&["--model", "m2ii", "--n", "400,800", "--d", "4,6"])).unwrap();
        assert_eq!(cells.len(), 4);
        assert_eq!(cells[1].sizing, Sizing::Primary { n: 400, m: 1000 });
        assert_eq!(cells[1].d, 6);

        let cells = cells_for(&simulate(&["--model", "m2iii", "--n", "300", "--pi-ratio", "0.5"])).unwrap();
        assert_eq!(cells[0].sizing.total(), 600);
        assert_eq!(cells[0].d, 4);

        assert!(cells_for(&simulate(&["--model", "m2i", "--n", "300", "--pi-ratio", "0.5"])).is_err());
        assert!(cells_for(&simulate(&["--model", "m1", "--N", "300", "--m", "10"])).is_err());
        assert!(cells_for(&simulate(&[])).is_err());
    }
}
