use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dsdr_core::{CvSettings, GridSpec, LambdaPolicy};

#[derive(Debug, Parser)]
#[command(
    name = "dsdr",
    version,
    about = "ATT estimation from a primary study augmented with external controls"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the nuisance models on a CSV file and report the naive,
    /// efficient and safe estimates.
    Estimate(EstimateArgs),
    /// Run the Monte Carlo study for one model or a published table grid.
    Simulate(SimulateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Missing {
    Fail,
    DropRow,
}

/// `cv` or four fixed penalty levels `g:B:ae:an`.
#[derive(Debug, Clone, PartialEq)]
pub enum LambdaArg {
    Cv,
    Fixed([f64; 4]),
}

impl LambdaArg {
    pub fn policy(&self, folds: usize, seed: u64) -> LambdaPolicy {
        match self {
            LambdaArg::Cv => LambdaPolicy::Cv(CvSettings {
                folds,
                grid: GridSpec::default(),
                seed,
            }),
            LambdaArg::Fixed(v) => LambdaPolicy::Fixed(*v),
        }
    }
}

pub fn parse_lambda(s: &str) -> Result<LambdaArg, String> {
    if s.eq_ignore_ascii_case("cv") {
        return Ok(LambdaArg::Cv);
    }
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 4 {
        return Err(format!("expected `cv` or four values g:B:ae:an, got `{s}`"));
    }
    let mut out = [0.0; 4];
    for (slot, p) in out.iter_mut().zip(parts) {
        let v: f64 = p
            .trim()
            .parse()
            .map_err(|_| format!("`{p}` is not a number"))?;
        if !(v.is_finite() && v >= 0.0) {
            return Err(format!("penalty level `{p}` must be finite and non-negative"));
        }
        *slot = v;
    }
    Ok(LambdaArg::Fixed(out))
}

#[derive(Debug, Args)]
pub struct Common {
    /// Confidence level of the Wald intervals.
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    /// Penalty selection: `cv`, or fixed levels `g:B:ae:an` on the
    /// standardized design.
    #[arg(long, default_value = "cv", value_parser = parse_lambda)]
    pub lambda: LambdaArg,
    #[arg(long, default_value_t = 5)]
    pub cv_folds: usize,
    /// Output file; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    /// Clip the combination weight to [0, 1]. The reported variance then
    /// belongs to the clipped combination, not the optimal one.
    #[arg(long)]
    pub clip_a: bool,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    /// CSV file with a header row.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub outcome: String,
    /// 0/1 treatment indicator.
    #[arg(long)]
    pub treatment: String,
    /// 0/1 indicator, 1 for the primary study and 0 for external controls.
    #[arg(long)]
    pub source: String,
    /// Comma-separated covariate columns; defaults to every other column.
    #[arg(long, value_delimiter = ',')]
    pub covariates: Option<Vec<String>>,
    #[arg(long, value_enum, default_value_t = Missing::Fail)]
    pub missing: Missing,
    /// Seed for the cross-validation folds.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Every random draw derives from this seed.
    #[arg(long)]
    pub seed: u64,
    /// Grid of a published table (2: Model 1, 3-5: Model 2 cases i-iii).
    #[arg(long, value_parser = clap::value_parser!(u8).range(2..=5), conflicts_with = "model")]
    pub paper_table: Option<u8>,
    /// m1, m2i, m2ii or m2iii.
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long, default_value_t = 400)]
    pub reps: usize,
    /// Worker threads for replicates; all cores when absent.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Total sample sizes for Model 1, comma-separated.
    #[arg(long = "N", value_delimiter = ',')]
    pub n_total: Vec<usize>,
    /// Primary sample sizes for Model 2, comma-separated.
    #[arg(long = "n", value_delimiter = ',')]
    pub n_primary: Vec<usize>,
    /// External sample size for Model 2 cases i and ii.
    #[arg(long = "m")]
    pub m_external: Option<usize>,
    /// Covariate dimensions, comma-separated.
    #[arg(long, value_delimiter = ',')]
    pub d: Vec<usize>,
    /// Share of primary subjects for Model 2 case iii.
    #[arg(long)]
    pub pi_ratio: Option<f64>,
    /// Monte Carlo draws for the target value of each cell.
    #[arg(long, default_value_t = 2_000_000)]
    pub oracle_draws: usize,
    #[command(flatten)]
    pub common: Common,
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn lambda_forms() {
        assert_eq!(parse_lambda("cv").unwrap(), LambdaArg::Cv);
        assert_eq!(
            parse_lambda("0.1:0.2:0:1e-3").unwrap(),
            LambdaArg::Fixed([0.1, 0.2, 0.0, 1e-3])
        );
        assert!(parse_lambda("0.1:0.2").is_err());
        assert!(parse_lambda("0.1:x:0:0").is_err());
        assert!(parse_lambda("0.1:-1:0:0").is_err());
    }

    #[test]
    fn simulate_lists() {
        let cli = Cli::try_parse_from([
            "dsdr", "simulate", "--seed", "3", "--model", "m2i", "--n", "400,800", "--d", "4,10",
        ])
        .unwrap();
        let Command::Simulate(a) = cli.command else {
            panic!()
        };
        assert_eq!(a.n_primary, vec![400, 800]);
        assert_eq!(a.d, vec![4, 10]);
        assert_eq!(a.reps, 400);
    }

    #[test]
    fn simulate_requires_seed() {
        assert!(Cli::try_parse_from(["dsdr", "simulate", "--paper-table", "2"]).is_err());
    }

    #[test]
    fn table_and_model_conflict() {
        let r = Cli::try_parse_from([
            "dsdr", "simulate", "--seed", "1", "--paper-table", "2", "--model", "m1",
        ]);
        assert!(r.is_err());
    }
}
