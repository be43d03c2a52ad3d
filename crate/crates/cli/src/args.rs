use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use halipw::estimator::EstimatorKind;
use halipw::sim::{Scenario, Variant};
use halipw::undersmooth::SelectorKind;

#[derive(Debug, Parser)]
#[command(
    name = "halipw",
    version,
    about = "IPW estimates with a cross-fitted, undersmoothed highly adaptive lasso propensity score"
)]
pub struct Cli {
    /// Worker threads for fold and replication work; 0 uses every available core
    #[arg(long, global = true, env = "HALIPW_THREADS", default_value_t = 0)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate one counterfactual mean from a CSV file
    Estimate(EstimateArgs),
    /// Estimate the average treatment effect from a CSV file
    Ate(AteArgs),
    /// Run a seeded replication study on a built-in scenario
    Simulate(SimulateArgs),
    /// Enumerate the indicator bases of a CSV file's covariates and write them as JSON
    BasisDump(BasisDumpArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ArmArg {
    Treated,
    Control,
}

/// Grid depth: `auto` or a ratio in (0, 1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridRatio(pub Option<f64>);

impl FromStr for GridRatio {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "auto" {
            return Ok(GridRatio(None));
        }
        match s.parse::<f64>() {
            Ok(r) if r > 0.0 && r < 1.0 => Ok(GridRatio(Some(r))),
            _ => Err(format!("expected `auto` or a number in (0, 1), got `{s}`")),
        }
    }
}

#[derive(Debug, Args)]
pub struct InputArgs {
    /// Headered, comma-separated input file
    #[arg(long)]
    pub input: PathBuf,
    /// Treatment column (values 0 or 1)
    #[arg(long = "a", default_value = "a")]
    pub a_col: String,
    /// Outcome column
    #[arg(long = "y", default_value = "y")]
    pub y_col: String,
    /// Comma-separated covariate columns [default: every column except the treatment and outcome]
    #[arg(long = "w", value_delimiter = ',')]
    pub w_cols: Vec<String>,
}

/// Options shared by the estimation commands.
#[derive(Debug, Args)]
pub struct FitArgs {
    /// Penalty selector: cv, dcar, score, dcar_truncated or score_truncated
    #[arg(long, default_value = "dcar")]
    pub selector: SelectorKind,
    /// Cross-fitting folds
    #[arg(long, default_value_t = 10)]
    pub folds: usize,
    /// Highest interaction order of the indicator bases
    #[arg(long, default_value_t = 3)]
    pub degree: usize,
    /// Comma-separated truncation levels searched by the truncated selectors
    #[arg(long, value_delimiter = ',', default_value = "0,0.001,0.005,0.01,0.025,0.05")]
    pub kappas: Vec<f64>,
    /// plain or stabilized weights
    #[arg(long, default_value = "plain")]
    pub estimator: EstimatorKind,
    /// Seed of the fold split
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[command(flatten)]
    pub tuning: TuningArgs,
}

#[derive(Debug, Args)]
pub struct TuningArgs {
    /// Number of penalty values on the grid
    #[arg(long, default_value_t = 100)]
    pub grid_size: usize,
    /// Smallest over largest penalty: `auto` uses 1e-2 when every training design has more columns than rows and 1e-4 otherwise
    #[arg(long, default_value = "auto")]
    pub grid_ratio: GridRatio,
    /// Solver convergence tolerance
    #[arg(long, default_value_t = 1e-7)]
    pub tol: f64,
    /// Solver sweep budget per penalty value
    #[arg(long, default_value_t = 10_000)]
    pub max_iter: usize,
}

#[derive(Debug, Args)]
pub struct OutputArgs {
    /// Output file, written atomically [default: standard output]
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Output format
    #[arg(long, value_enum)]
    pub format: Option<Format>,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub fit: FitArgs,
    /// Counterfactual arm to estimate
    #[arg(long, value_enum, default_value = "treated")]
    pub arm: ArmArg,
    /// Also write the per-fold fits at the selected penalty as JSON to this file
    #[arg(long)]
    pub dump_fits: Option<PathBuf>,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct AteArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub fit: FitArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// main1, main2, supp_rct, supp_obs or supp_pos
    #[arg(long, default_value = "main1")]
    pub scenario: Scenario,
    /// Sample size per replication
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    /// Replications
    #[arg(long, default_value_t = 200)]
    pub reps: usize,
    /// Comma-separated variants: cv, dcar, dcar_trunc, score, score_trunc, unadjusted, oracle_g, parametric_logistic [default: all]
    #[arg(long, value_delimiter = ',')]
    pub variants: Vec<Variant>,
    /// Base seed; replication r uses seed + r
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Cross-fitting folds [default: 15 for main1 and main2, 5 otherwise]
    #[arg(long)]
    pub folds: Option<usize>,
    /// Highest interaction order of the indicator bases
    #[arg(long, default_value_t = 2)]
    pub degree: usize,
    /// Comma-separated truncation levels searched by the truncated selectors
    #[arg(long, value_delimiter = ',', default_value = "0,0.001,0.005,0.01,0.025,0.05")]
    pub kappas: Vec<f64>,
    /// plain or stabilized weights
    #[arg(long, default_value = "plain")]
    pub estimator: EstimatorKind,
    #[command(flatten)]
    pub tuning: TuningArgs,
    /// CSV layout: one row per variant, or one row per variant and metric
    #[arg(long)]
    pub long: bool,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct BasisDumpArgs {
    /// Headered, comma-separated input file
    #[arg(long)]
    pub input: PathBuf,
    /// Comma-separated covariate columns [default: every column]
    #[arg(long = "w", value_delimiter = ',')]
    pub w_cols: Vec<String>,
    /// Highest interaction order of the indicator bases
    #[arg(long, default_value_t = 3)]
    pub degree: usize,
    /// Output file, written atomically [default: standard output]
    #[arg(long)]
    pub output: Option<PathBuf>,
}
