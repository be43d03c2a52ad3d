use std::io::Write;
use std::path::Path;

use halipw::basis::enumerate_basis;
use halipw::crossfit::{build_crossfit_default, GridSpec};
use halipw::data::{csv_header, load_covariates, load_csv, make_folds, Dataset};
use halipw::estimator::{combine_ate, estimate_with_selection, Arm, EstimateConfig, EstimateReport};
use halipw::sim::{run_replications, SimConfig, Variant};
use halipw::solver::{HalFit, SolverOptions};
use halipw::undersmooth::{select, BundleScores, TruncationGrid};
use halipw::HalError;
use serde::Serialize;

use crate::args::{ArmArg, AteArgs, BasisDumpArgs, EstimateArgs, FitArgs, Format, InputArgs, SimulateArgs, TuningArgs};

pub const SCHEMA_VERSION: u32 = 1;

/// Failure with its process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn validation(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }
}

impl From<HalError> for CliError {
    fn from(e: HalError) -> Self {
        if e.is_validation() {
            Self::validation(e.to_string())
        } else {
            Self::runtime(e.to_string())
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Writes to `path` through a temporary file in the same directory and a
/// rename, or to standard output.
pub fn write_output(path: Option<&Path>, bytes: &[u8]) -> CliResult<()> {
    let Some(path) = path else {
        let mut out = std::io::stdout().lock();
        return out.write_all(bytes).and_then(|_| out.flush()).map_err(|e| CliError::runtime(format!("stdout: {e}")));
    };
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let fail = |e: std::io::Error| CliError::validation(format!("cannot write {}: {e}", path.display()));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(fail)?;
    tmp.write_all(bytes).and_then(|_| tmp.as_file().sync_all()).map_err(fail)?;
    tmp.persist(path).map_err(|e| fail(e.error))?;
    Ok(())
}

fn to_json<T: Serialize>(value: &T) -> CliResult<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| CliError::runtime(e.to_string()))?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn solver_options(t: &TuningArgs) -> CliResult<(GridSpec, SolverOptions)> {
    if t.grid_size < 2 {
        return Err(CliError::validation("--grid-size must be at least 2"));
    }
    if !(t.tol > 0.0 && t.tol.is_finite()) {
        return Err(CliError::validation("--tol must be positive"));
    }
    if t.max_iter == 0 {
        return Err(CliError::validation("--max-iter must be at least 1"));
    }
    Ok((GridSpec { k: t.grid_size, ratio: t.grid_ratio.0 }, SolverOptions { tol: t.tol, max_iter: t.max_iter }))
}

fn check_degree(degree: usize) -> CliResult<()> {
    if degree == 0 {
        return Err(CliError::validation("--degree must be at least 1"));
    }
    Ok(())
}

fn estimate_config(fit: &FitArgs) -> CliResult<EstimateConfig> {
    check_degree(fit.degree)?;
    let (grid, solver) = solver_options(&fit.tuning)?;
    Ok(EstimateConfig {
        degree: fit.degree,
        selector: fit.selector,
        kappas: TruncationGrid::new(fit.kappas.clone())?,
        estimator: fit.estimator,
        grid,
        solver,
    })
}

fn load_input(input: &InputArgs) -> CliResult<Dataset> {
    let w = if input.w_cols.is_empty() {
        let w: Vec<String> =
            csv_header(&input.input)?.into_iter().filter(|c| *c != input.a_col && *c != input.y_col).collect();
        if w.is_empty() {
            return Err(CliError::validation("input has no covariate columns"));
        }
        w
    } else {
        input.w_cols.clone()
    };
    Ok(load_csv(&input.input, &w, &input.a_col, &input.y_col)?)
}

#[derive(Serialize)]
struct FoldFits<'a> {
    fold: usize,
    n_bases: usize,
    propensity: &'a HalFit,
    outcome: &'a HalFit,
}

#[derive(Serialize)]
struct FitDump<'a> {
    schema_version: u32,
    lambda_index: usize,
    lambda: f64,
    kappa: f64,
    folds: Vec<FoldFits<'a>>,
}

/// Treated-arm estimate on `dataset`; control estimates pass the flipped data.
fn estimate_arm(
    dataset: &Dataset,
    folds: &halipw::data::FoldAssignment,
    config: &EstimateConfig,
    dump: Option<&Path>,
) -> CliResult<EstimateReport> {
    let bundle = build_crossfit_default(dataset, folds, config.degree, config.grid, &config.solver)?;
    let scores = BundleScores::new(&bundle, dataset)?;
    let sel = select(config.selector, &bundle, dataset, &config.kappas, &scores)?;
    let report = estimate_with_selection(&bundle, dataset, &sel, &scores, config.estimator)?;
    if let Some(path) = dump {
        let k = sel.chosen_lambda_index;
        let dump = FitDump {
            schema_version: SCHEMA_VERSION,
            lambda_index: k,
            lambda: sel.chosen_lambda,
            kappa: sel.chosen_kappa,
            folds: bundle
                .propensity_paths
                .iter()
                .zip(&bundle.outcome_fits)
                .enumerate()
                .map(|(fold, (p, o))| FoldFits { fold, n_bases: p.basis.len(), propensity: &p.path.fits[k], outcome: &o.fit })
                .collect(),
        };
        write_output(Some(path), &to_json(&dump)?)?;
    }
    Ok(report)
}

#[derive(Serialize)]
struct Envelope<'a, C: Serialize, R: Serialize> {
    schema_version: u32,
    command: &'a str,
    input: &'a str,
    folds: usize,
    seed: u64,
    config: &'a C,
    report: &'a R,
}

fn report_csv_row(r: &EstimateReport) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{}",
        match r.arm {
            Arm::Treated => "treated",
            Arm::Control => "control",
        },
        r.psi_hat,
        r.se,
        r.ci_low,
        r.ci_high,
        r.selector.kind.name(),
        r.selector.lambda,
        r.selector.kappa,
        r.diagnostics.weights.effective_sample_size,
        r.n
    )
}

const REPORT_CSV_HEADER: &str = "arm,psi_hat,se,ci_low,ci_high,selector,lambda,kappa,effective_sample_size,n";

pub fn estimate(args: &EstimateArgs) -> CliResult<()> {
    let config = estimate_config(&args.fit)?;
    let dataset = load_input(&args.input)?;
    let folds = make_folds(&dataset, args.fit.folds, args.fit.seed)?;
    let report = match args.arm {
        ArmArg::Treated => estimate_arm(&dataset, &folds, &config, args.dump_fits.as_deref())?,
        ArmArg::Control => {
            let mut r = estimate_arm(&dataset.flipped(), &folds, &config, args.dump_fits.as_deref())?;
            r.arm = Arm::Control;
            r
        }
    };
    let bytes = match args.output.format.unwrap_or(Format::Json) {
        Format::Json => to_json(&Envelope {
            schema_version: SCHEMA_VERSION,
            command: "estimate",
            input: &args.input.input.to_string_lossy(),
            folds: args.fit.folds,
            seed: args.fit.seed,
            config: &config,
            report: &report,
        })?,
        Format::Csv => format!("{REPORT_CSV_HEADER}\n{}\n", report_csv_row(&report)).into_bytes(),
    };
    write_output(args.output.output.as_deref(), &bytes)
}

pub fn ate(args: &AteArgs) -> CliResult<()> {
    let config = estimate_config(&args.fit)?;
    let dataset = load_input(&args.input)?;
    let folds = make_folds(&dataset, args.fit.folds, args.fit.seed)?;
    let treated = estimate_arm(&dataset, &folds, &config, None)?;
    let mut control = estimate_arm(&dataset.flipped(), &folds, &config, None)?;
    control.arm = Arm::Control;
    let report = combine_ate(treated, control)?;
    let bytes = match args.output.format.unwrap_or(Format::Json) {
        Format::Json => to_json(&Envelope {
            schema_version: SCHEMA_VERSION,
            command: "ate",
            input: &args.input.input.to_string_lossy(),
            folds: args.fit.folds,
            seed: args.fit.seed,
            config: &config,
            report: &report,
        })?,
        Format::Csv => format!(
            "{REPORT_CSV_HEADER}\n{}\n{}\nate,{},{},{},{},{},,,,{}\n",
            report_csv_row(&report.treated),
            report_csv_row(&report.control),
            report.ate,
            report.se,
            report.ci_low,
            report.ci_high,
            config.selector.name(),
            report.treated.n
        )
        .into_bytes(),
    };
    write_output(args.output.output.as_deref(), &bytes)
}

#[derive(Serialize)]
struct SimEnvelope<'a> {
    schema_version: u32,
    command: &'a str,
    scenario: &'a str,
    n: usize,
    reps: usize,
    seed: u64,
    variants: Vec<&'a str>,
    config: &'a SimConfig,
    table: &'a halipw::sim::MetricsTable,
}

pub fn simulate(args: &SimulateArgs) -> CliResult<()> {
    check_degree(args.degree)?;
    if args.n == 0 {
        return Err(CliError::validation("--n must be at least 1"));
    }
    if args.reps == 0 {
        return Err(CliError::validation("--reps must be at least 1"));
    }
    let (grid, solver) = solver_options(&args.tuning)?;
    let mut config = SimConfig::for_scenario(args.scenario);
    config.folds = args.folds.unwrap_or(config.folds);
    if config.folds < 2 {
        return Err(CliError::validation("--folds must be at least 2"));
    }
    config.degree = args.degree;
    config.grid = grid;
    config.solver = solver;
    config.kappas = TruncationGrid::new(args.kappas.clone())?;
    config.estimator = args.estimator;
    let variants: Vec<Variant> = if args.variants.is_empty() { Variant::ALL.to_vec() } else { args.variants.clone() };
    let table = run_replications(args.scenario, args.n, args.reps, &variants, args.seed, &config)?;
    let bytes = match args.output.format.unwrap_or(Format::Csv) {
        Format::Csv => {
            let mut buf = Vec::new();
            if args.long {
                table.write_long_csv(&mut buf)?;
            } else {
                table.write_csv(&mut buf)?;
            }
            buf
        }
        Format::Json => to_json(&SimEnvelope {
            schema_version: SCHEMA_VERSION,
            command: "simulate",
            scenario: args.scenario.name(),
            n: args.n,
            reps: args.reps,
            seed: args.seed,
            variants: variants.iter().map(|v| v.name()).collect(),
            config: &config,
            table: &table,
        })?,
    };
    write_output(args.output.output.as_deref(), &bytes)
}

#[derive(Serialize)]
struct BasisEnvelope<'a> {
    schema_version: u32,
    columns: &'a [String],
    basis: &'a halipw::basis::BasisSet,
}

pub fn basis_dump(args: &BasisDumpArgs) -> CliResult<()> {
    check_degree(args.degree)?;
    let cols = if args.w_cols.is_empty() { csv_header(&args.input)? } else { args.w_cols.clone() };
    let w = load_covariates(&args.input, &cols)?;
    let (basis, _) = enumerate_basis(&w, args.degree)?;
    let bytes = to_json(&BasisEnvelope { schema_version: SCHEMA_VERSION, columns: &cols, basis: &basis })?;
    write_output(args.output.as_deref(), &bytes)
}
