//! Simulation scenarios and the seeded replication harness.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::OnceLock;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, Normal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chol::CholFactor;
use crate::crossfit::{build_crossfit_default, GridSpec};
use crate::data::{make_folds, Dataset};
use crate::error::{HalError, Result};
use crate::estimator::{estimate_with_selection, se_of_mean, EstimatorKind, Z95};
use crate::solver::{expit, SolverOptions};
use crate::undersmooth::{select, BundleScores, SelectorKind, TruncationGrid};

/// Draws used to integrate the true counterfactual mean.
pub const TRUTH_DRAWS: usize = 10_000_000;

/// Largest tolerated share of failed replications.
pub const MAX_FAILURE_SHARE: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Main1,
    Main2,
    SuppRct,
    SuppObs,
    SuppPos,
}

impl Scenario {
    pub const ALL: [Scenario; 5] = [Scenario::Main1, Scenario::Main2, Scenario::SuppRct, Scenario::SuppObs, Scenario::SuppPos];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Main1 => "main1",
            Scenario::Main2 => "main2",
            Scenario::SuppRct => "supp_rct",
            Scenario::SuppObs => "supp_obs",
            Scenario::SuppPos => "supp_pos",
        }
    }

    pub fn recommended_n(self) -> &'static [usize] {
        match self {
            Scenario::Main1 | Scenario::Main2 => &[1000, 2000, 3000, 5000],
            _ => &[100, 400, 900, 1600],
        }
    }

    /// Cross-fitting folds used for this scenario's study.
    pub fn default_folds(self) -> usize {
        match self {
            Scenario::Main1 | Scenario::Main2 => 15,
            _ => 5,
        }
    }

    /// True average treatment effect where the outcome does not depend on
    /// treatment.
    pub fn true_ate(self) -> Option<f64> {
        match self {
            Scenario::Main1 | Scenario::Main2 => Some(0.0),
            _ => None,
        }
    }

    fn draw_w(self, rng: &mut ChaCha8Rng) -> (f64, f64) {
        let (lo, hi, p2) = match self {
            Scenario::Main1 | Scenario::Main2 => {
                let w1 = Uniform::new(-2.0, 2.0).expect("valid range").sample(rng);
                let w2 = Normal::new(0.0, 0.5).expect("valid sd").sample(rng);
                return (w1, w2);
            }
            Scenario::SuppRct => (0.2, 0.8, 0.3),
            Scenario::SuppObs => (0.2, 0.8, 0.6),
            Scenario::SuppPos => (0.0, 0.6, 0.05),
        };
        let w1 = Uniform::new(lo, hi).expect("valid range").sample(rng);
        let w2 = f64::from(u8::from(Bernoulli::new(p2).expect("valid p").sample(rng)));
        (w1, w2)
    }

    /// True propensity `P(A = 1 | W)`.
    pub fn true_g(self, w1: f64, w2: f64) -> f64 {
        match self {
            Scenario::Main1 => expit(0.75 * w1 + 0.5 * w2),
            Scenario::Main2 => expit(0.5 * w2 * w2 - 0.5 * (w1 / 2.0).exp()),
            Scenario::SuppRct => 0.5,
            Scenario::SuppObs => expit(2.0 * w1 - w2 - w1 * w2),
            Scenario::SuppPos => expit(2.0 * w1 - 4.0 * w2 + w1 * w2),
        }
    }

    /// `E[Y | A = a, W]`.
    pub fn outcome_mean(self, a: f64, w1: f64, w2: f64) -> f64 {
        match self {
            Scenario::Main1 => 0.5 * w1 - 2.0 / 3.0 * w2,
            Scenario::Main2 => 2.0 * w1 - 2.0 * w2 * w2 + w2 + w1 * w2 + 0.5,
            Scenario::SuppRct | Scenario::SuppObs => a * (w1 + w2 + w1 * w2) + (1.0 - a) * w1,
            Scenario::SuppPos => a * (w1 + w2) + (1.0 - a) * w1,
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = HalError;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| HalError::InvalidArgument(format!("unknown scenario `{s}`")))
    }
}

/// Draws `n` units; deterministic in `(scenario, n, seed)`. Columns are
/// named `w1`, `w2`.
pub fn generate(scenario: Scenario, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(HalError::InvalidArgument("n must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.1).expect("valid sd");
    let mut w = Array2::zeros((n, 2));
    let mut a = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let (w1, w2) = scenario.draw_w(&mut rng);
        w[[i, 0]] = w1;
        w[[i, 1]] = w2;
        let ai = u8::from(rng.random::<f64>() < scenario.true_g(w1, w2));
        a.push(ai);
        y.push(scenario.outcome_mean(f64::from(ai), w1, w2) + noise.sample(&mut rng));
    }
    Dataset::new(w, a, y)?.with_names(vec!["w1".into(), "w2".into()])
}

fn integrate_truth(scenario: Scenario) -> f64 {
    const CHUNKS: usize = 100;
    let per = TRUTH_DRAWS / CHUNKS;
    let sums: Vec<f64> = (0..CHUNKS)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(0x7275_7468 ^ c as u64);
            (0..per)
                .map(|_| {
                    let (w1, w2) = scenario.draw_w(&mut rng);
                    scenario.outcome_mean(1.0, w1, w2)
                })
                .sum()
        })
        .collect();
    sums.iter().sum::<f64>() / (per * CHUNKS) as f64
}

/// `E[Y(1)]` by Monte Carlo integration of the treated outcome mean over
/// `TRUTH_DRAWS` covariate draws; computed once per scenario.
pub fn true_psi(scenario: Scenario) -> f64 {
    static CACHE: [OnceLock<f64>; 5] = [OnceLock::new(), OnceLock::new(), OnceLock::new(), OnceLock::new(), OnceLock::new()];
    *CACHE[scenario as usize].get_or_init(|| integrate_truth(scenario))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Cv,
    Dcar,
    DcarTrunc,
    Score,
    ScoreTrunc,
    Unadjusted,
    OracleG,
    ParametricLogistic,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Cv,
        Variant::Dcar,
        Variant::DcarTrunc,
        Variant::Score,
        Variant::ScoreTrunc,
        Variant::Unadjusted,
        Variant::OracleG,
        Variant::ParametricLogistic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Cv => "cv",
            Variant::Dcar => "dcar",
            Variant::DcarTrunc => "dcar_trunc",
            Variant::Score => "score",
            Variant::ScoreTrunc => "score_trunc",
            Variant::Unadjusted => "unadjusted",
            Variant::OracleG => "oracle_g",
            Variant::ParametricLogistic => "parametric_logistic",
        }
    }

    /// Selector for the HAL-based variants.
    pub fn selector(self) -> Option<SelectorKind> {
        match self {
            Variant::Cv => Some(SelectorKind::Cv),
            Variant::Dcar => Some(SelectorKind::Dcar),
            Variant::DcarTrunc => Some(SelectorKind::DcarTruncated),
            Variant::Score => Some(SelectorKind::Score),
            Variant::ScoreTrunc => Some(SelectorKind::ScoreTruncated),
            _ => None,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = HalError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| HalError::InvalidArgument(format!("unknown variant `{s}`")))
    }
}

/// One variant's estimate on one replication.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariantEstimate {
    pub psi_hat: f64,
    pub se: f64,
    /// Selected penalty for HAL-based variants.
    pub lambda: Option<f64>,
    /// Fold-averaged smallest active-basis score at the selected penalty.
    pub min_score: Option<f64>,
}

impl VariantEstimate {
    pub fn covers(&self, truth: f64) -> bool {
        (self.psi_hat - truth).abs() <= Z95 * self.se
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub folds: usize,
    pub degree: usize,
    pub grid: GridSpec,
    pub kappas: TruncationGrid,
    pub estimator: EstimatorKind,
    pub solver: SolverOptions,
}

impl SimConfig {
    pub fn for_scenario(scenario: Scenario) -> Self {
        Self {
            folds: scenario.default_folds(),
            degree: 2,
            grid: GridSpec::default(),
            kappas: TruncationGrid::default(),
            estimator: EstimatorKind::Plain,
            solver: SolverOptions::default(),
        }
    }
}

/// Mean of `y` among treated units with the standard error of that mean.
pub fn unadjusted(dataset: &Dataset) -> Result<VariantEstimate> {
    let y: Vec<f64> = dataset.a().iter().zip(dataset.y()).filter(|(&a, _)| a == 1).map(|(_, &y)| y).collect();
    if y.len() < 2 {
        return Err(HalError::DegenerateResponse("fewer than 2 treated units".into()));
    }
    let psi_hat = y.iter().sum::<f64>() / y.len() as f64;
    Ok(VariantEstimate { psi_hat, se: se_of_mean(&y)?, lambda: None, min_score: None })
}

/// Plain IPW with the true propensity; SE from `a y / g - psi`.
pub fn oracle_ipw(scenario: Scenario, dataset: &Dataset) -> Result<VariantEstimate> {
    let u: Vec<f64> = (0..dataset.n())
        .map(|i| {
            let w = dataset.row(i);
            f64::from(dataset.a()[i]) * dataset.y()[i] / scenario.true_g(w[0], w[1])
        })
        .collect();
    let psi_hat = u.iter().sum::<f64>() / u.len() as f64;
    Ok(VariantEstimate { psi_hat, se: se_of_mean(&u)?, lambda: None, min_score: None })
}

fn main_terms(dataset: &Dataset, i: usize) -> Vec<f64> {
    std::iter::once(1.0).chain(dataset.row(i).iter().copied()).collect()
}

/// Unpenalized main-terms logistic regression of `a` on `W` by Newton's
/// method; returns `(intercept, slopes...)`.
pub fn fit_main_terms_logistic(dataset: &Dataset) -> Result<Vec<f64>> {
    const TOL: f64 = 1e-10;
    const MAX_ITER: usize = 100;
    let p = dataset.d() + 1;
    let n = dataset.n() as f64;
    let x: Vec<Vec<f64>> = (0..dataset.n()).map(|i| main_terms(dataset, i)).collect();
    let mut beta = vec![0.0; p];
    for _ in 0..MAX_ITER {
        let mut grad = vec![0.0; p];
        let mut info = vec![0.0; p * p];
        for (xi, &a) in x.iter().zip(dataset.a()) {
            let g = expit(dot(xi, &beta));
            let r = f64::from(a) - g;
            let w = g * (1.0 - g);
            for j in 0..p {
                grad[j] += r * xi[j] / n;
                for k in 0..=j {
                    info[j * p + k] += w * xi[j] * xi[k] / n;
                }
            }
        }
        let chol = CholFactor::new(&info, p)
            .ok_or_else(|| HalError::Numerical("singular information in main-terms logistic fit".into()))?;
        let mut step = grad.clone();
        chol.solve(&mut step);
        for (b, s) in beta.iter_mut().zip(&step) {
            *b += s;
        }
        if !beta.iter().all(|b| b.is_finite()) {
            return Err(HalError::Numerical("main-terms logistic fit diverged (separated data)".into()));
        }
        if step.iter().fold(0.0f64, |m, s| m.max(s.abs())) < TOL {
            return Ok(beta);
        }
    }
    Err(HalError::Numerical("main-terms logistic fit did not converge".into()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Plain IPW with a main-terms logistic propensity fit on the full sample.
/// The SE is the sandwich form that accounts for estimating the
/// coefficients: `U_i + M I^{-1} S_i`, with `U_i = a_i y_i / g_i - psi`,
/// `S_i` the logistic score, `I` the information and
/// `M = mean dU/dbeta`.
pub fn parametric_ipw(dataset: &Dataset) -> Result<VariantEstimate> {
    let beta = fit_main_terms_logistic(dataset)?;
    let p = beta.len();
    let nf = dataset.n() as f64;
    let x: Vec<Vec<f64>> = (0..dataset.n()).map(|i| main_terms(dataset, i)).collect();
    let g: Vec<f64> = x.iter().map(|xi| expit(dot(xi, &beta))).collect();
    let ay: Vec<f64> = dataset.a().iter().zip(dataset.y()).map(|(&a, &y)| f64::from(a) * y).collect();
    let psi_hat = ay.iter().zip(&g).map(|(v, gi)| v / gi).sum::<f64>() / nf;
    let mut m = vec![0.0; p];
    let mut info = vec![0.0; p * p];
    for ((xi, &gi), &v) in x.iter().zip(&g).zip(&ay) {
        for j in 0..p {
            m[j] -= v * (1.0 - gi) / gi * xi[j] / nf;
            for k in 0..=j {
                info[j * p + k] += gi * (1.0 - gi) * xi[j] * xi[k] / nf;
            }
        }
    }
    let chol = CholFactor::new(&info, p).ok_or_else(|| HalError::Numerical("singular logistic information".into()))?;
    chol.solve(&mut m);
    let infl: Vec<f64> = x
        .iter()
        .zip(&g)
        .zip(dataset.a().iter().zip(&ay))
        .map(|((xi, &gi), (&a, &v))| v / gi - psi_hat + (f64::from(a) - gi) * dot(&m, xi))
        .collect();
    Ok(VariantEstimate { psi_hat, se: se_of_mean(&infl)?, lambda: None, min_score: None })
}

/// Every requested variant on one dataset, in the order given. HAL-based
/// variants share one cross-fit bundle.
pub fn estimate_variants(
    scenario: Scenario,
    dataset: &Dataset,
    variants: &[Variant],
    config: &SimConfig,
    fold_seed: u64,
) -> Result<Vec<VariantEstimate>> {
    let bundle = if variants.iter().any(|v| v.selector().is_some()) {
        let folds = make_folds(dataset, config.folds, fold_seed)?;
        let b = build_crossfit_default(dataset, &folds, config.degree, config.grid, &config.solver)?;
        let unconverged = b.propensity_paths.iter().flat_map(|p| &p.path.fits).chain(b.outcome_fits.iter().map(|o| &o.fit)).filter(|f| !f.converged).count();
        if unconverged > 0 {
            return Err(HalError::Numerical(format!("{unconverged} HAL fits did not converge")));
        }
        let scores = BundleScores::new(&b, dataset)?;
        Some((b, scores))
    } else {
        None
    };
    variants
        .iter()
        .map(|&v| match v.selector() {
            Some(kind) => {
                let (b, scores) = bundle.as_ref().expect("bundle built for HAL variants");
                let sel = select(kind, b, dataset, &config.kappas, scores)?;
                let r = estimate_with_selection(b, dataset, &sel, scores, config.estimator)?;
                Ok(VariantEstimate {
                    psi_hat: r.psi_hat,
                    se: r.se,
                    lambda: Some(r.selector.lambda),
                    min_score: r.diagnostics.min_score_mean,
                })
            }
            None => match v {
                Variant::Unadjusted => unadjusted(dataset),
                Variant::OracleG => oracle_ipw(scenario, dataset),
                Variant::ParametricLogistic => parametric_ipw(dataset),
                _ => unreachable!("HAL variants handled above"),
            },
        })
        .collect()
}

/// Per-replication outcome: estimates in variant order, or the error text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Replication {
    pub seed: u64,
    pub estimates: std::result::Result<Vec<VariantEstimate>, String>,
}

/// Runs replications `0..reps` with seeds `base_seed + r`; the same seed
/// draws the data and the folds.
pub fn replicate(
    scenario: Scenario,
    n: usize,
    reps: usize,
    variants: &[Variant],
    base_seed: u64,
    config: &SimConfig,
) -> Vec<Replication> {
    (0..reps as u64)
        .into_par_iter()
        .map(|r| {
            let seed = base_seed.wrapping_add(r);
            let estimates = generate(scenario, n, seed)
                .and_then(|ds| estimate_variants(scenario, &ds, variants, config, seed))
                .map_err(|e| e.to_string());
            Replication { seed, estimates }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub scenario: Scenario,
    pub variant: Variant,
    pub n: usize,
    pub truth: f64,
    pub reps: usize,
    pub bias: f64,
    pub bias_mcse: f64,
    pub sqrt_n_bias: f64,
    pub sqrt_n_bias_mcse: f64,
    pub n_mse: f64,
    pub n_mse_mcse: f64,
    pub coverage: f64,
    pub coverage_mcse: f64,
    pub mean_se: f64,
    pub mean_se_mcse: f64,
    pub mean_lambda: Option<f64>,
}

fn mean_sd(x: &[f64]) -> (f64, f64) {
    let r = x.len() as f64;
    let mean = x.iter().sum::<f64>() / r;
    let sd = if x.len() > 1 { (x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (r - 1.0)).sqrt() } else { 0.0 };
    (mean, sd)
}

impl MetricsRow {
    /// Aggregates estimates over replications.
    pub fn from_estimates(scenario: Scenario, variant: Variant, n: usize, truth: f64, est: &[VariantEstimate]) -> Result<Self> {
        if est.is_empty() {
            return Err(HalError::InvalidArgument("no replications to aggregate".into()));
        }
        let r = est.len() as f64;
        let nf = n as f64;
        let err: Vec<f64> = est.iter().map(|e| e.psi_hat - truth).collect();
        let sq: Vec<f64> = err.iter().map(|e| e * e).collect();
        let cov: Vec<f64> = est.iter().map(|e| f64::from(u8::from(e.covers(truth)))).collect();
        let ses: Vec<f64> = est.iter().map(|e| e.se).collect();
        let (bias, err_sd) = mean_sd(&err);
        let (mse, sq_sd) = mean_sd(&sq);
        let (coverage, _) = mean_sd(&cov);
        let (mean_se, se_sd) = mean_sd(&ses);
        let lambdas: Vec<f64> = est.iter().filter_map(|e| e.lambda).collect();
        Ok(Self {
            scenario,
            variant,
            n,
            truth,
            reps: est.len(),
            bias,
            bias_mcse: err_sd / r.sqrt(),
            sqrt_n_bias: nf.sqrt() * bias,
            sqrt_n_bias_mcse: nf.sqrt() * err_sd / r.sqrt(),
            n_mse: nf * mse,
            n_mse_mcse: nf * sq_sd / r.sqrt(),
            coverage,
            coverage_mcse: (coverage * (1.0 - coverage) / r).sqrt(),
            mean_se,
            mean_se_mcse: se_sd / r.sqrt(),
            mean_lambda: (!lambdas.is_empty()).then(|| lambdas.iter().sum::<f64>() / lambdas.len() as f64),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub rows: Vec<MetricsRow>,
    pub failed: usize,
}

impl MetricsTable {
    /// Aggregates replications, excluding failed ones; errors when more
    /// than `MAX_FAILURE_SHARE` of them failed.
    pub fn aggregate(scenario: Scenario, n: usize, variants: &[Variant], reps: &[Replication]) -> Result<Self> {
        let failed = reps.iter().filter(|r| r.estimates.is_err()).count();
        let allowed = (MAX_FAILURE_SHARE * reps.len() as f64).floor() as usize;
        for r in reps {
            if let Err(e) = &r.estimates {
                log::warn!("replication with seed {} failed: {e}", r.seed);
            }
        }
        if failed > allowed || failed == reps.len() {
            return Err(HalError::TooManyFailures { failed, total: reps.len(), allowed });
        }
        if failed > 0 {
            log::warn!("{failed} of {} replications failed and were excluded", reps.len());
        }
        let ok: Vec<&Vec<VariantEstimate>> = reps.iter().filter_map(|r| r.estimates.as_ref().ok()).collect();
        let truth = true_psi(scenario);
        let rows = variants
            .iter()
            .enumerate()
            .map(|(k, &v)| {
                let est: Vec<VariantEstimate> = ok.iter().map(|e| e[k]).collect();
                MetricsRow::from_estimates(scenario, v, n, truth, &est)
            })
            .collect::<Result<_>>()?;
        Ok(Self { rows, failed })
    }

    pub fn row(&self, variant: Variant) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    /// One row per variant.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    /// Long format: one row per (variant, metric) with its Monte Carlo SE.
    pub fn write_long_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["scenario", "variant", "n", "metric", "value", "mcse"])?;
        for r in &self.rows {
            for (metric, value, mcse) in [
                ("bias", r.bias, r.bias_mcse),
                ("sqrt_n_bias", r.sqrt_n_bias, r.sqrt_n_bias_mcse),
                ("n_mse", r.n_mse, r.n_mse_mcse),
                ("coverage", r.coverage, r.coverage_mcse),
            ] {
                w.write_record([
                    r.scenario.name(),
                    r.variant.name(),
                    r.n.to_string().as_str(),
                    metric,
                    value.to_string().as_str(),
                    mcse.to_string().as_str(),
                ])?;
            }
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Runs and aggregates a replication study.
pub fn run_replications(
    scenario: Scenario,
    n: usize,
    reps: usize,
    variants: &[Variant],
    base_seed: u64,
    config: &SimConfig,
) -> Result<MetricsTable> {
    if reps == 0 {
        return Err(HalError::InvalidArgument("reps must be at least 1".into()));
    }
    if variants.is_empty() {
        return Err(HalError::InvalidArgument("no variants requested".into()));
    }
    let runs = replicate(scenario, n, reps, variants, base_seed, config);
    MetricsTable::aggregate(scenario, n, variants, &runs)
}
