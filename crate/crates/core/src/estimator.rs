//! Cross-fitted IPW estimates of counterfactual means and the average
//! treatment effect, with influence-function standard errors.

use serde::{Deserialize, Serialize};

use crate::crossfit::{build_crossfit_default, CrossFitBundle, GridSpec};
use crate::data::{Dataset, FoldAssignment};
use crate::error::{HalError, Result};
use crate::solver::SolverOptions;
use crate::undersmooth::{
    apply_truncation, select, BundleScores, FoldScore, SelectorKind, SelectorResult, TruncationGrid,
};

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959964;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Plain,
    Stabilized,
}

impl std::str::FromStr for EstimatorKind {
    type Err = HalError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(EstimatorKind::Plain),
            "stabilized" => Ok(EstimatorKind::Stabilized),
            other => Err(HalError::InvalidArgument(format!("unknown estimator `{other}`"))),
        }
    }
}

/// Treatment arm of a counterfactual mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Treated,
    Control,
}

impl Arm {
    fn label(self) -> u8 {
        match self {
            Arm::Treated => 1,
            Arm::Control => 0,
        }
    }

    /// Probability of this arm given the treatment propensity `g`.
    #[inline]
    pub fn prob(self, g: f64) -> f64 {
        match self {
            Arm::Treated => g,
            Arm::Control => 1.0 - g,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateConfig {
    pub degree: usize,
    pub selector: SelectorKind,
    /// Searched only by the truncated selectors.
    pub kappas: TruncationGrid,
    pub estimator: EstimatorKind,
    pub grid: GridSpec,
    pub solver: SolverOptions,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        Self {
            degree: 2,
            selector: SelectorKind::Dcar,
            kappas: TruncationGrid::default(),
            estimator: EstimatorKind::Plain,
            grid: GridSpec::default(),
            solver: SolverOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectorSummary {
    pub kind: SelectorKind,
    pub lambda_index: usize,
    pub lambda: f64,
    pub kappa: f64,
    pub criterion: f64,
    pub cv_lambda_index: usize,
    pub cv_lambda: f64,
    pub grid_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSummary {
    pub max_weight: f64,
    /// `(sum w)^2 / sum w^2` over units in the arm.
    pub effective_sample_size: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Per-fold smallest active-basis score at the chosen penalty.
    pub min_scores: Vec<FoldScore>,
    /// Mean of the defined per-fold scores.
    pub min_score_mean: Option<f64>,
    pub weights: WeightSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub arm: Arm,
    pub psi_hat: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub estimator_kind: EstimatorKind,
    pub selector: SelectorSummary,
    pub n: usize,
    pub diagnostics: Diagnostics,
    /// Per-unit influence values, kept for contrasts across arms.
    #[serde(skip)]
    pub influence: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AteReport {
    pub treated: EstimateReport,
    pub control: EstimateReport,
    pub ate: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

fn check_lengths(dataset: &Dataset, v: &[f64]) -> Result<()> {
    if v.len() != dataset.n() {
        return Err(HalError::DimensionMismatch { expected: dataset.n(), found: v.len() });
    }
    Ok(())
}

fn check_propensity(g: &[f64]) -> Result<()> {
    if let Some(x) = g.iter().find(|&&x| !(x > 0.0 && x < 1.0)) {
        return Err(HalError::InvalidArgument(format!("propensity {x} outside (0, 1)")));
    }
    Ok(())
}

/// IPW point estimate of the `arm` counterfactual mean given treatment
/// propensities `g`.
pub fn ipw_point(dataset: &Dataset, g: &[f64], kind: EstimatorKind, arm: Arm) -> Result<f64> {
    check_lengths(dataset, g)?;
    check_propensity(g)?;
    let label = arm.label();
    let mut num = 0.0;
    let mut den = 0.0;
    for ((&a, &y), &gi) in dataset.a().iter().zip(dataset.y()).zip(g) {
        if a == label {
            let p = arm.prob(gi);
            num += y / p;
            den += 1.0 / p;
        }
    }
    match kind {
        EstimatorKind::Plain => Ok(num / dataset.n() as f64),
        EstimatorKind::Stabilized => {
            if den == 0.0 {
                Err(HalError::DegenerateResponse(format!("no units in arm {label}")))
            } else {
                Ok(num / den)
            }
        }
    }
}

/// Per-unit influence values
/// `1{a=arm} y / p - psi - q (1{a=arm} - p) / p`.
pub fn influence_values(dataset: &Dataset, g: &[f64], q: &[f64], psi_hat: f64, arm: Arm) -> Result<Vec<f64>> {
    check_lengths(dataset, g)?;
    check_lengths(dataset, q)?;
    check_propensity(g)?;
    let label = arm.label();
    Ok(dataset
        .a()
        .iter()
        .zip(dataset.y())
        .zip(g.iter().zip(q))
        .map(|((&a, &y), (&gi, &qi))| {
            let ind = if a == label { 1.0 } else { 0.0 };
            let p = arm.prob(gi);
            ind * y / p - psi_hat - qi * (ind - p) / p
        })
        .collect())
}

/// `sqrt(var(x) / n)` with the `1/(n-1)` variance.
pub fn se_of_mean(x: &[f64]) -> Result<f64> {
    let n = x.len();
    if n < 2 {
        return Err(HalError::InvalidArgument(format!("need at least 2 units for a standard error, got {n}")));
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    Ok((var / n as f64).sqrt())
}

pub fn influence_se(dataset: &Dataset, g: &[f64], q: &[f64], psi_hat: f64, arm: Arm) -> Result<f64> {
    se_of_mean(&influence_values(dataset, g, q, psi_hat, arm)?)
}

pub fn weight_summary(dataset: &Dataset, g: &[f64], arm: Arm) -> WeightSummary {
    let label = arm.label();
    let w: Vec<f64> = dataset.a().iter().zip(g).filter(|(&a, _)| a == label).map(|(_, &gi)| 1.0 / arm.prob(gi)).collect();
    let s: f64 = w.iter().sum();
    let s2: f64 = w.iter().map(|x| x * x).sum();
    WeightSummary {
        max_weight: w.iter().copied().fold(0.0, f64::max),
        effective_sample_size: if s2 > 0.0 { s * s / s2 } else { 0.0 },
    }
}

fn summarize(sel: &SelectorResult, cv_index: usize) -> SelectorSummary {
    SelectorSummary {
        kind: sel.kind,
        lambda_index: sel.chosen_lambda_index,
        lambda: sel.chosen_lambda,
        kappa: sel.chosen_kappa,
        criterion: sel.chosen_value(),
        cv_lambda_index: cv_index,
        cv_lambda: sel.lambdas[cv_index],
        grid_len: sel.lambdas.len(),
    }
}

/// Treated-arm estimate from an existing bundle and selector result.
pub fn estimate_with_selection(
    bundle: &CrossFitBundle,
    dataset: &Dataset,
    sel: &SelectorResult,
    scores: &BundleScores,
    kind: EstimatorKind,
) -> Result<EstimateReport> {
    let g = apply_truncation(&bundle.g_at(sel.chosen_lambda_index), sel.chosen_kappa)?;
    let psi_hat = ipw_point(dataset, &g, kind, Arm::Treated)?;
    let influence = influence_values(dataset, &g, &bundle.holdout_q, psi_hat, Arm::Treated)?;
    let se = se_of_mean(&influence)?;
    let min_scores = scores.at(sel.chosen_lambda_index, dataset.n());
    let defined: Vec<f64> = min_scores.iter().filter_map(|s| s.min_score).collect();
    let min_score_mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Ok(EstimateReport {
        arm: Arm::Treated,
        psi_hat,
        se,
        ci_low: psi_hat - Z95 * se,
        ci_high: psi_hat + Z95 * se,
        estimator_kind: kind,
        selector: summarize(sel, scores.cv.chosen_index),
        n: dataset.n(),
        diagnostics: Diagnostics { min_scores, min_score_mean, weights: weight_summary(dataset, &g, Arm::Treated) },
        influence,
    })
}

fn estimate_treated(dataset: &Dataset, folds: &FoldAssignment, config: &EstimateConfig) -> Result<EstimateReport> {
    let bundle = build_crossfit_default(dataset, folds, config.degree, config.grid, &config.solver)?;
    let scores = BundleScores::new(&bundle, dataset)?;
    let sel = select(config.selector, &bundle, dataset, &config.kappas, &scores)?;
    estimate_with_selection(&bundle, dataset, &sel, &scores, config.estimator)
}

/// Cross-fitted estimate of the `arm` counterfactual mean. The control arm
/// is estimated on the dataset with treatment labels flipped, so its
/// propensity, outcome regression and selector are all refit.
pub fn estimate(dataset: &Dataset, folds: &FoldAssignment, config: &EstimateConfig, arm: Arm) -> Result<EstimateReport> {
    match arm {
        Arm::Treated => estimate_treated(dataset, folds, config),
        Arm::Control => {
            let mut r = estimate_treated(&dataset.flipped(), folds, config)?;
            r.arm = Arm::Control;
            Ok(r)
        }
    }
}

/// Combines arm estimates; the standard error comes from the differenced
/// influence values.
pub fn combine_ate(treated: EstimateReport, control: EstimateReport) -> Result<AteReport> {
    if treated.influence.len() != control.influence.len() {
        return Err(HalError::DimensionMismatch { expected: treated.influence.len(), found: control.influence.len() });
    }
    let diff: Vec<f64> = treated.influence.iter().zip(&control.influence).map(|(a, b)| a - b).collect();
    let se = se_of_mean(&diff)?;
    let ate = treated.psi_hat - control.psi_hat;
    Ok(AteReport { treated, control, ate, se, ci_low: ate - Z95 * se, ci_high: ate + Z95 * se })
}

pub fn estimate_ate(dataset: &Dataset, folds: &FoldAssignment, config: &EstimateConfig) -> Result<AteReport> {
    let treated = estimate(dataset, folds, config, Arm::Treated)?;
    let control = estimate(dataset, folds, config, Arm::Control)?;
    combine_ate(treated, control)
}
