//! Global cross-validation for the penalty and V-fold cross-fitting of the
//! propensity and outcome nuisances.
//!
//! Every fold enumerates its own bases from its training complement, so a
//! validation row never contributes knots to the fit that predicts it.

use ndarray::{Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{enumerate_basis, evaluate_basis, BasisSet, DesignMatrix};
use crate::data::{stratified_folds, Dataset, FoldAssignment};
use crate::error::{HalError, Result};
use crate::solver::{
    fit_path, lambda_max, predict, HalFit, HalPath, LossKind, PenaltyGrid, SolverOptions, SparseCoefs,
    PROB_CLIP,
};

/// Folds used by the internal cross-validation of the outcome regression.
pub const OUTCOME_FOLDS: usize = 5;

/// Depth of the default grid when the design has more columns than rows.
pub const WIDE_RATIO: f64 = 1e-2;
/// Depth of the default grid otherwise.
pub const TALL_RATIO: f64 = 1e-4;

/// Length and depth of a geometric penalty grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub k: usize,
    /// `lambda_min / lambda_max`; `None` picks `WIDE_RATIO` when every
    /// training design has more columns than rows and `TALL_RATIO` otherwise.
    pub ratio: Option<f64>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { k: 100, ratio: None }
    }
}

impl GridSpec {
    fn grid(&self, lambda_max: f64, designs: &[FoldDesign]) -> Result<PenaltyGrid> {
        let wide = designs.iter().all(|fd| fd.x_train.ncols() > fd.x_train.nrows());
        let ratio = self.ratio.unwrap_or(if wide { WIDE_RATIO } else { TALL_RATIO });
        PenaltyGrid::geometric(lambda_max, self.k, ratio)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvCurve {
    pub grid: PenaltyGrid,
    /// Cross-validated mean loss per grid value.
    pub risk: Vec<f64>,
    pub chosen_index: usize,
}

impl CvCurve {
    fn from_risk(grid: PenaltyGrid, risk: Vec<f64>) -> Self {
        let chosen_index = argmin_first(&risk);
        Self { grid, risk, chosen_index }
    }

    pub fn chosen_lambda(&self) -> f64 {
        self.grid.values()[self.chosen_index]
    }
}

/// Index of the smallest value; the earliest (largest penalty) wins ties.
fn argmin_first(v: &[f64]) -> usize {
    let mut best = 0;
    for (k, &x) in v.iter().enumerate() {
        if x < v[best] {
            best = k;
        }
    }
    best
}

/// Propensity path of one fold with the bases it was fit on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPath {
    pub basis: BasisSet,
    pub path: HalPath,
}

/// Outcome regression of one fold, fit on the treated rows of its training
/// complement at a penalty chosen by internal cross-validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeFit {
    pub basis: BasisSet,
    pub fit: HalFit,
    /// `None` when the treated outcomes leave nothing to select (constant
    /// response or no usable basis); the fit is then the mean.
    pub cv: Option<CvCurve>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossFitBundle {
    pub folds: FoldAssignment,
    pub grid: PenaltyGrid,
    pub degree: usize,
    pub propensity_paths: Vec<FoldPath>,
    pub outcome_fits: Vec<OutcomeFit>,
    /// `n x K` holdout propensity predictions, clipped to `[PROB_CLIP, 1 - PROB_CLIP]`.
    pub holdout_g: Array2<f64>,
    pub holdout_q: Vec<f64>,
}

impl CrossFitBundle {
    pub fn n(&self) -> usize {
        self.holdout_g.nrows()
    }

    /// Holdout propensities at grid index `k`.
    pub fn g_at(&self, k: usize) -> Vec<f64> {
        self.holdout_g.column(k).to_vec()
    }
}

/// Bernoulli log loss for `y` in {0,1}, or squared error.
fn pointwise_loss(y: f64, pred: f64, loss: LossKind) -> f64 {
    match loss {
        LossKind::Logistic => -(y * pred.ln() + (1.0 - y) * (1.0 - pred).ln()),
        LossKind::SquaredError => (y - pred) * (y - pred),
    }
}

fn rows(w: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    w.select(Axis(0), idx)
}

struct FoldDesign {
    train: Vec<usize>,
    valid: Vec<usize>,
    basis: BasisSet,
    x_train: DesignMatrix,
    x_valid: DesignMatrix,
}

fn fold_designs(w: &Array2<f64>, folds: &FoldAssignment, degree: usize) -> Result<Vec<FoldDesign>> {
    (0..folds.v())
        .into_par_iter()
        .map(|v| {
            let train = folds.training_rows(v);
            let valid = folds.validation_rows(v);
            let (basis, x_train) = enumerate_basis(&rows(w, &train), degree)?;
            let x_valid = evaluate_basis(&basis, &rows(w, &valid))?;
            Ok(FoldDesign { train, valid, basis, x_train, x_valid })
        })
        .collect()
}

/// Largest per-fold `lambda_max`; folds whose response is degenerate
/// (constant, or uncorrelated with every basis) contribute nothing.
fn shared_lambda_max(designs: &[FoldDesign], response: &[f64], loss: LossKind) -> Result<Option<f64>> {
    let mut best: Option<f64> = None;
    for fd in designs {
        let r: Vec<f64> = fd.train.iter().map(|&i| response[i]).collect();
        match lambda_max(&fd.x_train, &r, loss) {
            Ok(l) => best = Some(best.map_or(l, |b: f64| b.max(l))),
            Err(HalError::DegenerateResponse(_)) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(best)
}

fn check_training_classes(dataset: &Dataset, folds: &FoldAssignment) -> Result<()> {
    if folds.n() != dataset.n() {
        return Err(HalError::DimensionMismatch { expected: dataset.n(), found: folds.n() });
    }
    for v in 0..folds.v() {
        let train = folds.training_rows(v);
        let treated = train.iter().filter(|&&i| dataset.a()[i] == 1).count();
        if treated < 2 || treated == train.len() {
            return Err(HalError::DegenerateResponse(format!(
                "training complement of fold {v} has {treated} treated of {} rows",
                train.len()
            )));
        }
    }
    Ok(())
}

/// Fits every fold's path and returns them with the `n x K` holdout
/// predictions.
fn fold_paths(
    designs: &[FoldDesign],
    response: &[f64],
    n: usize,
    grid: &PenaltyGrid,
    loss: LossKind,
    opts: &SolverOptions,
) -> Result<(Vec<HalPath>, Array2<f64>)> {
    let paths: Vec<HalPath> = designs
        .par_iter()
        .map(|fd| {
            let r: Vec<f64> = fd.train.iter().map(|&i| response[i]).collect();
            fit_path(&fd.x_train, &r, grid, loss, opts)
        })
        .collect::<Result<_>>()?;
    let mut holdout = Array2::zeros((n, grid.len()));
    for (fd, path) in designs.iter().zip(&paths) {
        for (k, fit) in path.fits.iter().enumerate() {
            let pred = predict(fit, &fd.x_valid)?;
            for (&i, p) in fd.valid.iter().zip(pred) {
                holdout[[i, k]] = p;
            }
        }
    }
    Ok((paths, holdout))
}

/// `risk_k = (1/V) sum_v mean_{i in v} loss(response_i, holdout[i, k])`.
pub fn cv_risk(holdout: &Array2<f64>, response: &[f64], folds: &FoldAssignment, loss: LossKind) -> Vec<f64> {
    let v = folds.v();
    let mut sums = vec![vec![0.0; holdout.ncols()]; v];
    let mut counts = vec![0usize; v];
    for (i, &f) in folds.fold_of().iter().enumerate() {
        counts[f] += 1;
        for (k, s) in sums[f].iter_mut().enumerate() {
            *s += pointwise_loss(response[i], holdout[[i, k]], loss);
        }
    }
    (0..holdout.ncols())
        .map(|k| (0..v).map(|f| sums[f][k] / counts[f] as f64).sum::<f64>() / v as f64)
        .collect()
}

fn response_for(dataset: &Dataset, loss: LossKind) -> Vec<f64> {
    match loss {
        LossKind::Logistic => dataset.a().iter().map(|&a| a as f64).collect(),
        LossKind::SquaredError => dataset.y().to_vec(),
    }
}

/// Global cross-validation selector. The response is the treatment for the
/// logistic loss and the outcome for squared error. The grid starts at the
/// largest `lambda_max` over the folds' training complements.
pub fn cv_select_lambda(
    dataset: &Dataset,
    folds: &FoldAssignment,
    degree: usize,
    loss: LossKind,
    spec: GridSpec,
    opts: &SolverOptions,
) -> Result<CvCurve> {
    if folds.n() != dataset.n() {
        return Err(HalError::DimensionMismatch { expected: dataset.n(), found: folds.n() });
    }
    let response = response_for(dataset, loss);
    let designs = fold_designs(dataset.w(), folds, degree)?;
    let lmax = shared_lambda_max(&designs, &response, loss)?
        .ok_or_else(|| HalError::DegenerateResponse("response is degenerate in every training complement".into()))?;
    if loss == LossKind::Logistic {
        check_training_classes(dataset, folds)?;
    }
    let grid = spec.grid(lmax, &designs)?;
    let (_, holdout) = fold_paths(&designs, &response, dataset.n(), &grid, loss, opts)?;
    let risk = cv_risk(&holdout, &response, folds, loss);
    Ok(CvCurve::from_risk(grid, risk))
}

/// Cross-validated propensity risk along the bundle's grid.
pub fn propensity_cv(bundle: &CrossFitBundle, dataset: &Dataset) -> CvCurve {
    let a = response_for(dataset, LossKind::Logistic);
    let risk = cv_risk(&bundle.holdout_g, &a, &bundle.folds, LossKind::Logistic);
    CvCurve::from_risk(bundle.grid.clone(), risk)
}

fn outcome_seed(base: u64, first_valid_row: usize) -> u64 {
    base ^ (first_valid_row as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Squared-error HAL fit of `y` on `w` at a penalty chosen by internal
/// `OUTCOME_FOLDS`-fold cross-validation.
pub fn fit_outcome(
    w: &Array2<f64>,
    y: &[f64],
    degree: usize,
    spec: GridSpec,
    seed: u64,
    opts: &SolverOptions,
) -> Result<OutcomeFit> {
    let m = y.len();
    if m < 2 {
        return Err(HalError::DegenerateResponse(format!("outcome regression needs at least 2 rows, got {m}")));
    }
    let (basis, design) = enumerate_basis(w, degree)?;
    let mean_fit = |basis: BasisSet| {
        // the smallest penalty at which the mean is the fit on all rows
        let lambda = match lambda_max(&design, y, LossKind::SquaredError) {
            Ok(l) => l,
            Err(HalError::DegenerateResponse(_)) => 0.0,
            Err(e) => return Err(e),
        };
        let intercept = y.iter().sum::<f64>() / m as f64;
        let fit = HalFit {
            intercept,
            coefficients: SparseCoefs { len: design.ncols(), index: Vec::new(), value: Vec::new() },
            lambda,
            l1_norm: intercept.abs(),
            loss_kind: LossKind::SquaredError,
            converged: true,
            iterations: 0,
        };
        Ok(OutcomeFit { basis, fit, cv: None })
    };
    let inner_v = OUTCOME_FOLDS.min(m);
    let inner = stratified_folds(&vec![1u8; m], inner_v, seed)?;
    let designs = fold_designs(w, &inner, degree)?;
    let Some(lmax) = shared_lambda_max(&designs, y, LossKind::SquaredError)? else {
        return mean_fit(basis);
    };
    let grid = spec.grid(lmax, &designs)?;
    let (_, holdout) = fold_paths(&designs, y, m, &grid, LossKind::SquaredError, opts)?;
    let cv = CvCurve::from_risk(grid, cv_risk(&holdout, y, &inner, LossKind::SquaredError));
    let upto = PenaltyGrid::from_values(cv.grid.values()[..=cv.chosen_index].to_vec())?;
    let fit = fit_path(&design, y, &upto, LossKind::SquaredError, opts)?.fits.pop().expect("nonempty grid");
    Ok(OutcomeFit { basis, fit, cv: Some(cv) })
}

/// Cross-fits the propensity path over `grid` and the outcome regression.
pub fn build_crossfit(
    dataset: &Dataset,
    folds: &FoldAssignment,
    grid: &PenaltyGrid,
    degree: usize,
    spec: GridSpec,
    opts: &SolverOptions,
) -> Result<CrossFitBundle> {
    check_training_classes(dataset, folds)?;
    let designs = fold_designs(dataset.w(), folds, degree)?;
    assemble(dataset, folds, designs, grid.clone(), degree, spec, opts)
}

/// [`build_crossfit`] on a geometric grid whose first value is the largest
/// `lambda_max` over the folds' training complements.
pub fn build_crossfit_default(
    dataset: &Dataset,
    folds: &FoldAssignment,
    degree: usize,
    spec: GridSpec,
    opts: &SolverOptions,
) -> Result<CrossFitBundle> {
    check_training_classes(dataset, folds)?;
    let designs = fold_designs(dataset.w(), folds, degree)?;
    let a = response_for(dataset, LossKind::Logistic);
    let lmax = shared_lambda_max(&designs, &a, LossKind::Logistic)?
        .ok_or_else(|| HalError::DegenerateResponse("treatment is uncorrelated with every basis".into()))?;
    let grid = spec.grid(lmax, &designs)?;
    assemble(dataset, folds, designs, grid, degree, spec, opts)
}

fn assemble(
    dataset: &Dataset,
    folds: &FoldAssignment,
    designs: Vec<FoldDesign>,
    grid: PenaltyGrid,
    degree: usize,
    spec: GridSpec,
    opts: &SolverOptions,
) -> Result<CrossFitBundle> {
    let n = dataset.n();
    let a = response_for(dataset, LossKind::Logistic);
    let (paths, holdout_g) = fold_paths(&designs, &a, n, &grid, LossKind::Logistic, opts)?;
    debug_assert!(holdout_g.iter().all(|&g| (PROB_CLIP..=1.0 - PROB_CLIP).contains(&g)));

    let outcome_fits: Vec<OutcomeFit> = designs
        .par_iter()
        .map(|fd| {
            let treated: Vec<usize> = fd.train.iter().copied().filter(|&i| dataset.a()[i] == 1).collect();
            let y: Vec<f64> = treated.iter().map(|&i| dataset.y()[i]).collect();
            let seed = outcome_seed(folds.seed(), fd.valid[0]);
            fit_outcome(&rows(dataset.w(), &treated), &y, degree, spec, seed, opts)
        })
        .collect::<Result<_>>()?;

    let mut holdout_q = vec![0.0; n];
    for (fd, of) in designs.iter().zip(&outcome_fits) {
        let x = evaluate_basis(&of.basis, &rows(dataset.w(), &fd.valid))?;
        for (&i, q) in fd.valid.iter().zip(predict(&of.fit, &x)?) {
            holdout_q[i] = q;
        }
    }

    let propensity_paths = designs.into_iter().zip(paths).map(|(fd, path)| FoldPath { basis: fd.basis, path }).collect();
    Ok(CrossFitBundle { folds: folds.clone(), grid, degree, propensity_paths, outcome_fits, holdout_g, holdout_q })
}
