//! Undersmoothing selectors for the propensity penalty.
//!
//! Both selectors start from the cross-validated penalty and search only the
//! smaller penalties of the grid, optionally jointly with a truncation level
//! `kappa` applied to the holdout propensities:
//!
//! * `dcar` minimizes `| (1/V) sum_v mean_{i in v} q_i (a_i - g_i) / g_i |`;
//! * `score` minimizes `(1/V) sum_v (1/||beta_v||_1) sum_{j in J_v}
//!   | mean_{i in v} phi_j(W_i) (a_i - g_i) / g_i |` over the fold's active
//!   bases `J_v`.

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::basis::{evaluate_basis, DesignMatrix};
use crate::crossfit::{propensity_cv, CrossFitBundle, CvCurve};
use crate::data::Dataset;
use crate::error::{HalError, Result};
use crate::solver::{predict, HalFit};

/// Truncation levels searched by the truncated selectors by default.
pub const DEFAULT_KAPPAS: [f64; 6] = [0.0, 0.001, 0.005, 0.01, 0.025, 0.05];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruncationGrid {
    values: Vec<f64>,
}

impl TruncationGrid {
    /// Values must be strictly increasing, start at 0 and stay below 0.5.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.first() != Some(&0.0) {
            return Err(HalError::InvalidArgument("truncation grid must start at 0".into()));
        }
        if values.windows(2).any(|p| !(p[1] > p[0])) {
            return Err(HalError::InvalidArgument("truncation grid must be strictly increasing".into()));
        }
        if values.iter().any(|&k| !(k < 0.5)) {
            return Err(HalError::InvalidArgument("truncation levels must be below 0.5".into()));
        }
        Ok(Self { values })
    }

    /// The grid `{0}`: no truncation.
    pub fn none() -> Self {
        Self { values: vec![0.0] }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_trivial(&self) -> bool {
        self.values.len() == 1
    }
}

impl Default for TruncationGrid {
    fn default() -> Self {
        Self { values: DEFAULT_KAPPAS.to_vec() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectorKind {
    Cv,
    Dcar,
    Score,
    DcarTruncated,
    ScoreTruncated,
}

impl SelectorKind {
    pub fn name(self) -> &'static str {
        match self {
            SelectorKind::Cv => "cv",
            SelectorKind::Dcar => "dcar",
            SelectorKind::Score => "score",
            SelectorKind::DcarTruncated => "dcar_truncated",
            SelectorKind::ScoreTruncated => "score_truncated",
        }
    }

    pub fn is_truncated(self) -> bool {
        matches!(self, SelectorKind::DcarTruncated | SelectorKind::ScoreTruncated)
    }
}

impl std::str::FromStr for SelectorKind {
    type Err = HalError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "cv" => SelectorKind::Cv,
            "dcar" => SelectorKind::Dcar,
            "score" => SelectorKind::Score,
            "dcar_truncated" | "dcar_trunc" => SelectorKind::DcarTruncated,
            "score_truncated" | "score_trunc" => SelectorKind::ScoreTruncated,
            other => return Err(HalError::InvalidArgument(format!("unknown selector `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectorResult {
    pub kind: SelectorKind,
    pub chosen_lambda_index: usize,
    pub chosen_lambda: f64,
    pub chosen_kappa: f64,
    /// First grid index searched (the cross-validated penalty).
    pub search_from: usize,
    pub lambdas: Vec<f64>,
    pub kappas: Vec<f64>,
    /// Criterion surface, `criterion_values[k][c]` at penalty `k` and
    /// truncation `kappas[c]`; infinite where undefined.
    pub criterion_values: Vec<Vec<f64>>,
    /// Mean over folds of the smallest active-basis score per penalty;
    /// `None` where every fold's active set is empty.
    pub diagnostics: Vec<Option<f64>>,
}

impl SelectorResult {
    pub fn chosen_value(&self) -> f64 {
        let c = self.kappas.iter().position(|&k| k == self.chosen_kappa).expect("chosen kappa in grid");
        self.criterion_values[self.chosen_lambda_index][c]
    }
}

/// Clamps `g` into `[kappa, 1 - kappa]`.
pub fn apply_truncation(g: &[f64], kappa: f64) -> Result<Vec<f64>> {
    if !(0.0..0.5).contains(&kappa) {
        return Err(HalError::InvalidArgument(format!("truncation level {kappa} outside [0, 0.5)")));
    }
    Ok(g.iter().map(|&v| truncate(v, kappa)).collect())
}

#[inline]
fn truncate(g: f64, kappa: f64) -> f64 {
    if g < kappa {
        kappa
    } else if g > 1.0 - kappa {
        1.0 - kappa
    } else {
        g
    }
}

/// Minimizing cell of `surface` over rows `from..`; ties go to the smaller
/// row (larger penalty), then the smaller column. NaN never wins.
pub fn select_cell(surface: &[Vec<f64>], from: usize) -> (usize, usize) {
    let mut best = (from, 0);
    let mut best_val = f64::INFINITY;
    for (k, row) in surface.iter().enumerate().skip(from) {
        for (c, &v) in row.iter().enumerate() {
            if v < best_val {
                best_val = v;
                best = (k, c);
            }
        }
    }
    best
}

fn check_consistent(bundle: &CrossFitBundle, dataset: &Dataset) -> Result<()> {
    if bundle.n() != dataset.n() {
        return Err(HalError::DimensionMismatch { expected: bundle.n(), found: dataset.n() });
    }
    Ok(())
}

/// `D_CAR` criterion over every (penalty, truncation) cell.
pub fn dcar_surface(bundle: &CrossFitBundle, dataset: &Dataset, kappas: &TruncationGrid) -> Result<Vec<Vec<f64>>> {
    check_consistent(bundle, dataset)?;
    let v = bundle.folds.v();
    let groups: Vec<Vec<usize>> = (0..v).map(|f| bundle.folds.validation_rows(f)).collect();
    let a = dataset.a();
    let q = &bundle.holdout_q;
    Ok((0..bundle.grid.len())
        .map(|k| {
            let g = bundle.holdout_g.column(k);
            let g = g.as_slice().map_or_else(|| g.to_vec(), <[f64]>::to_vec);
            kappas.values().iter().map(|&kappa| dcar_value(a, q, &g, &groups, kappa)).collect()
        })
        .collect())
}

/// `| (1/V) sum_v mean_{i in groups[v]} q_i (a_i - g~_i) / g~_i |` with
/// `g~` the propensities truncated at `kappa`.
pub fn dcar_value(a: &[u8], q: &[f64], g: &[f64], groups: &[Vec<usize>], kappa: f64) -> f64 {
    let total: f64 = groups
        .iter()
        .map(|rows| {
            let s: f64 = rows
                .iter()
                .map(|&i| {
                    let gt = truncate(g[i], kappa);
                    assert!(gt > 0.0, "truncated propensity must be positive");
                    q[i] * (a[i] as f64 - gt) / gt
                })
                .sum();
            s / rows.len() as f64
        })
        .sum();
    (total / groups.len() as f64).abs()
}

/// One fold's score term `(1/||beta||_1) sum_{j in active}
/// | mean_i phi_j(W_i) (a_i - g~_i) / g~_i |` over the rows of `x`;
/// infinite when the norm is zero.
pub fn score_term(x: &DesignMatrix, active: &[u32], l1_norm: f64, a: &[u8], g: &[f64], kappa: f64) -> f64 {
    if l1_norm == 0.0 {
        return f64::INFINITY;
    }
    let m = a.len() as f64;
    let resid: Vec<f64> = a
        .iter()
        .zip(g)
        .map(|(&ai, &gi)| {
            let gt = truncate(gi, kappa);
            (ai as f64 - gt) / gt
        })
        .collect();
    let inner: f64 = active.iter().map(|&j| (x.column_dot(j as usize, &resid) / m).abs()).sum();
    inner / l1_norm
}

/// Score criterion over every (penalty, truncation) cell.
pub fn score_surface(bundle: &CrossFitBundle, dataset: &Dataset, kappas: &TruncationGrid) -> Result<Vec<Vec<f64>>> {
    check_consistent(bundle, dataset)?;
    let v = bundle.folds.v();
    let k_len = bundle.grid.len();
    let nk = kappas.values().len();
    let a = dataset.a();
    let mut surface = vec![vec![0.0; nk]; k_len];
    for f in 0..v {
        let rows = bundle.folds.validation_rows(f);
        let x = evaluate_basis(&bundle.propensity_paths[f].basis, &dataset.w().select(Axis(0), &rows))?;
        let a_valid: Vec<u8> = rows.iter().map(|&i| a[i]).collect();
        for (k, fit) in bundle.propensity_paths[f].path.fits.iter().enumerate() {
            let g: Vec<f64> = rows.iter().map(|&i| bundle.holdout_g[[i, k]]).collect();
            for (c, &kappa) in kappas.values().iter().enumerate() {
                surface[k][c] += score_term(&x, fit.active(), fit.l1_norm, &a_valid, &g, kappa) / v as f64;
            }
        }
    }
    Ok(surface)
}

/// Quantities shared by every selector on one bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct BundleScores {
    pub cv: CvCurve,
    /// `fold_scores[v][k]`: fold `v`'s smallest active-basis score at grid
    /// index `k` (see [`basis_score_diagnostic`]).
    pub fold_scores: Vec<Vec<Option<f64>>>,
}

impl BundleScores {
    pub fn new(bundle: &CrossFitBundle, dataset: &Dataset) -> Result<Self> {
        check_consistent(bundle, dataset)?;
        let fold_scores = full_designs(bundle, dataset)?
            .iter()
            .zip(&bundle.propensity_paths)
            .map(|(x, fp)| fp.path.fits.iter().map(|fit| fold_min_score(fit, x, dataset.a())).collect())
            .collect::<Result<_>>()?;
        Ok(Self { cv: propensity_cv(bundle, dataset), fold_scores })
    }

    /// Per-fold scores at grid index `k`, with the `sqrt(n)` scaling.
    pub fn at(&self, k: usize, n: usize) -> Vec<FoldScore> {
        let sqrt_n = (n as f64).sqrt();
        self.fold_scores
            .iter()
            .enumerate()
            .map(|(fold, s)| FoldScore { fold, min_score: s[k], scaled: s[k].map(|v| v * sqrt_n) })
            .collect()
    }

    /// Mean over folds with a nonempty active set, per grid index.
    pub fn path_means(&self) -> Vec<Option<f64>> {
        let k_len = self.fold_scores.first().map_or(0, Vec::len);
        (0..k_len)
            .map(|k| {
                let defined: Vec<f64> = self.fold_scores.iter().filter_map(|s| s[k]).collect();
                (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
            })
            .collect()
    }
}

fn result_from_surface(
    kind: SelectorKind,
    bundle: &CrossFitBundle,
    kappas: &TruncationGrid,
    surface: Vec<Vec<f64>>,
    search_from: usize,
    scores: &BundleScores,
) -> SelectorResult {
    let (k, c) = select_cell(&surface, search_from);
    SelectorResult {
        kind,
        chosen_lambda_index: k,
        chosen_lambda: bundle.grid.values()[k],
        chosen_kappa: kappas.values()[c],
        search_from,
        lambdas: bundle.grid.values().to_vec(),
        kappas: kappas.values().to_vec(),
        criterion_values: surface,
        diagnostics: scores.path_means(),
    }
}

/// `D_CAR` selector: `dcar` for the trivial truncation grid, else `dcar_truncated`.
pub fn dcar_criterion(bundle: &CrossFitBundle, dataset: &Dataset, kappas: &TruncationGrid) -> Result<SelectorResult> {
    let kind = if kappas.is_trivial() { SelectorKind::Dcar } else { SelectorKind::DcarTruncated };
    select(kind, bundle, dataset, kappas, &BundleScores::new(bundle, dataset)?)
}

/// Score selector: `score` for the trivial truncation grid, else `score_truncated`.
pub fn score_criterion(bundle: &CrossFitBundle, dataset: &Dataset, kappas: &TruncationGrid) -> Result<SelectorResult> {
    let kind = if kappas.is_trivial() { SelectorKind::Score } else { SelectorKind::ScoreTruncated };
    select(kind, bundle, dataset, kappas, &BundleScores::new(bundle, dataset)?)
}

/// Global cross-validation selector expressed as a [`SelectorResult`] whose
/// surface is the cross-validated risk.
pub fn cv_selector(bundle: &CrossFitBundle, dataset: &Dataset) -> Result<SelectorResult> {
    select(SelectorKind::Cv, bundle, dataset, &TruncationGrid::none(), &BundleScores::new(bundle, dataset)?)
}

/// Runs the selector named by `kind`; non-truncated kinds ignore `kappas`.
pub fn run_selector(
    kind: SelectorKind,
    bundle: &CrossFitBundle,
    dataset: &Dataset,
    kappas: &TruncationGrid,
) -> Result<SelectorResult> {
    select(kind, bundle, dataset, kappas, &BundleScores::new(bundle, dataset)?)
}

/// [`run_selector`] with precomputed bundle scores.
pub fn select(
    kind: SelectorKind,
    bundle: &CrossFitBundle,
    dataset: &Dataset,
    kappas: &TruncationGrid,
    scores: &BundleScores,
) -> Result<SelectorResult> {
    check_consistent(bundle, dataset)?;
    let none = TruncationGrid::none();
    let kappas = if kind.is_truncated() { kappas } else { &none };
    let from = scores.cv.chosen_index;
    Ok(match kind {
        SelectorKind::Cv => {
            let surface = scores.cv.risk.iter().map(|&r| vec![r]).collect();
            let mut res = result_from_surface(kind, bundle, kappas, surface, 0, scores);
            debug_assert_eq!(res.chosen_lambda_index, from);
            res.search_from = from;
            res
        }
        SelectorKind::Dcar | SelectorKind::DcarTruncated => {
            result_from_surface(kind, bundle, kappas, dcar_surface(bundle, dataset, kappas)?, from, scores)
        }
        SelectorKind::Score | SelectorKind::ScoreTruncated => {
            result_from_surface(kind, bundle, kappas, score_surface(bundle, dataset, kappas)?, from, scores)
        }
    })
}

/// Smallest active-basis score of one fold's fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FoldScore {
    pub fold: usize,
    /// `min_j | (1/n) sum_i phi_j(W_i) (a_i - g_i) |`; `None` for an empty active set.
    pub min_score: Option<f64>,
    /// `min_score * sqrt(n)`.
    pub scaled: Option<f64>,
}

/// `min_{j in active} | (1/n) sum_i x_ij resid_i |` over the rows of `x`;
/// `None` for an empty active set.
pub fn min_basis_score(x: &DesignMatrix, active: &[u32], resid: &[f64]) -> Option<f64> {
    let n = resid.len() as f64;
    active.iter().map(|&j| (x.column_dot(j as usize, resid) / n).abs()).reduce(f64::min)
}

fn fold_min_score(fit: &HalFit, x_all: &DesignMatrix, a: &[u8]) -> Result<Option<f64>> {
    if fit.active().is_empty() {
        return Ok(None);
    }
    let g = predict(fit, x_all)?;
    let resid: Vec<f64> = a.iter().zip(&g).map(|(&ai, gi)| ai as f64 - gi).collect();
    Ok(min_basis_score(x_all, fit.active(), &resid))
}

fn full_designs(bundle: &CrossFitBundle, dataset: &Dataset) -> Result<Vec<DesignMatrix>> {
    bundle.propensity_paths.iter().map(|fp| evaluate_basis(&fp.basis, dataset.w())).collect()
}

/// Per-fold smallest score over the active bases at grid index `k`, with
/// untruncated propensities of the fold's fit evaluated on every row.
pub fn basis_score_diagnostic(bundle: &CrossFitBundle, dataset: &Dataset, k: usize) -> Result<Vec<FoldScore>> {
    check_consistent(bundle, dataset)?;
    if k >= bundle.grid.len() {
        return Err(HalError::InvalidArgument(format!("grid index {k} out of range")));
    }
    let sqrt_n = (dataset.n() as f64).sqrt();
    full_designs(bundle, dataset)?
        .iter()
        .zip(&bundle.propensity_paths)
        .enumerate()
        .map(|(fold, (x, fp))| {
            let min_score = fold_min_score(&fp.path.fits[k], x, dataset.a())?;
            Ok(FoldScore { fold, min_score, scaled: min_score.map(|s| s * sqrt_n) })
        })
        .collect()
}
