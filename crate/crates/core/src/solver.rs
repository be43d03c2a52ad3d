//! L1-penalized GLM paths over a binary design.
//!
//! Each fit minimizes `(1/n) * loss + lambda * sum_j |beta_j|` with an
//! unpenalized intercept; the loss is the Bernoulli negative log-likelihood
//! (logistic) or half the squared error. Logistic fits run proximal-Newton
//! outer steps on an iteratively reweighted quadratic model, followed by a
//! backtracking line search on the true objective, so the penalized
//! objective never increases between outer steps.
//!
//! The quadratic model is solved on a sequential strong-rule working set.
//! Nested indicator columns make plain coordinate descent converge very
//! slowly, so the support is handled with sign-restricted Newton steps
//! against a Cholesky factor that is updated as coordinates enter and leave;
//! coordinate descent sweeps remain as the fallback. A full KKT check over
//! every column is run before a fit is accepted.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::basis::DesignMatrix;
use crate::chol::CholFactor;
use crate::error::{HalError, Result};

/// Numerical floor for logistic predictions; unrelated to statistical truncation.
pub const PROB_CLIP: f64 = 1e-6;

const WEIGHT_FLOOR: f64 = 1e-10;

/// Coordinate-descent sweeps taken when a Newton step makes no progress.
const ACTIVE_PASSES: usize = 3;

/// A Hessian factor from earlier weights is refreshed once a step with it
/// shrinks the support gradient by less than this factor.
const STALE_CONTRACTION: f64 = 0.1;

/// Cached Cholesky factor of the quadratic-model Hessian restricted to a
/// support, with the intercept as the first coordinate.
struct SupportFactor {
    cols: Vec<usize>,
    chol: CholFactor,
    /// Weights the factor was built with; `None` for unit weights.
    weights: Option<Vec<f64>>,
    generation: u64,
    stale: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Logistic,
    SquaredError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyGrid {
    values: Vec<f64>,
    lambda_max: f64,
    ratio: f64,
}

impl PenaltyGrid {
    /// `k` values spaced geometrically from `lambda_max` down to `ratio * lambda_max`.
    pub fn geometric(lambda_max: f64, k: usize, ratio: f64) -> Result<Self> {
        if k < 2 {
            return Err(HalError::InvalidArgument(format!("grid needs at least 2 values, got {k}")));
        }
        if !(ratio > 0.0 && ratio < 1.0) {
            return Err(HalError::InvalidArgument(format!("grid ratio must lie in (0, 1), got {ratio}")));
        }
        if !(lambda_max.is_finite() && lambda_max > 0.0) {
            return Err(HalError::InvalidArgument(format!("lambda_max must be positive, got {lambda_max}")));
        }
        let step = ratio.ln() / (k - 1) as f64;
        let values = (0..k).map(|i| lambda_max * (step * i as f64).exp()).collect();
        Ok(Self { values, lambda_max, ratio })
    }

    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(HalError::InvalidArgument("grid needs at least 2 values".into()));
        }
        if values.iter().any(|&v| !(v.is_finite() && v > 0.0)) || values.windows(2).any(|p| p[1] >= p[0]) {
            return Err(HalError::InvalidArgument("grid must be positive and strictly decreasing".into()));
        }
        let ratio = values[values.len() - 1] / values[0];
        Ok(Self { lambda_max: values[0], ratio, values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn lambda_max(&self) -> f64 {
        self.lambda_max
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Convergence threshold on gradient-scaled coordinate changes and on
    /// the final KKT violation.
    pub tol: f64,
    /// Coordinate-descent sweep budget per penalty value.
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { tol: 1e-7, max_iter: 10_000 }
    }
}

/// Sparse coefficient vector over design columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseCoefs {
    pub len: usize,
    pub index: Vec<u32>,
    pub value: Vec<f64>,
}

impl SparseCoefs {
    fn from_dense(beta: &[f64]) -> Self {
        let mut index = Vec::new();
        let mut value = Vec::new();
        for (j, &b) in beta.iter().enumerate() {
            if b != 0.0 {
                index.push(j as u32);
                value.push(b);
            }
        }
        Self { len: beta.len(), index, value }
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.len];
        for (&j, &v) in self.index.iter().zip(&self.value) {
            out[j as usize] = v;
        }
        out
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.index.iter().zip(&self.value).map(|(&j, &v)| (j as usize, v))
    }

    pub fn nnz(&self) -> usize {
        self.index.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HalFit {
    pub intercept: f64,
    pub coefficients: SparseCoefs,
    pub lambda: f64,
    /// `|intercept| + sum |beta_j|`, the sectional-variation-norm proxy.
    pub l1_norm: f64,
    pub loss_kind: LossKind,
    pub converged: bool,
    pub iterations: usize,
}

impl HalFit {
    pub fn active(&self) -> &[u32] {
        &self.coefficients.index
    }

    pub fn linear_predictor(&self, design: &DesignMatrix) -> Result<Vec<f64>> {
        if design.ncols() != self.coefficients.len {
            return Err(HalError::DimensionMismatch { expected: self.coefficients.len, found: design.ncols() });
        }
        let mut eta = vec![self.intercept; design.nrows()];
        for (j, b) in self.coefficients.iter() {
            for &i in design.column(j) {
                eta[i as usize] += b;
            }
        }
        Ok(eta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HalPath {
    pub fits: Vec<HalFit>,
}

#[inline]
pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn amax(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

#[inline]
fn soft_threshold(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

/// Predictions on the response scale; logistic predictions are clipped to
/// `[PROB_CLIP, 1 - PROB_CLIP]`.
pub fn predict(fit: &HalFit, design: &DesignMatrix) -> Result<Vec<f64>> {
    let eta = fit.linear_predictor(design)?;
    Ok(match fit.loss_kind {
        LossKind::Logistic => eta.into_iter().map(|e| expit(e).clamp(PROB_CLIP, 1.0 - PROB_CLIP)).collect(),
        LossKind::SquaredError => eta,
    })
}

fn check_response(design: &DesignMatrix, response: &[f64], loss: LossKind) -> Result<()> {
    if response.len() != design.nrows() {
        return Err(HalError::DimensionMismatch { expected: design.nrows(), found: response.len() });
    }
    if loss == LossKind::Logistic && response.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(HalError::InvalidArgument("logistic response must be 0/1".into()));
    }
    if response.iter().any(|v| !v.is_finite()) {
        return Err(HalError::InvalidArgument("response contains non-finite values".into()));
    }
    Ok(())
}

/// Smallest penalty at which the intercept-only fit satisfies the KKT
/// conditions: `max_j |X_j^T (mean(y) - y)| / n`, inflated by a relative
/// 1e-9 so rounding in the solver cannot activate a column at this value.
pub fn lambda_max(design: &DesignMatrix, response: &[f64], loss: LossKind) -> Result<f64> {
    check_response(design, response, loss)?;
    let n = response.len() as f64;
    let mean = response.iter().sum::<f64>() / n;
    if loss == LossKind::Logistic && (mean == 0.0 || mean == 1.0) {
        return Err(HalError::DegenerateResponse("binary response has a single class".into()));
    }
    let r: Vec<f64> = response.iter().map(|&y| (mean - y) / n).collect();
    let mut g = vec![0.0; design.ncols()];
    design.transpose_mul(&r, &mut g);
    let lmax = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if !(lmax > 0.0 && lmax.is_finite()) {
        return Err(HalError::DegenerateResponse("no column is correlated with the response".into()));
    }
    Ok(lmax * (1.0 + 1e-9))
}

pub fn default_grid(
    design: &DesignMatrix,
    response: &[f64],
    loss: LossKind,
    k: usize,
    ratio: f64,
) -> Result<PenaltyGrid> {
    PenaltyGrid::geometric(lambda_max(design, response, loss)?, k, ratio)
}

/// Gradient of the (1/n)-scaled smooth loss: `(intercept, columns)`.
fn smooth_gradient(design: &DesignMatrix, response: &[f64], eta: &[f64], loss: LossKind) -> (f64, Vec<f64>) {
    let n = response.len() as f64;
    let r: Vec<f64> = eta
        .iter()
        .zip(response)
        .map(|(&e, &y)| match loss {
            LossKind::Logistic => (expit(e) - y) / n,
            LossKind::SquaredError => (e - y) / n,
        })
        .collect();
    let mut g = vec![0.0; design.ncols()];
    design.transpose_mul(&r, &mut g);
    (r.iter().sum(), g)
}

fn kkt_from_gradient(g0: f64, g: &[f64], beta: &[f64], lambda: f64) -> f64 {
    let mut worst = g0.abs();
    for (&gj, &bj) in g.iter().zip(beta) {
        let v = if bj != 0.0 { (gj + lambda * bj.signum()).abs() } else { (gj.abs() - lambda).max(0.0) };
        worst = worst.max(v);
    }
    worst
}

/// Largest KKT violation of `fit` (intercept stationarity included).
pub fn kkt_violation(fit: &HalFit, design: &DesignMatrix, response: &[f64]) -> Result<f64> {
    check_response(design, response, fit.loss_kind)?;
    let eta = fit.linear_predictor(design)?;
    let (g0, g) = smooth_gradient(design, response, &eta, fit.loss_kind);
    Ok(kkt_from_gradient(g0, &g, &fit.coefficients.to_dense(), fit.lambda))
}

fn smooth_loss(response: &[f64], eta: &[f64], loss: LossKind) -> f64 {
    let n = response.len() as f64;
    let total: f64 = match loss {
        LossKind::Logistic => eta.iter().zip(response).map(|(&e, &y)| softplus(e) - y * e).sum(),
        LossKind::SquaredError => eta.iter().zip(response).map(|(&e, &y)| 0.5 * (y - e) * (y - e)).sum(),
    };
    total / n
}

/// `(1/n) * loss + lambda * sum_j |beta_j|` at `fit`.
pub fn penalized_objective(fit: &HalFit, design: &DesignMatrix, response: &[f64]) -> Result<f64> {
    let eta = fit.linear_predictor(design)?;
    let pen: f64 = fit.coefficients.value.iter().map(|b| b.abs()).sum();
    Ok(smooth_loss(response, &eta, fit.loss_kind) + fit.lambda * pen)
}

/// Fits the whole grid with warm starts.
pub fn fit_path(
    design: &DesignMatrix,
    response: &[f64],
    grid: &PenaltyGrid,
    loss: LossKind,
    opts: &SolverOptions,
) -> Result<HalPath> {
    check_response(design, response, loss)?;
    let mut solver = PathSolver::new(design, response, loss, *opts)?;
    let mut fits = Vec::with_capacity(grid.len());
    let mut prev = grid.values()[0];
    for &lam in grid.values() {
        let (converged, iterations) = solver.solve(lam, prev)?;
        prev = lam;
        let beta = SparseCoefs::from_dense(&solver.beta);
        let l1_norm = solver.b0.abs() + beta.value.iter().map(|b| b.abs()).sum::<f64>();
        if !converged {
            log::debug!("lambda {lam:.3e}: not converged after {iterations} sweeps");
        }
        fits.push(HalFit {
            intercept: solver.b0,
            coefficients: beta,
            lambda: lam,
            l1_norm,
            loss_kind: loss,
            converged,
            iterations,
        });
    }
    path_diagnostics(&fits);
    Ok(HalPath { fits })
}

fn path_diagnostics(fits: &[HalFit]) {
    if fits.len() < 2 {
        return;
    }
    let steps = fits.len() - 1;
    let shrinks = fits.windows(2).filter(|p| p[1].coefficients.nnz() < p[0].coefficients.nnz()).count();
    if shrinks as f64 > 0.05 * steps as f64 {
        log::debug!("active set shrank in {shrinks} of {steps} path steps");
    }
    let norm_drops = fits.windows(2).filter(|p| p[1].l1_norm + 1e-12 < p[0].l1_norm).count();
    if norm_drops > 0 {
        log::debug!("L1 norm decreased with smaller penalty in {norm_drops} of {steps} path steps");
    }
}

struct PathSolver<'a> {
    x: &'a DesignMatrix,
    y: &'a [f64],
    loss: LossKind,
    opts: SolverOptions,
    n: f64,
    beta: Vec<f64>,
    b0: f64,
    eta: Vec<f64>,
    grad: Vec<f64>,
    in_strong: Vec<bool>,
    strong: Vec<usize>,
    // scratch
    w: Vec<f64>,
    r: Vec<f64>,
    h: Vec<f64>,
    factor: Option<SupportFactor>,
    entry_sign: Vec<f64>,
    scratch: Vec<f64>,
    /// Bumped whenever the working weights are recomputed.
    weight_generation: u64,
    /// Objective after every accepted step, recorded only when enabled.
    trace: Option<Vec<f64>>,
}

impl<'a> PathSolver<'a> {
    fn new(x: &'a DesignMatrix, y: &'a [f64], loss: LossKind, opts: SolverOptions) -> Result<Self> {
        let n = y.len();
        let mean = y.iter().sum::<f64>() / n as f64;
        let b0 = match loss {
            LossKind::Logistic => {
                if mean == 0.0 || mean == 1.0 {
                    return Err(HalError::DegenerateResponse("binary response has a single class".into()));
                }
                logit(mean)
            }
            LossKind::SquaredError => mean,
        };
        let eta = vec![b0; n];
        let (_, grad) = smooth_gradient(x, y, &eta, loss);
        let p = x.ncols();
        let h = match loss {
            LossKind::SquaredError => (0..p).map(|j| x.column(j).len() as f64 / n as f64).collect(),
            LossKind::Logistic => vec![0.0; p],
        };
        Ok(Self {
            x,
            y,
            loss,
            opts,
            n: n as f64,
            beta: vec![0.0; p],
            b0,
            eta,
            grad,
            in_strong: vec![false; p],
            strong: Vec::new(),
            w: vec![1.0; n],
            r: vec![0.0; n],
            h,
            factor: None,
            entry_sign: vec![1.0; p],
            scratch: vec![0.0; p],
            weight_generation: 0,
            trace: None,
        })
    }

    fn objective(&self, eta: &[f64], lambda: f64) -> f64 {
        let pen: f64 = self.strong.iter().map(|&j| self.beta[j].abs()).sum();
        smooth_loss(self.y, eta, self.loss) + lambda * pen
    }

    /// Solves at `lambda`, warm-started from the current state.
    fn solve(&mut self, lambda: f64, lambda_prev: f64) -> Result<(bool, usize)> {
        let screen = 2.0 * lambda - lambda_prev;
        for j in 0..self.beta.len() {
            if !self.in_strong[j] && (self.beta[j] != 0.0 || self.grad[j].abs() >= screen) {
                self.in_strong[j] = true;
                self.strong.push(j);
            }
        }
        let mut sweeps = 0usize;
        loop {
            let budget = self.opts.max_iter.saturating_sub(sweeps);
            sweeps += match self.loss {
                LossKind::SquaredError => self.solve_squared(lambda, budget),
                LossKind::Logistic => self.solve_logistic(lambda, budget)?,
            };
            let (g0, g) = smooth_gradient(self.x, self.y, &self.eta, self.loss);
            self.grad = g;
            if !g0.is_finite() {
                return Err(HalError::Numerical("non-finite gradient".into()));
            }
            let mut added = false;
            for j in 0..self.beta.len() {
                if !self.in_strong[j] && self.grad[j].abs() > lambda {
                    self.in_strong[j] = true;
                    self.strong.push(j);
                    added = true;
                }
            }
            let viol = kkt_from_gradient(g0, &self.grad, &self.beta, lambda);
            if !added && viol <= self.opts.tol {
                return Ok((true, sweeps));
            }
            if sweeps >= self.opts.max_iter {
                return Ok((false, sweeps));
            }
            if !added {
                // count a no-progress round so the loop always terminates
                sweeps += 1;
            }
        }
    }

    /// One coordinate-descent pass over `set` on the weighted quadratic model
    /// held in `self.r` / `self.w` / `self.h`; returns the largest
    /// gradient-scaled change.
    fn cd_pass(&mut self, set: &[usize], lambda: f64, weighted: bool) -> f64 {
        let n = self.n;
        let mut worst = 0.0f64;

        let (sr, sw) = if weighted {
            (self.r.iter().sum::<f64>(), self.w.iter().sum::<f64>())
        } else {
            (self.r.iter().sum::<f64>(), n)
        };
        let d0 = sr / sw;
        if d0 != 0.0 {
            self.b0 += d0;
            for i in 0..self.r.len() {
                self.r[i] -= self.w[i] * d0;
                self.eta[i] += d0;
            }
            worst = worst.max((sw / n) * d0.abs());
        }

        for &j in set {
            let hj = self.h[j];
            if hj <= 0.0 {
                continue;
            }
            let col = self.x.column(j);
            let g: f64 = col.iter().map(|&i| self.r[i as usize]).sum::<f64>() / n;
            let old = self.beta[j];
            let new = soft_threshold(hj * old + g, lambda) / hj;
            if new != old {
                let delta = new - old;
                self.beta[j] = new;
                if weighted {
                    for &i in col {
                        let i = i as usize;
                        self.r[i] -= self.w[i] * delta;
                        self.eta[i] += delta;
                    }
                } else {
                    for &i in col {
                        let i = i as usize;
                        self.r[i] -= delta;
                        self.eta[i] += delta;
                    }
                }
                worst = worst.max(hj * delta.abs());
            }
        }
        worst
    }

    /// Solves the current quadratic model over the strong set. Subspace
    /// Newton steps on the support alternate with a gradient check that
    /// admits KKT violators with a tentative sign; cyclic coordinate descent
    /// takes over whenever a Newton step makes no progress.
    fn cd_converge(&mut self, lambda: f64, weighted: bool, tol: f64, budget: usize) -> usize {
        let strong = self.strong.clone();
        let mut sweeps = 0;
        let mut entrants: Vec<usize> = Vec::new();
        while sweeps < budget {
            let mut support: Vec<usize> = strong.iter().copied().filter(|&j| self.beta[j] != 0.0).collect();
            support.append(&mut entrants);
            let moved = self.newton_step(&support, lambda, weighted);
            if moved {
                self.record(lambda, weighted);
            }
            sweeps += 1;

            let mut worst = (self.r.iter().sum::<f64>() / self.n).abs();
            let scaled: Vec<f64> = self.r.iter().map(|v| v / self.n).collect();
            self.x.transpose_mul(&scaled, &mut self.scratch);
            for &j in &strong {
                let g = self.scratch[j];
                if self.beta[j] != 0.0 {
                    worst = worst.max((g - lambda * self.beta[j].signum()).abs());
                } else if g.abs() - lambda > tol {
                    worst = worst.max(g.abs() - lambda);
                    self.entry_sign[j] = g.signum();
                    entrants.push(j);
                }
            }
            if worst <= tol {
                break;
            }
            if !moved {
                entrants.clear();
                for _ in 0..ACTIVE_PASSES.min(budget - sweeps) {
                    self.cd_pass(&strong, lambda, weighted);
                    sweeps += 1;
                    self.record(lambda, weighted);
                }
            }
        }
        sweeps
    }

    /// Quadratic-model objective up to a constant: `sum r_i^2 / (2 n w_i)`
    /// plus the penalty on `set`.
    fn model_objective(&self, set: &[usize], lambda: f64, weighted: bool) -> f64 {
        let fit: f64 = if weighted {
            self.r.iter().zip(&self.w).map(|(r, w)| r * r / w).sum()
        } else {
            self.r.iter().map(|r| r * r).sum()
        };
        fit / (2.0 * self.n) + lambda * set.iter().map(|&j| self.beta[j].abs()).sum::<f64>()
    }

    /// Cholesky factor of the model Hessian on `support` (intercept first) at
    /// the current weights.
    fn factorize(&self, support: &[usize], weighted: bool) -> Option<SupportFactor> {
        let n = self.r.len();
        let m = support.len() + 1;
        let sw: Vec<f64> = if weighted { self.w.iter().map(|w| w.sqrt()).collect() } else { vec![1.0; n] };
        let mut dense = Array2::<f64>::zeros((n, m));
        for i in 0..n {
            dense[[i, 0]] = sw[i];
        }
        for (k, &j) in support.iter().enumerate() {
            for &i in self.x.column(j) {
                dense[[i as usize, k + 1]] = sw[i as usize];
            }
        }
        let gram = dense.t().dot(&dense) / self.n;
        let mut flat: Vec<f64> = gram.iter().copied().collect();
        let chol = CholFactor::new(&flat, m).or_else(|| {
            let ridge = 1e-10 * (0..m).map(|k| flat[k * m + k]).fold(0.0, f64::max);
            for k in 0..m {
                flat[k * m + k] += ridge;
            }
            CholFactor::new(&flat, m)
        })?;
        Some(SupportFactor {
            cols: support.to_vec(),
            chol,
            weights: if weighted { Some(self.w.clone()) } else { None },
            generation: self.weight_generation,
            stale: false,
        })
    }

    /// Brings the cached factor onto `support` by column insertions and
    /// removals, refactorizing when that is cheaper or the cache is unusable.
    fn sync_factor(&mut self, support: &[usize], weighted: bool) -> bool {
        let usable = match &self.factor {
            Some(f) => !f.stale && f.weights.is_some() == weighted,
            None => false,
        };
        if usable {
            let f = self.factor.as_ref().unwrap();
            let mut wanted = vec![false; self.beta.len()];
            for &j in support {
                wanted[j] = true;
            }
            let removals: Vec<usize> = (0..f.cols.len()).filter(|&k| !wanted[f.cols[k]]).collect();
            let mut present = vec![false; self.beta.len()];
            for &j in &f.cols {
                present[j] = true;
            }
            let additions: Vec<usize> = support.iter().copied().filter(|&j| !present[j]).collect();
            if removals.len() + additions.len() <= (support.len() / 4).max(8) {
                let mut f = self.factor.take().unwrap();
                for &k in removals.iter().rev() {
                    f.cols.remove(k);
                    f.chol.remove(k + 1);
                }
                let mut ok = true;
                for &j in &additions {
                    let col = self.gram_column(&f, j);
                    if !f.chol.push(&col) {
                        ok = false;
                        break;
                    }
                    f.cols.push(j);
                }
                if ok {
                    self.factor = Some(f);
                    return true;
                }
            }
        }
        self.factor = self.factorize(support, weighted);
        self.factor.is_some()
    }

    /// Hessian entries between column `j` and the factor's columns (intercept
    /// first, `j` itself last), using the factor's reference weights.
    fn gram_column(&self, f: &SupportFactor, j: usize) -> Vec<f64> {
        let n = self.r.len();
        let mut mask = vec![0.0; n];
        for &i in self.x.column(j) {
            mask[i as usize] = match &f.weights {
                Some(w) => w[i as usize],
                None => 1.0,
            };
        }
        let m = f.cols.len() + 2;
        let mut col = vec![0.0; m];
        col[0] = mask.iter().sum::<f64>() / self.n;
        for (k, &c) in f.cols.iter().enumerate() {
            col[k + 1] = self.x.column(c).iter().map(|&i| mask[i as usize]).sum::<f64>() / self.n;
        }
        col[m - 1] = col[0];
        col
    }

    /// Sign of `beta_j`, or the tentative sign of a coordinate entering at zero.
    fn sign_of(&self, j: usize) -> f64 {
        if self.beta[j] != 0.0 {
            self.beta[j].signum()
        } else {
            self.entry_sign[j]
        }
    }

    /// `(x_j^T r) / n - lambda * sign(beta_j)` over the factor's columns, with
    /// the intercept first: the Newton right-hand side of the quadratic model.
    fn support_rhs(&self, cols: &[usize], lambda: f64) -> Vec<f64> {
        let mut rhs = vec![0.0; cols.len() + 1];
        rhs[0] = self.r.iter().sum::<f64>() / self.n;
        for (k, &j) in cols.iter().enumerate() {
            let g: f64 = self.x.column(j).iter().map(|&i| self.r[i as usize]).sum();
            rhs[k + 1] = g / self.n - lambda * self.sign_of(j);
        }
        rhs
    }

    /// Minimizes the quadratic model over `support` with signs held fixed.
    /// Each step moves toward the sign-restricted minimizer until the first
    /// coordinate reaches zero; that coordinate leaves the support and the
    /// step repeats until the minimizer is sign-consistent. A factor built
    /// at earlier weights gives an inexact step that later calls refine.
    /// Returns false when no step was taken.
    fn newton_step(&mut self, support: &[usize], lambda: f64, weighted: bool) -> bool {
        let n = self.r.len();
        if support.is_empty() || support.len() + 1 > n {
            return false;
        }
        let synced = self.sync_factor(support, weighted);
        if !synced {
            return false;
        }
        let mut f = self.factor.take().unwrap();
        let exact = !weighted || f.generation == self.weight_generation;
        let mut moved = false;
        let mut shift = vec![0.0; n];
        let start = amax(&self.support_rhs(&f.cols, lambda));
        loop {
            let mut delta = self.support_rhs(&f.cols, lambda);
            f.chol.solve(&mut delta);
            if delta.iter().any(|v| !v.is_finite()) {
                f.stale = true;
                break;
            }
            let mut t = 1.0f64;
            let mut blocking = None;
            for (k, &j) in f.cols.iter().enumerate() {
                let b = self.beta[j];
                let d = delta[k + 1];
                let crosses = if b == 0.0 { self.entry_sign[j] * d < 0.0 } else { b * (b + d) <= 0.0 };
                if crosses {
                    let tk = if b == 0.0 { 0.0 } else { -b / d };
                    if tk < t || blocking.is_none() && tk <= t {
                        t = tk;
                        blocking = Some(k);
                    }
                }
            }

            let before = self.model_objective(&f.cols, lambda, weighted);
            let saved_b0 = self.b0;
            let saved_beta: Vec<f64> = f.cols.iter().map(|&j| self.beta[j]).collect();
            shift.iter_mut().for_each(|v| *v = t * delta[0]);
            for (k, &j) in f.cols.iter().enumerate() {
                let step = if blocking == Some(k) { -self.beta[j] } else { t * delta[k + 1] };
                self.beta[j] = if blocking == Some(k) { 0.0 } else { self.beta[j] + step };
                for &i in self.x.column(j) {
                    shift[i as usize] += step;
                }
            }
            self.b0 += t * delta[0];
            self.apply_shift(&shift, 1.0, weighted);
            if self.model_objective(&f.cols, lambda, weighted) > before {
                self.b0 = saved_b0;
                for (k, &j) in f.cols.iter().enumerate() {
                    self.beta[j] = saved_beta[k];
                }
                self.apply_shift(&shift, -1.0, weighted);
                f.stale = true;
                break;
            }
            moved |= t > 0.0;
            match blocking {
                Some(k) if f.cols.len() > 1 => {
                    f.cols.remove(k);
                    f.chol.remove(k + 1);
                }
                Some(k) => {
                    f.cols.remove(k);
                    f.stale = true;
                    break;
                }
                None => {
                    if !exact && amax(&self.support_rhs(&f.cols, lambda)) > STALE_CONTRACTION * start {
                        f.stale = true;
                    }
                    break;
                }
            }
        }
        self.factor = Some(f);
        moved
    }

    fn apply_shift(&mut self, shift: &[f64], sign: f64, weighted: bool) {
        for i in 0..shift.len() {
            let d = sign * shift[i];
            self.eta[i] += d;
            self.r[i] -= if weighted { self.w[i] * d } else { d };
        }
    }

    fn solve_squared(&mut self, lambda: f64, budget: usize) -> usize {
        for i in 0..self.r.len() {
            self.r[i] = self.y[i] - self.eta[i];
        }
        self.cd_converge(lambda, false, self.opts.tol, budget)
    }

    fn solve_logistic(&mut self, lambda: f64, budget: usize) -> Result<usize> {
        let n = self.n;
        let mut sweeps = 0;
        while sweeps < budget {
            for i in 0..self.r.len() {
                let mu = expit(self.eta[i]);
                self.w[i] = (mu * (1.0 - mu)).max(WEIGHT_FLOOR);
                self.r[i] = self.y[i] - mu;
            }
            self.weight_generation += 1;
            for &j in &self.strong {
                self.h[j] = self.x.column(j).iter().map(|&i| self.w[i as usize]).sum::<f64>() / n;
            }
            let f_old = self.objective(&self.eta, lambda);
            if !f_old.is_finite() {
                return Err(HalError::Numerical("non-finite logistic loss".into()));
            }
            let eta_old = self.eta.clone();
            let b0_old = self.b0;
            let beta_old: Vec<f64> = self.strong.iter().map(|&j| self.beta[j]).collect();

            sweeps += self.cd_converge(lambda, true, self.opts.tol, budget - sweeps);

            let eta_new = self.eta.clone();
            let b0_new = self.b0;
            let beta_new: Vec<f64> = self.strong.iter().map(|&j| self.beta[j]).collect();

            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..40 {
                let f = self.objective(&self.eta, lambda);
                if f <= f_old {
                    accepted = true;
                    break;
                }
                t *= 0.5;
                self.set_step(t, &eta_old, &eta_new, b0_old, b0_new, &beta_old, &beta_new);
            }
            if !accepted {
                self.set_step(0.0, &eta_old, &eta_new, b0_old, b0_new, &beta_old, &beta_new);
                break;
            }
            if let Some(trace) = self.trace.as_mut() {
                trace.push(smooth_loss(self.y, &self.eta, self.loss) + lambda * self.strong.iter().map(|&j| self.beta[j].abs()).sum::<f64>());
            }

            let mut change = self.h_intercept() * (self.b0 - b0_old).abs();
            for (k, &j) in self.strong.iter().enumerate() {
                change = change.max(self.h[j] * (self.beta[j] - beta_old[k]).abs());
            }
            if change <= self.opts.tol {
                break;
            }
        }
        Ok(sweeps)
    }

    /// Squared-error passes are exact descent steps on the true objective;
    /// logistic inner passes act on the quadratic model and are recorded
    /// after the line search instead.
    fn record(&mut self, lambda: f64, weighted: bool) {
        if weighted || self.trace.is_none() {
            return;
        }
        let f = self.objective(&self.eta, lambda);
        if let Some(trace) = self.trace.as_mut() {
            trace.push(f);
        }
    }

    fn h_intercept(&self) -> f64 {
        self.w.iter().sum::<f64>() / self.n
    }

    #[allow(clippy::too_many_arguments)]
    fn set_step(
        &mut self,
        t: f64,
        eta_old: &[f64],
        eta_new: &[f64],
        b0_old: f64,
        b0_new: f64,
        beta_old: &[f64],
        beta_new: &[f64],
    ) {
        for i in 0..self.eta.len() {
            self.eta[i] = eta_old[i] + t * (eta_new[i] - eta_old[i]);
        }
        self.b0 = b0_old + t * (b0_new - b0_old);
        for (k, &j) in self.strong.iter().enumerate() {
            self.beta[j] = beta_old[k] + t * (beta_new[k] - beta_old[k]);
        }
    }
}
