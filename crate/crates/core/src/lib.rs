//! Inverse probability weighted estimation of counterfactual means and
//! average treatment effects with a propensity score fit by an undersmoothed
//! highly adaptive lasso (HAL).
//!
//! The pipeline: [`data`] holds `(W, A, Y)` and fold splits, [`basis`]
//! builds indicator bases, [`solver`] fits L1-penalized paths, [`crossfit`]
//! produces holdout nuisance predictions, [`undersmooth`] picks the penalty
//! (and optional truncation), and [`estimator`] turns the result into point
//! estimates with influence-function confidence intervals. [`sim`] runs the
//! Monte Carlo studies.

pub mod basis;
pub mod crossfit;
mod chol;
pub mod data;
pub mod error;
pub mod estimator;
pub mod sim;
pub mod solver;
pub mod undersmooth;

pub use error::{HalError, Result};
