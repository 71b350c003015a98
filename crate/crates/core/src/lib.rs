//! Automatic debiased inference for functionals of nonparametric instrumental
//! variable estimators.
//!
//! The crate is organised bottom-up:
//!
//! - [`basis`]: polynomial and symmetric empirical-moment dictionaries.
//! - [`pgmm`]: penalized GMM for Riesz representer coefficients.
//! - [`mliv`]: Double Lasso and Kernel IV structural-function estimators.
//! - [`functionals`]: average derivatives, policy effects and own-price elasticities.
//! - [`demand`]: logit market simulation and symmetric state vectors.
//! - [`debias`]: cross-fitted plug-in and debiased estimators.
//! - [`experiments`]: Monte Carlo harness with bias, SE and coverage summaries.

pub mod basis;
pub mod debias;
pub mod demand;
pub mod error;
pub mod experiments;
pub mod folds;
pub mod functionals;
pub mod io;
pub mod mliv;
pub mod pgmm;
pub mod rng;

pub use error::{Error, Result};
