//! Robust M-estimation for linear and logistic mixed models.
//!
//! Two losses are supported for each model: the negative marginal
//! log-likelihood (MLE) and the density power divergence loss (MDPDE) with
//! tuning exponent `alpha > 0`. The [`experiments`] module simulates data and
//! measures how fast the fixed-effect estimates concentrate as the number of
//! groups grows; [`diagnostics`] checks the numerically verifiable
//! regularity conditions.

pub mod error;
pub mod model;
pub mod optimizer;
pub mod lmm;
pub mod logistic;
pub mod experiments;
pub mod diagnostics;

pub use error::{Error, Result};
