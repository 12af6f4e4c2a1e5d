//! Standard errors, confidence intervals, and power analysis for A/B
//! experiments whose metrics are means or ratios of means over clustered
//! data, with optional regression covariate adjustment.
//!
//! The crate is organized around a single idea: every supported estimator
//! (mean, ratio of means, covariate-adjusted mean, covariate-adjusted ratio)
//! reports a residual standard deviation, and standard errors are always
//! `residual_sd / (sqrt(n) * denominator_mean)`. That one scalar also feeds
//! the power solvers, so planning and analysis share the same machinery.

pub mod aggregate;
pub mod error;
pub mod estimator;
pub mod ols;
pub mod power;
pub mod report;
pub mod run;
pub mod sim;
pub mod stats;

pub use error::{Error, Result};
