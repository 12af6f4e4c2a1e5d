//! Point estimates and residual-based standard errors for the four metric
//! kinds: mean, ratio of means, covariate-adjusted mean, covariate-adjusted
//! ratio.
//!
//! Every estimator reduces to the same recipe: compute per-unit residuals,
//! take their sample standard deviation `s_r`, and report
//! `se = s_r / (sqrt(n) * denom_mean)`. The residual definitions are what
//! distinguish the kinds:
//!
//! | kind           | estimate            | residual                        |
//! |----------------|---------------------|---------------------------------|
//! | mean           | ybar                | y - ybar                        |
//! | ratio          | ybar / wbar         | y - theta * w                   |
//! | adjusted mean  | prediction at xbar  | y - yhat                        |
//! | adjusted ratio | muY / muW           | (y - yhat) - theta * (w - what) |
//!
//! Variances come straight from the residuals; no covariance expansion is
//! formed anywhere (that expansion exists only as a test oracle).

use serde::{Deserialize, Serialize};

use crate::aggregate::ClusterRow;
use crate::error::{Error, Result};
use crate::ols::fit_ols;
use crate::stats::{normal_cdf, normal_quantile, sample_mean_var, NormalTail};

/// Metric families supported by the estimators and reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Mean,
    Ratio,
    AdjustedMean,
    AdjustedRatio,
}

impl MetricKind {
    pub fn is_ratio(self) -> bool {
        matches!(self, MetricKind::Ratio | MetricKind::AdjustedRatio)
    }
    pub fn is_adjusted(self) -> bool {
        matches!(self, MetricKind::AdjustedMean | MetricKind::AdjustedRatio)
    }
}

impl std::fmt::Display for MetricKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            MetricKind::Mean => "mean",
            MetricKind::Ratio => "ratio",
            MetricKind::AdjustedMean => "adjusted_mean",
            MetricKind::AdjustedRatio => "adjusted_ratio",
        };
        write!(f, "{s}")
    }
}

/// Which ratio goes inside the double residual of the adjusted-ratio kind.
///
/// Analysis uses the arm's own adjusted ratio; planning on historical data
/// uses the plain `ybar / wbar`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThetaMode {
    ArmAdjusted,
    Unadjusted,
}

/// Per-arm result: point estimate plus the pieces its SE is built from.
#[derive(Debug, Clone, Serialize)]
pub struct ArmEstimate {
    pub estimate: f64,
    /// wbar or the predicted denominator mean; 1.0 for non-ratio metrics.
    pub denom_mean: f64,
    pub residual_sd: f64,
    pub n_units: usize,
    pub df: usize,
    /// residual_sd / (sqrt(n_units) * denom_mean)
    pub se: f64,
    pub metric_kind: MetricKind,
}

/// Cross-arm result.
#[derive(Debug, Clone, Serialize)]
pub struct EffectEstimate {
    /// treatment estimate minus control estimate
    pub delta: f64,
    pub se: f64,
    pub z: f64,
    pub p_value: f64,
    pub tail: NormalTail,
    pub ci_low: f64,
    /// +inf for a one-sided interval
    pub ci_high: f64,
    pub alpha: f64,
}

fn arm_se(residual_sd: f64, n: usize, denom_mean: f64) -> f64 {
    residual_sd / ((n as f64).sqrt() * denom_mean)
}

/// Sum of squared residuals over the stated degrees of freedom.
///
/// The residual constructions in this module all sum to zero by design, so
/// no centering is needed.
fn residual_variance(residuals: &[f64], df: usize) -> f64 {
    residuals.iter().map(|r| r * r).sum::<f64>() / df as f64
}

/// Mean of the per-unit y values.
pub fn estimate_arm_mean(rows: &[ClusterRow]) -> Result<ArmEstimate> {
    let n = rows.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "mean estimate needs at least 2 units, got {n}"
        )));
    }
    let ys: Vec<f64> = rows.iter().map(|r| r.y).collect();
    let (mean, var) = sample_mean_var(&ys, 1)?;
    let sd = var.sqrt();
    Ok(ArmEstimate {
        estimate: mean,
        denom_mean: 1.0,
        residual_sd: sd,
        n_units: n,
        df: n - 1,
        se: arm_se(sd, n, 1.0),
        metric_kind: MetricKind::Mean,
    })
}

/// Ratio of means ybar / wbar with the linearization residual `y - theta w`.
pub fn estimate_arm_ratio(rows: &[ClusterRow]) -> Result<ArmEstimate> {
    let n = rows.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "ratio estimate needs at least 2 units, got {n}"
        )));
    }
    let ybar = rows.iter().map(|r| r.y).sum::<f64>() / n as f64;
    let wbar = rows.iter().map(|r| r.w).sum::<f64>() / n as f64;
    if wbar <= 0.0 {
        return Err(Error::DegenerateDenominator(format!(
            "mean denominator must be positive, got {wbar}"
        )));
    }
    let theta = ybar / wbar;
    let residuals: Vec<f64> = rows.iter().map(|r| r.y - theta * r.w).collect();
    let sd = residual_variance(&residuals, n - 1).sqrt();
    Ok(ArmEstimate {
        estimate: theta,
        denom_mean: wbar,
        residual_sd: sd,
        n_units: n,
        df: n - 1,
        se: arm_se(sd, n, wbar),
        metric_kind: MetricKind::Ratio,
    })
}

/// Regression-adjusted mean: the fit's prediction at the common covariate
/// mean `xbar`, with the regression residual standard deviation.
pub fn estimate_arm_adjusted_mean(rows: &[ClusterRow], xbar: &[f64]) -> Result<ArmEstimate> {
    let n = rows.len();
    check_arity(rows, xbar)?;
    let covariates: Vec<Vec<f64>> = rows.iter().map(|r| r.x.clone()).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.y).collect();
    let fit = fit_ols(&covariates, &ys)?;
    let sd = (fit.residual_ss / fit.df as f64).sqrt();
    Ok(ArmEstimate {
        estimate: fit.predict(xbar),
        denom_mean: 1.0,
        residual_sd: sd,
        n_units: n,
        df: fit.df,
        se: arm_se(sd, n, 1.0),
        metric_kind: MetricKind::AdjustedMean,
    })
}

/// Regression-adjusted ratio with double residuals.
///
/// Both the numerator and denominator are regressed on the same covariates;
/// the estimate is the ratio of the two predictions at `xbar` and the
/// residual is `(y - yhat) - theta (w - what)` where `theta` follows
/// `theta_mode`.
pub fn estimate_arm_adjusted_ratio(
    rows: &[ClusterRow],
    xbar: &[f64],
    theta_mode: ThetaMode,
) -> Result<ArmEstimate> {
    let n = rows.len();
    check_arity(rows, xbar)?;
    let wbar = rows.iter().map(|r| r.w).sum::<f64>() / n as f64;
    if wbar <= 0.0 {
        return Err(Error::DegenerateDenominator(format!(
            "mean denominator must be positive, got {wbar}"
        )));
    }
    let covariates: Vec<Vec<f64>> = rows.iter().map(|r| r.x.clone()).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.y).collect();
    let ws: Vec<f64> = rows.iter().map(|r| r.w).collect();
    let fit_y = fit_ols(&covariates, &ys)?;
    let fit_w = fit_ols(&covariates, &ws)?;
    let mu_y = fit_y.predict(xbar);
    let mu_w = fit_w.predict(xbar);
    if mu_w <= 0.0 {
        return Err(Error::DegenerateDenominator(format!(
            "predicted denominator mean must be positive, got {mu_w}"
        )));
    }
    let theta_hat = mu_y / mu_w;
    let theta_resid = match theta_mode {
        ThetaMode::ArmAdjusted => theta_hat,
        ThetaMode::Unadjusted => {
            let ybar = ys.iter().sum::<f64>() / n as f64;
            ybar / wbar
        }
    };
    let residuals: Vec<f64> = rows
        .iter()
        .enumerate()
        .map(|(i, r)| (r.y - fit_y.fitted[i]) - theta_resid * (r.w - fit_w.fitted[i]))
        .collect();
    let sd = residual_variance(&residuals, fit_y.df).sqrt();
    Ok(ArmEstimate {
        estimate: theta_hat,
        denom_mean: mu_w,
        residual_sd: sd,
        n_units: n,
        df: fit_y.df,
        se: arm_se(sd, n, mu_w),
        metric_kind: MetricKind::AdjustedRatio,
    })
}

fn check_arity(rows: &[ClusterRow], xbar: &[f64]) -> Result<()> {
    for r in rows {
        if r.x.len() != xbar.len() {
            return Err(Error::Schema(format!(
                "unit {}: covariate arity {} does not match xbar arity {}",
                r.unit_id,
                r.x.len(),
                xbar.len()
            )));
        }
    }
    Ok(())
}

/// Covariate mean across a set of rows (both arms together, for analysis).
pub fn covariate_mean(rows: &[ClusterRow]) -> Vec<f64> {
    let Some(first) = rows.first() else {
        return Vec::new();
    };
    let p = first.x.len();
    let mut xbar = vec![0.0; p];
    for r in rows {
        for (acc, x) in xbar.iter_mut().zip(&r.x) {
            *acc += x;
        }
    }
    for v in xbar.iter_mut() {
        *v /= rows.len() as f64;
    }
    xbar
}

/// Difference between arms with the unpooled SE combination.
pub fn estimate_effect(
    arm_c: &ArmEstimate,
    arm_t: &ArmEstimate,
    alpha: f64,
    tail: NormalTail,
) -> Result<EffectEstimate> {
    if arm_c.metric_kind != arm_t.metric_kind {
        return Err(Error::IncompatibleArms(format!(
            "control is {} but treatment is {}",
            arm_c.metric_kind, arm_t.metric_kind
        )));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Domain(format!(
            "alpha must be in (0, 1), got {alpha}"
        )));
    }
    let delta = arm_t.estimate - arm_c.estimate;
    let se = (arm_c.se * arm_c.se + arm_t.se * arm_t.se).sqrt();
    let z = if se > 0.0 {
        delta / se
    } else if delta == 0.0 {
        0.0
    } else {
        delta.signum() * f64::INFINITY
    };
    let p_value = match tail {
        NormalTail::OneSided => {
            if z.is_finite() {
                normal_cdf(-z)?
            } else if z > 0.0 {
                0.0
            } else {
                1.0
            }
        }
        NormalTail::TwoSided => {
            if z.is_finite() {
                2.0 * normal_cdf(-z.abs())?
            } else {
                0.0
            }
        }
    };
    let crit = normal_quantile(tail.quantile_prob(alpha))?;
    let (ci_low, ci_high) = match tail {
        NormalTail::OneSided => (delta - crit * se, f64::INFINITY),
        NormalTail::TwoSided => (delta - crit * se, delta + crit * se),
    };
    Ok(EffectEstimate {
        delta,
        se,
        z,
        p_value,
        tail,
        ci_low,
        ci_high,
        alpha,
    })
}
