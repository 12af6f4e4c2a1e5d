//! Solvers for the four-parameter system {alpha, power, MDE, n}, given a
//! variance profile from historical data and an allocation fraction psi.
//!
//! `n` is the TOTAL number of units across both arms; psi is the fraction
//! assigned to treatment, so the arms get (1 - psi) n and psi n units.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::MetricKind;
use crate::stats::{normal_cdf, normal_quantile, NormalTail};

/// The variance information planning needs: a residual SD and the
/// denominator mean to divide it by. `residual_sd / denom_mean` is the one
/// number every solver consumes, whatever the metric kind.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VarianceProfile {
    pub residual_sd: f64,
    /// 1.0 for non-ratio metrics.
    pub denom_mean: f64,
    pub metric_kind: MetricKind,
    /// Number of units the profile was estimated from (informational).
    pub source_n: usize,
}

impl VarianceProfile {
    pub fn effective_sd(&self) -> f64 {
        self.residual_sd / self.denom_mean
    }

    fn validate(&self) -> Result<()> {
        if !(self.residual_sd >= 0.0) || !self.residual_sd.is_finite() {
            return Err(Error::Domain(format!(
                "residual_sd must be finite and nonnegative, got {}",
                self.residual_sd
            )));
        }
        if !(self.denom_mean > 0.0) || !self.denom_mean.is_finite() {
            return Err(Error::Domain(format!(
                "denom_mean must be finite and positive, got {}",
                self.denom_mean
            )));
        }
        Ok(())
    }
}

/// Inputs to [`solve`]: exactly one of {power, mde, n} is left out and gets
/// filled in.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PowerSpec {
    pub alpha: f64,
    pub power: Option<f64>,
    pub mde: Option<f64>,
    /// Total units across both arms.
    pub n: Option<u64>,
    /// Treatment fraction, strictly inside (0, 1).
    pub psi: f64,
    pub tail: NormalTail,
}

/// Which member of {power, mde, n} a solve filled in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveTarget {
    Power,
    Mde,
    N,
}

impl std::fmt::Display for SolveTarget {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SolveTarget::Power => write!(f, "power"),
            SolveTarget::Mde => write!(f, "mde"),
            SolveTarget::N => write!(f, "n"),
        }
    }
}

/// A fully determined power analysis.
#[derive(Debug, Clone, Serialize)]
pub struct PowerSolution {
    pub alpha: f64,
    pub power: f64,
    pub mde: f64,
    pub n: u64,
    pub psi: f64,
    pub tail: NormalTail,
    pub solved_for: SolveTarget,
    pub effective_sd: f64,
    pub allocation_factor: f64,
    /// SE of the between-arm difference at this n and psi.
    pub planning_se: f64,
}

/// sqrt(1/(1-psi) + 1/psi); equals 2 at a 50-50 split and grows toward the
/// edges.
pub fn allocation_factor(psi: f64) -> Result<f64> {
    if !(psi > 0.0 && psi < 1.0) {
        return Err(Error::Domain(format!(
            "psi must be strictly inside (0, 1), got {psi}"
        )));
    }
    Ok((1.0 / (1.0 - psi) + 1.0 / psi).sqrt())
}

/// SE of the between-arm difference for a planned experiment with n total
/// units split psi / (1 - psi).
pub fn planning_se(profile: &VarianceProfile, n: u64, psi: f64) -> Result<f64> {
    profile.validate()?;
    if n < 2 {
        return Err(Error::Domain(format!("n must be at least 2, got {n}")));
    }
    Ok(allocation_factor(psi)? * profile.effective_sd() / (n as f64).sqrt())
}

fn check_unit_interval(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v < 1.0) {
        return Err(Error::Domain(format!(
            "{name} must be strictly inside (0, 1), got {v}"
        )));
    }
    Ok(())
}

/// Smallest effect detectable with the given error rates at the given SE.
///
/// z_alpha follows the tail convention; z_beta is always one-sided.
pub fn solve_mde(alpha: f64, power: f64, se: f64, tail: NormalTail) -> Result<f64> {
    check_unit_interval("alpha", alpha)?;
    check_unit_interval("power", power)?;
    if !(se >= 0.0) || !se.is_finite() {
        return Err(Error::Domain(format!(
            "se must be finite and nonnegative, got {se}"
        )));
    }
    let z_alpha = normal_quantile(tail.quantile_prob(alpha))?;
    let z_beta = normal_quantile(power)?;
    Ok((z_alpha + z_beta) * se)
}

/// Smallest total n whose power reaches the request; never under-powers.
pub fn solve_n(
    alpha: f64,
    power: f64,
    mde: f64,
    profile: &VarianceProfile,
    psi: f64,
    tail: NormalTail,
) -> Result<u64> {
    check_unit_interval("alpha", alpha)?;
    check_unit_interval("power", power)?;
    if !(mde > 0.0) {
        return Err(Error::Domain(format!("mde must be positive, got {mde}")));
    }
    profile.validate()?;
    let z_alpha = normal_quantile(tail.quantile_prob(alpha))?;
    let z_beta = normal_quantile(power)?;
    let factor = allocation_factor(psi)?;
    let z = z_alpha + z_beta;
    let ratio = profile.effective_sd() / mde;
    let raw = z * z * factor * factor * ratio * ratio;
    // guard the ceiling against float fuzz a few ulps above an exact integer,
    // then verify; POWER_EPS keeps the verification from bumping n over a
    // sub-1e-9 rounding shortfall (the solver's own consistency tolerance is
    // 1e-3 on the power scale)
    const POWER_EPS: f64 = 1e-9;
    let mut n = ((raw * (1.0 - 1e-12)).ceil() as u64).max(2);
    while solve_power(alpha, mde, profile, n, psi, tail)? < power - POWER_EPS {
        n += 1;
    }
    Ok(n)
}

/// Probability of detecting an effect of size mde at the given design.
pub fn solve_power(
    alpha: f64,
    mde: f64,
    profile: &VarianceProfile,
    n: u64,
    psi: f64,
    tail: NormalTail,
) -> Result<f64> {
    check_unit_interval("alpha", alpha)?;
    if !(mde > 0.0) {
        return Err(Error::Domain(format!("mde must be positive, got {mde}")));
    }
    let se = planning_se(profile, n, psi)?;
    if se == 0.0 {
        return Ok(1.0);
    }
    let z_alpha = normal_quantile(tail.quantile_prob(alpha))?;
    normal_cdf(mde / se - z_alpha)
}

/// Fill in the missing member of {power, mde, n}.
pub fn solve(spec: &PowerSpec, profile: &VarianceProfile) -> Result<PowerSolution> {
    check_unit_interval("alpha", spec.alpha)?;
    check_unit_interval("psi", spec.psi)?;
    profile.validate()?;
    let missing = [spec.power.is_none(), spec.mde.is_none(), spec.n.is_none()]
        .iter()
        .filter(|m| **m)
        .count();
    if missing == 0 {
        return Err(Error::Config(
            "power, mde, and n are all given; leave exactly one out to solve for it".into(),
        ));
    }
    if missing > 1 {
        return Err(Error::Config(format!(
            "need exactly two of power, mde, n; only {} given",
            3 - missing
        )));
    }

    let (power, mde, n, solved_for) = match (spec.power, spec.mde, spec.n) {
        (Some(power), Some(mde), None) => {
            let n = solve_n(spec.alpha, power, mde, profile, spec.psi, spec.tail)?;
            (power, mde, n, SolveTarget::N)
        }
        (Some(power), None, Some(n)) => {
            let se = planning_se(profile, n, spec.psi)?;
            let mde = solve_mde(spec.alpha, power, se, spec.tail)?;
            (power, mde, n, SolveTarget::Mde)
        }
        (None, Some(mde), Some(n)) => {
            let power = solve_power(spec.alpha, mde, profile, n, spec.psi, spec.tail)?;
            (power, mde, n, SolveTarget::Power)
        }
        _ => unreachable!("missing-count checked above"),
    };

    Ok(PowerSolution {
        alpha: spec.alpha,
        power,
        mde,
        n,
        psi: spec.psi,
        tail: spec.tail,
        solved_for,
        effective_sd: profile.effective_sd(),
        allocation_factor: allocation_factor(spec.psi)?,
        planning_se: planning_se(profile, n, spec.psi)?,
    })
}

/// Non-fatal warning for skewed metrics under unbalanced splits, where the
/// normal approximation behind these formulas degrades. Thresholds: warn
/// when psi is outside [0.4, 0.6] and |skewness| exceeds 1.
pub fn skewness_warning(psi: f64, skewness: f64) -> Option<String> {
    if !(0.4..=0.6).contains(&psi) && skewness.abs() > 1.0 {
        Some(format!(
            "metric skewness is {skewness:.2} and the split is {:.0}/{:.0}: with skewed data and \
             an unbalanced split, normal-approximation p-values can be inaccurate unless n is \
             very large; consider a 50/50 split or a larger sample",
            100.0 * (1.0 - psi),
            100.0 * psi
        ))
    } else {
        None
    }
}
