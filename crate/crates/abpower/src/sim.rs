//! Monte Carlo harness: synthetic clustered populations, repeated
//! estimation, and calibration checks for the standard-error formulas.
//!
//! A calibration run repeats generate -> aggregate -> estimate, then compares
//! the average estimated SE of the between-arm difference against the
//! empirical SD of the point estimates. A calibration ratio of 1 means the
//! SE formula is honest.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::aggregate::{aggregate, ClusterRow, CovMode, EventRecord, WMode};
use crate::error::{Error, Result};
use crate::estimator::{
    covariate_mean, estimate_arm_adjusted_mean, estimate_arm_adjusted_ratio, estimate_arm_mean,
    estimate_arm_ratio, estimate_effect, ArmEstimate, MetricKind, ThetaMode,
};
use crate::power::VarianceProfile;
use crate::stats::{normal_quantile, sample_mean_var, NormalTail};

/// Distribution of the number of observations per unit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterSizeLaw {
    Fixed(u32),
    /// 1 + Poisson(lambda), so every unit has at least one observation.
    PoissonPlusOne(f64),
}

impl ClusterSizeLaw {
    pub fn mean(self) -> f64 {
        match self {
            ClusterSizeLaw::Fixed(k) => k as f64,
            ClusterSizeLaw::PoissonPlusOne(lambda) => 1.0 + lambda,
        }
    }
    pub fn var(self) -> f64 {
        match self {
            ClusterSizeLaw::Fixed(_) => 0.0,
            ClusterSizeLaw::PoissonPlusOne(lambda) => lambda,
        }
    }
}

/// Per-observation value distribution, driven by a standard normal draw.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventLaw {
    Normal { mean: f64, sd: f64 },
    Lognormal { mu: f64, sigma: f64 },
}

impl EventLaw {
    fn apply(self, z: f64) -> f64 {
        match self {
            EventLaw::Normal { mean, sd } => mean + sd * z,
            EventLaw::Lognormal { mu, sigma } => (mu + sigma * z).exp(),
        }
    }
    pub fn mean(self) -> f64 {
        match self {
            EventLaw::Normal { mean, .. } => mean,
            EventLaw::Lognormal { mu, sigma } => (mu + 0.5 * sigma * sigma).exp(),
        }
    }
    pub fn var(self) -> f64 {
        match self {
            EventLaw::Normal { sd, .. } => sd * sd,
            EventLaw::Lognormal { mu, sigma } => {
                let s2 = sigma * sigma;
                (s2.exp() - 1.0) * (2.0 * mu + s2).exp()
            }
        }
    }
    fn validate(self, name: &str) -> Result<()> {
        let ok = match self {
            EventLaw::Normal { mean, sd } => mean.is_finite() && sd.is_finite() && sd >= 0.0,
            EventLaw::Lognormal { mu, sigma } => {
                mu.is_finite() && sigma.is_finite() && sigma >= 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "{name}: invalid distribution parameters"
            )))
        }
    }
}

/// Covariance of two event values whose latent normals have correlation rho.
fn event_cov(y: EventLaw, w: EventLaw, rho: f64) -> f64 {
    match (y, w) {
        (EventLaw::Normal { sd: sy, .. }, EventLaw::Normal { sd: sw, .. }) => rho * sy * sw,
        (EventLaw::Normal { sd: sy, .. }, EventLaw::Lognormal { mu, sigma }) => {
            rho * sy * sigma * (mu + 0.5 * sigma * sigma).exp()
        }
        (EventLaw::Lognormal { .. }, EventLaw::Normal { .. }) => event_cov(w, y, rho),
        (EventLaw::Lognormal { mu: m1, sigma: s1 }, EventLaw::Lognormal { mu: m2, sigma: s2 }) => {
            (m1 + m2 + 0.5 * (s1 * s1 + s2 * s2)).exp() * ((rho * s1 * s2).exp() - 1.0)
        }
    }
}

/// What the denominator column is.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenominatorRole {
    /// The metric divides by observation counts.
    Count,
    /// Every observation carries a drawn denominator value.
    EventValue(EventLaw),
}

impl DenominatorRole {
    fn event_mean(self) -> f64 {
        match self {
            DenominatorRole::Count => 1.0,
            DenominatorRole::EventValue(law) => law.mean(),
        }
    }
    fn event_var(self) -> f64 {
        match self {
            DenominatorRole::Count => 0.0,
            DenominatorRole::EventValue(law) => law.var(),
        }
    }
}

/// Latent-correlation targets for one generated covariate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovariateSpec {
    pub rho_y: f64,
    pub rho_w: f64,
}

/// Full description of a synthetic population.
///
/// Correlation targets are for the latent standard normals of the Gaussian
/// copula; they are attained exactly for normal laws and attenuated by the
/// transform for lognormal ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub n_units: usize,
    pub cluster_size_law: ClusterSizeLaw,
    pub y_law: EventLaw,
    pub w_role: DenominatorRole,
    /// Latent correlation between the y and w draws of one observation.
    #[serde(default)]
    pub rho_yw: f64,
    #[serde(default)]
    pub covariates: Vec<CovariateSpec>,
    /// Additive shift applied to every y of a treated unit.
    #[serde(default)]
    pub effect: f64,
    /// Fraction of units assigned to treatment.
    #[serde(default = "default_treat_fraction")]
    pub treat_fraction: f64,
    /// Per-event y shift proportional to the unit's cluster-size deviation
    /// from its mean; makes cluster averages depend on cluster size.
    #[serde(default)]
    pub cluster_size_slope: f64,
    /// SD of a per-unit random intercept on y; induces intra-cluster
    /// correlation and keeps cluster-average variance from shrinking as
    /// 1/size.
    #[serde(default)]
    pub unit_sd: f64,
    pub seed: u64,
}

fn default_treat_fraction() -> f64 {
    0.5
}

/// Loadings that realize the covariate correlation targets:
/// x = a_y z_y + a_w z_w + a_e eps.
struct CopulaFactors {
    load_y: Vec<f64>,
    load_w: Vec<f64>,
    load_eps: Vec<f64>,
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_units == 0 {
            return Err(Error::Config("n_units must be positive".into()));
        }
        if !(self.treat_fraction > 0.0 && self.treat_fraction < 1.0) {
            return Err(Error::Config(format!(
                "treat_fraction must be strictly inside (0, 1), got {}",
                self.treat_fraction
            )));
        }
        match self.cluster_size_law {
            ClusterSizeLaw::Fixed(k) if k < 1 => {
                return Err(Error::Config("cluster_size fixed value must be >= 1".into()));
            }
            ClusterSizeLaw::PoissonPlusOne(lambda) if !(lambda >= 0.0) || !lambda.is_finite() => {
                return Err(Error::Config(format!(
                    "cluster_size poisson rate must be nonnegative, got {lambda}"
                )));
            }
            _ => {}
        }
        self.y_law.validate("y_law")?;
        if let DenominatorRole::EventValue(law) = self.w_role {
            law.validate("w_role")?;
        }
        if !(-1.0..=1.0).contains(&self.rho_yw) {
            return Err(Error::Config(format!(
                "rho_yw must be in [-1, 1], got {}",
                self.rho_yw
            )));
        }
        for (k, c) in self.covariates.iter().enumerate() {
            if !(-1.0..=1.0).contains(&c.rho_y) || !(-1.0..=1.0).contains(&c.rho_w) {
                return Err(Error::Config(format!(
                    "covariate {k}: correlations must be in [-1, 1], got ({}, {})",
                    c.rho_y, c.rho_w
                )));
            }
        }
        if !(self.unit_sd >= 0.0) || !self.unit_sd.is_finite() {
            return Err(Error::Config(format!(
                "unit_sd must be nonnegative, got {}",
                self.unit_sd
            )));
        }
        if !self.cluster_size_slope.is_finite() || !self.effect.is_finite() {
            return Err(Error::Config(
                "effect and cluster_size_slope must be finite".into(),
            ));
        }
        self.copula_factors().map(|_| ())
    }

    /// Solve the factor loadings; fails when the implied Gram matrix of
    /// (z_y, z_w, x_k) cannot be positive semidefinite.
    fn copula_factors(&self) -> Result<CopulaFactors> {
        let rho = self.rho_yw;
        let mut f = CopulaFactors {
            load_y: Vec::with_capacity(self.covariates.len()),
            load_w: Vec::with_capacity(self.covariates.len()),
            load_eps: Vec::with_capacity(self.covariates.len()),
        };
        for (k, c) in self.covariates.iter().enumerate() {
            let det = 1.0 - rho * rho;
            if det <= 0.0 {
                return Err(Error::Config(format!(
                    "covariate {k}: targets are unreachable when |rho_yw| = 1"
                )));
            }
            let a_y = (c.rho_y - rho * c.rho_w) / det;
            let a_w = (c.rho_w - rho * c.rho_y) / det;
            let explained = a_y * c.rho_y + a_w * c.rho_w;
            if explained > 1.0 + 1e-12 {
                return Err(Error::Config(format!(
                    "covariate {k}: correlation targets ({}, {}) with rho_yw {} are jointly \
                     infeasible (implied Gram matrix is not positive semidefinite)",
                    c.rho_y, c.rho_w, rho
                )));
            }
            f.load_y.push(a_y);
            f.load_w.push(a_w);
            f.load_eps.push((1.0 - explained).max(0.0).sqrt());
        }
        Ok(f)
    }

    /// True between-arm difference implied by `effect` for each metric kind.
    pub fn true_delta(&self, kind: MetricKind) -> f64 {
        match kind {
            MetricKind::Mean | MetricKind::AdjustedMean => {
                self.effect * self.cluster_size_law.mean()
            }
            MetricKind::Ratio | MetricKind::AdjustedRatio => {
                self.effect / self.w_role.event_mean()
            }
        }
    }

    /// Closed-form control-arm variance profile, available for the
    /// unadjusted kinds when no size-dependent terms are configured.
    pub fn true_profile(&self, kind: MetricKind) -> Result<VarianceProfile> {
        if self.cluster_size_slope != 0.0 || self.unit_sd != 0.0 {
            return Err(Error::Harness(
                "no closed-form profile with cluster_size_slope or unit_sd set".into(),
            ));
        }
        let m_mean = self.cluster_size_law.mean();
        let m_var = self.cluster_size_law.var();
        match kind {
            MetricKind::Mean => {
                let ey = self.y_law.mean();
                let var = m_mean * self.y_law.var() + m_var * ey * ey;
                Ok(VarianceProfile {
                    residual_sd: var.sqrt(),
                    denom_mean: 1.0,
                    metric_kind: kind,
                    source_n: self.n_units,
                })
            }
            MetricKind::Ratio => {
                let ew = self.w_role.event_mean();
                let theta = self.y_law.mean() / ew;
                let cov = match self.w_role {
                    DenominatorRole::Count => 0.0,
                    DenominatorRole::EventValue(law) => event_cov(self.y_law, law, self.rho_yw),
                };
                let var_d = self.y_law.var() + theta * theta * self.w_role.event_var()
                    - 2.0 * theta * cov;
                Ok(VarianceProfile {
                    residual_sd: (m_mean * var_d).sqrt(),
                    denom_mean: m_mean * ew,
                    metric_kind: kind,
                    source_n: self.n_units,
                })
            }
            MetricKind::AdjustedMean | MetricKind::AdjustedRatio => Err(Error::Harness(
                "no closed-form profile for adjusted estimators".into(),
            )),
        }
    }

    fn w_mode(&self) -> WMode {
        match self.w_role {
            DenominatorRole::Count => WMode::Count,
            DenominatorRole::EventValue(_) => WMode::Sum,
        }
    }
}

/// SplitMix64 mix, used to derive independent child seeds so replications
/// have non-overlapping streams wherever they run.
pub fn child_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9e3779b97f4a7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Draw one synthetic population. Deterministic for a fixed config.
pub fn generate(config: &GeneratorConfig) -> Result<Vec<EventRecord>> {
    config.validate()?;
    let factors = config.copula_factors()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    // exact treated count via a seeded shuffle
    let n = config.n_units;
    let n_treated = ((config.treat_fraction * n as f64).round() as usize).min(n);
    let mut treated = vec![false; n];
    for t in treated.iter_mut().take(n_treated) {
        *t = true;
    }
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        treated.swap(i, j);
    }

    let poisson = match config.cluster_size_law {
        ClusterSizeLaw::PoissonPlusOne(lambda) if lambda > 0.0 => {
            Some(Poisson::new(lambda).map_err(|e| Error::Config(format!("cluster_size: {e}")))?)
        }
        _ => None,
    };
    let m_mean = config.cluster_size_law.mean();
    let rho = config.rho_yw;
    let rho_orth = (1.0 - rho * rho).max(0.0).sqrt();

    let mut events = Vec::new();
    for i in 0..n {
        let size = match config.cluster_size_law {
            ClusterSizeLaw::Fixed(k) => k as usize,
            ClusterSizeLaw::PoissonPlusOne(_) => match &poisson {
                Some(p) => 1 + p.sample(&mut rng) as usize,
                None => 1,
            },
        };
        let unit_intercept = if config.unit_sd > 0.0 {
            let z: f64 = rng.sample(StandardNormal);
            config.unit_sd * z
        } else {
            0.0
        };
        let shift = config.cluster_size_slope * (size as f64 - m_mean)
            + unit_intercept
            + if treated[i] { config.effect } else { 0.0 };
        let arm = Some(if treated[i] {
            "T".to_string()
        } else {
            "C".to_string()
        });
        let unit_id = format!("u{i:07}");

        for _ in 0..size {
            let eps_y: f64 = rng.sample(StandardNormal);
            let eps_w: f64 = rng.sample(StandardNormal);
            let z_y = eps_y;
            let z_w = rho * eps_y + rho_orth * eps_w;
            let covariates: Vec<f64> = (0..config.covariates.len())
                .map(|k| {
                    let eps: f64 = rng.sample(StandardNormal);
                    factors.load_y[k] * z_y + factors.load_w[k] * z_w + factors.load_eps[k] * eps
                })
                .collect();
            let w = match config.w_role {
                DenominatorRole::Count => None,
                DenominatorRole::EventValue(law) => Some(law.apply(z_w)),
            };
            events.push(EventRecord {
                unit_id: unit_id.clone(),
                arm: arm.clone(),
                y: config.y_law.apply(z_y) + shift,
                w,
                covariates,
            });
        }
    }
    Ok(events)
}

/// Outcome of a calibration or power run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationReport {
    pub replications: usize,
    pub failures: usize,
    /// Average of the per-replication estimated SEs of the difference.
    pub mean_estimated_se: f64,
    /// SD of the point estimates of the difference across replications.
    pub empirical_sd: f64,
    /// mean_estimated_se / empirical_sd; 1 when both are zero.
    pub calibration_ratio: f64,
    /// Share of replications whose two-sided 95% interval covers the truth.
    pub coverage: f64,
    /// Share of replications rejecting (one-sided at alpha 0.05 for
    /// calibration runs; the caller's alpha and tail for power runs). This is
    /// the empirical size under a null effect and the empirical power
    /// otherwise.
    pub rejection_rate_null: f64,
    /// Set when the configured effect is nonzero.
    pub empirical_power: Option<f64>,
    /// Power predicted from the generator's closed-form variance profile,
    /// when one exists.
    pub predicted_power: Option<f64>,
}

const HARNESS_ALPHA: f64 = 0.05;
const MIN_REPLICATIONS: usize = 1000;
const MAX_FAILURE_RATE: f64 = 0.01;

fn estimate_one_arm(rows: &[ClusterRow], kind: MetricKind, xbar: &[f64]) -> Result<ArmEstimate> {
    match kind {
        MetricKind::Mean => estimate_arm_mean(rows),
        MetricKind::Ratio => estimate_arm_ratio(rows),
        MetricKind::AdjustedMean => estimate_arm_adjusted_mean(rows, xbar),
        MetricKind::AdjustedRatio => {
            estimate_arm_adjusted_ratio(rows, xbar, ThetaMode::ArmAdjusted)
        }
    }
}

fn split_arms(rows: Vec<ClusterRow>) -> (Vec<ClusterRow>, Vec<ClusterRow>) {
    let mut control = Vec::new();
    let mut treatment = Vec::new();
    for row in rows {
        match row.arm.as_deref() {
            Some("T") => treatment.push(row),
            _ => control.push(row),
        }
    }
    (control, treatment)
}

/// One replication: estimated between-arm difference and its SE.
fn replicate(config: &GeneratorConfig, kind: MetricKind, rep: u64) -> Result<(f64, f64)> {
    let child = GeneratorConfig {
        seed: child_seed(config.seed, rep),
        ..config.clone()
    };
    let events = generate(&child)?;
    let rows = aggregate(&events, config.w_mode(), CovMode::Sum)?;
    let xbar = covariate_mean(&rows);
    let (control, treatment) = split_arms(rows);
    let arm_c = estimate_one_arm(&control, kind, &xbar)?;
    let arm_t = estimate_one_arm(&treatment, kind, &xbar)?;
    let effect = estimate_effect(&arm_c, &arm_t, HARNESS_ALPHA, NormalTail::OneSided)?;
    Ok((effect.delta, effect.se))
}

struct RepAccumulator {
    deltas: Vec<f64>,
    ses: Vec<f64>,
    covered: usize,
    rejected: usize,
    failures: usize,
}

impl RepAccumulator {
    fn with_capacity(n: usize) -> Self {
        RepAccumulator {
            deltas: Vec::with_capacity(n),
            ses: Vec::with_capacity(n),
            covered: 0,
            rejected: 0,
            failures: 0,
        }
    }

    fn record(
        &mut self,
        delta: f64,
        se: f64,
        true_delta: f64,
        z_cover: f64,
        z_reject: f64,
        two_sided: bool,
    ) {
        self.deltas.push(delta);
        self.ses.push(se);
        if (delta - true_delta).abs() <= z_cover * se {
            self.covered += 1;
        }
        let z = if se > 0.0 {
            delta / se
        } else if delta == 0.0 {
            0.0
        } else {
            delta.signum() * f64::INFINITY
        };
        let reject = if two_sided {
            z.abs() > z_reject
        } else {
            z > z_reject
        };
        if reject {
            self.rejected += 1;
        }
    }

    fn finish(
        self,
        replications: usize,
        effect: f64,
        predicted_power: Option<f64>,
    ) -> Result<CalibrationReport> {
        if (self.failures as f64) > MAX_FAILURE_RATE * replications as f64 {
            return Err(Error::Harness(format!(
                "{} of {replications} replications failed (over the {:.0}% budget)",
                self.failures,
                100.0 * MAX_FAILURE_RATE
            )));
        }
        let n_ok = self.deltas.len();
        if n_ok < 2 {
            return Err(Error::Harness("all replications failed".into()));
        }
        let (_, var) = sample_mean_var(&self.deltas, 1)?;
        let empirical_sd = var.sqrt();
        let mean_se = self.ses.iter().sum::<f64>() / n_ok as f64;
        let calibration_ratio = if empirical_sd == 0.0 {
            if mean_se == 0.0 {
                1.0
            } else {
                f64::INFINITY
            }
        } else {
            mean_se / empirical_sd
        };
        let rejection_rate = self.rejected as f64 / n_ok as f64;
        Ok(CalibrationReport {
            replications,
            failures: self.failures,
            mean_estimated_se: mean_se,
            empirical_sd,
            calibration_ratio,
            coverage: self.covered as f64 / n_ok as f64,
            rejection_rate_null: rejection_rate,
            empirical_power: (effect != 0.0).then_some(rejection_rate),
            predicted_power,
        })
    }
}

fn check_replications(replications: usize) -> Result<()> {
    if replications < MIN_REPLICATIONS {
        return Err(Error::Config(format!(
            "replications must be at least {MIN_REPLICATIONS}, got {replications}"
        )));
    }
    Ok(())
}

/// Repeatedly estimate the between-arm difference and compare the average
/// estimated SE against the empirical SD; also tracks 95% CI coverage of the
/// configured true effect and the one-sided rejection rate at alpha 0.05.
pub fn calibrate_se(
    config: &GeneratorConfig,
    kind: MetricKind,
    replications: usize,
) -> Result<CalibrationReport> {
    check_replications(replications)?;
    config.validate()?;
    let true_delta = config.true_delta(kind);
    let z_cover = normal_quantile(1.0 - HARNESS_ALPHA / 2.0)?;
    let z_reject = normal_quantile(1.0 - HARNESS_ALPHA)?;
    let mut acc = RepAccumulator::with_capacity(replications);
    for rep in 0..replications {
        match replicate(config, kind, rep as u64) {
            Ok((delta, se)) => acc.record(delta, se, true_delta, z_cover, z_reject, false),
            Err(_) => acc.failures += 1,
        }
    }
    acc.finish(replications, config.effect, None)
}

/// Empirical power of the configured design against the prediction from the
/// generator's closed-form variance profile.
///
/// `spec` contributes the test's alpha and tail; the sample size and split
/// come from the generator config itself.
pub fn empirical_power(
    config: &GeneratorConfig,
    spec: &crate::power::PowerSpec,
    kind: MetricKind,
    replications: usize,
) -> Result<CalibrationReport> {
    check_replications(replications)?;
    config.validate()?;
    if config.effect < 0.0 {
        return Err(Error::Config(
            "empirical power needs a nonnegative configured effect".into(),
        ));
    }
    let true_delta = config.true_delta(kind);
    let base_kind = match kind {
        MetricKind::Mean | MetricKind::AdjustedMean => MetricKind::Mean,
        MetricKind::Ratio | MetricKind::AdjustedRatio => MetricKind::Ratio,
    };
    let profile = config.true_profile(base_kind)?;
    let predicted = if config.effect == 0.0 {
        spec.alpha
    } else {
        crate::power::solve_power(
            spec.alpha,
            true_delta,
            &profile,
            config.n_units as u64,
            config.treat_fraction,
            spec.tail,
        )?
    };
    let z_cover = normal_quantile(1.0 - HARNESS_ALPHA / 2.0)?;
    let z_reject = normal_quantile(spec.tail.quantile_prob(spec.alpha))?;
    let two_sided = spec.tail == NormalTail::TwoSided;
    let mut acc = RepAccumulator::with_capacity(replications);
    for rep in 0..replications {
        match replicate(config, kind, rep as u64) {
            Ok((delta, se)) => acc.record(delta, se, true_delta, z_cover, z_reject, two_sided),
            Err(_) => acc.failures += 1,
        }
    }
    acc.finish(replications, config.effect, Some(predicted))
}

/// Calibration of one SE method within a pitfall comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodCalibration {
    pub mean_estimated_se: f64,
    pub calibration_ratio: f64,
}

/// Side-by-side calibration of the fixed-weight SE against the
/// linearization SE on the same replications.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PitfallReport {
    pub replications: usize,
    pub failures: usize,
    pub empirical_sd: f64,
    /// Weighted-average SE under fixed weights and a common per-unit ratio
    /// variance: per arm, sqrt((sum w^2) / (sum w)^2 * var(V)).
    pub naive: MethodCalibration,
    /// The residual-based ratio SE.
    pub delta: MethodCalibration,
}

fn naive_weighted_se(rows: &[ClusterRow]) -> Result<f64> {
    let mut sum_w = 0.0;
    let mut sum_w2 = 0.0;
    let mut vs = Vec::with_capacity(rows.len());
    for r in rows {
        if r.w <= 0.0 {
            return Err(Error::DegenerateDenominator(format!(
                "unit {} has nonpositive weight {}",
                r.unit_id, r.w
            )));
        }
        sum_w += r.w;
        sum_w2 += r.w * r.w;
        vs.push(r.y / r.w);
    }
    let (_, var_v) = sample_mean_var(&vs, 1)?;
    Ok((sum_w2 / (sum_w * sum_w) * var_v).sqrt())
}

/// Compare the naive fixed-weight SE with the linearization SE on a
/// generator where cluster ratios may depend on cluster size.
///
/// The direction and size of the naive method's miscalibration is whatever
/// the replications show; nothing about it is assumed.
pub fn pitfall_weighted_regression(
    config: &GeneratorConfig,
    replications: usize,
) -> Result<PitfallReport> {
    check_replications(replications)?;
    config.validate()?;
    let mut deltas = Vec::with_capacity(replications);
    let mut naive_ses = Vec::with_capacity(replications);
    let mut delta_ses = Vec::with_capacity(replications);
    let mut failures = 0usize;
    for rep in 0..replications {
        let child = GeneratorConfig {
            seed: child_seed(config.seed, rep as u64),
            ..config.clone()
        };
        let outcome = (|| -> Result<(f64, f64, f64)> {
            let events = generate(&child)?;
            let rows = aggregate(&events, config.w_mode(), CovMode::Sum)?;
            let (control, treatment) = split_arms(rows);
            let arm_c = estimate_arm_ratio(&control)?;
            let arm_t = estimate_arm_ratio(&treatment)?;
            let naive_c = naive_weighted_se(&control)?;
            let naive_t = naive_weighted_se(&treatment)?;
            Ok((
                arm_t.estimate - arm_c.estimate,
                (naive_c * naive_c + naive_t * naive_t).sqrt(),
                (arm_c.se * arm_c.se + arm_t.se * arm_t.se).sqrt(),
            ))
        })();
        match outcome {
            Ok((delta, naive_se, delta_se)) => {
                deltas.push(delta);
                naive_ses.push(naive_se);
                delta_ses.push(delta_se);
            }
            Err(_) => failures += 1,
        }
    }
    if (failures as f64) > MAX_FAILURE_RATE * replications as f64 {
        return Err(Error::Harness(format!(
            "{failures} of {replications} replications failed"
        )));
    }
    let (_, var) = sample_mean_var(&deltas, 1)?;
    let empirical_sd = var.sqrt();
    let ratio = |ses: &[f64]| {
        let mean = ses.iter().sum::<f64>() / ses.len() as f64;
        MethodCalibration {
            mean_estimated_se: mean,
            calibration_ratio: if empirical_sd > 0.0 {
                mean / empirical_sd
            } else {
                1.0
            },
        }
    };
    Ok(PitfallReport {
        replications,
        failures,
        empirical_sd,
        naive: ratio(&naive_ses),
        delta: ratio(&delta_ses),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::power::PowerSpec;

    fn base_config() -> GeneratorConfig {
        GeneratorConfig {
            n_units: 100,
            cluster_size_law: ClusterSizeLaw::Fixed(1),
            y_law: EventLaw::Normal {
                mean: 10.0,
                sd: 2.0,
            },
            w_role: DenominatorRole::Count,
            rho_yw: 0.0,
            covariates: vec![],
            effect: 0.0,
            treat_fraction: 0.5,
            cluster_size_slope: 0.0,
            unit_sd: 0.0,
            seed: 17,
        }
    }

    #[test]
    fn fixed_singleton_event_count() {
        let events = generate(&base_config()).unwrap();
        assert_eq!(events.len(), 100);
        assert!(events.iter().all(|e| e.w.is_none()));
    }

    #[test]
    fn same_seed_is_byte_identical() {
        let config = GeneratorConfig {
            cluster_size_law: ClusterSizeLaw::PoissonPlusOne(2.0),
            covariates: vec![CovariateSpec {
                rho_y: 0.5,
                rho_w: 0.0,
            }],
            ..base_config()
        };
        let a = generate(&config).unwrap();
        let b = generate(&config).unwrap();
        assert_eq!(a, b);
        let c = generate(&GeneratorConfig { seed: 18, ..config }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn covariate_correlation_hits_target() {
        let config = GeneratorConfig {
            n_units: 100_000,
            covariates: vec![CovariateSpec {
                rho_y: 0.9,
                rho_w: 0.0,
            }],
            ..base_config()
        };
        let events = generate(&config).unwrap();
        let ys: Vec<f64> = events.iter().map(|e| e.y).collect();
        let xs: Vec<f64> = events.iter().map(|e| e.covariates[0]).collect();
        let my = ys.iter().sum::<f64>() / ys.len() as f64;
        let mx = xs.iter().sum::<f64>() / xs.len() as f64;
        let mut sxy = 0.0;
        let mut sxx = 0.0;
        let mut syy = 0.0;
        for (x, y) in xs.iter().zip(&ys) {
            sxy += (x - mx) * (y - my);
            sxx += (x - mx) * (x - mx);
            syy += (y - my) * (y - my);
        }
        let corr = sxy / (sxx * syy).sqrt();
        assert!((corr - 0.9).abs() < 0.01, "corr {corr}");
    }

    #[test]
    fn treated_share_matches_psi() {
        let config = GeneratorConfig {
            n_units: 1000,
            treat_fraction: 0.3,
            ..base_config()
        };
        let events = generate(&config).unwrap();
        let treated: std::collections::BTreeSet<&str> = events
            .iter()
            .filter(|e| e.arm.as_deref() == Some("T"))
            .map(|e| e.unit_id.as_str())
            .collect();
        assert_eq!(treated.len(), 300);
    }

    #[test]
    fn infeasible_correlations_rejected() {
        let config = GeneratorConfig {
            covariates: vec![CovariateSpec {
                rho_y: 0.9,
                rho_w: 0.9,
            }],
            ..base_config()
        };
        // with rho_yw = 0, loading 0.9 on both factors needs 1.62 of variance
        assert!(matches!(generate(&config), Err(Error::Config(_))));

        let config = GeneratorConfig {
            covariates: vec![CovariateSpec {
                rho_y: 1.5,
                rho_w: 0.0,
            }],
            ..base_config()
        };
        assert!(matches!(generate(&config), Err(Error::Config(_))));

        // the same targets become feasible once y and w are correlated
        let config = GeneratorConfig {
            rho_yw: 0.8,
            w_role: DenominatorRole::EventValue(EventLaw::Lognormal { mu: 0.0, sigma: 0.5 }),
            covariates: vec![CovariateSpec {
                rho_y: 0.9,
                rho_w: 0.9,
            }],
            ..base_config()
        };
        assert!(generate(&config).is_ok());
    }

    #[test]
    fn degenerate_data_calibrates_to_one() {
        let config = GeneratorConfig {
            y_law: EventLaw::Normal { mean: 4.0, sd: 0.0 },
            n_units: 40,
            ..base_config()
        };
        let report = calibrate_se(&config, MetricKind::Mean, 1000).unwrap();
        assert_eq!(report.empirical_sd, 0.0);
        assert_eq!(report.mean_estimated_se, 0.0);
        assert_eq!(report.calibration_ratio, 1.0);
        assert_eq!(report.coverage, 1.0);
    }

    #[test]
    fn too_few_replications_rejected() {
        let err = calibrate_se(&base_config(), MetricKind::Mean, 10).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn mean_calibration_textbook_behavior() {
        // iid normal data: 95% two-sided coverage within +-1% at n=200
        let config = GeneratorConfig {
            n_units: 200,
            ..base_config()
        };
        let report = calibrate_se(&config, MetricKind::Mean, 10_000).unwrap();
        assert!(
            (report.coverage - 0.95).abs() < 0.01,
            "coverage {}",
            report.coverage
        );
        assert!(
            (report.calibration_ratio - 1.0).abs() < 0.03,
            "ratio {}",
            report.calibration_ratio
        );
        assert_eq!(report.failures, 0);
        assert!(report.empirical_power.is_none());
    }

    #[test]
    fn reports_are_reproducible() {
        let config = GeneratorConfig {
            n_units: 50,
            cluster_size_law: ClusterSizeLaw::PoissonPlusOne(1.5),
            ..base_config()
        };
        let a = calibrate_se(&config, MetricKind::Ratio, 1000).unwrap();
        let b = calibrate_se(&config, MetricKind::Ratio, 1000).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn null_rejection_rate_near_alpha() {
        let config = GeneratorConfig {
            n_units: 120,
            ..base_config()
        };
        let spec = PowerSpec {
            alpha: 0.05,
            power: None,
            mde: None,
            n: None,
            psi: 0.5,
            tail: NormalTail::OneSided,
        };
        let report = empirical_power(&config, &spec, MetricKind::Mean, 4000).unwrap();
        assert!(report.empirical_power.is_none());
        assert_eq!(report.predicted_power, Some(0.05));
        assert!(
            (report.rejection_rate_null - 0.05).abs() < 0.015,
            "size {}",
            report.rejection_rate_null
        );
    }

    #[test]
    fn huge_effect_saturates_power() {
        let mut config = GeneratorConfig {
            n_units: 100,
            ..base_config()
        };
        // ten effective SDs of the difference
        let profile = config.true_profile(MetricKind::Mean).unwrap();
        config.effect =
            10.0 * crate::power::planning_se(&profile, config.n_units as u64, 0.5).unwrap();
        let spec = PowerSpec {
            alpha: 0.05,
            power: None,
            mde: None,
            n: None,
            psi: 0.5,
            tail: NormalTail::OneSided,
        };
        let report = empirical_power(&config, &spec, MetricKind::Mean, 1000).unwrap();
        assert!(report.empirical_power.unwrap() >= 0.999);
        assert!(report.predicted_power.unwrap() > 0.999);
    }

    #[test]
    fn pitfall_equal_weights_agree() {
        let config = GeneratorConfig {
            n_units: 60,
            cluster_size_law: ClusterSizeLaw::Fixed(3),
            ..base_config()
        };
        let report = pitfall_weighted_regression(&config, 1000).unwrap();
        let diff = (report.naive.mean_estimated_se - report.delta.mean_estimated_se).abs();
        assert!(diff <= 0.01 * report.delta.mean_estimated_se);
    }

    #[test]
    fn pitfall_homogeneous_both_calibrate() {
        // V iid across units (pure unit intercept, no within-unit noise),
        // weights random but independent of V
        let config = GeneratorConfig {
            n_units: 150,
            cluster_size_law: ClusterSizeLaw::PoissonPlusOne(2.0),
            y_law: EventLaw::Normal { mean: 0.0, sd: 0.0 },
            unit_sd: 2.0,
            ..base_config()
        };
        let report = pitfall_weighted_regression(&config, 3000).unwrap();
        assert!(
            (report.naive.calibration_ratio - 1.0).abs() < 0.05,
            "naive {}",
            report.naive.calibration_ratio
        );
        assert!(
            (report.delta.calibration_ratio - 1.0).abs() < 0.05,
            "delta {}",
            report.delta.calibration_ratio
        );
    }

    #[test]
    fn true_profile_matches_brute_force_moments() {
        // lognormal y with event-value lognormal w: check the closed form
        // against large-sample moments of the generated residuals
        let config = GeneratorConfig {
            n_units: 200_000,
            cluster_size_law: ClusterSizeLaw::PoissonPlusOne(3.0),
            y_law: EventLaw::Lognormal { mu: 0.0, sigma: 0.8 },
            w_role: DenominatorRole::EventValue(EventLaw::Lognormal { mu: 0.2, sigma: 0.5 }),
            rho_yw: 0.5,
            ..base_config()
        };
        let profile = config.true_profile(MetricKind::Ratio).unwrap();
        let events = generate(&config).unwrap();
        let rows = aggregate(&events, WMode::Sum, CovMode::Sum).unwrap();
        let theta = config.y_law.mean() / config.w_role.event_mean();
        let residuals: Vec<f64> = rows.iter().map(|r| r.y - theta * r.w).collect();
        let (_, var) = sample_mean_var(&residuals, 1).unwrap();
        let rel = (var.sqrt() - profile.residual_sd).abs() / profile.residual_sd;
        assert!(
            rel < 0.02,
            "sd {} vs profile {}",
            var.sqrt(),
            profile.residual_sd
        );
        let wbar = rows.iter().map(|r| r.w).sum::<f64>() / rows.len() as f64;
        assert!((wbar - profile.denom_mean).abs() / profile.denom_mean < 0.02);
    }
}
