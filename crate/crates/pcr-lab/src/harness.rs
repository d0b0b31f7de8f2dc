//! Seeded Monte Carlo studies over the exact risk statistics.
//!
//! A [`StudyConfig`] fixes the population model, a grid of sample sizes, a
//! dimension rule, and a master seed. [`StudyConfig::resolve`] validates it
//! once into per-`n` plans (retained dimension `d`, auxiliary cut `r`,
//! eigenvalue grouping, optional alignment block) and draws the ground truth.
//! [`mc_study`] then evaluates `replicates` independent samples per grid
//! point and aggregates them into a [`StudyReport`].
//!
//! Determinism: the ground truth is drawn once from a seed derived from the
//! master seed, and replicate `(n, i)` uses a seed derived from
//! `(master, n, i)` alone. Replicates run in parallel but are collected in
//! index order and aggregated sequentially with pairwise summation, so
//! reports are byte-identical across reruns and thread counts.
//!
//! Convergence rates are measured by [`rate_study`]: an ordinary
//! least-squares fit of `log(mean risk)` against `log n` (optionally
//! compensated by `n / log n`), with a percentile bootstrap confidence
//! interval over within-`n` resamples. [`oracle_comparison`] tracks the
//! ratio of the PCR risk to the oracle risk along the same grid, and
//! [`oracle_pilot_ceiling`] turns three small pilot runs at shifted seeds
//! into a regression ceiling for that ratio.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{
    ground_truth_seed, mix64, replicate_seed, sample_design, DesignFamily, GroundTruth, HMode,
};
use crate::estimators::{oracle_fit, pca, pcr_fit};
use crate::risk::{
    evaluate_replicate, pairwise_sum, pairwise_sum_iter, RiskReport, SuitePlan, IDENTITY_RTOL,
};
use crate::spectrum::{Grouping, Spectrum, SpectrumKind};
use crate::{Error, Result};

/// Domain separation tag for the bootstrap resampling stream.
const TAG_BOOTSTRAP: u64 = 0x9723_8dd0_52eb_4f21;

/// Smallest mean risk treated as nonzero when forming ratios.
const RATIO_FLOOR: f64 = 1e-20;

/// Per-study ceiling on an automatically chosen truncation dimension.
const TRUNCATION_CAP: usize = 20_000;

/// Rule mapping sample size to the retained dimension `d`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum DimensionRule {
    /// The same `d` at every grid point.
    Fixed { d: usize },
    /// `d = ceil(log(n) / alpha)`, matched to exponential spectra.
    Log,
    /// `d = ceil(n^{1/(2 s alpha + alpha + 1)})`, balancing the bias and
    /// variance of polynomial spectra under a source condition of order `s`.
    Power,
}

impl DimensionRule {
    /// Resolve the dimension at sample size `n`. `alpha` is the spectrum's
    /// decay exponent (required by the non-fixed rules), `s` the source
    /// order used by the power rule.
    pub fn dimension(&self, n: usize, alpha: Option<f64>, s: f64) -> Result<usize> {
        if n < 1 {
            return Err(Error::parameter("dimension rules need n >= 1"));
        }
        match *self {
            DimensionRule::Fixed { d } => Ok(d),
            DimensionRule::Log => {
                let alpha = require_decay(alpha, "log")?;
                Ok(rule_ceil((n as f64).ln() / alpha))
            }
            DimensionRule::Power => {
                let alpha = require_decay(alpha, "power")?;
                let exponent = 1.0 / (2.0 * s * alpha + alpha + 1.0);
                Ok(rule_ceil((n as f64).powf(exponent)))
            }
        }
    }
}

fn require_decay(alpha: Option<f64>, rule: &str) -> Result<f64> {
    alpha.ok_or_else(|| {
        Error::config(format!(
            "the {rule} dimension rule needs a spectrum with a decay exponent"
        ))
    })
}

/// Ceiling with a small inward slack: `ln` and `powf` can land one rounding
/// error above an exact integer (e.g. `512^(1/3)`), which a bare `ceil`
/// would bump to the next dimension.
fn rule_ceil(x: f64) -> usize {
    (x - 1e-9).ceil().max(1.0) as usize
}

/// Rule mapping the retained dimension to the auxiliary cut `r` used by the
/// bias-side bounds.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum AuxiliaryRule {
    /// `r = ceil(d / 2)`.
    #[default]
    HalfD,
    /// `r = d`.
    SameAsD,
    /// The same `r` at every grid point.
    Fixed { r: usize },
}

impl AuxiliaryRule {
    pub fn cut(&self, d: usize) -> usize {
        match *self {
            AuxiliaryRule::HalfD => d.div_ceil(2),
            AuxiliaryRule::SameAsD => d,
            AuxiliaryRule::Fixed { r } => r,
        }
    }
}

/// Which evaluation suites to run on every replicate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuiteToggles {
    /// Exact-identity residuals.
    pub identities: bool,
    /// Deterministic inequality sides.
    pub inequalities: bool,
    /// Projector alignment transfer (needs a usable eigenvalue block).
    pub alignment: bool,
    /// Fit and evaluate the oracle estimator alongside PCR.
    pub oracle: bool,
}

impl Default for SuiteToggles {
    fn default() -> Self {
        SuiteToggles {
            identities: true,
            inequalities: true,
            alignment: true,
            oracle: true,
        }
    }
}

/// Transformation applied to the mean risk before the log-log slope fit.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Compensation {
    /// Fit `log(mean risk)` against `log n`.
    #[default]
    Raw,
    /// Fit `log(mean risk * n / log n)` against `log n`; a flat line means
    /// the risk tracks `log(n) / n`.
    NOverLogN,
}

fn default_one() -> f64 {
    1.0
}

fn default_c2() -> f64 {
    4.0
}

fn default_identity_rtol() -> f64 {
    IDENTITY_RTOL
}

fn default_resamples() -> usize {
    500
}

/// Complete description of one study. Everything downstream (ground truth,
/// per-replicate seeds, bootstrap draws) is a pure function of this value.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    /// Eigenvalue model of the covariance operator.
    pub spectrum: SpectrumKind,
    /// Truncation dimension; omit to derive it from the spectrum's tail (see
    /// [`suggested_truncation`]).
    #[serde(default)]
    pub p: Option<usize>,
    /// Source order of the regression function (0 disables the source-chain
    /// checks).
    #[serde(default)]
    pub s: f64,
    /// Norm of the source element `h`.
    #[serde(default = "default_one")]
    pub h_norm: f64,
    /// How the direction of `h` is chosen.
    #[serde(default)]
    pub h_mode: HMode,
    /// Noise variance.
    #[serde(default = "default_one")]
    pub sigma2: f64,
    /// Coordinate distribution of the design.
    #[serde(default)]
    pub family: DesignFamily,
    /// Sample sizes, strictly increasing.
    pub n_grid: Vec<usize>,
    /// Retained dimension per sample size.
    pub d_rule: DimensionRule,
    /// Auxiliary cut per retained dimension.
    #[serde(default)]
    pub r_rule: AuxiliaryRule,
    /// Ratio bound for the eigenvalue grouping of the variance bound.
    #[serde(default = "default_c2")]
    pub grouping_c2: f64,
    /// Monte Carlo replicates per grid point.
    pub replicates: usize,
    /// Master seed; all randomness derives from it.
    pub seed: u64,
    #[serde(default)]
    pub suites: SuiteToggles,
    /// Compensation applied by [`rate_study`] before fitting the slope.
    #[serde(default)]
    pub compensation: Compensation,
    /// Relative tolerance for identity residual checks.
    #[serde(default = "default_identity_rtol")]
    pub identity_rtol: f64,
    /// Expected log-log slope, asserted by the rates command when set.
    #[serde(default)]
    pub slope_target: Option<f64>,
    /// Half-width of the accepted window around `slope_target`.
    #[serde(default)]
    pub slope_tolerance: Option<f64>,
    /// Bootstrap resamples for the slope confidence interval.
    #[serde(default = "default_resamples")]
    pub bootstrap_resamples: usize,
}

/// One fully resolved grid point.
#[derive(Debug, Clone)]
pub struct RunPlan {
    pub n: usize,
    pub d: usize,
    pub r: usize,
    /// Eigenvalue grouping ending at `d`.
    pub grouping: Grouping,
    /// Block for the alignment transfer bound, when the suite is on and the
    /// spectrum has strict gaps around `{ceil(d/2)+1, ..., d}`.
    pub align_block: Option<(usize, usize)>,
}

/// A validated study: concrete spectrum, drawn ground truth, per-`n` plans.
#[derive(Debug, Clone)]
pub struct ResolvedStudy {
    pub spectrum: Spectrum,
    pub ground_truth: GroundTruth,
    pub plans: Vec<RunPlan>,
}

impl StudyConfig {
    /// Validate the configuration and resolve every derived quantity.
    pub fn resolve(&self) -> Result<ResolvedStudy> {
        if self.n_grid.is_empty() {
            return Err(Error::config("n_grid must not be empty"));
        }
        if !self.n_grid.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::config("n_grid must be strictly increasing"));
        }
        if self.replicates < 1 {
            return Err(Error::config("replicates must be >= 1"));
        }
        if !(self.identity_rtol >= 0.0) {
            return Err(Error::config(format!(
                "identity_rtol must be >= 0, got {}",
                self.identity_rtol
            )));
        }
        if self.bootstrap_resamples < 1 {
            return Err(Error::config("bootstrap_resamples must be >= 1"));
        }

        let alpha = self.spectrum.decay_exponent();
        let mut dims = Vec::with_capacity(self.n_grid.len());
        for &n in &self.n_grid {
            let d = self.d_rule.dimension(n, alpha, self.s)?;
            if d < 1 {
                return Err(Error::config(format!("dimension rule gave d = 0 at n = {n}")));
            }
            dims.push(d);
        }
        let d_max = *dims.iter().max().expect("n_grid is non-empty");

        let p = match self.p {
            Some(p) => p,
            None => suggested_truncation(&self.spectrum, d_max)?,
        };
        if p < 2 {
            return Err(Error::config(format!("truncation needs p >= 2, got {p}")));
        }
        let spectrum = Spectrum::build(self.spectrum.clone(), p)?;
        let ground_truth = GroundTruth::new(
            spectrum.clone(),
            self.s,
            self.h_norm,
            self.sigma2,
            self.h_mode,
            ground_truth_seed(self.seed),
        )?;

        let mut plans = Vec::with_capacity(self.n_grid.len());
        for (&n, &d) in self.n_grid.iter().zip(&dims) {
            if d > p {
                return Err(Error::config(format!(
                    "d = {d} at n = {n} exceeds the truncation p = {p}"
                )));
            }
            let r = self.r_rule.cut(d);
            if r < 1 || r > d {
                return Err(Error::config(format!(
                    "auxiliary rule gave r = {r} outside [1, d] at d = {d}"
                )));
            }
            if self.suites.inequalities && r >= p {
                return Err(Error::config(format!(
                    "the bias bounds need r < p, got r = {r}, p = {p}"
                )));
            }
            let grouping = spectrum.build_grouping(d, self.grouping_c2)?;
            let align_block = if self.suites.alignment && d >= 2 && d < p {
                // Block J = {ceil(d/2)+1, ..., d}; usable only when the
                // spectrum separates strictly at both ends.
                let lo = d.div_ceil(2) + 1;
                let strict = spectrum.lambda(lo - 1) > spectrum.lambda(lo)
                    && spectrum.lambda(d) > spectrum.lambda(d + 1);
                strict.then_some((lo, d))
            } else {
                None
            };
            plans.push(RunPlan {
                n,
                d,
                r,
                grouping,
                align_block,
            });
        }
        Ok(ResolvedStudy {
            spectrum,
            ground_truth,
            plans,
        })
    }

    fn suite_plan(&self, plan: &RunPlan) -> SuitePlan {
        SuitePlan {
            r: plan.r,
            grouping: plan.grouping.clone(),
            align_block: plan.align_block,
            identities: self.suites.identities,
            inequalities: self.suites.inequalities,
        }
    }
}

/// Truncation dimension for an idealized infinite spectrum: large enough
/// that the discarded tail holds less than `1e-6` of the total trace, and at
/// least `4 * d_max`. Slowly decaying spectra can push this past any
/// reasonable size; those (and the flat isotropic family) require an
/// explicit `p`.
pub fn suggested_truncation(kind: &SpectrumKind, d_max: usize) -> Result<usize> {
    const TAIL_FRACTION: f64 = 1e-6;
    let tail_p = match *kind {
        SpectrumKind::Isotropic => {
            return Err(Error::config(
                "the isotropic family has no decaying tail; set p explicitly",
            ));
        }
        // Geometric tails: sum_{j>p} e^{-alpha j} = e^{-alpha p} * total.
        SpectrumKind::Exponential { alpha } => (-TAIL_FRACTION.ln() / alpha).ceil() as usize,
        SpectrumKind::Polynomial { alpha } => polynomial_tail_cut(alpha, TAIL_FRACTION),
        // The perturbation envelope widens the tail/trace ratio by at most
        // c_ev^2.
        SpectrumKind::ApproxPolynomial { alpha, c_ev, .. } => {
            polynomial_tail_cut(alpha, TAIL_FRACTION / (c_ev * c_ev))
        }
    };
    let p = tail_p.max(4 * d_max).max(2);
    if p > TRUNCATION_CAP {
        return Err(Error::config(format!(
            "the tail rule wants p = {p} (> {TRUNCATION_CAP}); set p explicitly"
        )));
    }
    Ok(p)
}

/// Smallest `p` with `sum_{j>p} j^{-alpha} <= fraction * zeta(alpha)`, via
/// the integral bound `sum_{j>p} j^{-alpha} <= p^{1-alpha}/(alpha-1)`.
fn polynomial_tail_cut(alpha: f64, fraction: f64) -> usize {
    let k_max = 10_000usize;
    let head = pairwise_sum_iter((1..=k_max).map(|k| (k as f64).powf(-alpha)));
    let zeta = head + (k_max as f64).powf(1.0 - alpha) / (alpha - 1.0);
    (fraction * zeta * (alpha - 1.0))
        .powf(1.0 / (1.0 - alpha))
        .ceil() as usize
}

/// Run a single replicate of the study at grid point `n`. Deterministic in
/// `(config, n, replicate)`; the same triple always produces the same
/// record, regardless of what else ran.
pub fn run_replicate(cfg: &StudyConfig, n: usize, replicate: u64) -> Result<RiskReport> {
    let study = cfg.resolve()?;
    let plan = study
        .plans
        .iter()
        .find(|plan| plan.n == n)
        .ok_or_else(|| Error::parameter(format!("n = {n} is not on the study grid")))?;
    let suite = cfg.suite_plan(plan);
    replicate_at(cfg, &study.ground_truth, plan, &suite, replicate)
}

fn replicate_at(
    cfg: &StudyConfig,
    gt: &GroundTruth,
    plan: &RunPlan,
    suite: &SuitePlan,
    replicate: u64,
) -> Result<RiskReport> {
    let seed = replicate_seed(cfg.seed, plan.n, replicate);
    let sample = sample_design(gt, plan.n, cfg.family, seed)?;
    let decomposition = pca(&sample.x, plan.n)?;
    let fit = pcr_fit(&decomposition, &sample.x, &sample.y, plan.d, &gt.spectrum)?;
    let mut oracle_note = None;
    let oracle = if cfg.suites.oracle {
        match oracle_fit(&sample.x, &sample.y, plan.d, &gt.spectrum) {
            Ok(fit) => Some(fit),
            Err(Error::DegenerateFit(msg)) => {
                oracle_note = Some(msg);
                None
            }
            Err(e) => return Err(e),
        }
    } else {
        None
    };
    let mut report = evaluate_replicate(
        replicate,
        &decomposition,
        &sample.x,
        gt,
        &fit,
        oracle.as_ref(),
        suite,
    )?;
    if let Some(msg) = oracle_note {
        report.degenerate = Some(match report.degenerate.take() {
            Some(prev) => format!("{prev}; {msg}"),
            None => msg,
        });
    }
    Ok(report)
}

/// Mean and standard error of one statistic across the replicates where it
/// was defined. The SE uses the unbiased variance and is `None` from a
/// single observation.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct StatSummary {
    pub mean: Option<f64>,
    pub se: Option<f64>,
    pub count: u64,
}

fn mean_se(values: &[f64]) -> StatSummary {
    let count = values.len() as u64;
    if count == 0 {
        return StatSummary {
            mean: None,
            se: None,
            count,
        };
    }
    let mean = pairwise_sum(values) / count as f64;
    let se = (count >= 2).then(|| {
        let var = pairwise_sum_iter(values.iter().map(|v| (v - mean) * (v - mean)))
            / (count as f64 - 1.0);
        (var / count as f64).sqrt()
    });
    StatSummary {
        mean: Some(mean),
        se,
        count,
    }
}

/// Event and flag tallies across the replicates of one grid point.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct EventCounts {
    /// Replicates with `lambda_hat_d < lambda_d / 2`.
    pub halving_event_failures: u64,
    /// Replicates where some retained index missed its halving bound.
    pub halving_flagged_replicates: u64,
    /// Total retained indices missing their halving bound.
    pub halving_flags_total: u64,
    /// Replicates where the alignment bound was evaluated.
    pub alignment_defined: u64,
    /// Of those, replicates where its event held.
    pub alignment_held: u64,
    pub pcr_thresholded: u64,
    pub oracle_thresholded: u64,
    /// Replicates carrying a degeneracy note.
    pub degenerate: u64,
}

/// Aggregated view of one grid point.
#[derive(Debug, Clone, Serialize)]
pub struct NSummary {
    pub n: usize,
    pub d: usize,
    pub r: usize,
    pub replicates: usize,
    /// Mean/SE per statistic, keyed by the replicate-record column name.
    pub stats: BTreeMap<String, StatSummary>,
    pub events: EventCounts,
    /// Largest identity residual seen at this grid point.
    pub max_identity_residual: Option<f64>,
    /// Violation counts keyed by check name; empty means all checks passed.
    pub violations: BTreeMap<String, u64>,
}

type Extract = fn(&RiskReport) -> Option<f64>;

/// Statistics aggregated per grid point, keyed like the replicate table.
fn stat_columns() -> &'static [(&'static str, Extract)] {
    &[
        ("pred_error", |r| Some(r.pred_error)),
        ("h_error", |r| Some(r.h_error)),
        ("pcr_risk", |r| Some(r.pcr_risk)),
        ("oracle_pred_error", |r| r.oracle_pred_error),
        ("oracle_h_error", |r| r.oracle_h_error),
        ("oracle_risk", |r| r.oracle_risk),
        ("bias", |r| r.bias),
        ("variance", |r| r.variance),
        ("excess_risk", |r| Some(r.excess_risk)),
        ("excess_le", |r| Some(r.excess_le)),
        ("excess_gt", |r| Some(r.excess_gt)),
        ("res_conditional_mse", |r| r.res_conditional_mse),
        ("res_bias_operator", |r| r.res_bias_operator),
        ("res_excess_routes", |r| r.res_excess_routes),
        ("res_excess_split", |r| r.res_excess_split),
        ("bias_bound_lhs", |r| r.bias_bound_lhs),
        ("bias_bound_tail_split", |r| r.bias_bound_tail_split),
        ("bias_bound_operator_norm", |r| r.bias_bound_operator_norm),
        ("bias_bound_excess_risk", |r| r.bias_bound_excess_risk),
        ("chain_tail_d_scaled", |r| r.chain_tail_d_scaled),
        ("chain_tail_r_scaled", |r| r.chain_tail_r_scaled),
        ("chain_tail_r", |r| r.chain_tail_r),
        ("chain_split_rhs", |r| r.chain_split_rhs),
        ("chain_pop_tail", |r| r.chain_pop_tail),
        ("chain_pop_tail_rhs", |r| r.chain_pop_tail_rhs),
        ("chain_mixed", |r| r.chain_mixed),
        ("chain_mixed_rhs", |r| r.chain_mixed_rhs),
        ("variance_bound_lhs", |r| r.variance_bound_lhs),
        ("variance_bound_rhs", |r| r.variance_bound_rhs),
        ("remainder_excess", |r| r.remainder_excess),
        ("remainder_grouped", |r| r.remainder_grouped),
        ("composed_lhs", |r| r.composed_lhs),
        ("composed_rhs", |r| r.composed_rhs),
        ("h_bound_lhs", |r| r.h_bound_lhs),
        ("h_bound_rhs", |r| r.h_bound_rhs),
        ("align_lhs", |r| r.align_lhs),
        ("align_rhs", |r| r.align_rhs),
        ("align_scaled_norm", |r| r.align_scaled_norm),
    ]
}

fn summarize(plan: &RunPlan, reports: &[RiskReport], identity_rtol: f64) -> NSummary {
    let mut stats = BTreeMap::new();
    for (name, extract) in stat_columns() {
        let values: Vec<f64> = reports.iter().filter_map(*extract).collect();
        stats.insert((*name).to_string(), mean_se(&values));
    }

    let mut events = EventCounts::default();
    for report in reports {
        if !report.event_halving {
            events.halving_event_failures += 1;
        }
        if report.halving_failures > 0 {
            events.halving_flagged_replicates += 1;
        }
        events.halving_flags_total += report.halving_failures;
        if let Some(held) = report.event_alignment {
            events.alignment_defined += 1;
            if held {
                events.alignment_held += 1;
            }
        }
        if report.pcr_thresholded {
            events.pcr_thresholded += 1;
        }
        if report.oracle_thresholded == Some(true) {
            events.oracle_thresholded += 1;
        }
        if report.degenerate.is_some() {
            events.degenerate += 1;
        }
    }

    let max_identity_residual = reports
        .iter()
        .flat_map(|r| {
            [
                r.res_conditional_mse,
                r.res_bias_operator,
                r.res_excess_routes,
                r.res_excess_split,
            ]
        })
        .flatten()
        .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))));

    let mut violations = BTreeMap::new();
    for report in reports {
        for name in report.violated_checks(identity_rtol) {
            *violations.entry(name.to_string()).or_insert(0u64) += 1;
        }
    }

    NSummary {
        n: plan.n,
        d: plan.d,
        r: plan.r,
        replicates: reports.len(),
        stats,
        events,
        max_identity_residual,
        violations,
    }
}

/// Ordinary least-squares line through `(x, y)` points.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    /// Coefficient of determination; 1 when the residuals vanish.
    pub r2: f64,
}

/// Least-squares slope of `y` on `x`. Needs at least two points and two
/// distinct abscissae.
pub fn fit_slope(points: &[(f64, f64)]) -> Result<LineFit> {
    if points.len() < 2 {
        return Err(Error::parameter(format!(
            "slope fit needs >= 2 points, got {}",
            points.len()
        )));
    }
    let spread = points
        .iter()
        .map(|p| p.0)
        .fold(f64::NEG_INFINITY, f64::max)
        - points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    if !(spread > 0.0) {
        return Err(Error::parameter("slope fit needs distinct abscissae"));
    }
    let n = points.len() as f64;
    let mean_x = pairwise_sum_iter(points.iter().map(|p| p.0)) / n;
    let mean_y = pairwise_sum_iter(points.iter().map(|p| p.1)) / n;
    let sxx = pairwise_sum_iter(points.iter().map(|p| (p.0 - mean_x) * (p.0 - mean_x)));
    let sxy = pairwise_sum_iter(points.iter().map(|p| (p.0 - mean_x) * (p.1 - mean_y)));
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let ss_res = pairwise_sum_iter(points.iter().map(|p| {
        let resid = p.1 - (slope * p.0 + intercept);
        resid * resid
    }));
    let ss_tot = pairwise_sum_iter(points.iter().map(|p| (p.1 - mean_y) * (p.1 - mean_y)));
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    Ok(LineFit {
        slope,
        intercept,
        r2,
    })
}

/// Slope fit over the sample-size grid, with its bootstrap interval.
#[derive(Debug, Clone, Serialize)]
pub struct SlopeSummary {
    /// Which ordinate was fitted: `log_mean_risk`, or
    /// `log_compensated_mean_risk` under [`Compensation::NOverLogN`].
    pub statistic: String,
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    /// Central 95% percentile interval over bootstrap resamples; `None` when
    /// too few resamples produced a usable fit.
    pub bootstrap_ci: Option<(f64, f64)>,
    pub resamples: u64,
}

/// PCR-to-oracle mean risk ratio at one grid point; `None` when either mean
/// is missing or indistinguishable from zero.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct RatioPoint {
    pub n: usize,
    pub ratio: Option<f64>,
}

/// Risk ratio curve along the grid and the slope of its logarithm.
#[derive(Debug, Clone, Serialize)]
pub struct OracleComparison {
    pub points: Vec<RatioPoint>,
    pub log_ratio_slope: Option<LineFit>,
    /// Why the slope is missing, when it is.
    pub skipped: Option<String>,
}

/// Aggregated study results.
#[derive(Debug, Clone, Serialize)]
pub struct StudyReport {
    pub per_n: Vec<NSummary>,
    /// Violation counts summed over the grid, keyed by check name.
    pub violations_total: BTreeMap<String, u64>,
    pub total_violation_count: u64,
    /// Convergence slope; only set by [`rate_study`].
    pub slope: Option<SlopeSummary>,
    /// Why the slope fit was skipped, when it was.
    pub slope_skipped: Option<String>,
    /// Oracle ratio curve; only set when the oracle suite ran.
    pub oracle: Option<OracleComparison>,
}

/// A study's aggregate report plus every raw replicate record, grouped by
/// grid point in grid order (`replicates` contiguous records per `n`).
#[derive(Debug, Clone)]
pub struct StudyOutput {
    pub report: StudyReport,
    pub replicates: Vec<RiskReport>,
}

/// Run the full grid and aggregate. Replicates are evaluated in parallel;
/// the result is identical for any thread count.
pub fn mc_study(cfg: &StudyConfig) -> Result<StudyOutput> {
    let study = cfg.resolve()?;
    let mut per_n = Vec::with_capacity(study.plans.len());
    let mut replicates = Vec::with_capacity(study.plans.len() * cfg.replicates);
    for plan in &study.plans {
        let suite = cfg.suite_plan(plan);
        let reports = (0..cfg.replicates as u64)
            .into_par_iter()
            .map(|rep| replicate_at(cfg, &study.ground_truth, plan, &suite, rep))
            .collect::<Result<Vec<RiskReport>>>()?;
        per_n.push(summarize(plan, &reports, cfg.identity_rtol));
        replicates.extend(reports);
    }

    let mut violations_total: BTreeMap<String, u64> = BTreeMap::new();
    for row in &per_n {
        for (name, count) in &row.violations {
            *violations_total.entry(name.clone()).or_insert(0) += count;
        }
    }
    let total_violation_count = violations_total.values().sum();

    let report = StudyReport {
        per_n,
        violations_total,
        total_violation_count,
        slope: None,
        slope_skipped: None,
        oracle: None,
    };
    Ok(StudyOutput {
        report,
        replicates,
    })
}

fn rate_transform(comp: Compensation, n: usize, mean: f64) -> f64 {
    match comp {
        Compensation::Raw => mean.ln(),
        Compensation::NOverLogN => (mean * n as f64 / (n as f64).ln()).ln(),
    }
}

fn rate_statistic_name(comp: Compensation) -> &'static str {
    match comp {
        Compensation::Raw => "log_mean_risk",
        Compensation::NOverLogN => "log_compensated_mean_risk",
    }
}

/// Log-log points of the mean PCR risk, or the reason no fit is possible.
fn rate_points(
    cfg: &StudyConfig,
    per_n: &[NSummary],
) -> std::result::Result<Vec<(f64, f64)>, String> {
    let mut points = Vec::with_capacity(per_n.len());
    for row in per_n {
        let mean = row
            .stats
            .get("pcr_risk")
            .and_then(|s| s.mean)
            .ok_or_else(|| format!("no mean risk at n = {}", row.n))?;
        if !(mean > 0.0) {
            return Err(format!(
                "mean risk {mean:e} at n = {} is not positive; no log-log fit",
                row.n
            ));
        }
        if cfg.compensation == Compensation::NOverLogN && row.n < 2 {
            return Err(format!("compensation needs n >= 2, got n = {}", row.n));
        }
        points.push((
            (row.n as f64).ln(),
            rate_transform(cfg.compensation, row.n, mean),
        ));
    }
    Ok(points)
}

/// Percentile bootstrap for the slope: resample replicates within each grid
/// point, recompute means, refit. Draws come from a dedicated stream seeded
/// by the master seed, so the interval is reproducible.
fn bootstrap_slope_ci(
    cfg: &StudyConfig,
    ns: &[usize],
    per_n_risks: &[Vec<f64>],
) -> Option<(f64, f64)> {
    let resamples = cfg.bootstrap_resamples;
    let mut rng = ChaCha8Rng::seed_from_u64(mix64(cfg.seed ^ TAG_BOOTSTRAP));
    let mut slopes = Vec::with_capacity(resamples);
    'resample: for _ in 0..resamples {
        let mut points = Vec::with_capacity(ns.len());
        for (&n, risks) in ns.iter().zip(per_n_risks) {
            let m = risks.len();
            let draws: Vec<f64> = (0..m).map(|_| risks[rng.gen_range(0..m)]).collect();
            let mean = pairwise_sum(&draws) / m as f64;
            if !(mean > 0.0) {
                // A zero-risk resample has no logarithm; drop the resample.
                continue 'resample;
            }
            points.push(((n as f64).ln(), rate_transform(cfg.compensation, n, mean)));
        }
        if let Ok(fit) = fit_slope(&points) {
            if fit.slope.is_finite() {
                slopes.push(fit.slope);
            }
        }
    }
    // The interval is only meaningful if most resamples survived.
    if slopes.len() < 10 || slopes.len() < resamples / 2 {
        return None;
    }
    slopes.sort_by(|a, b| a.partial_cmp(b).expect("slopes are finite"));
    let b = slopes.len();
    let lo_idx = ((0.025 * b as f64).floor() as usize).min(b - 1);
    let hi_idx = ((0.975 * b as f64).ceil() as usize).saturating_sub(1).min(b - 1);
    Some((slopes[lo_idx], slopes[hi_idx]))
}

/// Run the grid and fit the convergence slope of the mean PCR risk against
/// the sample size, with a bootstrap confidence interval. Needs at least
/// four grid points; a non-positive mean risk skips the fit and records why.
pub fn rate_study(cfg: &StudyConfig) -> Result<StudyOutput> {
    if cfg.n_grid.len() < 4 {
        return Err(Error::parameter(format!(
            "rate studies need >= 4 grid points, got {}",
            cfg.n_grid.len()
        )));
    }
    let mut out = mc_study(cfg)?;
    match rate_points(cfg, &out.report.per_n) {
        Ok(points) => {
            let fit = fit_slope(&points)?;
            let per_n_risks: Vec<Vec<f64>> = out
                .report
                .per_n
                .iter()
                .enumerate()
                .map(|(i, _)| {
                    out.replicates[i * cfg.replicates..(i + 1) * cfg.replicates]
                        .iter()
                        .map(|r| r.pcr_risk)
                        .collect()
                })
                .collect();
            let ci = bootstrap_slope_ci(cfg, &cfg.n_grid, &per_n_risks);
            out.report.slope = Some(SlopeSummary {
                statistic: rate_statistic_name(cfg.compensation).to_string(),
                slope: fit.slope,
                intercept: fit.intercept,
                r2: fit.r2,
                bootstrap_ci: ci,
                resamples: cfg.bootstrap_resamples as u64,
            });
        }
        Err(reason) => out.report.slope_skipped = Some(reason),
    }
    if cfg.suites.oracle {
        out.report.oracle = Some(oracle_comparison_from(&out.report));
    }
    Ok(out)
}

/// Ratio curve of mean PCR risk to mean oracle risk, from an aggregated
/// report. Ratios where either mean is missing or at the zero floor stay
/// undefined rather than dividing by noise.
pub fn oracle_comparison_from(report: &StudyReport) -> OracleComparison {
    let mut points = Vec::with_capacity(report.per_n.len());
    let mut fit_points = Vec::new();
    for row in &report.per_n {
        let pcr = row.stats.get("pcr_risk").and_then(|s| s.mean);
        let oracle = row.stats.get("oracle_risk").and_then(|s| s.mean);
        let ratio = match (pcr, oracle) {
            (Some(a), Some(b)) if a > RATIO_FLOOR && b > RATIO_FLOOR => Some(a / b),
            _ => None,
        };
        if let Some(rt) = ratio {
            fit_points.push(((row.n as f64).ln(), rt.ln()));
        }
        points.push(RatioPoint { n: row.n, ratio });
    }
    let (log_ratio_slope, skipped) = if fit_points.len() >= 2 {
        match fit_slope(&fit_points) {
            Ok(fit) => (Some(fit), None),
            Err(e) => (None, Some(e.to_string())),
        }
    } else {
        (
            None,
            Some(format!(
                "only {} grid points have a defined risk ratio",
                fit_points.len()
            )),
        )
    };
    OracleComparison {
        points,
        log_ratio_slope,
        skipped,
    }
}

/// Run the grid and compare PCR to the oracle estimator.
pub fn oracle_comparison(cfg: &StudyConfig) -> Result<OracleComparison> {
    let out = mc_study(cfg)?;
    Ok(oracle_comparison_from(&out.report))
}

/// Regression ceiling for the risk ratio at the largest grid point: three
/// small pilot studies at shifted master seeds, oracle suite only, 60
/// replicates each; the ceiling is 1.25 times the worst pilot ratio.
pub fn oracle_pilot_ceiling(cfg: &StudyConfig) -> Result<f64> {
    let n_max = *cfg
        .n_grid
        .last()
        .ok_or_else(|| Error::config("n_grid must not be empty"))?;
    let mut worst: Option<f64> = None;
    for shift in 1..=3u64 {
        let mut pilot = cfg.clone();
        pilot.n_grid = vec![n_max];
        pilot.replicates = 60;
        pilot.seed = cfg.seed.wrapping_add(shift);
        pilot.suites = SuiteToggles {
            identities: false,
            inequalities: false,
            alignment: false,
            oracle: true,
        };
        let out = mc_study(&pilot)?;
        let cmp = oracle_comparison_from(&out.report);
        if let Some(ratio) = cmp.points.first().and_then(|pt| pt.ratio) {
            worst = Some(worst.map_or(ratio, |w: f64| w.max(ratio)));
        }
    }
    let worst = worst.ok_or_else(|| {
        Error::Data("every pilot ratio was undefined; no ceiling".into())
    })?;
    Ok(1.25 * worst)
}
