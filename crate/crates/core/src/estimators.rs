//! Point estimators of the largest mean, their variance estimators and
//! normal-approximation confidence intervals.
//!
//! Every estimator reads a finished [`BanditState`]. Arm selection for LSA uses
//! the full allocation counts; means and variances use post-warm-up samples.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::normal;
use crate::policy::{self, Accumulator, BanditState, PolicyConfig};
use crate::rng::RngStream;
use crate::systems::SystemSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum EstimatorKind {
    /// Grand average of every post-warm-up sample.
    Ga,
    /// Mean of the most-sampled arm.
    Lsa,
    /// Maximum sample mean under the adaptive policy.
    Ama,
    /// Maximum sample mean under uniform static allocation.
    Sma,
    /// Maximum sample mean of whatever state it is given.
    Max,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 5] = [
        EstimatorKind::Ga,
        EstimatorKind::Lsa,
        EstimatorKind::Ama,
        EstimatorKind::Sma,
        EstimatorKind::Max,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Ga => "GA",
            EstimatorKind::Lsa => "LSA",
            EstimatorKind::Ama => "AMA",
            EstimatorKind::Sma => "SMA",
            EstimatorKind::Max => "MAX",
        }
    }

    /// True for the estimators computed from a uniform static run.
    pub fn is_static(self) -> bool {
        self == EstimatorKind::Sma
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EstimatorKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown estimator '{s}'")))
    }
}

/// Sample size in the LSA interval half-width z·√(σ̄²/m).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CiScaling {
    /// m = all post-warm-up rounds.
    #[default]
    Rounds,
    /// m = post-warm-up samples of the chosen arm.
    ArmCount,
}

/// Samples behind the per-arm means of the maximum estimators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaxWindow {
    /// Every sample of each arm, warm-up included.
    #[default]
    All,
    /// Post-warm-up samples only.
    PostWarmup,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimatorOptions {
    /// Nominal CI error β; intervals have level 1 − β.
    pub beta: f64,
    pub lsa_scaling: CiScaling,
    pub max_window: MaxWindow,
}

impl Default for EstimatorOptions {
    fn default() -> Self {
        Self {
            beta: 0.10,
            lsa_scaling: CiScaling::Rounds,
            max_window: MaxWindow::All,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateReport {
    pub estimator: EstimatorKind,
    pub point: f64,
    pub variance_hat: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub beta: f64,
    pub n_effective: u64,
    pub chosen_arm: Option<usize>,
}

impl EstimateReport {
    /// Whether the interval contains `value` (closed on both ends).
    pub fn covers(&self, value: f64) -> bool {
        self.ci_low <= value && value <= self.ci_high
    }

    pub fn half_width(&self) -> f64 {
        0.5 * (self.ci_high - self.ci_low)
    }
}

fn post_total(state: &BanditState) -> u64 {
    state.post().iter().map(|a| a.count).sum()
}

/// Grand mean of all post-warm-up samples.
pub fn ga_estimate(state: &BanditState) -> Result<f64> {
    let n = post_total(state);
    if n == 0 {
        return Err(Error::InsufficientData(
            "GA needs at least one post-warm-up sample".into(),
        ));
    }
    let sum: f64 = state.post().iter().map(|a| a.sum).sum();
    Ok(sum / n as f64)
}

/// Arm with the largest full allocation count; lowest index on ties.
pub fn lsa_index(state: &BanditState) -> usize {
    let mut best = 0;
    for (k, acc) in state.full().iter().enumerate() {
        if acc.count > state.full()[best].count {
            best = k;
        }
    }
    best
}

fn lsa_post(state: &BanditState) -> Result<(usize, &Accumulator)> {
    let arm = lsa_index(state);
    let acc = &state.post()[arm];
    if acc.count == 0 {
        return Err(Error::InsufficientData(format!(
            "most-sampled arm {arm} has no post-warm-up samples"
        )));
    }
    Ok((arm, acc))
}

/// Post-warm-up sample mean of the most-sampled arm.
pub fn lsa_estimate(state: &BanditState) -> Result<f64> {
    let (_, acc) = lsa_post(state)?;
    Ok(acc.sum / acc.count as f64)
}

/// Count-weighted average of the per-arm plug-in variances (post-warm-up).
pub fn ga_variance(state: &BanditState) -> Result<f64> {
    let n = post_total(state);
    if n == 0 {
        return Err(Error::InsufficientData(
            "GA variance needs at least one post-warm-up sample".into(),
        ));
    }
    let weighted: f64 = state
        .post()
        .iter()
        .filter_map(|a| a.plug_in_variance().map(|v| a.count as f64 * v))
        .sum();
    Ok(weighted / n as f64)
}

/// Plug-in variance of the most-sampled arm's post-warm-up samples.
pub fn lsa_variance(state: &BanditState) -> Result<f64> {
    let (_, acc) = lsa_post(state)?;
    Ok(acc.plug_in_variance().unwrap_or(0.0))
}

/// point ± z_{1−β/2}·√(variance_hat / n_effective).
pub fn confidence_interval(
    point: f64,
    variance_hat: f64,
    n_effective: u64,
    beta: f64,
) -> Result<(f64, f64)> {
    let z = normal::two_sided_critical(beta)?;
    if !(variance_hat >= 0.0) {
        return Err(Error::Domain(format!(
            "variance estimate must be >= 0, got {variance_hat}"
        )));
    }
    if n_effective == 0 {
        return Err(Error::InsufficientData(
            "confidence interval needs n_effective >= 1".into(),
        ));
    }
    let h = z * (variance_hat / n_effective as f64).sqrt();
    Ok((point - h, point + h))
}

/// Maximum of the per-arm post-warm-up sample means; empty arms are skipped.
pub fn max_estimate(state: &BanditState) -> Result<f64> {
    max_over(state.post()).map(|(m, _)| m)
}

/// Maximum sample mean over the chosen window, with its arm.
pub fn max_estimate_in(state: &BanditState, window: MaxWindow) -> Result<(f64, usize)> {
    match window {
        MaxWindow::All => max_over(state.full()),
        MaxWindow::PostWarmup => max_over(state.post()),
    }
}

fn max_over(accs: &[Accumulator]) -> Result<(f64, usize)> {
    let mut best: Option<(f64, usize)> = None;
    for (k, acc) in accs.iter().enumerate() {
        if let Some(m) = acc.mean() {
            if best.is_none_or(|(b, _)| m > b) {
                best = Some((m, k));
            }
        }
    }
    best.ok_or_else(|| Error::InsufficientData("every arm is empty".into()))
}

/// Point estimate, variance estimate and CI of one estimator on `state`.
///
/// The maximum estimators have no dedicated variance estimator; their report
/// carries the chosen arm's plug-in variance and sample count, i.e. the naive
/// single-arm interval.
pub fn report(
    state: &BanditState,
    kind: EstimatorKind,
    opts: &EstimatorOptions,
) -> Result<EstimateReport> {
    let (point, variance_hat, n_effective, chosen_arm) = match kind {
        EstimatorKind::Ga => (
            ga_estimate(state)?,
            ga_variance(state)?,
            post_total(state),
            None,
        ),
        EstimatorKind::Lsa => {
            let (arm, acc) = lsa_post(state)?;
            let m = match opts.lsa_scaling {
                CiScaling::Rounds => post_total(state),
                CiScaling::ArmCount => acc.count,
            };
            let var = acc.plug_in_variance().unwrap_or(0.0);
            (acc.sum / acc.count as f64, var, m, Some(arm))
        }
        EstimatorKind::Ama | EstimatorKind::Sma | EstimatorKind::Max => {
            let (point, arm) = max_estimate_in(state, opts.max_window)?;
            let acc = match opts.max_window {
                MaxWindow::All => &state.full()[arm],
                MaxWindow::PostWarmup => &state.post()[arm],
            };
            let var = acc.plug_in_variance().unwrap_or(0.0);
            (point, var, acc.count, Some(arm))
        }
    };
    let (ci_low, ci_high) = confidence_interval(point, variance_hat, n_effective, opts.beta)?;
    Ok(EstimateReport {
        estimator: kind,
        point,
        variance_hat,
        ci_low,
        ci_high,
        beta: opts.beta,
        n_effective,
        chosen_arm,
    })
}

/// Estimates the smallest mean by running the pipeline on negated outputs and
/// flipping the result back.
pub fn min_estimate_via_negation(
    specs: &[SystemSpec],
    budget: u64,
    config: &PolicyConfig,
    kind: EstimatorKind,
    opts: &EstimatorOptions,
    rng: &mut RngStream,
) -> Result<EstimateReport> {
    let mirrored: Vec<SystemSpec> = specs.iter().map(SystemSpec::negated).collect();
    let state = if kind.is_static() {
        policy::run_static(&mirrored, budget, rng)?
    } else {
        policy::run(&mirrored, budget, config, rng)?
    };
    let r = report(&state, kind, opts)?;
    Ok(EstimateReport {
        point: -r.point,
        ci_low: -r.ci_high,
        ci_high: -r.ci_low,
        ..r
    })
}
