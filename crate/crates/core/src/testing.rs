//! Testing whether any treatment beats a control: the single test on a
//! maximum-mean estimate, the Bonferroni fixed-randomization benchmark, and
//! trial outcome metrics.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::estimators::{EstimateReport, EstimatorKind};
use crate::normal;
use crate::policy::{Accumulator, BanditState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TestMethod {
    SingleGa,
    SingleLsa,
    BonferroniFr,
}

impl TestMethod {
    pub const ALL: [TestMethod; 3] = [
        TestMethod::SingleGa,
        TestMethod::SingleLsa,
        TestMethod::BonferroniFr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TestMethod::SingleGa => "SingleGA",
            TestMethod::SingleLsa => "SingleLSA",
            TestMethod::BonferroniFr => "BonferroniFR",
        }
    }
}

impl fmt::Display for TestMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TestMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TestMethod::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown test method '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TestOutcome {
    pub method: TestMethod,
    pub statistic: f64,
    pub critical: f64,
    pub alpha: f64,
    pub reject: bool,
}

impl TestOutcome {
    fn new(method: TestMethod, statistic: f64, critical: f64, alpha: f64) -> Self {
        Self {
            method,
            statistic,
            critical,
            alpha,
            reject: statistic > critical,
        }
    }
}

/// One-sided test of μ* = μ₀ against μ* > μ₀ from a GA or LSA report:
/// √m·(point − μ₀)/σ̂ compared with z_{1−α}.
pub fn single_test(report: &EstimateReport, mu0: f64, alpha: f64) -> Result<TestOutcome> {
    let method = match report.estimator {
        EstimatorKind::Ga => TestMethod::SingleGa,
        EstimatorKind::Lsa => TestMethod::SingleLsa,
        other => {
            return Err(Error::Config(format!(
                "single test is defined for GA and LSA reports, not {other}"
            )))
        }
    };
    let critical = normal::one_sided_critical(alpha)?;
    if !(report.variance_hat > 0.0) {
        return Err(Error::Degenerate(format!(
            "{} variance estimate is {}; the test statistic is undefined",
            report.estimator, report.variance_hat
        )));
    }
    let statistic =
        (report.n_effective as f64).sqrt() * (report.point - mu0) / report.variance_hat.sqrt();
    Ok(TestOutcome::new(method, statistic, critical, alpha))
}

/// What each treatment arm is compared against in the Bonferroni benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrReference {
    /// Two-sample z statistic against the sampled control arm:
    /// (X̄_k − X̄_c)/√(σ̂²_k/T_k + σ̂²_c/T_c).
    ControlArm(usize),
    /// One-sample z statistic against the known control mean:
    /// (X̄_k − μ₀)/√(σ̂²_k/T_k).
    KnownMean,
}

/// z statistic with a zero standard error read as 0, +∞ or −∞ by the sign of
/// the difference.
fn ratio(diff: f64, se: f64) -> f64 {
    if se > 0.0 {
        diff / se
    } else if diff > 0.0 {
        f64::INFINITY
    } else if diff < 0.0 {
        f64::NEG_INFINITY
    } else {
        0.0
    }
}

fn mean_and_se2(acc: &Accumulator, arm: usize) -> Result<(f64, f64)> {
    match (acc.mean(), acc.plug_in_variance()) {
        (Some(m), Some(v)) => Ok((m, v / acc.count as f64)),
        _ => Err(Error::InsufficientData(format!("arm {arm} has no samples"))),
    }
}

/// Fixed-randomization benchmark: one-sided per-arm z tests at level
/// α/|treatments|; the meta null is rejected if any arm's statistic exceeds
/// z_{1−α/|treatments|}. The reported statistic is the largest per-arm one.
pub fn bonferroni_fr_test(
    state: &BanditState,
    mu0: f64,
    alpha: f64,
    treatment_arms: &[usize],
    reference: FrReference,
) -> Result<TestOutcome> {
    if treatment_arms.is_empty() {
        return Err(Error::Config(
            "at least one treatment arm is required".into(),
        ));
    }
    let accs = state.full();
    let check = |arm: usize| {
        if arm >= accs.len() {
            Err(Error::Config(format!(
                "arm {arm} out of range for {} arms",
                accs.len()
            )))
        } else {
            Ok(())
        }
    };
    let critical = normal::one_sided_critical(alpha / treatment_arms.len() as f64)?;
    let (center, center_se2) = match reference {
        FrReference::ControlArm(c) => {
            check(c)?;
            if treatment_arms.contains(&c) {
                return Err(Error::Config(format!(
                    "control arm {c} is also listed as a treatment"
                )));
            }
            mean_and_se2(&accs[c], c)?
        }
        FrReference::KnownMean => (mu0, 0.0),
    };
    let mut statistic = f64::NEG_INFINITY;
    for &k in treatment_arms {
        check(k)?;
        let (m, se2) = mean_and_se2(&accs[k], k)?;
        statistic = statistic.max(ratio(m - center, (se2 + center_se2).sqrt()));
    }
    Ok(TestOutcome::new(
        TestMethod::BonferroniFr,
        statistic,
        critical,
        alpha,
    ))
}

/// Share of all patients given the best arm, and total successes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialMetrics {
    pub pob: f64,
    pub ens: f64,
}

/// POB and ENS over every round, warm-up included.
pub fn trial_metrics(state: &BanditState, best_arm: usize) -> Result<TrialMetrics> {
    let accs = state.full();
    if best_arm >= accs.len() {
        return Err(Error::Config(format!("best arm {best_arm} out of range")));
    }
    let total: u64 = accs.iter().map(|a| a.count).sum();
    if total == 0 {
        return Err(Error::InsufficientData("no patients were allocated".into()));
    }
    Ok(TrialMetrics {
        pob: accs[best_arm].count as f64 / total as f64,
        ens: accs.iter().map(|a| a.sum).sum(),
    })
}
