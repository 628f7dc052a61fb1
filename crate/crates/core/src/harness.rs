//! Replication driver and error metrics.
//!
//! Replication `r` of grid cell `c` draws from stream
//! `(base_seed, stream_key(c, r, lane))`, lane 0 for the adaptive run and lane 1
//! for the static run, so any replication can be rerun on its own. Replications
//! may run on any number of threads; results are collected in replication
//! order and folded sequentially, which makes summaries bit-identical across
//! thread counts.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::estimators::{self, EstimateReport, EstimatorKind, EstimatorOptions};
use crate::policy::{self, ExplorationRate, PolicyConfig};
use crate::rng::{stream_key, RngStream};
use crate::systems::{self, SystemSpec};
use crate::testing::{self, FrReference, TestMethod};

pub const ADAPTIVE_LANE: u64 = 0;
pub const STATIC_LANE: u64 = 1;

/// Settings of the treatment-versus-control comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialSpec {
    pub mu0: f64,
    pub alpha: f64,
    pub treatment_arms: Vec<usize>,
    pub fr_reference: FrReference,
    /// Arm counted by POB.
    pub best_arm: usize,
    pub methods: Vec<TestMethod>,
}

/// One pipeline configuration to replicate.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub specs: Vec<SystemSpec>,
    pub budget: u64,
    pub policy: PolicyConfig,
    pub estimators: Vec<EstimatorKind>,
    pub options: EstimatorOptions,
    /// True maximum mean; taken from the specs when absent.
    pub reference: Option<f64>,
    pub trial: Option<TrialSpec>,
    /// Keep every replication's point estimates in the summary.
    pub keep_points: bool,
}

impl Experiment {
    pub fn new(specs: Vec<SystemSpec>, budget: u64) -> Self {
        Self {
            specs,
            budget,
            policy: PolicyConfig::default(),
            estimators: vec![EstimatorKind::Ga, EstimatorKind::Lsa],
            options: EstimatorOptions::default(),
            reference: None,
            trial: None,
            keep_points: false,
        }
    }

    /// μ* used for bias and coverage.
    pub fn reference(&self) -> Result<f64> {
        match self.reference {
            Some(v) if v.is_finite() => Ok(v),
            Some(v) => Err(Error::Config(format!(
                "reference value must be finite, got {v}"
            ))),
            None => systems::max_true_mean(&self.specs).ok_or_else(|| {
                Error::Config(
                    "true maximum mean is unknown for these arms; supply a reference value".into(),
                )
            }),
        }
    }

    fn needs_adaptive(&self) -> bool {
        self.estimators.iter().any(|k| !k.is_static())
            || self
                .trial
                .as_ref()
                .is_some_and(|t| t.methods.iter().any(|m| *m != TestMethod::BonferroniFr))
    }

    fn needs_static(&self) -> bool {
        self.estimators.iter().any(|k| k.is_static())
            || self
                .trial
                .as_ref()
                .is_some_and(|t| t.methods.contains(&TestMethod::BonferroniFr))
    }

    fn validate(&self) -> Result<()> {
        if self.specs.is_empty() {
            return Err(Error::Config("no arms configured".into()));
        }
        self.policy.validate()?;
        if !(self.options.beta > 0.0 && self.options.beta < 1.0) {
            return Err(Error::Config(format!(
                "beta must lie in (0,1), got {}",
                self.options.beta
            )));
        }
        if self.estimators.is_empty() && self.trial.is_none() {
            return Err(Error::Config(
                "nothing to evaluate: no estimators and no tests".into(),
            ));
        }
        if let Some(t) = &self.trial {
            if !(t.alpha > 0.0 && t.alpha < 1.0) {
                return Err(Error::Config(format!(
                    "alpha must lie in (0,1), got {}",
                    t.alpha
                )));
            }
            if t.best_arm >= self.specs.len() {
                return Err(Error::Config(format!(
                    "best arm {} out of range",
                    t.best_arm
                )));
            }
        }
        Ok(())
    }
}

/// What one replication produced.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationRecord {
    pub estimates: Vec<EstimateReport>,
    pub tests: Vec<TestRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TestRecord {
    pub method: TestMethod,
    pub reject: bool,
    pub pob: f64,
    pub ens: f64,
}

/// Runs replication `replication` of grid cell `cell`.
pub fn run_replication(
    exp: &Experiment,
    base_seed: u64,
    cell: u64,
    replication: u64,
) -> Result<ReplicationRecord> {
    let adaptive = if exp.needs_adaptive() {
        let mut rng = RngStream::new(base_seed, stream_key(cell, replication, ADAPTIVE_LANE));
        Some(policy::run(&exp.specs, exp.budget, &exp.policy, &mut rng)?)
    } else {
        None
    };
    let fixed = if exp.needs_static() {
        let mut rng = RngStream::new(base_seed, stream_key(cell, replication, STATIC_LANE));
        Some(policy::run_static(&exp.specs, exp.budget, &mut rng)?)
    } else {
        None
    };
    let pick = |is_static: bool| {
        if is_static {
            fixed.as_ref()
        } else {
            adaptive.as_ref()
        }
        .ok_or_else(|| Error::Internal("pipeline state missing".into()))
    };

    let mut estimates = Vec::with_capacity(exp.estimators.len());
    for &kind in &exp.estimators {
        estimates.push(estimators::report(
            pick(kind.is_static())?,
            kind,
            &exp.options,
        )?);
    }

    let mut tests = Vec::new();
    if let Some(t) = &exp.trial {
        for &method in &t.methods {
            let (state, outcome) = match method {
                TestMethod::BonferroniFr => {
                    let s = pick(true)?;
                    let o = testing::bonferroni_fr_test(
                        s,
                        t.mu0,
                        t.alpha,
                        &t.treatment_arms,
                        t.fr_reference,
                    )?;
                    (s, o)
                }
                TestMethod::SingleGa | TestMethod::SingleLsa => {
                    let s = pick(false)?;
                    let kind = if method == TestMethod::SingleGa {
                        EstimatorKind::Ga
                    } else {
                        EstimatorKind::Lsa
                    };
                    let r = estimators::report(s, kind, &exp.options)?;
                    (s, testing::single_test(&r, t.mu0, t.alpha)?)
                }
            };
            let m = testing::trial_metrics(state, t.best_arm)?;
            tests.push(TestRecord {
                method,
                reject: outcome.reject,
                pob: m.pob,
                ens: m.ens,
            });
        }
    }
    Ok(ReplicationRecord { estimates, tests })
}

/// Error metrics of one estimator over R replications.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorSummary {
    pub estimator: EstimatorKind,
    pub reps: u64,
    pub reference: f64,
    pub mean_point: f64,
    pub bias: f64,
    pub rel_bias_pct: f64,
    /// Sample standard deviation (R − 1 denominator).
    pub stdev: f64,
    pub rel_stdev_pct: f64,
    /// Mean squared error about the reference.
    pub mse: f64,
    pub rrmse_pct: f64,
    pub coverage: f64,
    pub mean_variance_hat: f64,
    pub se_bias: f64,
    pub se_stdev: f64,
    pub se_mse: f64,
    pub se_rrmse_pct: f64,
    pub se_coverage: f64,
    pub points: Option<Vec<f64>>,
}

impl EstimatorSummary {
    /// Aggregates point estimates and coverage flags, in the given order.
    pub fn from_points(
        estimator: EstimatorKind,
        reference: f64,
        points: &[f64],
        covered: &[bool],
        variances: &[f64],
        keep_points: bool,
    ) -> Result<Self> {
        let reps = points.len();
        if reps < 2 {
            return Err(Error::Config(format!(
                "at least 2 replications are needed, got {reps}"
            )));
        }
        let r = reps as f64;
        let mean_point = points.iter().sum::<f64>() / r;
        let bias = mean_point - reference;
        let ss: f64 = points.iter().map(|p| (p - mean_point).powi(2)).sum();
        let stdev = (ss / (r - 1.0)).sqrt();
        let sq: Vec<f64> = points.iter().map(|p| (p - reference).powi(2)).collect();
        let mse = sq.iter().sum::<f64>() / r;
        let se_mse =
            (sq.iter().map(|e| (e - mse).powi(2)).sum::<f64>() / (r - 1.0)).sqrt() / r.sqrt();
        let hits = covered.iter().filter(|&&c| c).count() as f64;
        let coverage = hits / r;
        let rel = 100.0 / reference.abs();
        let rmse = mse.sqrt();
        Ok(Self {
            estimator,
            reps: reps as u64,
            reference,
            mean_point,
            bias,
            rel_bias_pct: bias * rel,
            stdev,
            rel_stdev_pct: stdev * rel,
            mse,
            rrmse_pct: rmse * rel,
            coverage,
            mean_variance_hat: variances.iter().sum::<f64>() / r,
            se_bias: stdev / r.sqrt(),
            se_stdev: stdev / (2.0 * (r - 1.0)).sqrt(),
            se_mse,
            se_rrmse_pct: if rmse > 0.0 {
                se_mse / (2.0 * rmse) * rel
            } else {
                0.0
            },
            se_coverage: (coverage * (1.0 - coverage) / r).sqrt(),
            points: keep_points.then(|| points.to_vec()),
        })
    }

    /// Relative bias standard error, in percent of the reference.
    pub fn se_rel_bias_pct(&self) -> f64 {
        self.se_bias * 100.0 / self.reference.abs()
    }
}

/// Rejection rate and trial metrics of one test over R replications.
#[derive(Debug, Clone, PartialEq)]
pub struct TestSummary {
    pub method: TestMethod,
    pub reps: u64,
    pub reject_rate: f64,
    pub se_reject: f64,
    pub mean_pob: f64,
    pub se_pob: f64,
    pub mean_ens: f64,
    pub se_ens: f64,
}

fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let r = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / r;
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (r - 1.0);
    (m, (var / r).sqrt())
}

impl TestSummary {
    pub fn from_records(method: TestMethod, records: &[TestRecord]) -> Result<Self> {
        let reps = records.len();
        if reps < 2 {
            return Err(Error::Config(format!(
                "at least 2 replications are needed, got {reps}"
            )));
        }
        let r = reps as f64;
        let reject_rate = records.iter().filter(|t| t.reject).count() as f64 / r;
        let pob: Vec<f64> = records.iter().map(|t| t.pob).collect();
        let ens: Vec<f64> = records.iter().map(|t| t.ens).collect();
        let (mean_pob, se_pob) = mean_and_se(&pob);
        let (mean_ens, se_ens) = mean_and_se(&ens);
        Ok(Self {
            method,
            reps: reps as u64,
            reject_rate,
            se_reject: (reject_rate * (1.0 - reject_rate) / r).sqrt(),
            mean_pob,
            se_pob,
            mean_ens,
            se_ens,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationSummary {
    pub reps: u64,
    pub budget: u64,
    pub rate: ExplorationRate,
    pub reference: Option<f64>,
    pub estimators: Vec<EstimatorSummary>,
    pub tests: Vec<TestSummary>,
}

impl ReplicationSummary {
    pub fn estimator(&self, kind: EstimatorKind) -> Option<&EstimatorSummary> {
        self.estimators.iter().find(|e| e.estimator == kind)
    }

    pub fn test(&self, method: TestMethod) -> Option<&TestSummary> {
        self.tests.iter().find(|t| t.method == method)
    }
}

fn with_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Internal(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

/// Runs `reps` replications of every cell's pipeline and returns the raw
/// records in replication order.
pub fn collect_records(
    exp: &Experiment,
    reps: u64,
    base_seed: u64,
    cell: u64,
    threads: Option<usize>,
) -> Result<Vec<ReplicationRecord>> {
    exp.validate()?;
    with_pool(threads, || {
        (0..reps)
            .into_par_iter()
            .map(|r| run_replication(exp, base_seed, cell, r))
            .collect::<Result<Vec<_>>>()
    })?
}

/// Aggregates records produced for `exp`.
pub fn summarize(exp: &Experiment, records: &[ReplicationRecord]) -> Result<ReplicationSummary> {
    let reference = if exp.estimators.is_empty() {
        exp.reference().ok()
    } else {
        Some(exp.reference()?)
    };
    let mut est = Vec::with_capacity(exp.estimators.len());
    for (i, &kind) in exp.estimators.iter().enumerate() {
        let mu = reference.unwrap_or(f64::NAN);
        let points: Vec<f64> = records.iter().map(|r| r.estimates[i].point).collect();
        let covered: Vec<bool> = records.iter().map(|r| r.estimates[i].covers(mu)).collect();
        let vars: Vec<f64> = records
            .iter()
            .map(|r| r.estimates[i].variance_hat)
            .collect();
        est.push(EstimatorSummary::from_points(
            kind,
            mu,
            &points,
            &covered,
            &vars,
            exp.keep_points,
        )?);
    }
    let mut tests = Vec::new();
    if let Some(t) = &exp.trial {
        for (i, &method) in t.methods.iter().enumerate() {
            let recs: Vec<TestRecord> = records.iter().map(|r| r.tests[i]).collect();
            tests.push(TestSummary::from_records(method, &recs)?);
        }
    }
    Ok(ReplicationSummary {
        reps: records.len() as u64,
        budget: exp.budget,
        rate: exp.policy.rate.clone(),
        reference,
        estimators: est,
        tests,
    })
}

fn replicate_cell(
    exp: &Experiment,
    reps: u64,
    base_seed: u64,
    cell: u64,
    threads: Option<usize>,
) -> Result<ReplicationSummary> {
    if reps < 2 {
        return Err(Error::Config(format!("reps must be >= 2, got {reps}")));
    }
    if !exp.estimators.is_empty() {
        exp.reference()?;
    }
    let records = collect_records(exp, reps, base_seed, cell, threads)?;
    summarize(exp, &records)
}

/// R independent replications of `exp`. `threads` of `None` uses the global
/// rayon pool.
pub fn replicate(
    exp: &Experiment,
    reps: u64,
    base_seed: u64,
    threads: Option<usize>,
) -> Result<ReplicationSummary> {
    replicate_cell(exp, reps, base_seed, 0, threads)
}

/// Budgets and exploration rates to cross.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepGrid {
    pub budgets: Vec<u64>,
    pub rates: Vec<ExplorationRate>,
}

impl SweepGrid {
    /// Cells in order: rates outer, budgets inner.
    pub fn cells(&self) -> Vec<(ExplorationRate, u64)> {
        self.rates
            .iter()
            .flat_map(|r| self.budgets.iter().map(move |&n| (r.clone(), n)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub index: u64,
    pub budget: u64,
    pub rate: ExplorationRate,
    pub summary: ReplicationSummary,
}

/// One summary per grid cell; cell i uses stream keys with cell index i.
pub fn sweep(
    base: &Experiment,
    grid: &SweepGrid,
    reps: u64,
    base_seed: u64,
    threads: Option<usize>,
) -> Result<Vec<SweepCell>> {
    let cells = grid.cells();
    if cells.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    let mut out = Vec::with_capacity(cells.len());
    for (i, (rate, budget)) in cells.into_iter().enumerate() {
        let mut exp = base.clone();
        exp.budget = budget;
        exp.policy.rate = rate.clone();
        let summary = replicate_cell(&exp, reps, base_seed, i as u64, threads)?;
        out.push(SweepCell {
            index: i as u64,
            budget,
            rate,
            summary,
        });
    }
    Ok(out)
}

/// Least-squares slope of log(metric) against log(n).
pub fn convergence_slope(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "slope needs at least 3 points, got {}",
            points.len()
        )));
    }
    if let Some((n, m)) = points.iter().find(|(n, m)| !(*n > 0.0 && *m > 0.0)) {
        return Err(Error::Domain(format!(
            "log-log slope needs positive values, got ({n}, {m})"
        )));
    }
    let logs: Vec<(f64, f64)> = points.iter().map(|(n, m)| (n.ln(), m.ln())).collect();
    let k = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / k;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = logs.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = logs.iter().map(|(x, _)| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Domain(
            "slope needs at least two distinct n values".into(),
        ));
    }
    Ok(sxy / sxx)
}

/// One long adaptive run, used as the reference value when the true maximum
/// mean has no closed form.
pub fn pilot_estimate(
    specs: &[SystemSpec],
    budget: u64,
    config: &PolicyConfig,
    kind: EstimatorKind,
    options: &EstimatorOptions,
    base_seed: u64,
) -> Result<EstimateReport> {
    // Cell index 2^20 - 1 is reserved for pilots so they never share a stream
    // with a sweep cell.
    let mut rng = RngStream::new(base_seed, stream_key((1 << 20) - 1, 0, 0));
    let state = if kind.is_static() {
        policy::run_static(specs, budget, &mut rng)?
    } else {
        policy::run(specs, budget, config, &mut rng)?
    };
    estimators::report(&state, kind, options)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn masses(values: &[f64]) -> Vec<SystemSpec> {
        values
            .iter()
            .map(|&v| SystemSpec::constant(v).unwrap())
            .collect()
    }

    #[test]
    fn deterministic_world_has_no_error() {
        let mut exp = Experiment::new(masses(&[1.0, 2.0, 3.0]), 60);
        exp.estimators = EstimatorKind::ALL.to_vec();
        let s = replicate(&exp, 20, 1, Some(1)).unwrap();
        for e in &s.estimators {
            if e.estimator == EstimatorKind::Ga {
                continue;
            }
            assert_eq!(
                (e.bias, e.stdev, e.mse, e.coverage),
                (0.0, 0.0, 0.0, 1.0),
                "{}",
                e.estimator
            );
        }
        let ga = s.estimator(EstimatorKind::Ga).unwrap();
        assert!(ga.bias < 0.0);
    }

    #[test]
    fn mse_decomposition() {
        let pts = [1.0, 2.5, 3.0, 0.5, 4.25];
        let s = EstimatorSummary::from_points(
            EstimatorKind::Lsa,
            2.0,
            &pts,
            &[true; 5],
            &[0.0; 5],
            true,
        )
        .unwrap();
        let r = pts.len() as f64;
        let want = s.bias * s.bias + s.stdev * s.stdev * (r - 1.0) / r;
        assert!((s.mse - want).abs() < 1e-12);
        assert!((s.rrmse_pct - 100.0 * s.mse.sqrt() / 2.0).abs() < 1e-12);
        assert_eq!(s.points.as_deref(), Some(&pts[..]));
        assert!(EstimatorSummary::from_points(
            EstimatorKind::Lsa,
            2.0,
            &[1.0],
            &[true],
            &[0.0],
            false
        )
        .is_err());
    }

    #[test]
    fn unknown_reference_is_config_error() {
        let specs = vec![SystemSpec::empirical(vec![1.0, 2.0]).unwrap()];
        let mut exp = Experiment::new(specs, 10);
        assert!(replicate(&exp, 4, 0, Some(1)).is_ok());
        exp.specs = crate::riskmodel::build_risk_systems(Default::default()).unwrap()[..2].to_vec();
        exp.budget = 10;
        assert!(matches!(
            replicate(&exp, 4, 0, Some(1)),
            Err(Error::Config(_))
        ));
        exp.reference = Some(0.0);
        assert!(replicate(&exp, 4, 0, Some(1)).is_ok());
    }

    #[test]
    fn thread_count_invariance() {
        let specs: Vec<_> = (1..=5)
            .map(|k| SystemSpec::normal(k as f64, k as f64).unwrap())
            .collect();
        let mut exp = Experiment::new(specs, 400);
        exp.estimators = EstimatorKind::ALL.to_vec();
        let a = replicate(&exp, 64, 11, Some(1)).unwrap();
        let b = replicate(&exp, 64, 11, Some(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_cell_sweep_equals_replicate() {
        let specs: Vec<_> = (1..=3)
            .map(|k| SystemSpec::normal(k as f64, 1.0).unwrap())
            .collect();
        let exp = Experiment::new(specs, 200);
        let grid = SweepGrid {
            budgets: vec![200],
            rates: vec![exp.policy.rate.clone()],
        };
        let cells = sweep(&exp, &grid, 16, 5, Some(1)).unwrap();
        assert_eq!(cells.len(), 1);
        assert_eq!(cells[0].summary, replicate(&exp, 16, 5, Some(1)).unwrap());
        let empty = SweepGrid {
            budgets: vec![],
            rates: vec![],
        };
        assert!(sweep(&exp, &empty, 16, 5, Some(1)).is_err());
    }

    #[test]
    fn slopes() {
        let inv: Vec<_> = [1e4, 1e5, 1e6, 1e7].iter().map(|&n| (n, 1.0 / n)).collect();
        assert!((convergence_slope(&inv).unwrap() + 1.0).abs() < 1e-12);
        let flat: Vec<_> = [1e4, 1e5, 1e6].iter().map(|&n| (n, 3.0)).collect();
        assert!(convergence_slope(&flat).unwrap().abs() < 1e-12);
        assert!(matches!(
            convergence_slope(&[(1.0, 1.0), (2.0, 0.0), (3.0, 1.0)]),
            Err(Error::Domain(_))
        ));
        assert!(convergence_slope(&inv[..2]).is_err());
    }

    #[test]
    fn trial_records() {
        let specs: Vec<_> = [0.3, 0.3, 0.3, 0.5]
            .iter()
            .map(|&p| SystemSpec::bernoulli(p).unwrap())
            .collect();
        let mut exp = Experiment::new(specs, 423);
        exp.estimators.clear();
        exp.trial = Some(TrialSpec {
            mu0: 0.3,
            alpha: 0.05,
            treatment_arms: vec![1, 2, 3],
            fr_reference: FrReference::ControlArm(0),
            best_arm: 3,
            methods: TestMethod::ALL.to_vec(),
        });
        let s = replicate(&exp, 200, 3, Some(1)).unwrap();
        assert_eq!(s.tests.len(), 3);
        let fr = s.test(TestMethod::BonferroniFr).unwrap();
        assert!((fr.mean_pob - 0.25).abs() < 4.0 * fr.se_pob + 1e-12);
        let lsa = s.test(TestMethod::SingleLsa).unwrap();
        assert!(lsa.mean_pob > fr.mean_pob);
        assert!(s.reference.is_some());
    }

    #[test]
    fn replications_are_reproducible_in_isolation() {
        let specs: Vec<_> = (1..=4)
            .map(|k| SystemSpec::normal(k as f64, 2.0).unwrap())
            .collect();
        let exp = Experiment::new(specs, 300);
        let all = collect_records(&exp, 10, 9, 0, Some(1)).unwrap();
        assert_eq!(run_replication(&exp, 9, 0, 7).unwrap(), all[7]);
    }
}
