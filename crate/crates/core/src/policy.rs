//! Generalized UCB sampling.
//!
//! Every arm is sampled once during the first K rounds. From round K+1 on, the
//! arm with the largest index
//!
//! ```text
//! X̄_k + sqrt(2 ν_n / T_k)                      (plain)
//! X̄_k + sqrt(2 ν_n / T_k · V_k),               (variance-aware)
//! V_k = σ̂²_k + sqrt(2 ν_n / T_k)
//! ```
//!
//! is sampled, where `T_k` counts the arm's samples so far and `ν_n` is the
//! exploration rate at the round being decided. Ties go to the lowest index.
//!
//! The state keeps two accumulator sets per arm. The full set drives the policy.
//! The post set only records rounds after the warm-up cutoff and is what the
//! estimators read. [`WarmupMode`] decides whether warm-up rounds are ordinary
//! policy rounds or a round-robin sweep, and whether they count against the
//! budget.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::systems::{RngStream, SystemSpec};

/// The exploration rate ν_n.
#[derive(Debug, Clone, PartialEq)]
pub enum ExplorationRate {
    /// ν_n = c · ln n.
    ScaledLog(f64),
    /// ν_n = n^p.
    Power(f64),
    /// Piecewise-linear interpolation through `(n, ν)` breakpoints, constant
    /// outside the tabulated range.
    Custom(Vec<(u64, f64)>),
}

impl Default for ExplorationRate {
    fn default() -> Self {
        ExplorationRate::ScaledLog(1.0)
    }
}

impl ExplorationRate {
    pub fn validate(&self) -> Result<()> {
        match self {
            ExplorationRate::ScaledLog(c) if !(c.is_finite() && *c > 0.0) => {
                Err(Error::Config(format!("nu: log scale must be > 0, got {c}")))
            }
            ExplorationRate::Power(p) if !(*p > 0.0 && *p < 1.0) => Err(Error::Config(format!(
                "nu: power must lie in (0,1), got {p}"
            ))),
            ExplorationRate::Custom(points) => {
                if points.is_empty() {
                    return Err(Error::Config("nu: custom table is empty".into()));
                }
                for w in points.windows(2) {
                    if w[1].0 <= w[0].0 {
                        return Err(Error::Config(
                            "nu: custom table rounds must be strictly increasing".into(),
                        ));
                    }
                    if w[1].1 < w[0].1 {
                        return Err(Error::Config(
                            "nu: custom table values must be non-decreasing".into(),
                        ));
                    }
                }
                if points.iter().any(|(_, v)| !v.is_finite() || *v < 0.0) {
                    return Err(Error::Config(
                        "nu: custom table values must be finite and >= 0".into(),
                    ));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// ν_n for round `n >= 1`.
    pub fn value(&self, n: u64) -> Result<f64> {
        if n == 0 {
            return Err(Error::Domain(
                "exploration rate is defined for n >= 1".into(),
            ));
        }
        Ok(self.value_unchecked(n))
    }

    #[inline]
    fn value_unchecked(&self, n: u64) -> f64 {
        match self {
            ExplorationRate::ScaledLog(c) => c * (n as f64).ln(),
            ExplorationRate::Power(p) => (n as f64).powf(*p),
            ExplorationRate::Custom(points) => {
                let i = points.partition_point(|&(m, _)| m <= n);
                if i == 0 {
                    return points[0].1;
                }
                if i == points.len() {
                    return points[i - 1].1;
                }
                let (n0, v0) = points[i - 1];
                let (n1, v1) = points[i];
                v0 + (v1 - v0) * (n - n0) as f64 / (n1 - n0) as f64
            }
        }
    }

    /// Text form accepted by [`FromStr`]: `log`, `log:2`, `pow:0.5`,
    /// `table:10=1;20=3`.
    pub fn describe(&self) -> String {
        match self {
            ExplorationRate::ScaledLog(c) if *c == 1.0 => "log".to_string(),
            ExplorationRate::ScaledLog(c) => format!("log:{c}"),
            ExplorationRate::Power(p) => format!("pow:{p}"),
            ExplorationRate::Custom(points) => {
                let cells: Vec<String> = points.iter().map(|(n, v)| format!("{n}={v}")).collect();
                format!("table:{}", cells.join(";"))
            }
        }
    }
}

impl fmt::Display for ExplorationRate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.describe())
    }
}

impl FromStr for ExplorationRate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = |what: &str| Error::Config(format!("nu: cannot parse {what} in '{s}'"));
        let number = |t: &str| t.trim().parse::<f64>().map_err(|_| bad("number"));
        let rate = match s.split_once(':') {
            None if s == "log" => ExplorationRate::ScaledLog(1.0),
            None if s == "sqrt" => ExplorationRate::Power(0.5),
            Some(("log", c)) => ExplorationRate::ScaledLog(number(c)?),
            Some(("pow", p)) => {
                // Accept fractions such as 2/3.
                let p = match p.split_once('/') {
                    Some((a, b)) => number(a)? / number(b)?,
                    None => number(p)?,
                };
                ExplorationRate::Power(p)
            }
            Some(("table", body)) => {
                let mut points = Vec::new();
                for cell in body.split(';').filter(|c| !c.trim().is_empty()) {
                    let (n, v) = cell.split_once('=').ok_or_else(|| bad("table cell"))?;
                    let n = n.trim().parse::<u64>().map_err(|_| bad("table round"))?;
                    points.push((n, number(v)?));
                }
                ExplorationRate::Custom(points)
            }
            _ => {
                return Err(Error::Config(format!(
                    "nu: expected log, log:<c>, pow:<p> or table:<n>=<v>;..., got '{s}'"
                )))
            }
        };
        rate.validate()?;
        Ok(rate)
    }
}

/// ν_n for the given rate.
pub fn exploration_value(rate: &ExplorationRate, n: u64) -> Result<f64> {
    rate.value(n)
}

/// How warm-up rounds are allocated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WarmupMode {
    /// Warm-up rounds are ordinary policy rounds inside the budget.
    #[default]
    Adaptive,
    /// Warm-up rounds inside the budget cycle through the arms in order.
    Cyclic,
    /// A cyclic warm-up of ⌈fraction · budget⌉ rounds runs before `budget`
    /// policy rounds, so the estimators see exactly `budget` samples.
    CyclicPrefix,
}

impl WarmupMode {
    pub fn name(self) -> &'static str {
        match self {
            WarmupMode::Adaptive => "adaptive",
            WarmupMode::Cyclic => "cyclic",
            WarmupMode::CyclicPrefix => "cyclic-prefix",
        }
    }
}

impl FromStr for WarmupMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            WarmupMode::Adaptive,
            WarmupMode::Cyclic,
            WarmupMode::CyclicPrefix,
        ]
        .into_iter()
        .find(|m| m.name() == s.trim())
        .ok_or_else(|| {
            Error::Config(format!(
                "warmup_mode: expected adaptive, cyclic or cyclic-prefix, got '{s}'"
            ))
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyConfig {
    pub rate: ExplorationRate,
    pub variance_aware: bool,
    /// Fraction of the budget discarded by the estimators, in [0, 1).
    pub warmup_fraction: f64,
    pub warmup_mode: WarmupMode,
    /// Keep the per-round `(arm, value)` log.
    pub record_trajectory: bool,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            rate: ExplorationRate::ScaledLog(1.0),
            variance_aware: true,
            warmup_fraction: 0.1,
            warmup_mode: WarmupMode::Adaptive,
            record_trajectory: false,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        self.rate.validate()?;
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!(
                "warmup_frac must lie in [0,1), got {}",
                self.warmup_fraction
            )));
        }
        Ok(())
    }
}

/// ⌈fraction · budget⌉, treating products within rounding noise of an integer
/// as that integer (0.1 · 30 is 3.0000000000000004 in binary floating point).
pub fn warmup_cutoff(fraction: f64, budget: u64) -> u64 {
    let x = fraction * budget as f64;
    let r = x.round();
    if (x - r).abs() <= 1e-9 * r.max(1.0) {
        r as u64
    } else {
        x.ceil() as u64
    }
}

/// Running count, sum and sum of squares.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Accumulator {
    pub count: u64,
    pub sum: f64,
    pub sumsq: f64,
}

impl Accumulator {
    #[inline]
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        self.sum += x;
        self.sumsq += x * x;
    }

    pub fn mean(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum / self.count as f64)
    }

    /// Plug-in (1/T) variance; tiny negative rounding residue is clamped to 0.
    pub fn plug_in_variance(&self) -> Option<f64> {
        self.mean().map(|m| {
            let t = self.count as f64;
            (self.sumsq / t - m * m).max(0.0)
        })
    }

    /// Mean, plug-in variance and 1/T as the policy index uses them. Products
    /// with 1/T stand in for divisions, so the mean may differ from
    /// [`Self::mean`] in the last bit.
    #[inline]
    fn moments(&self) -> (f64, f64, f64) {
        let inv = 1.0 / self.count as f64;
        let m = self.sum * inv;
        (m, (self.sumsq * inv - m * m).max(0.0), inv)
    }
}

#[derive(Debug, Clone)]
pub struct BanditState {
    config: PolicyConfig,
    budget: u64,
    total_rounds: u64,
    round: u64,
    warmup_cutoff: u64,
    full: Vec<Accumulator>,
    post: Vec<Accumulator>,
    // Policy caches derived from `full`, laid out flat for the index sweeps.
    mean: Vec<f64>,
    variance: Vec<f64>,
    inv_count: Vec<f64>,
    scratch: Vec<f64>,
    bounds: IndexBounds,
    trajectory: Option<Vec<(usize, f64)>>,
}

/// Index values of every arm at both ends of a window of rounds.
///
/// ν_n is non-decreasing and each index is non-decreasing in ν (floating-point
/// rounding is monotone too), so for any round inside the window an arm's index
/// lies between its `lo` and `hi` entries. Max-trees over both ends find the
/// arm with the largest `lo`; when that beats every other arm's `hi` it is the
/// argmax without evaluating anything.
#[derive(Debug, Clone, Default)]
struct IndexBounds {
    start: u64,
    end: u64,
    two_nu_lo: f64,
    two_nu_hi: f64,
    lo: Vec<f64>,
    hi: Vec<f64>,
    // Heap-ordered tree with `size` leaves; padding leaves hold -inf.
    size: usize,
    tree: Vec<Node>,
}

/// Largest `lo` with its arm, and largest `hi`, over a subtree.
#[derive(Debug, Clone, Copy)]
struct Node {
    lo: f64,
    arm: usize,
    hi: f64,
}

impl Node {
    const EMPTY: Node = Node {
        lo: f64::NEG_INFINITY,
        arm: usize::MAX,
        hi: f64::NEG_INFINITY,
    };

    // Ties in `lo` keep the left (lower) arm.
    #[inline(always)]
    fn join(l: Node, r: Node) -> Node {
        let (lo, arm) = if r.lo > l.lo {
            (r.lo, r.arm)
        } else {
            (l.lo, l.arm)
        };
        Node {
            lo,
            arm,
            hi: l.hi.max(r.hi),
        }
    }
}

impl IndexBounds {
    fn with_arms(arms: usize) -> Self {
        let size = arms.next_power_of_two();
        Self {
            lo: vec![f64::NEG_INFINITY; arms],
            hi: vec![f64::NEG_INFINITY; arms],
            size,
            tree: vec![Node::EMPTY; 2 * size],
            ..Self::default()
        }
    }

    #[inline]
    fn set(&mut self, arm: usize, lo: f64, hi: f64) {
        self.lo[arm] = lo;
        self.hi[arm] = hi;
        let mut i = self.size + arm;
        let mut node = Node { lo, arm, hi };
        self.tree[i] = node;
        while i > 1 {
            let sibling = self.tree[i ^ 1];
            node = if i & 1 == 0 {
                Node::join(node, sibling)
            } else {
                Node::join(sibling, node)
            };
            i /= 2;
            self.tree[i] = node;
        }
    }

    fn rebuild(&mut self) {
        for (arm, (&lo, &hi)) in self.lo.iter().zip(&self.hi).enumerate() {
            self.tree[self.size + arm] = Node { lo, arm, hi };
        }
        for i in (1..self.size).rev() {
            self.tree[i] = Node::join(self.tree[2 * i], self.tree[2 * i + 1]);
        }
    }

    /// The arm with the largest `lo` if it exceeds every other arm's `hi`.
    #[inline]
    fn clear_leader(&self) -> Option<usize> {
        let top = self.tree[1];
        let mut i = self.size + top.arm;
        let mut rival = f64::NEG_INFINITY;
        while i > 1 {
            rival = rival.max(self.tree[i ^ 1].hi);
            i /= 2;
        }
        (top.lo > rival).then_some(top.arm)
    }
}

impl PartialEq for BanditState {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.budget == other.budget
            && self.total_rounds == other.total_rounds
            && self.round == other.round
            && self.warmup_cutoff == other.warmup_cutoff
            && self.full == other.full
            && self.post == other.post
            && self.trajectory == other.trajectory
    }
}

impl BanditState {
    /// Empty state for `arms` systems and a budget of `budget` rounds.
    pub fn new(arms: usize, budget: u64, config: PolicyConfig) -> Result<Self> {
        if arms == 0 {
            return Err(Error::Config("at least one arm is required".into()));
        }
        config.validate()?;
        if budget < arms as u64 {
            return Err(Error::Budget { budget, arms });
        }
        let cutoff = warmup_cutoff(config.warmup_fraction, budget);
        let total_rounds = match config.warmup_mode {
            WarmupMode::CyclicPrefix => budget + cutoff,
            _ => budget,
        };
        let trajectory = config
            .record_trajectory
            .then(|| Vec::with_capacity(total_rounds as usize));
        Ok(Self {
            config,
            budget,
            total_rounds,
            round: 0,
            warmup_cutoff: cutoff,
            full: vec![Accumulator::default(); arms],
            post: vec![Accumulator::default(); arms],
            mean: vec![0.0; arms],
            variance: vec![0.0; arms],
            inv_count: vec![f64::INFINITY; arms],
            scratch: vec![0.0; arms],
            bounds: IndexBounds::with_arms(arms),
            trajectory,
        })
    }

    pub fn arms(&self) -> usize {
        self.full.len()
    }

    /// Rounds completed so far.
    pub fn round(&self) -> u64 {
        self.round
    }

    /// Adaptive budget `n` the state was created with.
    pub fn budget(&self) -> u64 {
        self.budget
    }

    /// Rounds a complete run performs: the budget, plus the warm-up prefix in
    /// [`WarmupMode::CyclicPrefix`].
    pub fn total_rounds(&self) -> u64 {
        self.total_rounds
    }

    /// Last warm-up round; samples from later rounds reach the post accumulators.
    pub fn warmup_cutoff(&self) -> u64 {
        self.warmup_cutoff
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    /// Accumulators over every round.
    pub fn full(&self) -> &[Accumulator] {
        &self.full
    }

    /// Accumulators over rounds after the warm-up cutoff.
    pub fn post(&self) -> &[Accumulator] {
        &self.post
    }

    /// Allocation counts T_k over every round.
    pub fn counts(&self) -> Vec<u64> {
        self.full.iter().map(|a| a.count).collect()
    }

    pub fn trajectory(&self) -> Option<&[(usize, f64)]> {
        self.trajectory.as_deref()
    }

    /// Records `value` from `arm` as the next round.
    pub fn observe(&mut self, arm: usize, value: f64) -> Result<()> {
        if arm >= self.arms() {
            return Err(Error::Domain(format!(
                "arm {arm} out of range for {} arms",
                self.arms()
            )));
        }
        self.record(arm, value);
        Ok(())
    }

    #[inline]
    fn record(&mut self, arm: usize, value: f64) {
        self.round += 1;
        let acc = &mut self.full[arm];
        acc.push(value);
        let (m, var, inv) = acc.moments();
        self.mean[arm] = m;
        self.variance[arm] = var;
        self.inv_count[arm] = inv;
        if self.bounds.end > 0 {
            let va = self.config.variance_aware;
            let lo = index_value(m, var, inv, self.bounds.two_nu_lo, va);
            let hi = index_value(m, var, inv, self.bounds.two_nu_hi, va);
            self.bounds.set(arm, lo, hi);
        }
        if self.round > self.warmup_cutoff {
            self.post[arm].push(value);
        }
        if let Some(log) = self.trajectory.as_mut() {
            log.push((arm, value));
        }
    }

    /// Index of `arm` when deciding round `n`.
    pub fn ucb_index(&self, arm: usize, n: u64) -> Result<f64> {
        if arm >= self.arms() {
            return Err(Error::Domain(format!("arm {arm} out of range")));
        }
        let acc = &self.full[arm];
        if acc.count == 0 {
            return Err(Error::Internal(format!(
                "arm {arm} has no samples when its index is requested"
            )));
        }
        let nu = self.config.rate.value(n)?;
        let (m, var, inv) = acc.moments();
        Ok(index_value(
            m,
            var,
            inv,
            2.0 * nu,
            self.config.variance_aware,
        ))
    }

    /// Arm with the largest index for round `n`; lowest index on ties.
    ///
    /// Evaluates every arm. The run loop uses an equivalent pruned search.
    pub fn select_arm(&mut self, n: u64) -> Result<usize> {
        if let Some(k) = self.full.iter().position(|a| a.count == 0) {
            return Err(Error::Internal(format!(
                "arm {k} has no samples; initialize before selecting"
            )));
        }
        if n == 0 {
            return Err(Error::Domain("rounds are numbered from 1".into()));
        }
        Ok(self.select_exhaustive(n))
    }

    fn select_exhaustive(&mut self, n: u64) -> usize {
        let two_nu = 2.0 * self.config.rate.value_unchecked(n);
        let va = self.config.variance_aware;
        let k = self.mean.len();
        let (mean, var, inv) = (&self.mean[..k], &self.variance[..k], &self.inv_count[..k]);
        let out = &mut self.scratch[..k];
        for i in 0..k {
            out[i] = index_value(mean[i], var[i], inv[i], two_nu, va);
        }
        let mut best = 0;
        let mut best_value = out[0];
        for (i, &v) in out.iter().enumerate().skip(1) {
            if v > best_value {
                best = i;
                best_value = v;
            }
        }
        best
    }

    fn refresh_bounds(&mut self, n: u64) {
        let end = n + (n / 64).max(32);
        let b = &mut self.bounds;
        b.start = n;
        b.end = end;
        b.two_nu_lo = 2.0 * self.config.rate.value_unchecked(n);
        b.two_nu_hi = 2.0 * self.config.rate.value_unchecked(end);
        let va = self.config.variance_aware;
        for i in 0..self.mean.len() {
            let (m, v, inv) = (self.mean[i], self.variance[i], self.inv_count[i]);
            b.lo[i] = index_value(m, v, inv, b.two_nu_lo, va);
            b.hi[i] = index_value(m, v, inv, b.two_nu_hi, va);
        }
        b.rebuild();
    }

    /// Same result as [`Self::select_exhaustive`], evaluating only arms that can
    /// still be the argmax.
    #[inline]
    fn select_pruned(&mut self, n: u64) -> usize {
        if n < self.bounds.start || n > self.bounds.end {
            self.refresh_bounds(n);
        }
        let b = &self.bounds;
        if let Some(arm) = b.clear_leader() {
            return arm;
        }
        let k = b.lo.len();
        let (hi, floor) = (&b.hi[..k], b.tree[1].lo);
        let two_nu = 2.0 * self.config.rate.value_unchecked(n);
        let va = self.config.variance_aware;
        let mut best = usize::MAX;
        let mut best_value = f64::NEG_INFINITY;
        for i in 0..k {
            if hi[i] < floor {
                continue;
            }
            let v = index_value(
                self.mean[i],
                self.variance[i],
                self.inv_count[i],
                two_nu,
                va,
            );
            if best == usize::MAX || v > best_value {
                best = i;
                best_value = v;
            }
        }
        best
    }

    /// Arm scheduled for the next round: the initialization sweep, the cyclic
    /// warm-up when configured, otherwise the index argmax.
    #[inline]
    fn next_arm(&mut self) -> usize {
        let n = self.round + 1;
        let k = self.arms() as u64;
        let cyclic = !matches!(self.config.warmup_mode, WarmupMode::Adaptive);
        if n <= k || (cyclic && n <= self.warmup_cutoff) {
            ((n - 1) % k) as usize
        } else {
            self.select_pruned(n)
        }
    }

    /// Samples every arm once.
    pub fn initialize(&mut self, specs: &[SystemSpec], rng: &mut RngStream) -> Result<()> {
        self.check_specs(specs)?;
        if self.round != 0 {
            return Err(Error::Internal("state is already initialized".into()));
        }
        for (k, spec) in specs.iter().enumerate() {
            let x = spec.sample(rng);
            self.record(k, x);
        }
        Ok(())
    }

    /// One round after initialization: pick the scheduled arm, sample, record.
    pub fn step(&mut self, specs: &[SystemSpec], rng: &mut RngStream) -> Result<(usize, f64)> {
        self.check_specs(specs)?;
        if self.round < self.arms() as u64 {
            return Err(Error::Internal(
                "step called before every arm was sampled once".into(),
            ));
        }
        Ok(self.step_unchecked(specs, rng))
    }

    #[inline]
    fn step_unchecked(&mut self, specs: &[SystemSpec], rng: &mut RngStream) -> (usize, f64) {
        let arm = self.next_arm();
        let x = specs[arm].sample(rng);
        self.record(arm, x);
        (arm, x)
    }

    fn check_specs(&self, specs: &[SystemSpec]) -> Result<()> {
        if specs.len() != self.arms() {
            return Err(Error::Config(format!(
                "state has {} arms but {} specs were given",
                self.arms(),
                specs.len()
            )));
        }
        Ok(())
    }
}

#[inline(always)]
fn index_value(mean: f64, var: f64, inv_count: f64, two_nu: f64, variance_aware: bool) -> f64 {
    let b = two_nu * inv_count;
    if variance_aware {
        mean + (b * (var + b.sqrt())).sqrt()
    } else {
        mean + b.sqrt()
    }
}

/// Runs the full policy: initialization, warm-up and adaptive rounds.
pub fn run(
    specs: &[SystemSpec],
    budget: u64,
    config: &PolicyConfig,
    rng: &mut RngStream,
) -> Result<BanditState> {
    let mut state = BanditState::new(specs.len(), budget, config.clone())?;
    state.initialize(specs, rng)?;
    while state.round < state.total_rounds {
        state.step_unchecked(specs, rng);
    }
    Ok(state)
}

/// Uniform random allocation for `budget` rounds, with no warm-up.
pub fn run_static(specs: &[SystemSpec], budget: u64, rng: &mut RngStream) -> Result<BanditState> {
    use rand::Rng;
    if budget == 0 {
        return Err(Error::Budget {
            budget,
            arms: specs.len(),
        });
    }
    let config = PolicyConfig {
        warmup_fraction: 0.0,
        ..PolicyConfig::default()
    };
    let mut state = BanditState::new(specs.len(), budget.max(specs.len() as u64), config)?;
    state.budget = budget;
    state.total_rounds = budget;
    let k = specs.len();
    for _ in 0..budget {
        let arm = rng.random_range(0..k);
        let x = specs[arm].sample(rng);
        state.record(arm, x);
    }
    Ok(state)
}
