//! Command-line front end: configuration layering, subcommands and CSV output.
//!
//! Settings resolve in order preset defaults, then the TOML file given with
//! `--config`, then individual flags. The resolved configuration is printed to
//! stderr as TOML before any work starts, so it can be saved and replayed.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{self, CiScaling, EstimatorKind, EstimatorOptions, MaxWindow};
use crate::harness::{self, Experiment, SweepGrid, TrialSpec};
use crate::policy::{self, ExplorationRate, PolicyConfig, WarmupMode};
use crate::riskmodel::{self, PortfolioSpec};
use crate::rng::{stream_key, RngStream};
use crate::systems::SystemSpec;
use crate::testing::{FrReference, TestMethod};

pub const ESTIMATE_HEADER: &str =
    "estimator,n,nu,R,rel_bias_pct,rel_stdev_pct,rrmse_pct,coverage,se_bias,se_coverage";
pub const TEST_HEADER: &str = "method,reject_rate,se,mean_POB,se_POB,mean_ENS,se_ENS";
pub const SLOPE_HEADER: &str = "slope_of,estimator,nu,slope,points";
pub const BOUNDS_HEADER: &str = "bound,estimator,point,ci_low,ci_high,n_effective";

/// Named arm sets with their default settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// 20 normal arms with μ_k = σ_k = 1.5 + 0.5k, k = 1..20.
    Normals20,
    /// Bernoulli (0.31, 0.27, 0.28, 0.29): control arm 0 is best.
    TrialCase1,
    /// Bernoulli (0.3, 0.3, 0.3, 0.5): arm 3 beats the control.
    TrialCase2,
    /// The 256 option-portfolio scenarios.
    Risk,
}

impl Preset {
    pub const ALL: [Preset; 4] = [
        Preset::Normals20,
        Preset::TrialCase1,
        Preset::TrialCase2,
        Preset::Risk,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Normals20 => "normals20",
            Preset::TrialCase1 => "trial-case1",
            Preset::TrialCase2 => "trial-case2",
            Preset::Risk => "risk",
        }
    }

    fn trial_means(self) -> Option<[f64; 4]> {
        match self {
            Preset::TrialCase1 => Some([0.31, 0.27, 0.28, 0.29]),
            Preset::TrialCase2 => Some([0.3, 0.3, 0.3, 0.5]),
            _ => None,
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s.trim())
            .ok_or_else(|| {
                Error::Config(format!(
                    "preset: expected normals20, trial-case1, trial-case2 or risk, got '{s}'"
                ))
            })
    }
}

/// One arm in a config file, tagged by `kind`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ArmConfig {
    Normal { mean: f64, stdev: f64 },
    Bernoulli { p: f64 },
    ShiftedExponential { shift: f64, scale: f64 },
    ShiftedErlang { shift: f64, scale: f64, shape: u32 },
    ShiftedWeibull { shift: f64, scale: f64, shape: f64 },
    Empirical { values: Vec<f64> },
    Constant { value: f64 },
}

impl ArmConfig {
    pub fn build(&self) -> Result<SystemSpec> {
        match self {
            ArmConfig::Normal { mean, stdev } => SystemSpec::normal(*mean, *stdev),
            ArmConfig::Bernoulli { p } => SystemSpec::bernoulli(*p),
            ArmConfig::ShiftedExponential { shift, scale } => {
                SystemSpec::shifted_exponential(*shift, *scale)
            }
            ArmConfig::ShiftedErlang {
                shift,
                scale,
                shape,
            } => SystemSpec::shifted_erlang(*shift, *scale, *shape),
            ArmConfig::ShiftedWeibull {
                shift,
                scale,
                shape,
            } => SystemSpec::shifted_weibull(*shift, *scale, *shape),
            ArmConfig::Empirical { values } => SystemSpec::empirical(values.clone()),
            ArmConfig::Constant { value } => SystemSpec::constant(*value),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nu: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warmup_frac: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warmup_mode: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variance_aware: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reps: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub estimators: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mu0: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lsa_scaling: Option<CiScaling>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_window: Option<MaxWindow>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub control_arm: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub treatment_arms: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub best_arm: Option<usize>,
    /// `control` (two-sample against the control arm) or `known` (against μ₀).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fr_reference: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub budgets: Option<Vec<u64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rates: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pilot_n: Option<u64>,
}

/// Config file layout; every field is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub arms: Vec<ArmConfig>,
    #[serde(default)]
    pub policy: PolicySection,
    #[serde(default)]
    pub experiment: ExperimentSection,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub portfolio: Option<PortfolioSpec>,
}

impl FileConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config file: {}", e.message())))
    }
}

/// Fully resolved settings of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub preset: Option<Preset>,
    pub arms: Vec<ArmConfig>,
    pub portfolio: PortfolioSpec,
    pub n: u64,
    pub reps: u64,
    pub nu: ExplorationRate,
    pub warmup_frac: f64,
    pub warmup_mode: WarmupMode,
    pub variance_aware: bool,
    pub estimators: Vec<EstimatorKind>,
    pub beta: f64,
    pub alpha: f64,
    pub mu0: Option<f64>,
    pub seed: u64,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
    pub lsa_scaling: CiScaling,
    pub max_window: MaxWindow,
    pub reference: Option<f64>,
    pub control_arm: Option<usize>,
    pub treatment_arms: Option<Vec<usize>>,
    pub best_arm: Option<usize>,
    pub fr_reference: FrChoice,
    pub budgets: Vec<u64>,
    pub rates: Vec<ExplorationRate>,
    pub pilot_n: u64,
}

/// Config-level choice of the Bonferroni reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrChoice {
    Control,
    Known,
}

impl FrChoice {
    fn name(self) -> &'static str {
        match self {
            FrChoice::Control => "control",
            FrChoice::Known => "known",
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: None,
            arms: Vec::new(),
            portfolio: PortfolioSpec::default(),
            n: 10_000,
            reps: 1000,
            nu: ExplorationRate::ScaledLog(1.0),
            warmup_frac: 0.1,
            warmup_mode: WarmupMode::Adaptive,
            variance_aware: true,
            estimators: vec![EstimatorKind::Ga, EstimatorKind::Lsa],
            beta: 0.10,
            alpha: 0.05,
            mu0: None,
            seed: 1,
            threads: None,
            out: None,
            lsa_scaling: CiScaling::Rounds,
            max_window: MaxWindow::All,
            reference: None,
            control_arm: None,
            treatment_arms: None,
            best_arm: None,
            fr_reference: FrChoice::Control,
            budgets: Vec::new(),
            rates: Vec::new(),
            pilot_n: 10_000_000,
        }
    }
}

impl RunConfig {
    /// Defaults of a preset.
    pub fn preset(p: Preset) -> Self {
        let base = RunConfig {
            preset: Some(p),
            ..RunConfig::default()
        };
        match p {
            Preset::Normals20 => RunConfig {
                warmup_mode: WarmupMode::CyclicPrefix,
                estimators: vec![
                    EstimatorKind::Ga,
                    EstimatorKind::Lsa,
                    EstimatorKind::Ama,
                    EstimatorKind::Sma,
                ],
                ..base
            },
            Preset::TrialCase1 | Preset::TrialCase2 => {
                let mu = p.trial_means().unwrap_or_default();
                let best = (0..4).fold(0, |b, k| if mu[k] > mu[b] { k } else { b });
                RunConfig {
                    n: 423,
                    reps: 10_000,
                    warmup_mode: WarmupMode::Cyclic,
                    mu0: Some(mu[0]),
                    control_arm: Some(0),
                    treatment_arms: Some(vec![1, 2, 3]),
                    best_arm: Some(best),
                    lsa_scaling: CiScaling::ArmCount,
                    ..base
                }
            }
            Preset::Risk => RunConfig {
                reps: 2000,
                warmup_mode: WarmupMode::CyclicPrefix,
                beta: 0.05,
                ..base
            },
        }
    }

    /// Resolves preset defaults, then `file`, then `flags`.
    pub fn resolve(file: Option<&FileConfig>, flags: &FileConfig) -> Result<Self> {
        let preset_name = flags
            .preset
            .as_deref()
            .or(file.and_then(|f| f.preset.as_deref()));
        let mut cfg = match preset_name {
            Some(name) => RunConfig::preset(name.parse()?),
            None => RunConfig::default(),
        };
        if let Some(f) = file {
            cfg.apply(f)?;
        }
        cfg.apply(flags)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, layer: &FileConfig) -> Result<()> {
        if !layer.arms.is_empty() {
            self.arms = layer.arms.clone();
        }
        if let Some(p) = &layer.portfolio {
            self.portfolio = p.clone();
        }
        let pol = &layer.policy;
        if let Some(nu) = &pol.nu {
            self.nu = nu.parse()?;
        }
        set(&mut self.warmup_frac, pol.warmup_frac);
        if let Some(m) = &pol.warmup_mode {
            self.warmup_mode = m.parse()?;
        }
        set(&mut self.variance_aware, pol.variance_aware);

        let ex = &layer.experiment;
        set(&mut self.n, ex.n);
        set(&mut self.reps, ex.reps);
        if let Some(list) = &ex.estimators {
            self.estimators = list
                .iter()
                .map(|s| s.parse())
                .collect::<Result<Vec<EstimatorKind>>>()
                .map_err(|e| Error::Config(format!("estimators: {e}")))?;
        }
        set(&mut self.beta, ex.beta);
        set(&mut self.alpha, ex.alpha);
        if ex.mu0.is_some() {
            self.mu0 = ex.mu0;
        }
        set(&mut self.seed, ex.seed);
        if ex.threads.is_some() {
            self.threads = ex.threads;
        }
        if ex.out.is_some() {
            self.out = ex.out.clone();
        }
        set(&mut self.lsa_scaling, ex.lsa_scaling);
        set(&mut self.max_window, ex.max_window);
        if ex.reference.is_some() {
            self.reference = ex.reference;
        }
        if ex.control_arm.is_some() {
            self.control_arm = ex.control_arm;
        }
        if ex.treatment_arms.is_some() {
            self.treatment_arms = ex.treatment_arms.clone();
        }
        if ex.best_arm.is_some() {
            self.best_arm = ex.best_arm;
        }
        if let Some(r) = &ex.fr_reference {
            self.fr_reference = match r.trim() {
                "control" => FrChoice::Control,
                "known" => FrChoice::Known,
                other => {
                    return Err(Error::Config(format!(
                        "fr_reference: expected control or known, got '{other}'"
                    )))
                }
            };
        }
        if let Some(b) = &ex.budgets {
            self.budgets = b.clone();
        }
        if let Some(rates) = &ex.rates {
            self.rates = rates
                .iter()
                .map(|s| s.parse())
                .collect::<Result<Vec<ExplorationRate>>>()?;
        }
        set(&mut self.pilot_n, ex.pilot_n);
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.preset.is_some() && !self.arms.is_empty() {
            return Err(Error::Config(
                "arms: give either a preset or an explicit arm list, not both".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(Error::Config(format!(
                "warmup_frac must lie in [0,1), got {}",
                self.warmup_frac
            )));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::Config(format!(
                "beta must lie in (0,1), got {}",
                self.beta
            )));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!(
                "alpha must lie in (0,1), got {}",
                self.alpha
            )));
        }
        if self.n == 0 {
            return Err(Error::Config("n must be >= 1".into()));
        }
        if self.reps < 2 {
            return Err(Error::Config(format!(
                "reps must be >= 2, got {}",
                self.reps
            )));
        }
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be >= 1".into()));
        }
        self.nu.validate()?;
        self.portfolio.validate()?;
        Ok(())
    }

    /// The arms this configuration describes.
    pub fn specs(&self) -> Result<Vec<SystemSpec>> {
        let specs = match self.preset {
            Some(Preset::Normals20) => (1..=20)
                .map(|k| {
                    let m = 1.5 + 0.5 * k as f64;
                    SystemSpec::normal(m, m).map(|s| s.with_label(format!("N{k}")))
                })
                .collect::<Result<Vec<_>>>()?,
            Some(p @ (Preset::TrialCase1 | Preset::TrialCase2)) => p
                .trial_means()
                .unwrap_or_default()
                .iter()
                .enumerate()
                .map(|(k, &q)| SystemSpec::bernoulli(q).map(|s| s.with_label(format!("T{k}"))))
                .collect::<Result<Vec<_>>>()?,
            Some(Preset::Risk) => riskmodel::build_risk_systems(self.portfolio.clone())?,
            None => self
                .arms
                .iter()
                .enumerate()
                .map(|(k, a)| {
                    a.build()
                        .map_err(|e| Error::Config(format!("arms[{k}]: {e}")))
                })
                .collect::<Result<Vec<_>>>()?,
        };
        if specs.is_empty() {
            return Err(Error::Config(
                "arms: no arms configured (give arms or a preset)".into(),
            ));
        }
        Ok(specs)
    }

    pub fn policy_config(&self) -> PolicyConfig {
        PolicyConfig {
            rate: self.nu.clone(),
            variance_aware: self.variance_aware,
            warmup_fraction: self.warmup_frac,
            warmup_mode: self.warmup_mode,
            record_trajectory: false,
        }
    }

    pub fn estimator_options(&self) -> EstimatorOptions {
        EstimatorOptions {
            beta: self.beta,
            lsa_scaling: self.lsa_scaling,
            max_window: self.max_window,
        }
    }

    pub fn experiment(&self) -> Result<Experiment> {
        let mut exp = Experiment::new(self.specs()?, self.n);
        exp.policy = self.policy_config();
        exp.estimators = self.estimators.clone();
        exp.options = self.estimator_options();
        exp.reference = self.reference;
        Ok(exp)
    }

    /// Trial settings for `test`; needs μ₀ and, for the two-sample benchmark,
    /// a control arm.
    pub fn trial_spec(&self, arms: usize) -> Result<TrialSpec> {
        let mu0 = self
            .mu0
            .ok_or_else(|| Error::Config("mu0 is required for tests".into()))?;
        let control = self.control_arm;
        let treatment_arms = match (&self.treatment_arms, control) {
            (Some(t), _) => t.clone(),
            (None, Some(c)) => (0..arms).filter(|&k| k != c).collect(),
            (None, None) => (0..arms).collect(),
        };
        let fr_reference = match self.fr_reference {
            FrChoice::Known => FrReference::KnownMean,
            FrChoice::Control => FrReference::ControlArm(control.ok_or_else(|| {
                Error::Config(
                    "control_arm is required with fr_reference = control (or use known)".into(),
                )
            })?),
        };
        let best_arm = match self.best_arm {
            Some(b) => b,
            None => return Err(Error::Config("best_arm is required for tests".into())),
        };
        if best_arm >= arms {
            return Err(Error::Config(format!("best_arm {best_arm} out of range")));
        }
        if let Some(k) = treatment_arms.iter().find(|&&k| k >= arms) {
            return Err(Error::Config(format!(
                "treatment_arms: arm {k} out of range"
            )));
        }
        Ok(TrialSpec {
            mu0,
            alpha: self.alpha,
            treatment_arms,
            fr_reference,
            best_arm,
            methods: TestMethod::ALL.to_vec(),
        })
    }

    /// The resolved settings as a config file.
    pub fn to_file_config(&self) -> FileConfig {
        FileConfig {
            preset: self.preset.map(|p| p.name().to_string()),
            arms: self.arms.clone(),
            policy: PolicySection {
                nu: Some(self.nu.describe()),
                warmup_frac: Some(self.warmup_frac),
                warmup_mode: Some(self.warmup_mode.name().to_string()),
                variance_aware: Some(self.variance_aware),
            },
            experiment: ExperimentSection {
                n: Some(self.n),
                reps: Some(self.reps),
                estimators: Some(
                    self.estimators
                        .iter()
                        .map(|e| e.name().to_string())
                        .collect(),
                ),
                beta: Some(self.beta),
                alpha: Some(self.alpha),
                mu0: self.mu0,
                seed: Some(self.seed),
                threads: self.threads,
                out: self.out.clone(),
                lsa_scaling: Some(self.lsa_scaling),
                max_window: Some(self.max_window),
                reference: self.reference,
                control_arm: self.control_arm,
                treatment_arms: self.treatment_arms.clone(),
                best_arm: self.best_arm,
                fr_reference: Some(self.fr_reference.name().to_string()),
                budgets: (!self.budgets.is_empty()).then(|| self.budgets.clone()),
                rates: (!self.rates.is_empty())
                    .then(|| self.rates.iter().map(|r| r.describe()).collect()),
                pilot_n: Some(self.pilot_n),
            },
            portfolio: (self.preset == Some(Preset::Risk)).then(|| self.portfolio.clone()),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(&self.to_file_config())
            .map_err(|e| Error::Internal(format!("cannot render config: {e}")))
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

/// Parses a count, accepting scientific notation such as `1e6`.
pub fn parse_count(s: &str) -> std::result::Result<u64, String> {
    if let Ok(v) = s.trim().parse::<u64>() {
        return Ok(v);
    }
    match s.trim().parse::<f64>() {
        Ok(x) if x >= 0.0 && x.fract() == 0.0 && x <= u64::MAX as f64 => Ok(x as u64),
        _ => Err(format!("expected a non-negative integer, got '{s}'")),
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "maxmean",
    version,
    about = "Estimate the largest mean among stochastic systems with adaptive UCB sampling"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Replicate the pipeline and report error metrics per estimator
    Estimate(CommonArgs),
    /// Rejection rates and trial metrics of the single and Bonferroni tests
    Test(CommonArgs),
    /// Error metrics over a grid of budgets and exploration rates, with
    /// log-log MSE slopes
    Sweep(CommonArgs),
    /// One run estimating the largest and smallest means and their gap
    Bounds(CommonArgs),
    /// Build the 256 portfolio scenarios, then run estimate or bounds
    Risk {
        #[arg(long, value_enum, default_value_t = RiskAction::Estimate)]
        action: RiskAction,
        #[command(flatten)]
        common: CommonArgs,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RiskAction {
    Estimate,
    Bounds,
}

#[derive(Args, Debug, Clone, Default)]
pub struct CommonArgs {
    /// TOML config file; flags override its values
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// normals20, trial-case1, trial-case2 or risk
    #[arg(long)]
    pub preset: Option<String>,
    /// Sampling budget
    #[arg(long, value_parser = parse_count)]
    pub n: Option<u64>,
    /// Replications
    #[arg(long, value_parser = parse_count)]
    pub reps: Option<u64>,
    /// Exploration rate: log, log:<c>, pow:<p>, table:<n>=<v>;...
    #[arg(long)]
    pub nu: Option<String>,
    #[arg(long)]
    pub warmup_frac: Option<f64>,
    /// adaptive, cyclic or cyclic-prefix
    #[arg(long)]
    pub warmup_mode: Option<String>,
    #[arg(long)]
    pub variance_aware: Option<bool>,
    /// Comma-separated subset of GA,LSA,AMA,SMA,MAX
    #[arg(long, value_delimiter = ',')]
    pub estimators: Option<Vec<String>>,
    /// CI error; intervals have level 1 - beta
    #[arg(long)]
    pub beta: Option<f64>,
    /// Test level
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Known control mean
    #[arg(long, allow_negative_numbers = true)]
    pub mu0: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub threads: Option<usize>,
    /// Write CSV here instead of stdout
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
    /// rounds or arm_count
    #[arg(long)]
    pub lsa_scaling: Option<String>,
    /// all or post_warmup
    #[arg(long)]
    pub max_window: Option<String>,
    /// True largest mean, when it has no closed form
    #[arg(long, allow_negative_numbers = true)]
    pub reference: Option<f64>,
    #[arg(long)]
    pub control_arm: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub treatment_arms: Option<Vec<usize>>,
    #[arg(long)]
    pub best_arm: Option<usize>,
    /// control or known
    #[arg(long)]
    pub fr_reference: Option<String>,
    /// Sweep budgets, comma-separated
    #[arg(long, value_delimiter = ',', value_parser = parse_count)]
    pub budgets: Option<Vec<u64>>,
    /// Sweep exploration rates, comma-separated
    #[arg(long, value_delimiter = ',')]
    pub rates: Option<Vec<String>>,
    /// Budget of the pilot run that supplies the risk reference value
    #[arg(long, value_parser = parse_count)]
    pub pilot_n: Option<u64>,
}

fn parse_snake<T: for<'de> Deserialize<'de>>(field: &str, value: &str) -> Result<T> {
    T::deserialize(serde::de::value::StrDeserializer::<serde::de::value::Error>::new(value.trim()))
        .map_err(|e| Error::Config(format!("{field}: {e}")))
}

impl CommonArgs {
    /// The flags as a config layer.
    pub fn layer(&self) -> Result<FileConfig> {
        Ok(FileConfig {
            preset: self.preset.clone(),
            arms: Vec::new(),
            policy: PolicySection {
                nu: self.nu.clone(),
                warmup_frac: self.warmup_frac,
                warmup_mode: self.warmup_mode.clone(),
                variance_aware: self.variance_aware,
            },
            experiment: ExperimentSection {
                n: self.n,
                reps: self.reps,
                estimators: self.estimators.clone(),
                beta: self.beta,
                alpha: self.alpha,
                mu0: self.mu0,
                seed: self.seed,
                threads: self.threads,
                out: self.out.clone(),
                lsa_scaling: self
                    .lsa_scaling
                    .as_deref()
                    .map(|s| parse_snake("lsa_scaling", s))
                    .transpose()?,
                max_window: self
                    .max_window
                    .as_deref()
                    .map(|s| parse_snake("max_window", s))
                    .transpose()?,
                reference: self.reference,
                control_arm: self.control_arm,
                treatment_arms: self.treatment_arms.clone(),
                best_arm: self.best_arm,
                fr_reference: self.fr_reference.clone(),
                budgets: self.budgets.clone(),
                rates: self.rates.clone(),
                pilot_n: self.pilot_n,
            },
            portfolio: None,
        })
    }

    /// Reads the config file if any and resolves every layer.
    pub fn resolve(&self) -> Result<RunConfig> {
        let file = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| {
                    Error::Config(format!("cannot read config {}: {e}", path.display()))
                })?;
                Some(FileConfig::from_toml(&text)?)
            }
            None => None,
        };
        RunConfig::resolve(file.as_ref(), &self.layer()?)
    }
}

fn estimate_rows(out: &mut String, summary: &harness::ReplicationSummary) {
    for e in &summary.estimators {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            e.estimator,
            summary.budget,
            summary.rate,
            e.reps,
            e.rel_bias_pct,
            e.rel_stdev_pct,
            e.rrmse_pct,
            e.coverage,
            e.se_rel_bias_pct(),
            e.se_coverage
        );
    }
}

/// `estimate`: one CSV row per estimator. `se_bias` is in the units of
/// `rel_bias_pct`.
pub fn cmd_estimate(cfg: &RunConfig) -> Result<String> {
    let exp = cfg.experiment()?;
    let summary = harness::replicate(&exp, cfg.reps, cfg.seed, cfg.threads)?;
    let mut out = format!("{ESTIMATE_HEADER}\n");
    estimate_rows(&mut out, &summary);
    Ok(out)
}

/// `test`: one CSV row per test method.
pub fn cmd_test(cfg: &RunConfig) -> Result<String> {
    let mut exp = cfg.experiment()?;
    exp.estimators.clear();
    exp.trial = Some(cfg.trial_spec(exp.specs.len())?);
    let summary = harness::replicate(&exp, cfg.reps, cfg.seed, cfg.threads)?;
    let mut out = format!("{TEST_HEADER}\n");
    for t in &summary.tests {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            t.method, t.reject_rate, t.se_reject, t.mean_pob, t.se_pob, t.mean_ens, t.se_ens
        );
    }
    Ok(out)
}

/// `sweep`: estimate rows per grid cell; then, for every (estimator, nu)
/// series with at least three budgets, the log-log slope of MSE against n.
pub fn cmd_sweep(cfg: &RunConfig) -> Result<String> {
    let exp = cfg.experiment()?;
    let grid = SweepGrid {
        budgets: if cfg.budgets.is_empty() {
            vec![cfg.n]
        } else {
            cfg.budgets.clone()
        },
        rates: if cfg.rates.is_empty() {
            vec![cfg.nu.clone()]
        } else {
            cfg.rates.clone()
        },
    };
    let cells = harness::sweep(&exp, &grid, cfg.reps, cfg.seed, cfg.threads)?;
    let mut out = format!("{ESTIMATE_HEADER}\n");
    for c in &cells {
        estimate_rows(&mut out, &c.summary);
    }
    if grid.budgets.len() >= 3 {
        let _ = writeln!(out, "\n{SLOPE_HEADER}");
        for rate in &grid.rates {
            for &kind in &exp.estimators {
                let points: Vec<(f64, f64)> = cells
                    .iter()
                    .filter(|c| &c.rate == rate)
                    .filter_map(|c| c.summary.estimator(kind).map(|e| (c.budget as f64, e.mse)))
                    .collect();
                let slope = harness::convergence_slope(&points)?;
                let _ = writeln!(out, "mse,{kind},{rate},{slope},{}", points.len());
            }
        }
    }
    Ok(out)
}

/// `bounds`: one run per estimator for the largest mean and one on negated
/// outputs for the smallest, then the gap between the two.
pub fn cmd_bounds(cfg: &RunConfig) -> Result<String> {
    let specs = cfg.specs()?;
    let policy = cfg.policy_config();
    let opts = cfg.estimator_options();
    let mut out = format!("{BOUNDS_HEADER}\n");
    for &kind in &cfg.estimators {
        let lane = if kind.is_static() { 1 } else { 0 };
        let mut rng = RngStream::new(cfg.seed, stream_key(0, 0, lane));
        let state = if kind.is_static() {
            policy::run_static(&specs, cfg.n, &mut rng)?
        } else {
            policy::run(&specs, cfg.n, &policy, &mut rng)?
        };
        let hi = estimators::report(&state, kind, &opts)?;
        let mut rng = RngStream::new(cfg.seed, stream_key(1, 0, lane));
        let lo =
            estimators::min_estimate_via_negation(&specs, cfg.n, &policy, kind, &opts, &mut rng)?;
        for (name, r) in [("max", &hi), ("min", &lo)] {
            let _ = writeln!(
                out,
                "{name},{kind},{},{},{},{}",
                r.point, r.ci_low, r.ci_high, r.n_effective
            );
        }
        let _ = writeln!(out, "gap,{kind},{},,,", hi.point - lo.point);
    }
    Ok(out)
}

/// `risk`: the 256 scenarios with a pilot-run reference when none is given.
pub fn cmd_risk(cfg: &RunConfig, action: RiskAction, log: &mut dyn Write) -> Result<String> {
    let mut cfg = cfg.clone();
    match action {
        RiskAction::Bounds => cmd_bounds(&cfg),
        RiskAction::Estimate => {
            if cfg.reference.is_none() {
                let pilot = harness::pilot_estimate(
                    &cfg.specs()?,
                    cfg.pilot_n,
                    &cfg.policy_config(),
                    EstimatorKind::Lsa,
                    &cfg.estimator_options(),
                    cfg.seed,
                )?;
                let _ = writeln!(
                    log,
                    "# pilot reference: LSA at n = {} gives {} (CI {} to {})",
                    cfg.pilot_n, pilot.point, pilot.ci_low, pilot.ci_high
                );
                cfg.reference = Some(pilot.point);
            }
            cmd_estimate(&cfg)
        }
    }
}

/// Exit status for an error: 2 for configuration problems, 3 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        _ => 3,
    }
}

/// Runs a parsed command line; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let stderr = &mut std::io::stderr();
    let (common, action) = match &cli.command {
        Command::Estimate(c) | Command::Test(c) | Command::Sweep(c) | Command::Bounds(c) => {
            (c.clone(), None)
        }
        Command::Risk { action, common } => {
            let mut c = common.clone();
            c.preset = Some(Preset::Risk.name().to_string());
            (c, Some(*action))
        }
    };
    let cfg = match common.resolve() {
        Ok(c) => c,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            return exit_code(&e);
        }
    };
    match cfg.to_toml() {
        Ok(text) => {
            let _ = writeln!(stderr, "# resolved configuration\n{text}");
        }
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            return exit_code(&e);
        }
    }
    let result = match (&cli.command, action) {
        (Command::Estimate(_), _) => cmd_estimate(&cfg),
        (Command::Test(_), _) => cmd_test(&cfg),
        (Command::Sweep(_), _) => cmd_sweep(&cfg),
        (Command::Bounds(_), _) => cmd_bounds(&cfg),
        (Command::Risk { .. }, Some(a)) => cmd_risk(&cfg, a, stderr),
        (Command::Risk { .. }, None) => Err(Error::Internal("risk action missing".into())),
    };
    let csv = match result {
        Ok(csv) => csv,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            return exit_code(&e);
        }
    };
    let written = match &cfg.out {
        Some(path) => fs::write(path, csv.as_bytes())
            .map_err(|e| format!("cannot write {}: {e}", path.display())),
        None => std::io::stdout()
            .write_all(csv.as_bytes())
            .map_err(|e| format!("cannot write output: {e}")),
    };
    match written {
        Ok(()) => 0,
        Err(msg) => {
            let _ = writeln!(stderr, "error: {msg}");
            3
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flags(f: impl FnOnce(&mut CommonArgs)) -> CommonArgs {
        let mut a = CommonArgs::default();
        f(&mut a);
        a
    }

    #[test]
    fn normals20_preset() {
        let cfg = flags(|a| {
            a.preset = Some("normals20".into());
            a.n = Some(10_000);
        })
        .resolve()
        .unwrap();
        let specs = cfg.specs().unwrap();
        assert_eq!(specs.len(), 20);
        assert_eq!(crate::systems::max_true_mean(&specs), Some(11.5));
        assert_eq!(cfg.warmup_mode, WarmupMode::CyclicPrefix);
    }

    #[test]
    fn trial_presets() {
        for (name, best, mu0) in [("trial-case1", 0, 0.31), ("trial-case2", 3, 0.3)] {
            let cfg = flags(|a| a.preset = Some(name.into())).resolve().unwrap();
            assert_eq!(cfg.n, 423);
            let t = cfg.trial_spec(4).unwrap();
            assert_eq!(t.best_arm, best);
            assert_eq!(t.mu0, mu0);
            assert_eq!(t.treatment_arms, vec![1, 2, 3]);
            assert_eq!(t.fr_reference, FrReference::ControlArm(0));
        }
    }

    #[test]
    fn range_checks() {
        let e = flags(|a| {
            a.preset = Some("normals20".into());
            a.warmup_frac = Some(1.2);
        })
        .resolve()
        .unwrap_err();
        assert!(matches!(&e, Error::Config(m) if m.contains("warmup_frac")));
        assert_eq!(exit_code(&e), 2);
        for f in [
            |a: &mut CommonArgs| a.beta = Some(0.0),
            |a: &mut CommonArgs| a.alpha = Some(1.0),
            |a: &mut CommonArgs| a.reps = Some(1),
            |a: &mut CommonArgs| a.preset = Some("normals".into()),
            |a: &mut CommonArgs| a.nu = Some("pow:3".into()),
            |a: &mut CommonArgs| a.estimators = Some(vec!["GA".into(), "XX".into()]),
            |a: &mut CommonArgs| a.lsa_scaling = Some("both".into()),
        ] {
            let mut a = CommonArgs {
                preset: Some("normals20".into()),
                ..CommonArgs::default()
            };
            f(&mut a);
            assert!(matches!(a.resolve(), Err(Error::Config(_))), "{a:?}");
        }
    }

    #[test]
    fn nu_parsing() {
        let cfg = flags(|a| {
            a.preset = Some("normals20".into());
            a.nu = Some("pow:0.5".into());
        })
        .resolve()
        .unwrap();
        assert_eq!(cfg.nu, ExplorationRate::Power(0.5));
    }

    #[test]
    fn file_then_flags() {
        let text = r#"
            [[arms]]
            kind = "normal"
            mean = 1.0
            stdev = 2.0

            [[arms]]
            kind = "bernoulli"
            p = 0.4

            [policy]
            nu = "log:0.5"
            warmup_frac = 0.2

            [experiment]
            n = 500
            reps = 30
            estimators = ["GA", "lsa"]
            lsa_scaling = "arm_count"
        "#;
        let file = FileConfig::from_toml(text).unwrap();
        let layer = flags(|a| a.n = Some(800)).layer().unwrap();
        let cfg = RunConfig::resolve(Some(&file), &layer).unwrap();
        assert_eq!(cfg.n, 800);
        assert_eq!(cfg.reps, 30);
        assert_eq!(cfg.warmup_frac, 0.2);
        assert_eq!(cfg.nu, ExplorationRate::ScaledLog(0.5));
        assert_eq!(cfg.lsa_scaling, CiScaling::ArmCount);
        assert_eq!(cfg.specs().unwrap().len(), 2);
        assert_eq!(cfg.estimators, vec![EstimatorKind::Ga, EstimatorKind::Lsa]);
    }

    #[test]
    fn schema_errors_name_the_field() {
        let e = FileConfig::from_toml("[experiment]\nreplications = 3\n").unwrap_err();
        assert!(
            matches!(&e, Error::Config(m) if m.contains("replications")),
            "{e}"
        );
        let e = FileConfig::from_toml("[policy]\nwarmup_frac = \"x\"\n").unwrap_err();
        assert!(matches!(&e, Error::Config(_)));
        let text = "preset = \"normals20\"\n[[arms]]\nkind = \"constant\"\nvalue = 1.0\n";
        let file = FileConfig::from_toml(text).unwrap();
        assert!(RunConfig::resolve(Some(&file), &FileConfig::default()).is_err());
        let e = RunConfig::resolve(None, &FileConfig::default())
            .unwrap()
            .specs()
            .unwrap_err();
        assert!(matches!(&e, Error::Config(m) if m.contains("arms")));
    }

    #[test]
    fn resolved_config_round_trips() {
        for p in Preset::ALL {
            let cfg = flags(|a| {
                a.preset = Some(p.name().into());
                a.rates = Some(vec!["log".into(), "pow:0.5".into()]);
                a.budgets = Some(vec![100, 1000]);
            })
            .resolve()
            .unwrap();
            let text = cfg.to_toml().unwrap();
            let back = RunConfig::resolve(
                Some(&FileConfig::from_toml(&text).unwrap()),
                &FileConfig::default(),
            )
            .unwrap();
            assert_eq!(back, cfg, "{text}");
        }
    }

    #[test]
    fn counts_accept_scientific_notation() {
        assert_eq!(parse_count("1e6"), Ok(1_000_000));
        assert_eq!(parse_count("423"), Ok(423));
        assert!(parse_count("1.5").is_err());
        assert!(parse_count("-3").is_err());
    }

    fn point_masses() -> RunConfig {
        RunConfig {
            arms: [1.0, 2.0, 3.0]
                .iter()
                .map(|&value| ArmConfig::Constant { value })
                .collect(),
            n: 90,
            reps: 8,
            estimators: vec![EstimatorKind::Lsa, EstimatorKind::Ama],
            ..RunConfig::default()
        }
    }

    #[test]
    fn estimate_rows_for_point_masses() {
        let csv = cmd_estimate(&point_masses()).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], ESTIMATE_HEADER);
        assert_eq!(lines.len(), 3);
        for row in &lines[1..] {
            let f: Vec<&str> = row.split(',').collect();
            assert_eq!(f.len(), 10);
            assert_eq!(&f[1..4], &["90", "log", "8"]);
            assert_eq!(&f[4..], &["0", "0", "0", "1", "0", "0"]);
        }
    }

    #[test]
    fn bounds_gap_for_point_masses() {
        let csv = cmd_bounds(&point_masses()).unwrap();
        let gap: Vec<&str> = csv.lines().filter(|l| l.starts_with("gap,LSA")).collect();
        assert_eq!(gap, vec!["gap,LSA,2,,,"]);
        assert!(csv.contains("max,LSA,3,3,3,"));
        assert!(csv.contains("min,LSA,1,1,1,"));
    }

    #[test]
    fn sweep_one_cell_matches_estimate() {
        let cfg = point_masses();
        assert_eq!(cmd_sweep(&cfg).unwrap(), cmd_estimate(&cfg).unwrap());
    }

    #[test]
    fn sweep_slopes() {
        let cfg = RunConfig {
            arms: vec![
                ArmConfig::Normal {
                    mean: 1.0,
                    stdev: 1.0,
                },
                ArmConfig::Normal {
                    mean: 0.0,
                    stdev: 1.0,
                },
            ],
            budgets: vec![200, 400, 800],
            rates: vec![ExplorationRate::ScaledLog(1.0)],
            reps: 50,
            ..RunConfig::default()
        };
        let csv = cmd_sweep(&cfg).unwrap();
        assert!(csv.contains(SLOPE_HEADER));
        assert_eq!(csv.lines().filter(|l| l.starts_with("mse,")).count(), 2);
    }

    #[test]
    fn test_rows() {
        let mut cfg = flags(|a| {
            a.preset = Some("trial-case2".into());
            a.reps = Some(50);
        })
        .resolve()
        .unwrap();
        let csv = cmd_test(&cfg).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], TEST_HEADER);
        assert!(lines[1].starts_with("SingleGA,"));
        assert!(lines[2].starts_with("SingleLSA,"));
        assert!(lines[3].starts_with("BonferroniFR,"));
        cfg.mu0 = None;
        assert!(matches!(cmd_test(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn cli_parses() {
        let cli = Cli::try_parse_from([
            "maxmean",
            "sweep",
            "--preset",
            "normals20",
            "--budgets",
            "1e4,1e5",
            "--rates",
            "log,pow:2/3",
            "--mu0",
            "-0.5",
            "--variance-aware",
            "false",
        ])
        .unwrap();
        let Command::Sweep(args) = cli.command else {
            panic!("wrong subcommand")
        };
        let cfg = args.resolve().unwrap();
        assert_eq!(cfg.budgets, vec![10_000, 100_000]);
        assert_eq!(cfg.rates[1], ExplorationRate::Power(2.0 / 3.0));
        assert_eq!(cfg.mu0, Some(-0.5));
        assert!(!cfg.variance_aware);
        assert!(Cli::try_parse_from(["maxmean", "risk", "--action", "bounds"]).is_ok());
    }
}
