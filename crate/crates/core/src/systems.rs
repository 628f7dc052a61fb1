//! Arm distributions.
//!
//! A [`SystemSpec`] is an immutable description of one stochastic system. It
//! knows how to draw a sample from an [`RngStream`] and, when a closed form
//! exists, its true mean (used only to score estimators, never by the policy).

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Exp1, StandardNormal};
use statrs::function::gamma::gamma;

use crate::error::{Error, Result};
use crate::riskmodel::{FactorRegion, PortfolioSpec};
pub use crate::rng::RngStream;

#[derive(Debug, Clone, PartialEq)]
pub enum SystemKind {
    Normal {
        mean: f64,
        stdev: f64,
    },
    Bernoulli {
        p: f64,
    },
    /// `shift + Exp(scale)`, where `scale` is the exponential mean.
    ShiftedExponential {
        shift: f64,
        scale: f64,
    },
    /// `shift + Erlang(shape, scale)`, a sum of `shape` exponentials with mean `scale`.
    ShiftedErlang {
        shift: f64,
        scale: f64,
        shape: u32,
    },
    ShiftedWeibull {
        shift: f64,
        scale: f64,
        shape: f64,
    },
    /// Discounted portfolio loss under one conditional factor scenario.
    ConditionalNormalScenario {
        regions: [FactorRegion; 4],
        portfolio: Arc<PortfolioSpec>,
    },
    /// Bootstrap arm: uniform draws with replacement from a sorted list.
    Empirical {
        values: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SystemSpec {
    kind: SystemKind,
    label: String,
    negated: bool,
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "{name} must be finite and > 0, got {v}"
        )))
    }
}

fn finite(name: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be finite, got {v}")))
    }
}

impl SystemSpec {
    pub fn new(kind: SystemKind) -> Result<Self> {
        match &kind {
            SystemKind::Normal { mean, stdev } => {
                finite("normal mean", *mean)?;
                positive("normal stdev", *stdev)?;
            }
            SystemKind::Bernoulli { p } => {
                if !(0.0..=1.0).contains(p) {
                    return Err(Error::Config(format!(
                        "bernoulli p must lie in [0,1], got {p}"
                    )));
                }
            }
            SystemKind::ShiftedExponential { shift, scale } => {
                finite("exponential shift", *shift)?;
                positive("exponential scale", *scale)?;
            }
            SystemKind::ShiftedErlang {
                shift,
                scale,
                shape,
            } => {
                finite("erlang shift", *shift)?;
                positive("erlang scale", *scale)?;
                if *shape == 0 {
                    return Err(Error::Config("erlang shape must be >= 1".into()));
                }
            }
            SystemKind::ShiftedWeibull {
                shift,
                scale,
                shape,
            } => {
                finite("weibull shift", *shift)?;
                positive("weibull scale", *scale)?;
                positive("weibull shape", *shape)?;
            }
            SystemKind::ConditionalNormalScenario { portfolio, .. } => portfolio.validate()?,
            SystemKind::Empirical { values } => {
                if values.is_empty() {
                    return Err(Error::Config("empirical value list is empty".into()));
                }
                if let Some(v) = values.iter().find(|v| !v.is_finite()) {
                    return Err(Error::Config(format!(
                        "empirical values must be finite, got {v}"
                    )));
                }
            }
        }
        let kind = match kind {
            SystemKind::Empirical { mut values } => {
                values.sort_by(f64::total_cmp);
                SystemKind::Empirical { values }
            }
            other => other,
        };
        Ok(Self {
            kind,
            label: String::new(),
            negated: false,
        })
    }

    pub fn normal(mean: f64, stdev: f64) -> Result<Self> {
        Self::new(SystemKind::Normal { mean, stdev })
    }

    pub fn bernoulli(p: f64) -> Result<Self> {
        Self::new(SystemKind::Bernoulli { p })
    }

    pub fn shifted_exponential(shift: f64, scale: f64) -> Result<Self> {
        Self::new(SystemKind::ShiftedExponential { shift, scale })
    }

    pub fn shifted_erlang(shift: f64, scale: f64, shape: u32) -> Result<Self> {
        Self::new(SystemKind::ShiftedErlang {
            shift,
            scale,
            shape,
        })
    }

    pub fn shifted_weibull(shift: f64, scale: f64, shape: f64) -> Result<Self> {
        Self::new(SystemKind::ShiftedWeibull {
            shift,
            scale,
            shape,
        })
    }

    pub fn empirical(values: Vec<f64>) -> Result<Self> {
        Self::new(SystemKind::Empirical { values })
    }

    /// A point mass at `value`.
    pub fn constant(value: f64) -> Result<Self> {
        Self::empirical(vec![value])
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn kind(&self) -> &SystemKind {
        &self.kind
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn is_negated(&self) -> bool {
        self.negated
    }

    /// The same system with its outputs multiplied by −1.
    pub fn negated(&self) -> Self {
        Self {
            kind: self.kind.clone(),
            label: self.label.clone(),
            negated: !self.negated,
        }
    }

    /// Draws one sample.
    #[inline]
    pub fn sample(&self, rng: &mut RngStream) -> f64 {
        let x = match &self.kind {
            SystemKind::Normal { mean, stdev } => {
                let z: f64 = rng.sample(StandardNormal);
                mean + stdev * z
            }
            SystemKind::Bernoulli { p } => {
                if rng.random_bool(*p) {
                    1.0
                } else {
                    0.0
                }
            }
            SystemKind::ShiftedExponential { shift, scale } => {
                let e: f64 = rng.sample(Exp1);
                shift + scale * e
            }
            SystemKind::ShiftedErlang {
                shift,
                scale,
                shape,
            } => {
                let total: f64 = (0..*shape).map(|_| rng.sample::<f64, _>(Exp1)).sum();
                shift + scale * total
            }
            SystemKind::ShiftedWeibull {
                shift,
                scale,
                shape,
            } => {
                let e: f64 = rng.sample(Exp1);
                shift + scale * e.powf(1.0 / shape)
            }
            SystemKind::ConditionalNormalScenario { regions, portfolio } => {
                portfolio.scenario_loss(regions, rng)
            }
            SystemKind::Empirical { values } => values[rng.random_range(0..values.len())],
        };
        if self.negated {
            -x
        } else {
            x
        }
    }

    /// Closed-form mean, or `None` when the mean has to be estimated.
    pub fn true_mean(&self) -> Option<f64> {
        let m = match &self.kind {
            SystemKind::Normal { mean, .. } => *mean,
            SystemKind::Bernoulli { p } => *p,
            SystemKind::ShiftedExponential { shift, scale } => shift + scale,
            SystemKind::ShiftedErlang {
                shift,
                scale,
                shape,
            } => shift + scale * f64::from(*shape),
            SystemKind::ShiftedWeibull {
                shift,
                scale,
                shape,
            } => shift + scale * gamma(1.0 + 1.0 / shape),
            SystemKind::ConditionalNormalScenario { .. } => return None,
            SystemKind::Empirical { values } => values.iter().sum::<f64>() / values.len() as f64,
        };
        Some(if self.negated { -m } else { m })
    }
}

/// Largest closed-form mean across `specs`, or `None` if any mean is unknown.
pub fn max_true_mean(specs: &[SystemSpec]) -> Option<f64> {
    specs
        .iter()
        .map(SystemSpec::true_mean)
        .try_fold(f64::NEG_INFINITY, |acc, m| m.map(|m| acc.max(m)))
}
