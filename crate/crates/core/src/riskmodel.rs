//! Coherent-risk-measure example.
//!
//! Four independent standard-normal factors drive three GBM assets: `Z0` is the
//! market factor and `Z1..Z3` are idiosyncratic. Each factor is drawn from one of
//! four regions, giving 4⁴ = 256 scenario distributions. Each scenario is one
//! arm whose output is the discounted loss `-Y / r` of a book of European options
//! expiring at the horizon.

use std::sync::{Arc, OnceLock};

use rand::Rng;
use rand_distr::Open01;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::normal::{quantile_unchecked, upper_quantile_unchecked};
use crate::rng::RngStream;
use crate::systems::{SystemKind, SystemSpec};

/// Probability mass of each tail region.
pub fn tail_probability() -> f64 {
    1.0 / 20f64.sqrt()
}

/// Φ⁻¹(1 − 1/√20), the boundary of the upper tail region.
pub fn tail_threshold() -> f64 {
    static THRESHOLD: OnceLock<f64> = OnceLock::new();
    *THRESHOLD.get_or_init(|| upper_quantile_unchecked(tail_probability()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorRegion {
    UpperTail,
    LowerTail,
    Middle,
    Unrestricted,
}

impl FactorRegion {
    pub const ALL: [FactorRegion; 4] = [
        FactorRegion::UpperTail,
        FactorRegion::LowerTail,
        FactorRegion::Middle,
        FactorRegion::Unrestricted,
    ];

    pub fn contains(self, z: f64) -> bool {
        let t = tail_threshold();
        match self {
            FactorRegion::UpperTail => z > t,
            FactorRegion::LowerTail => z < -t,
            FactorRegion::Middle => (-t..=t).contains(&z),
            FactorRegion::Unrestricted => true,
        }
    }

    fn short_name(self) -> &'static str {
        match self {
            FactorRegion::UpperTail => "U",
            FactorRegion::LowerTail => "L",
            FactorRegion::Middle => "M",
            FactorRegion::Unrestricted => "A",
        }
    }
}

/// A standard-normal draw conditioned on `region`.
///
/// A uniform is mapped into the region's probability interval and pushed
/// through Φ⁻¹. Tails are handled through their own small probabilities so no
/// precision is lost near 1.
pub fn sample_conditional_normal(region: FactorRegion, rng: &mut RngStream) -> f64 {
    let p = tail_probability();
    let u: f64 = rng.sample(Open01);
    match region {
        FactorRegion::UpperTail => upper_quantile_unchecked(u * p),
        FactorRegion::LowerTail => -upper_quantile_unchecked(u * p),
        FactorRegion::Middle => {
            let t = tail_threshold();
            quantile_unchecked(p + u * (1.0 - 2.0 * p)).clamp(-t, t)
        }
        FactorRegion::Unrestricted => quantile_unchecked(u),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Asset {
    /// Initial price.
    pub s0: f64,
    /// Annualized volatility as a fraction.
    pub volatility: f64,
    /// Loading on the market factor, in [-1, 1].
    pub loading: f64,
    pub drift: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptionType {
    Call,
    Put,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptionPosition {
    /// Index into the three assets (0-based).
    pub asset: usize,
    #[serde(rename = "type")]
    pub option_type: OptionType,
    pub strike: f64,
    /// Signed amount; negative means short.
    pub quantity: f64,
}

impl OptionPosition {
    fn payoff(&self, price: f64) -> f64 {
        let intrinsic = match self.option_type {
            OptionType::Call => (price - self.strike).max(0.0),
            OptionType::Put => (self.strike - price).max(0.0),
        };
        self.quantity * intrinsic
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PortfolioSpec {
    pub assets: [Asset; 3],
    /// Horizon in years.
    pub horizon: f64,
    /// Constant discount divisor `r` in `X = -Y / r`.
    pub discount: f64,
    pub options: Vec<OptionPosition>,
}

impl Default for PortfolioSpec {
    /// Three assets at 100 with weekly horizon, and a long straddle at the money
    /// on each asset (quantity +1 for the call and the put). Losses are minus
    /// the straddle payoffs, so they are never positive and the worst scenario
    /// is the quiet market with every factor in its middle region.
    fn default() -> Self {
        let asset = |volatility, loading| Asset {
            s0: 100.0,
            volatility,
            loading,
            drift: 0.0,
        };
        let options = (0..3)
            .flat_map(|asset| {
                [OptionType::Call, OptionType::Put].map(|option_type| OptionPosition {
                    asset,
                    option_type,
                    strike: 100.0,
                    quantity: 1.0,
                })
            })
            .collect();
        Self {
            assets: [
                asset(0.398, 0.617),
                asset(0.193, 0.368),
                asset(0.270, 0.785),
            ],
            horizon: 1.0 / 52.0,
            discount: 1.0,
            options,
        }
    }
}

impl PortfolioSpec {
    pub fn validate(&self) -> Result<()> {
        for (j, a) in self.assets.iter().enumerate() {
            if !(a.s0.is_finite() && a.s0 > 0.0) {
                return Err(Error::Config(format!("assets[{j}].s0 must be > 0")));
            }
            if !(a.volatility.is_finite() && a.volatility > 0.0) {
                return Err(Error::Config(format!("assets[{j}].volatility must be > 0")));
            }
            if !(-1.0..=1.0).contains(&a.loading) {
                return Err(Error::Config(format!(
                    "assets[{j}].loading must lie in [-1,1]"
                )));
            }
            if !a.drift.is_finite() {
                return Err(Error::Config(format!("assets[{j}].drift must be finite")));
            }
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(Error::Config("horizon must be > 0".into()));
        }
        if !(self.discount.is_finite() && self.discount > 0.0) {
            return Err(Error::Config("discount must be > 0".into()));
        }
        for (i, o) in self.options.iter().enumerate() {
            if o.asset >= 3 {
                return Err(Error::Config(format!(
                    "options[{i}].asset must be 0, 1 or 2, got {}",
                    o.asset
                )));
            }
            if !o.strike.is_finite() || !o.quantity.is_finite() {
                return Err(Error::Config(format!(
                    "options[{i}] strike and quantity must be finite"
                )));
            }
        }
        Ok(())
    }

    /// Terminal prices for the factor draw `z = (Z0, Z1, Z2, Z3)`.
    pub fn terminal_prices(&self, z: [f64; 4]) -> [f64; 3] {
        let t = self.horizon;
        std::array::from_fn(|j| {
            let a = &self.assets[j];
            let w = a.loading * z[0] + (1.0 - a.loading * a.loading).sqrt() * z[j + 1];
            a.s0 * ((a.drift - 0.5 * a.volatility * a.volatility) * t + a.volatility * w * t.sqrt())
                .exp()
        })
    }

    /// Discounted loss `-Y / r` for terminal prices.
    pub fn loss(&self, prices: [f64; 3]) -> f64 {
        let value: f64 = self.options.iter().map(|o| o.payoff(prices[o.asset])).sum();
        -value / self.discount
    }

    /// One loss draw under a scenario.
    pub fn scenario_loss(&self, regions: &[FactorRegion; 4], rng: &mut RngStream) -> f64 {
        let z = regions.map(|r| sample_conditional_normal(r, rng));
        self.loss(self.terminal_prices(z))
    }
}

/// One arm per element of the 4-region × 4-factor product, in lexicographic
/// order over (Z0, Z1, Z2, Z3) with regions ordered as [`FactorRegion::ALL`].
pub fn build_risk_systems(portfolio: PortfolioSpec) -> Result<Vec<SystemSpec>> {
    portfolio.validate()?;
    let portfolio = Arc::new(portfolio);
    let mut out = Vec::with_capacity(256);
    for &r0 in &FactorRegion::ALL {
        for &r1 in &FactorRegion::ALL {
            for &r2 in &FactorRegion::ALL {
                for &r3 in &FactorRegion::ALL {
                    let regions = [r0, r1, r2, r3];
                    let label: String = regions.iter().map(|r| r.short_name()).collect();
                    let spec = SystemSpec::new(SystemKind::ConditionalNormalScenario {
                        regions,
                        portfolio: Arc::clone(&portfolio),
                    })?
                    .with_label(label);
                    out.push(spec);
                }
            }
        }
    }
    Ok(out)
}
