//! Standard-normal distribution helpers.

use statrs::function::erf::{erfc, erfc_inv};
use std::f64::consts::SQRT_2;

use crate::error::{Error, Result};

/// Φ(x).
pub fn cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

/// Φ⁻¹(p) for p in the open unit interval.
pub fn quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!(
            "normal quantile needs 0 < p < 1, got {p}"
        )));
    }
    Ok(quantile_unchecked(p))
}

/// Φ⁻¹(p) without the range check. Returns ±∞ at the endpoints.
#[inline]
pub(crate) fn quantile_unchecked(p: f64) -> f64 {
    -SQRT_2 * erfc_inv(2.0 * p)
}

/// Upper quantile z with P(Z > z) = tail, computed without forming `1 - tail`.
#[inline]
pub(crate) fn upper_quantile_unchecked(tail: f64) -> f64 {
    SQRT_2 * erfc_inv(2.0 * tail)
}

/// Two-sided critical value z_{1-β/2}.
pub fn two_sided_critical(beta: f64) -> Result<f64> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::Domain(format!("beta must lie in (0,1), got {beta}")));
    }
    Ok(upper_quantile_unchecked(beta / 2.0))
}

/// One-sided critical value z_{1-α}.
pub fn one_sided_critical(alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Domain(format!(
            "alpha must lie in (0,1), got {alpha}"
        )));
    }
    Ok(upper_quantile_unchecked(alpha))
}
