//! Data-driven bandwidth rules.
//!
//! Bandwidths are squared slice half-widths. Both rules approximate the
//! predictor law by an isotropic normal with variance `tr(Sigma_x) / p`, so
//! `X_i - X_j` has variance `2 tr(Sigma_x) / p` per coordinate.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{CveError, Result};
use crate::special::gamma_p;

/// Multiplier of the rule-of-thumb bandwidth (squared in the formula).
pub const ROT_CONSTANT: f64 = 1.2;

const QUANTILE_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BandwidthRule {
    Fixed { h: f64 },
    /// Target expected number of observations per slice.
    Nobs { nobs: f64 },
    RuleOfThumb,
}

impl Default for BandwidthRule {
    fn default() -> Self {
        BandwidthRule::RuleOfThumb
    }
}

impl BandwidthRule {
    /// Resolves the rule for predictors `x` and frame dimension `q`.
    pub fn resolve(&self, x: &DMatrix<f64>, q: usize) -> Result<f64> {
        match *self {
            BandwidthRule::Fixed { h } => {
                if !(h > 0.0) || !h.is_finite() {
                    return Err(CveError::InvalidArgument(format!("fixed bandwidth must be positive, got {h}")));
                }
                Ok(h)
            }
            BandwidthRule::Nobs { nobs } => bandwidth_nobs(x, q, nobs),
            BandwidthRule::RuleOfThumb => bandwidth_rot(x, q),
        }
    }
}

impl fmt::Display for BandwidthRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BandwidthRule::Fixed { h } => write!(f, "fixed={h}"),
            BandwidthRule::Nobs { nobs } => write!(f, "nobs={nobs}"),
            BandwidthRule::RuleOfThumb => write!(f, "rot"),
        }
    }
}

impl FromStr for BandwidthRule {
    type Err = CveError;

    /// Parses `rot`, `nobs=<x>` or `fixed=<h>`.
    fn from_str(s: &str) -> Result<Self> {
        let parse_value = |v: &str| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| CveError::InvalidArgument(format!("bad bandwidth value in {s:?}")))
        };
        match s.trim().split_once('=') {
            None if s.trim() == "rot" => Ok(BandwidthRule::RuleOfThumb),
            Some(("nobs", v)) => Ok(BandwidthRule::Nobs { nobs: parse_value(v)? }),
            Some(("fixed", v)) => Ok(BandwidthRule::Fixed { h: parse_value(v)? }),
            _ => Err(CveError::InvalidArgument(format!(
                "bandwidth must be rot, nobs=<x> or fixed=<h>, got {s:?}"
            ))),
        }
    }
}

/// `tr(Sigma_hat) / p` with the `1/n` covariance normalization: the scale
/// `s` minimizing `|Sigma_hat - s I|_F`.
pub fn isotropic_variance(x: &DMatrix<f64>) -> Result<f64> {
    let (n, p) = x.shape();
    if n < 2 || p == 0 {
        return Err(CveError::InvalidArgument(format!("need n >= 2 and p >= 1, got {n}x{p}")));
    }
    let trace: f64 = x
        .column_iter()
        .map(|col| {
            let mean = col.mean();
            col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64
        })
        .sum();
    if !(trace > 0.0) || !trace.is_finite() {
        return Err(CveError::DegenerateData("predictors have zero total variance".into()));
    }
    Ok(trace / p as f64)
}

/// Chi-square CDF with `df` degrees of freedom.
pub fn chi2_cdf(df: usize, x: f64) -> f64 {
    gamma_p(df as f64 / 2.0, x / 2.0)
}

/// Inverse chi-square CDF by bisection on the regularized incomplete gamma.
pub fn chi2_quantile(df: usize, prob: f64) -> Result<f64> {
    if df == 0 {
        return Err(CveError::InvalidArgument("chi-square needs df >= 1".into()));
    }
    if !(prob > 0.0 && prob < 1.0) {
        return Err(CveError::InvalidArgument(format!("probability must lie in (0, 1), got {prob}")));
    }
    let mut lo = 0.0;
    let mut hi = df as f64 + 10.0;
    while chi2_cdf(df, hi) < prob {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..2000 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let cdf = chi2_cdf(df, mid);
        if (cdf - prob).abs() <= QUANTILE_TOL * 1e-3 {
            return Ok(mid);
        }
        if cdf < prob {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

fn check_complement(p: usize, q: usize) -> Result<()> {
    if q >= p {
        return Err(CveError::InvalidDimension(format!("bandwidth rules need q < p, got p = {p}, q = {q}")));
    }
    Ok(())
}

/// Bandwidth giving `nobs` expected points per slice:
/// `chi2_{p-q}^{-1}((nobs - 1) / (n - 1)) * 2 tr(Sigma_hat) / p`.
pub fn bandwidth_nobs(x: &DMatrix<f64>, q: usize, nobs: f64) -> Result<f64> {
    let (n, p) = x.shape();
    check_complement(p, q)?;
    if !(nobs > 1.0 && nobs < n as f64) {
        return Err(CveError::InvalidArgument(format!(
            "nObs must satisfy 1 < nObs < n = {n}, got {nobs}"
        )));
    }
    let quantile = chi2_quantile(p - q, (nobs - 1.0) / (n as f64 - 1.0))?;
    Ok(quantile * 2.0 * isotropic_variance(x)?)
}

/// Rule-of-thumb bandwidth `1.2^2 * 2 tr(Sigma_hat) / p * n^{-2 / (4 + p - q)}`.
pub fn bandwidth_rot(x: &DMatrix<f64>, q: usize) -> Result<f64> {
    let (n, p) = x.shape();
    check_complement(p, q)?;
    let k = (p - q) as f64;
    Ok(ROT_CONSTANT * ROT_CONSTANT * 2.0 * isotropic_variance(x)? * (n as f64).powf(-2.0 / (4.0 + k)))
}
