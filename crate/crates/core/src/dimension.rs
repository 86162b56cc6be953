//! Cross-validated choice of the reduction dimension.
//!
//! For each candidate `l` the reduction `B_l` is fit once on the full data and
//! `CV(l) = (1/n) sum_i (Y_i - g^{-i}(B_l^T X_i))^2`, where `g^{-i}` is a
//! leave-one-out Nadaraya-Watson average in the reduced coordinates.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bandwidth::bandwidth_rot;
use crate::error::{CveError, Result};
use crate::objective::{DataSet, KernelSpec, DEGENERATE_KERNEL_SUM};
use crate::optimizer::{fit_cve, OptimConfig, Smoothing, Variant};
use crate::rng::mix;

#[derive(Debug, Clone, PartialEq)]
pub struct LooPrediction {
    pub predictions: DVector<f64>,
    /// Points whose leave-one-out kernel weights all vanished; these are
    /// predicted by the mean of the other responses.
    pub fallbacks: usize,
}

/// Leave-one-out kernel averages of `y` over the rows of `z`.
///
/// Weights are `K(|z_j - z_i|^2 / h)` with the Gaussian profile, the same
/// convention as the slice weights of the objective.
pub fn loo_smooth(z: &DMatrix<f64>, y: &DVector<f64>, bandwidth: f64) -> Result<LooPrediction> {
    let n = z.nrows();
    if n < 3 {
        return Err(CveError::InvalidArgument(format!("leave-one-out smoothing needs n >= 3, got {n}")));
    }
    if y.len() != n {
        return Err(CveError::InvalidArgument(format!("response has {} entries but z has {n} rows", y.len())));
    }
    let kernel = KernelSpec::gaussian(bandwidth)?;
    let total: f64 = y.sum();
    let zt = z.transpose();

    let mut predictions = DVector::zeros(n);
    let mut fallbacks = 0;
    for i in 0..n {
        let zi = zt.column(i);
        let (mut num, mut den) = (0.0, 0.0);
        for j in (0..n).filter(|&j| j != i) {
            let d = zt.column(j).iter().zip(zi.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            let k = kernel.eval(d);
            num += k * y[j];
            den += k;
        }
        predictions[i] = if den >= DEGENERATE_KERNEL_SUM {
            num / den
        } else {
            fallbacks += 1;
            (total - y[i]) / (n - 1) as f64
        };
    }
    Ok(LooPrediction { predictions, fallbacks })
}

/// Smoother bandwidth for reduced predictors: the rule of thumb with `l` free
/// directions.
pub fn smoother_bandwidth(z: &DMatrix<f64>) -> Result<f64> {
    bandwidth_rot(z, 0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvScore {
    pub cv: f64,
    pub bandwidth: f64,
    pub fallbacks: usize,
}

/// Mean squared leave-one-out residual of `y` smoothed over `z`.
pub fn cv_score(z: &DMatrix<f64>, y: &DVector<f64>) -> Result<CvScore> {
    let bandwidth = smoother_bandwidth(z)?;
    let loo = loo_smooth(z, y, bandwidth)?;
    let cv = (y - &loo.predictions).norm_squared() / y.len() as f64;
    Ok(CvScore { cv, bandwidth, fallbacks: loo.fallbacks })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvPoint {
    pub l: usize,
    pub cv: f64,
    pub bandwidth: f64,
    pub fallbacks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvCurve {
    pub values: Vec<CvPoint>,
    pub khat: usize,
}

/// Seed of the fit for candidate dimension `l`.
pub fn dimension_seed(seed: u64, l: usize) -> u64 {
    mix(seed, l as u64)
}

fn reduced_predictors(data: &DataSet, l: usize, variant: Variant, smoothing: Smoothing, config: &OptimConfig) -> Result<DMatrix<f64>> {
    if l == data.p() {
        return Ok(data.x().clone());
    }
    let config = OptimConfig { seed: dimension_seed(config.seed, l), ..*config };
    let fit = fit_cve(data, l, variant, smoothing, &config)?;
    Ok(data.x() * fit.bhat.matrix())
}

/// `CV(l)` for `l = 1, ..., lmax` and the minimizing `l` (smallest on ties).
pub fn cv_curve(
    data: &DataSet,
    lmax: usize,
    variant: Variant,
    smoothing: impl Into<Smoothing>,
    config: &OptimConfig,
) -> Result<CvCurve> {
    let p = data.p();
    if lmax == 0 || lmax > p {
        return Err(CveError::InvalidDimension(format!("lmax must satisfy 1 <= lmax <= p = {p}, got {lmax}")));
    }
    config.validate()?;
    let smoothing = smoothing.into();
    let scored: Vec<Result<CvPoint>> = (1..=lmax)
        .into_par_iter()
        .map(|l| {
            let annotate = |e: CveError| CveError::DimensionFit { dim: l, source: Box::new(e) };
            let z = reduced_predictors(data, l, variant, smoothing, config).map_err(annotate)?;
            let score = cv_score(&z, data.y()).map_err(annotate)?;
            Ok(CvPoint { l, cv: score.cv, bandwidth: score.bandwidth, fallbacks: score.fallbacks })
        })
        .collect();
    let values = scored.into_iter().collect::<Result<Vec<_>>>()?;

    let mut khat = values[0].l;
    let mut best = values[0].cv;
    for point in &values[1..] {
        if point.cv < best {
            best = point.cv;
            khat = point.l;
        }
    }
    Ok(CvCurve { values, khat })
}
