//! Analytic gradients of the Gaussian-kernel objectives.
//!
//! All gradients are ambient: derivatives with respect to the entries of the
//! `p x q` matrix `V`, with distances in the expanded form
//! `|X_j - X_i|^2 - |V^T (X_j - X_i)|^2`. For `K(z) = exp(-z^2 / 2)` applied to
//! `d / h` the log-kernel derivative is `-d / h^2`, which is where the `1/h^2`
//! prefactor comes from.
//!
//! Every pairwise term has the form `c_ji d_ji grad d_ji` with
//! `grad d_ji = -2 (X_j - X_i)(X_j - X_i)^T V`, so each gradient reduces to
//! `-2 S V` with `S = sum_ji c_ji d_ji (X_j - X_i)(X_j - X_i)^T`, a `p x p`
//! matrix assembled through a graph-Laplacian identity in `O(n^2 p + n p^2)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{CveError, Result};
use crate::manifold::StiefelPoint;
use crate::objective::{self, DataSet, KernelKind, KernelSpec, SliceEvaluation};

#[derive(Debug, Clone, PartialEq)]
pub struct GradientResult {
    /// Ambient gradient, same shape as the frame.
    pub g: DMatrix<f64>,
    /// Objective value at the frame.
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightedGradientMode {
    /// Includes the derivative of the slice weights.
    Full,
    /// Slice weights held fixed: `sum_i w~_i grad L~_n(V, X_i)`.
    Partial,
}

pub(crate) fn require_gaussian(kernel: &KernelSpec) -> Result<()> {
    match kernel.kind {
        KernelKind::Gaussian => Ok(()),
        other => Err(CveError::UnsupportedKernel(other)),
    }
}

/// `grad_V d(V, s0) = -2 (x - s0)(x - s0)^T V`.
pub fn grad_distance(x: &DVector<f64>, v: &StiefelPoint, s0: &DVector<f64>) -> Result<DMatrix<f64>> {
    if x.len() != v.p() || s0.len() != v.p() {
        return Err(CveError::InvalidArgument("point, shift and frame dimensions differ".into()));
    }
    let delta = x - s0;
    let coords = v.matrix().transpose() * &delta;
    Ok(&delta * coords.transpose() * -2.0)
}

/// Gradient of the slice variance `L~_n(V, s0)`.
pub fn grad_ltilde(data: &DataSet, v: &StiefelPoint, s0: &DVector<f64>, kernel: &KernelSpec) -> Result<GradientResult> {
    require_gaussian(kernel)?;
    let d = objective::distances(data, v, s0)?;
    let w = objective::kernel_weights(&d, kernel)?;
    let stats = objective::local_stats(data.y(), &w)?;
    let p = data.p();
    // Residuals about the same shifted mean as the slice variance.
    let shift = data.y()[0];
    let centered_mean: f64 = w.iter().zip(data.y().iter()).map(|(wi, yi)| wi * (yi - shift)).sum();
    let mut s = DMatrix::zeros(p, p);
    for (i, row) in data.x().row_iter().enumerate() {
        let resid = (data.y()[i] - shift) - centered_mean;
        let c = (stats.ltilde - resid * resid) * w[i] * d[i];
        if c != 0.0 {
            let delta = row.transpose() - s0;
            s.ger(c, &delta, &delta, 1.0);
        }
    }
    let h2 = kernel.bandwidth * kernel.bandwidth;
    Ok(GradientResult { g: s * v.matrix() * (-2.0 / h2), value: stats.ltilde })
}

/// `sum_ji c_ji (x_j - x_i)(x_j - x_i)^T` for rows `x` of `xc`, using
/// `X^T (diag(row + col sums of C) - C - C^T) X`.
fn pair_outer_sum(xc: &DMatrix<f64>, c: &DMatrix<f64>) -> DMatrix<f64> {
    let n = c.nrows();
    let mut lap = -(c + c.transpose());
    for j in 0..n {
        let row_sum: f64 = c.row(j).iter().sum();
        let col_sum: f64 = c.column(j).iter().sum();
        lap[(j, j)] += row_sum + col_sum;
    }
    xc.transpose() * (lap * xc)
}

fn centered(x: &DMatrix<f64>) -> DMatrix<f64> {
    let means = x.row_mean();
    let mut xc = x.clone();
    for mut row in xc.row_iter_mut() {
        row -= &means;
    }
    xc
}

/// `grad L_n` from a prepared evaluation.
pub(crate) fn ln_gradient(data: &DataSet, eval: &SliceEvaluation, v: &DMatrix<f64>) -> DMatrix<f64> {
    let n = eval.n();
    let coef = DMatrix::from_fn(n, n, |j, i| {
        let resid = eval.y_centered[j] - eval.ybar1[i];
        (eval.ltilde[i] - resid * resid) * eval.weight(j, i) * eval.dist[(j, i)]
    });
    let h2 = eval.kernel().bandwidth.powi(2);
    pair_outer_sum(&centered(data.x()), &coef) * v * (-2.0 / (n as f64 * h2))
}

/// Gradient of the occupancy-weighted objective from a prepared evaluation.
pub(crate) fn weighted_gradient(
    data: &DataSet,
    eval: &SliceEvaluation,
    v: &DMatrix<f64>,
    mode: WeightedGradientMode,
) -> Result<(DMatrix<f64>, f64)> {
    let n = eval.n();
    let slice_w = eval.slice_weights()?;
    let value = slice_w.dot(&eval.ltilde);
    let total: f64 = eval.off_sums.iter().sum();
    let coef = DMatrix::from_fn(n, n, |j, i| {
        let resid = eval.y_centered[j] - eval.ybar1[i];
        let d = eval.dist[(j, i)];
        let within = slice_w[i] * (eval.ltilde[i] - resid * resid) * eval.weight(j, i) * d;
        match mode {
            WeightedGradientMode::Partial => within,
            // d w~_i contributes -(1/h^2) (L~_i - L^(w)) K_ji d_ji / T per pair.
            WeightedGradientMode::Full => within - (eval.ltilde[i] - value) * eval.kern[(j, i)] * d / total,
        }
    });
    let h2 = eval.kernel().bandwidth.powi(2);
    Ok((pair_outer_sum(&centered(data.x()), &coef) * v * (-2.0 / h2), value))
}

/// Gradient of `L_n(V) = (1/n) sum_i L~_n(V, X_i)`.
pub fn grad_ln(data: &DataSet, v: &StiefelPoint, kernel: &KernelSpec) -> Result<GradientResult> {
    require_gaussian(kernel)?;
    let eval = SliceEvaluation::new(data, v, kernel)?;
    Ok(GradientResult { g: ln_gradient(data, &eval, v.matrix()), value: eval.objective() })
}

/// Gradient of the occupancy-weighted objective `L^(w)_n`.
pub fn grad_ln_weighted(
    data: &DataSet,
    v: &StiefelPoint,
    kernel: &KernelSpec,
    mode: WeightedGradientMode,
) -> Result<GradientResult> {
    require_gaussian(kernel)?;
    let eval = SliceEvaluation::new(data, v, kernel)?;
    let (g, value) = weighted_gradient(data, &eval, v.matrix(), mode)?;
    Ok(GradientResult { g, value })
}

/// Projection of an ambient gradient onto the tangent space of `S(p, q)` at `V`:
/// `G - V sym(V^T G)`.
pub fn riemannian_gradient(v: &StiefelPoint, g: &DMatrix<f64>) -> DMatrix<f64> {
    let vm = v.matrix();
    let vtg = vm.transpose() * g;
    let sym = (&vtg + vtg.transpose()) * 0.5;
    g - vm * sym
}

/// Compares an analytic gradient against central differences of `objective`
/// taken entrywise in the ambient `p x q` space. Returns
/// `max_ij |fd_ij - g_ij| / (1 + |g_ij|)`.
pub fn finite_diff_check<F>(objective: F, gradient: &GradientResult, v: &StiefelPoint, step: f64) -> Result<f64>
where
    F: Fn(&DMatrix<f64>) -> f64,
{
    if !(1e-8..=1e-3).contains(&step) {
        return Err(CveError::InvalidArgument(format!("finite-difference step must lie in [1e-8, 1e-3], got {step}")));
    }
    if gradient.g.shape() != v.matrix().shape() {
        return Err(CveError::InvalidArgument("gradient shape does not match frame".into()));
    }
    let mut worst = 0.0f64;
    let mut probe = v.matrix().clone();
    for idx in 0..probe.len() {
        let orig = probe[idx];
        probe[idx] = orig + step;
        let up = objective(&probe);
        probe[idx] = orig - step;
        let down = objective(&probe);
        probe[idx] = orig;
        let fd = (up - down) / (2.0 * step);
        let g = gradient.g[idx];
        worst = worst.max((fd - g).abs() / (1.0 + g.abs()));
    }
    Ok(worst)
}

/// Finite-difference discrepancies of every analytic gradient at one instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradientAudit {
    /// `grad L~_n(V, s0)` with `s0` the first observation.
    pub ltilde: f64,
    pub ln: f64,
    /// Full gradient of the weighted objective.
    pub weighted: f64,
}

impl GradientAudit {
    pub fn max(&self) -> f64 {
        self.ltilde.max(self.ln).max(self.weighted)
    }
}

/// Checks [`grad_ltilde`], [`grad_ln`] and the full [`grad_ln_weighted`]
/// against central differences with the given step.
pub fn audit_gradients(data: &DataSet, v: &StiefelPoint, kernel: &KernelSpec, step: f64) -> Result<GradientAudit> {
    let s0 = data.observation(0);
    let lt = grad_ltilde(data, v, &s0, kernel)?;
    let ltilde = finite_diff_check(
        |m| objective::ltilde_ambient(data, m, &s0, kernel).map_or(f64::NAN, |s| s.ltilde),
        &lt,
        v,
        step,
    )?;
    let ambient = |m: &DMatrix<f64>| SliceEvaluation::ambient(data, m, kernel);
    let ln = finite_diff_check(|m| ambient(m).map_or(f64::NAN, |e| e.objective()), &grad_ln(data, v, kernel)?, v, step)?;
    let weighted = finite_diff_check(
        |m| ambient(m).and_then(|e| e.weighted_objective()).unwrap_or(f64::NAN),
        &grad_ln_weighted(data, v, kernel, WeightedGradientMode::Full)?,
        v,
        step,
    )?;
    Ok(GradientAudit { ltilde, ln, weighted })
}
