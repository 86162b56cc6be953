//! Kernel-smoothed conditional variance objective.
//!
//! For a frame `V` and a shift point `s0`, every observation gets a squared
//! distance to the affine plane `s0 + span{V}`; kernel weights built from these
//! distances define a local (slice) variance of the response. Averaging the
//! slice variances over all observations used as shift points gives `L_n(V)`,
//! whose minimizer over the Stiefel manifold spans the complement of the mean
//! subspace.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{CveError, Result};
use crate::manifold::StiefelPoint;

/// Kernel sums below this are treated as an empty slice.
pub const DEGENERATE_KERNEL_SUM: f64 = 1e-300;

/// A sample `(Y_i, X_i)`, observations in rows of `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSet {
    y: DVector<f64>,
    x: DMatrix<f64>,
}

impl DataSet {
    pub fn new(y: DVector<f64>, x: DMatrix<f64>) -> Result<Self> {
        if y.len() != x.nrows() {
            return Err(CveError::InvalidArgument(format!(
                "response has {} entries but predictors have {} rows",
                y.len(),
                x.nrows()
            )));
        }
        if y.len() < 2 {
            return Err(CveError::InvalidArgument(format!("need at least 2 observations, got {}", y.len())));
        }
        if x.ncols() == 0 {
            return Err(CveError::InvalidDimension("predictor matrix has no columns".into()));
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(CveError::InvalidArgument(format!("response entry {i} is not finite")));
        }
        if let Some(idx) = x.iter().position(|v| !v.is_finite()) {
            let (row, col) = (idx % x.nrows(), idx / x.nrows());
            return Err(CveError::InvalidArgument(format!("predictor ({row}, {col}) is not finite")));
        }
        Ok(Self { y, x })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    /// Row `i` of the predictor matrix as a column vector.
    pub fn observation(&self, i: usize) -> DVector<f64> {
        self.x.row(i).transpose()
    }

    /// Same data with the response replaced.
    pub fn with_response(&self, y: DVector<f64>) -> Result<Self> {
        Self::new(y, self.x.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelKind {
    /// `exp(-z^2 / 2)`
    Gaussian,
    /// `max(1 - z^2, 0)^2`
    EpanechnikovSquared,
    /// `exp(-z)`
    Exponential,
}

impl KernelKind {
    fn profile(self, z: f64) -> f64 {
        match self {
            KernelKind::Gaussian => (-0.5 * z * z).exp(),
            KernelKind::EpanechnikovSquared => {
                let t = (1.0 - z * z).max(0.0);
                t * t
            }
            KernelKind::Exponential => (-z).exp(),
        }
    }
}

/// Kernel `K` with bandwidth `h`, applied as `K(d / h)` to squared distances `d`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub bandwidth: f64,
    /// Positive multiplicative constant in front of the kernel profile.
    /// It cancels in every normalized quantity.
    #[serde(default = "unit_scale")]
    pub scale: f64,
}

fn unit_scale() -> f64 {
    1.0
}

impl KernelSpec {
    pub fn new(kind: KernelKind, bandwidth: f64) -> Result<Self> {
        let spec = Self { kind, bandwidth, scale: 1.0 };
        spec.validate()?;
        Ok(spec)
    }

    pub fn gaussian(bandwidth: f64) -> Result<Self> {
        Self::new(KernelKind::Gaussian, bandwidth)
    }

    pub fn with_scale(mut self, scale: f64) -> Result<Self> {
        self.scale = scale;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth > 0.0) || !self.bandwidth.is_finite() {
            return Err(CveError::InvalidArgument(format!(
                "bandwidth must be positive and finite, got {}",
                self.bandwidth
            )));
        }
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(CveError::InvalidArgument(format!("kernel scale must be positive, got {}", self.scale)));
        }
        Ok(())
    }

    /// `K(d / h)` for a squared distance `d >= 0`.
    #[inline]
    pub fn eval(&self, d: f64) -> f64 {
        self.scale * self.kind.profile(d / self.bandwidth)
    }
}

/// Weighted first and second moments of the response within one slice.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalStats {
    pub ybar1: f64,
    pub ybar2: f64,
    /// `ybar2 - ybar1^2`
    pub ltilde: f64,
    pub weights: DVector<f64>,
}

fn check_frame(data: &DataSet, v: &StiefelPoint) -> Result<()> {
    if v.p() != data.p() {
        return Err(CveError::InvalidArgument(format!(
            "frame has {} rows but data has {} predictors",
            v.p(),
            data.p()
        )));
    }
    Ok(())
}

/// Rows of `X (I - V V^T)`, stored one observation per column (`p x n`).
fn residuals_by_column(x: &DMatrix<f64>, v: &DMatrix<f64>) -> DMatrix<f64> {
    let xt = x.transpose();
    let coords = v.transpose() * &xt;
    xt - v * coords
}

/// `d_i(V, s0) = |(I - V V^T)(X_i - s0)|^2` for every observation.
pub fn distances(data: &DataSet, v: &StiefelPoint, s0: &DVector<f64>) -> Result<DVector<f64>> {
    check_frame(data, v)?;
    if s0.len() != data.p() {
        return Err(CveError::InvalidArgument(format!(
            "shift point has length {} but data has {} predictors",
            s0.len(),
            data.p()
        )));
    }
    let vm = v.matrix();
    let residuals = residuals_by_column(data.x(), vm);
    let s0_res = s0 - vm * (vm.transpose() * s0);
    Ok(DVector::from_iterator(
        data.n(),
        residuals.column_iter().map(|r| (r - &s0_res).norm_squared()),
    ))
}

/// Normalized kernel weights `K(d_i / h) / sum_j K(d_j / h)`.
pub fn kernel_weights(d: &DVector<f64>, kernel: &KernelSpec) -> Result<DVector<f64>> {
    kernel.validate()?;
    let k = d.map(|di| kernel.eval(di));
    let total: f64 = k.iter().sum();
    if !(total >= DEGENERATE_KERNEL_SUM) {
        return Err(CveError::DegenerateSlice { shift: None });
    }
    Ok(k / total)
}

/// Weighted response moments `ybar_l = sum_i w_i Y_i^l` and the slice variance.
pub fn local_stats(y: &DVector<f64>, w: &DVector<f64>) -> Result<LocalStats> {
    if y.len() != w.len() {
        return Err(CveError::InvalidArgument(format!(
            "response has {} entries but weights have {}",
            y.len(),
            w.len()
        )));
    }
    let ybar1 = w.dot(y);
    let ybar2 = w.iter().zip(y.iter()).map(|(wi, yi)| wi * yi * yi).sum::<f64>();
    // Variance from responses shifted by y[0]: exact zero for a constant response.
    let shift = y.get(0).copied().unwrap_or(0.0);
    let (m1, m2) = w.iter().zip(y.iter()).fold((0.0, 0.0), |(a, b), (wi, yi)| {
        let d = yi - shift;
        (a + wi * d, b + wi * d * d)
    });
    Ok(LocalStats { ybar1, ybar2, ltilde: m2 - m1 * m1, weights: w.clone() })
}

/// Slice variance `L~_n(V, s0)` at an arbitrary shift point.
pub fn ltilde(data: &DataSet, v: &StiefelPoint, s0: &DVector<f64>, kernel: &KernelSpec) -> Result<LocalStats> {
    let d = distances(data, v, s0)?;
    let w = kernel_weights(&d, kernel)?;
    local_stats(data.y(), &w)
}

/// [`ltilde`] at an arbitrary `p x q` matrix, with the expanded distance
/// `|X_i - s0|^2 - |V^T (X_i - s0)|^2`.
pub fn ltilde_ambient(data: &DataSet, v: &DMatrix<f64>, s0: &DVector<f64>, kernel: &KernelSpec) -> Result<LocalStats> {
    if v.nrows() != data.p() || s0.len() != data.p() {
        return Err(CveError::InvalidArgument("ambient evaluation shapes do not conform".into()));
    }
    let d = DVector::from_iterator(
        data.n(),
        data.x().row_iter().map(|row| {
            let delta = row.transpose() - s0;
            delta.norm_squared() - (v.transpose() * &delta).norm_squared()
        }),
    );
    let w = kernel_weights(&d, kernel)?;
    local_stats(data.y(), &w)
}

/// `L_n(V) = (1/n) sum_i L~_n(V, X_i)`.
pub fn objective_ln(data: &DataSet, v: &StiefelPoint, kernel: &KernelSpec) -> Result<f64> {
    Ok(SliceEvaluation::new(data, v, kernel)?.objective())
}

/// `L^(w)_n(V) = sum_i w~(V, X_i) L~_n(V, X_i)`, slices weighted by occupancy.
pub fn objective_ln_weighted(data: &DataSet, v: &StiefelPoint, kernel: &KernelSpec) -> Result<f64> {
    SliceEvaluation::new(data, v, kernel)?.weighted_objective()
}

/// Population objective of the bivariate linear toy model `Y = B^T X + eps`,
/// `X ~ N(0, Sigma)`, `Var(eps) = eta2`:
/// `L(V) = (B^T V)^2 / (V^T Sigma^{-1} V) + eta2`.
pub fn oracle_l_toy(v: &StiefelPoint, sigma: &DMatrix<f64>, b: &DVector<f64>, eta2: f64) -> Result<f64> {
    let p = v.p();
    if v.q() != 1 {
        return Err(CveError::InvalidDimension(format!("toy oracle needs a single direction, got q = {}", v.q())));
    }
    if sigma.shape() != (p, p) || b.len() != p {
        return Err(CveError::InvalidArgument("toy oracle shapes do not conform".into()));
    }
    if (b.norm() - 1.0).abs() > 1e-10 {
        return Err(CveError::InvalidArgument("B must be a unit vector".into()));
    }
    if !(eta2 >= 0.0) {
        return Err(CveError::InvalidArgument(format!("eta^2 must be nonnegative, got {eta2}")));
    }
    let chol = sigma
        .clone()
        .cholesky()
        .ok_or_else(|| CveError::InvalidArgument("covariance is not positive definite".into()))?;
    let vv = v.matrix().column(0).into_owned();
    let precision_form = vv.dot(&chol.solve(&vv));
    let bv = b.dot(&vv);
    Ok(bv * bv / precision_form + eta2)
}

/// All slice quantities for one frame with every observation as a shift
/// point. Value and gradient evaluations share this.
#[derive(Debug, Clone)]
pub struct SliceEvaluation {
    kernel: KernelSpec,
    /// `dist[(j, i)] = d_j(V, X_i)`; symmetric.
    pub(crate) dist: DMatrix<f64>,
    /// `kern[(j, i)] = K(d_j(V, X_i) / h)`.
    pub(crate) kern: DMatrix<f64>,
    /// Per-shift kernel sums, including the self term.
    pub(crate) col_sums: DVector<f64>,
    /// Per-shift kernel sums excluding the self term.
    pub(crate) off_sums: DVector<f64>,
    /// Response centered at its sample mean.
    pub(crate) y_centered: DVector<f64>,
    pub(crate) ybar1: DVector<f64>,
    pub(crate) ltilde: DVector<f64>,
}

fn pairwise_sq_distances(columns: &DMatrix<f64>) -> DMatrix<f64> {
    let n = columns.ncols();
    let mut dist = DMatrix::zeros(n, n);
    for i in 0..n {
        let ci = columns.column(i);
        for j in 0..i {
            let d = ci.iter().zip(columns.column(j).iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            dist[(j, i)] = d;
            dist[(i, j)] = d;
        }
    }
    dist
}

impl SliceEvaluation {
    pub fn new(data: &DataSet, v: &StiefelPoint, kernel: &KernelSpec) -> Result<Self> {
        check_frame(data, v)?;
        let residuals = residuals_by_column(data.x(), v.matrix());
        Self::from_distances(data, pairwise_sq_distances(&residuals), kernel)
    }

    /// Evaluation at an arbitrary `p x q` matrix using the expanded distance
    /// `|X_j - X_i|^2 - |V^T (X_j - X_i)|^2`, which agrees with the residual
    /// form on the Stiefel manifold and is what the analytic gradients
    /// differentiate. Used for finite differences in the ambient space.
    pub fn ambient(data: &DataSet, v: &DMatrix<f64>, kernel: &KernelSpec) -> Result<Self> {
        if v.nrows() != data.p() {
            return Err(CveError::InvalidArgument(format!(
                "matrix has {} rows but data has {} predictors",
                v.nrows(),
                data.p()
            )));
        }
        let xt = data.x().transpose();
        let full = pairwise_sq_distances(&xt);
        let projected = pairwise_sq_distances(&(v.transpose() * &xt));
        Self::from_distances(data, full - projected, kernel)
    }

    fn from_distances(data: &DataSet, dist: DMatrix<f64>, kernel: &KernelSpec) -> Result<Self> {
        kernel.validate()?;
        let n = data.n();
        let kern = dist.map(|d| kernel.eval(d));

        // Variance is shift invariant; centering reduces cancellation in ybar2 - ybar1^2.
        let mean = data.y().mean();
        let y_centered = data.y().map(|yi| yi - mean);

        let mut col_sums = DVector::zeros(n);
        let mut off_sums = DVector::zeros(n);
        let mut ybar1 = DVector::zeros(n);
        let mut ltilde = DVector::zeros(n);
        for i in 0..n {
            let col = kern.column(i);
            let total: f64 = col.iter().sum();
            if !(total >= DEGENERATE_KERNEL_SUM) {
                return Err(CveError::DegenerateSlice { shift: Some(i) });
            }
            let (mut m1, mut m2) = (0.0, 0.0);
            for (kj, yj) in col.iter().zip(y_centered.iter()) {
                let w = kj / total;
                m1 += w * yj;
                m2 += w * yj * yj;
            }
            col_sums[i] = total;
            off_sums[i] = col.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, k)| k).sum();
            ybar1[i] = m1;
            ltilde[i] = m2 - m1 * m1;
        }

        Ok(Self { kernel: *kernel, dist, kern, col_sums, off_sums, y_centered, ybar1, ltilde })
    }

    pub fn n(&self) -> usize {
        self.ltilde.len()
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    /// `L~_n(V, X_i)` for every shift point.
    pub fn slice_variances(&self) -> &DVector<f64> {
        &self.ltilde
    }

    /// Within-slice weight `w_j(V, X_i)`.
    #[inline]
    pub fn weight(&self, j: usize, i: usize) -> f64 {
        self.kern[(j, i)] / self.col_sums[i]
    }

    pub fn objective(&self) -> f64 {
        self.ltilde.iter().sum::<f64>() / self.n() as f64
    }

    /// Between-slice weights `w~(V, X_i)`; the self term `K(0)` is excluded.
    pub fn slice_weights(&self) -> Result<DVector<f64>> {
        let total: f64 = self.off_sums.iter().sum();
        if !(total >= DEGENERATE_KERNEL_SUM) {
            return Err(CveError::DegenerateSlice { shift: None });
        }
        Ok(&self.off_sums / total)
    }

    pub fn weighted_objective(&self) -> Result<f64> {
        Ok(self.slice_weights()?.dot(&self.ltilde))
    }
}
