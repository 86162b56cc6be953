//! Stiefel and Grassmann manifold primitives.
//!
//! A [`StiefelPoint`] is a `p x q` matrix with orthonormal columns. The
//! estimator only ever cares about the subspace it spans, so most quantities
//! here are functions of the projection `V V^T`.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{CveError, Result};

/// Frobenius tolerance for `V^T V = I`.
pub const ORTHONORMAL_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct StiefelPoint {
    v: DMatrix<f64>,
}

impl StiefelPoint {
    /// Wraps `v` after checking `1 <= q <= p` and orthonormal columns.
    pub fn new(v: DMatrix<f64>) -> Result<Self> {
        let (p, q) = v.shape();
        if q == 0 || q > p {
            return Err(CveError::InvalidDimension(format!(
                "frame must satisfy 1 <= q <= p, got p = {p}, q = {q}"
            )));
        }
        let defect = orthonormality_defect(&v);
        if !(defect <= ORTHONORMAL_TOL) {
            return Err(CveError::InvalidArgument(format!(
                "columns are not orthonormal (|V^T V - I| = {defect:e})"
            )));
        }
        Ok(Self { v })
    }

    /// Orthonormalizes the columns of an arbitrary full-rank `p x q` matrix.
    pub fn orthonormalize(a: &DMatrix<f64>) -> Result<Self> {
        let (p, q) = a.shape();
        if q == 0 || q > p {
            return Err(CveError::InvalidDimension(format!(
                "frame must satisfy 1 <= q <= p, got p = {p}, q = {q}"
            )));
        }
        let (qf, r) = signed_qr(a.clone());
        if (0..q).any(|i| r[(i, i)].abs() <= f64::EPSILON * r[(0, 0)].abs().max(1.0)) {
            return Err(CveError::InvalidArgument(
                "matrix is rank deficient, cannot orthonormalize".into(),
            ));
        }
        Ok(Self { v: qf })
    }

    /// Coordinate frame `(e_{i_1}, ..., e_{i_q})` in `R^p`.
    pub fn coordinate(p: usize, axes: &[usize]) -> Result<Self> {
        let mut v = DMatrix::zeros(p, axes.len());
        for (col, &axis) in axes.iter().enumerate() {
            if axis >= p {
                return Err(CveError::InvalidDimension(format!("axis {axis} out of range for p = {p}")));
            }
            v[(axis, col)] = 1.0;
        }
        Self::new(v)
    }

    pub(crate) fn from_matrix_unchecked(v: DMatrix<f64>) -> Self {
        Self { v }
    }

    pub fn p(&self) -> usize {
        self.v.nrows()
    }

    pub fn q(&self) -> usize {
        self.v.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.v
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.v
    }

    pub fn projection(&self) -> SubspaceProjection {
        SubspaceProjection(&self.v * self.v.transpose())
    }

    /// `V O` for an orthogonal `q x q` matrix `O`; spans the same subspace.
    pub fn rotate(&self, o: &DMatrix<f64>) -> Result<Self> {
        if o.shape() != (self.q(), self.q()) {
            return Err(CveError::InvalidArgument(format!(
                "rotation must be {q}x{q}, got {:?}",
                o.shape(),
                q = self.q()
            )));
        }
        Self::new(&self.v * o)
    }
}

impl TryFrom<DMatrix<f64>> for StiefelPoint {
    type Error = CveError;

    fn try_from(v: DMatrix<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<StiefelPoint> for DMatrix<f64> {
    fn from(point: StiefelPoint) -> Self {
        point.v
    }
}

/// Orthogonal projection onto a linear subspace.
#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceProjection(DMatrix<f64>);

impl SubspaceProjection {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn rank(&self) -> f64 {
        self.0.trace()
    }

    /// `I - P`.
    pub fn complement(&self) -> SubspaceProjection {
        let p = self.0.nrows();
        SubspaceProjection(DMatrix::identity(p, p) - &self.0)
    }
}

/// `|V^T V - I_q|_F`.
pub fn orthonormality_defect(v: &DMatrix<f64>) -> f64 {
    let q = v.ncols();
    (v.transpose() * v - DMatrix::<f64>::identity(q, q)).norm()
}

/// Thin QR with the signs of `Q`'s columns chosen so that `diag(R) >= 0`.
fn signed_qr(a: DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let qr = a.qr();
    let mut q = qr.q();
    let mut r = qr.r();
    for i in 0..r.nrows().min(q.ncols()) {
        if r[(i, i)] < 0.0 {
            q.column_mut(i).neg_mut();
            r.row_mut(i).neg_mut();
        }
    }
    (q, r)
}

/// Draws a frame from the invariant (uniform) measure on `S(p, q)`: the
/// Q-factor of a `p x q` standard normal matrix.
pub fn random_stiefel<R: Rng + ?Sized>(p: usize, q: usize, rng: &mut R) -> Result<StiefelPoint> {
    if q == 0 || q > p {
        return Err(CveError::InvalidDimension(format!(
            "random frame needs 1 <= q <= p, got p = {p}, q = {q}"
        )));
    }
    // Filled column by column, so the draw order is fixed.
    let z = DMatrix::from_fn(p, q, |_, _| rng.sample::<f64, _>(StandardNormal));
    let (v, _) = signed_qr(z);
    Ok(StiefelPoint::from_matrix_unchecked(v))
}

/// One Cayley retraction step `(I + tau W)^{-1} (I - tau W) V` with the
/// skew-symmetric `W = G V^T - V G^T`.
pub fn cayley_step(v: &StiefelPoint, g: &DMatrix<f64>, tau: f64) -> Result<StiefelPoint> {
    if g.shape() != v.matrix().shape() {
        return Err(CveError::InvalidArgument(format!(
            "gradient shape {:?} does not match frame shape {:?}",
            g.shape(),
            v.matrix().shape()
        )));
    }
    if !(tau >= 0.0) || !tau.is_finite() {
        return Err(CveError::InvalidArgument(format!("step size must be finite and >= 0, got {tau}")));
    }
    let vm = v.matrix();
    let p = v.p();
    let w = g * vm.transpose() - vm * g.transpose();
    let identity = DMatrix::<f64>::identity(p, p);
    let lhs = &identity + &w * tau;
    let rhs = (&identity - &w * tau) * vm;
    let next = lhs
        .lu()
        .solve(&rhs)
        .ok_or_else(|| CveError::InvalidArgument("Cayley system is singular".into()))?;
    Ok(StiefelPoint::from_matrix_unchecked(next))
}

/// Orthonormal basis `U` (`p x (p - q)`) of `span{V}^perp`.
pub fn orth_complement(v: &StiefelPoint) -> Result<StiefelPoint> {
    let (p, q) = (v.p(), v.q());
    if q == p {
        return Err(CveError::EmptyComplement);
    }
    // Householder QR of [V | I_p] yields a full orthogonal Q whose first q
    // columns span V; the remaining columns span the complement.
    let mut augmented = DMatrix::zeros(p, q + p);
    augmented.view_mut((0, 0), (p, q)).copy_from(v.matrix());
    augmented.view_mut((0, q), (p, p)).fill_with_identity();
    let (full, _) = signed_qr(augmented);
    let u = full.columns(q, p - q).into_owned();
    Ok(StiefelPoint::from_matrix_unchecked(u))
}

/// `|P_B - P_Bhat|_F / sqrt(2k)`, a value in `[0, 1]`.
pub fn subspace_error(b: &StiefelPoint, bhat: &StiefelPoint) -> Result<f64> {
    if b.p() != bhat.p() || b.q() != bhat.q() {
        return Err(CveError::InvalidArgument(format!(
            "subspaces must share p and rank, got {}x{} and {}x{}",
            b.p(),
            b.q(),
            bhat.p(),
            bhat.q()
        )));
    }
    let diff = b.projection().matrix() - bhat.projection().matrix();
    Ok(diff.norm() / (2.0 * b.q() as f64).sqrt())
}
