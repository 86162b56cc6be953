//! Conditional variance estimation (CVE) for sufficient dimension reduction.
//!
//! Given a regression `Y = g(B^T X) + eps`, the estimator finds the span of
//! `B` by minimizing a kernel-smoothed conditional variance `L_n(V)` over
//! frames `V` on the Stiefel manifold `S(p, p - k)`; `span{B}` is the
//! orthogonal complement of the minimizer.

pub mod bandwidth;
pub mod dimension;
pub mod error;
pub mod gradients;
pub mod manifold;
pub mod objective;
pub mod optimizer;
pub mod rng;
pub mod simsuite;
pub mod special;

pub use bandwidth::BandwidthRule;
pub use dimension::{cv_curve, CvCurve};
pub use error::{CveError, Result};
pub use gradients::{GradientAudit, GradientResult, WeightedGradientMode};
pub use manifold::{StiefelPoint, SubspaceProjection};
pub use objective::{DataSet, KernelKind, KernelSpec, LocalStats, SliceEvaluation};
pub use optimizer::{fit_cve, FitResult, OptimConfig, Variant};
pub use simsuite::{ModelId, ModelSpec, StudyConfig, StudySummary};
