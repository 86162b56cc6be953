//! Curvilinear search on the Stiefel manifold and the multistart estimators.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bandwidth::BandwidthRule;
use crate::error::{CveError, Result};
use crate::gradients::{ln_gradient, require_gaussian, weighted_gradient, WeightedGradientMode};
use crate::manifold::{cayley_step, orth_complement, orthonormality_defect, random_stiefel, StiefelPoint};
use crate::objective::{DataSet, KernelSpec, SliceEvaluation};
use crate::rng::substream;

/// Below this step size the Cayley update is numerically the identity.
pub const STALL_TAU: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub tau0: f64,
    pub gamma: f64,
    pub tol: f64,
    pub maxit: usize,
    /// Number of random starts.
    pub m: usize,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { tau0: 1.0, gamma: 0.5, tol: 1e-3, maxit: 50, m: 10, seed: 0 }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CveError::InvalidArgument(msg));
        if !(self.tau0 > 0.0) || !self.tau0.is_finite() {
            return bad(format!("tau0 must be positive, got {}", self.tau0));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad(format!("gamma must lie in (0, 1), got {}", self.gamma));
        }
        if !(self.tol > 0.0) {
            return bad(format!("tol must be positive, got {}", self.tol));
        }
        if self.maxit == 0 {
            return bad("maxit must be at least 1".into());
        }
        if self.m == 0 {
            return bad("at least one start is required".into());
        }
        Ok(())
    }
}

/// Estimator variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Cve,
    /// Occupancy-weighted objective with the partially weighted gradient.
    Wcve,
    /// CVE multistart followed by one weighted refinement from its winner.
    Rcve,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Cve, Variant::Wcve, Variant::Rcve];

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Cve => "cve",
            Variant::Wcve => "wcve",
            Variant::Rcve => "rcve",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = CveError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "cve" => Ok(Variant::Cve),
            "wcve" => Ok(Variant::Wcve),
            "rcve" => Ok(Variant::Rcve),
            other => Err(CveError::InvalidArgument(format!("unknown variant '{other}' (expected cve, wcve or rcve)"))),
        }
    }
}

/// Objective minimized by a single search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchObjective {
    /// `L_n` with its exact gradient.
    Unweighted,
    /// `L^(w)_n` with the partially weighted gradient.
    Weighted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    /// Objective at the proposed frame.
    pub objective: f64,
    /// Step size used for the proposal.
    pub tau: f64,
    pub accepted: bool,
    /// `|V^T V - I|` of the proposal.
    pub defect: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchTrace {
    pub initial_objective: f64,
    pub steps: Vec<TraceStep>,
    /// Step size fell below [`STALL_TAU`] before any step was accepted.
    pub stalled: bool,
}

impl SearchTrace {
    pub fn accepted(&self) -> usize {
        self.steps.iter().filter(|s| s.accepted).count()
    }

    pub fn rejected(&self) -> usize {
        self.steps.len() - self.accepted()
    }

    /// Objective after each accepted step, starting from the initial value.
    pub fn accepted_objectives(&self) -> Vec<f64> {
        std::iter::once(self.initial_objective)
            .chain(self.steps.iter().filter(|s| s.accepted).map(|s| s.objective))
            .collect()
    }
}

struct Evaluated {
    value: f64,
    eval: SliceEvaluation,
}

fn evaluate(data: &DataSet, v: &StiefelPoint, kernel: &KernelSpec, objective: SearchObjective) -> Result<Evaluated> {
    let eval = SliceEvaluation::new(data, v, kernel)?;
    let value = match objective {
        SearchObjective::Unweighted => eval.objective(),
        SearchObjective::Weighted => eval.weighted_objective()?,
    };
    Ok(Evaluated { value, eval })
}

fn gradient(data: &DataSet, at: &Evaluated, v: &StiefelPoint, objective: SearchObjective) -> Result<DMatrix<f64>> {
    match objective {
        SearchObjective::Unweighted => Ok(ln_gradient(data, &at.eval, v.matrix())),
        SearchObjective::Weighted => {
            weighted_gradient(data, &at.eval, v.matrix(), WeightedGradientMode::Partial).map(|(g, _)| g)
        }
    }
}

/// Cayley-transform descent with the simple decrease test.
///
/// A rejected proposal shrinks the step by `gamma` and resets the error to
/// `tol + 1`; an accepted one grows it by `1 / gamma`. The search ends when
/// the projection change of an accepted step drops to `tol`, after more than
/// `maxit` accepted steps, or when the step size underflows [`STALL_TAU`].
pub fn curvilinear_search(
    data: &DataSet,
    v0: &StiefelPoint,
    kernel: &KernelSpec,
    objective: SearchObjective,
    config: &OptimConfig,
) -> Result<(StiefelPoint, f64, SearchTrace)> {
    config.validate()?;
    require_gaussian(kernel)?;
    let q = v0.q();
    let scale = (2.0 * q as f64).sqrt();

    let mut v = v0.clone();
    let mut current = evaluate(data, &v, kernel, objective)?;
    let mut g = gradient(data, &current, &v, objective)?;
    let mut trace = SearchTrace { initial_objective: current.value, steps: Vec::new(), stalled: false };

    let mut tau = config.tau0;
    let mut count = 0usize;
    let mut error = f64::INFINITY;
    while error > config.tol && count <= config.maxit {
        let proposal = cayley_step(&v, &g, tau)?;
        let next = evaluate(data, &proposal, kernel, objective)?;
        let defect = orthonormality_defect(proposal.matrix());
        if !(next.value <= current.value) {
            trace.steps.push(TraceStep { objective: next.value, tau, accepted: false, defect });
            tau *= config.gamma;
            error = config.tol + 1.0;
            if tau < STALL_TAU {
                trace.stalled = count == 0;
                break;
            }
            continue;
        }
        trace.steps.push(TraceStep { objective: next.value, tau, accepted: true, defect });
        count += 1;
        error = (v.projection().matrix() - proposal.projection().matrix()).norm() / scale;
        g = gradient(data, &next, &proposal, objective)?;
        v = proposal;
        current = next;
        tau /= config.gamma;
    }
    Ok((v, current.value, trace))
}

/// Kernel given directly or through a bandwidth rule resolved on the data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Smoothing {
    Kernel(KernelSpec),
    Rule(BandwidthRule),
}

impl From<KernelSpec> for Smoothing {
    fn from(k: KernelSpec) -> Self {
        Smoothing::Kernel(k)
    }
}

impl From<BandwidthRule> for Smoothing {
    fn from(r: BandwidthRule) -> Self {
        Smoothing::Rule(r)
    }
}

impl Smoothing {
    pub fn resolve(&self, data: &DataSet, q: usize) -> Result<KernelSpec> {
        match self {
            Smoothing::Kernel(k) => {
                k.validate()?;
                Ok(*k)
            }
            Smoothing::Rule(rule) => KernelSpec::gaussian(rule.resolve(data.x(), q)?),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartRecord {
    pub index: usize,
    pub objective: f64,
    pub trace: SearchTrace,
}

impl StartRecord {
    pub fn iterations(&self) -> usize {
        self.trace.steps.len()
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub variant: Variant,
    /// Minimizer over `S(p, q)`.
    pub vq: StiefelPoint,
    /// Basis of `span{vq}^perp`, the estimate of `span{B}`.
    pub bhat: StiefelPoint,
    /// `L_n` at `vq`, or `L^(w)_n` for the weighted variants.
    pub objective: f64,
    pub kernel: KernelSpec,
    pub starts: Vec<StartRecord>,
    /// Weighted refinement pass (rcve only).
    pub refine: Option<StartRecord>,
    /// Every random start stalled without an accepted step.
    pub stalled: bool,
}

impl FitResult {
    pub fn k(&self) -> usize {
        self.bhat.q()
    }
}

fn multistart(
    data: &DataSet,
    q: usize,
    kernel: &KernelSpec,
    objective: SearchObjective,
    config: &OptimConfig,
) -> Result<(StiefelPoint, f64, Vec<StartRecord>)> {
    let p = data.p();
    let runs: Vec<Result<(StiefelPoint, StartRecord)>> = (0..config.m)
        .into_par_iter()
        .map(|index| {
            let mut rng = substream(config.seed, index as u64);
            let v0 = random_stiefel(p, q, &mut rng)?;
            let (v, value, trace) = curvilinear_search(data, &v0, kernel, objective, config)?;
            Ok((v, StartRecord { index, objective: value, trace }))
        })
        .collect();

    let mut best: Option<(StiefelPoint, f64)> = None;
    let mut records = Vec::with_capacity(runs.len());
    for run in runs {
        let (v, record) = run?;
        // Strict comparison in index order: lowest index wins ties.
        if best.as_ref().map_or(true, |(_, f)| record.objective < *f) {
            best = Some((v, record.objective));
        }
        records.push(record);
    }
    let (v, f) = best.expect("at least one start");
    Ok((v, f, records))
}

/// Fits `span{B}` for reduction dimension `k` (so `q = p - k`).
pub fn fit_cve(
    data: &DataSet,
    k: usize,
    variant: Variant,
    smoothing: impl Into<Smoothing>,
    config: &OptimConfig,
) -> Result<FitResult> {
    config.validate()?;
    let p = data.p();
    if k == 0 || k >= p {
        return Err(CveError::InvalidDimension(format!("reduction dimension k must satisfy 1 <= k < p = {p}, got {k}")));
    }
    if data.n() < 2 {
        return Err(CveError::InvalidArgument("at least two observations are required".into()));
    }
    let q = p - k;
    let kernel = smoothing.into().resolve(data, q)?;
    require_gaussian(&kernel)?;

    let first = match variant {
        Variant::Wcve => SearchObjective::Weighted,
        Variant::Cve | Variant::Rcve => SearchObjective::Unweighted,
    };
    let (mut vq, mut objective, starts) = multistart(data, q, &kernel, first, config)?;
    let stalled = starts.iter().all(|s| s.trace.stalled);

    let refine = if variant == Variant::Rcve {
        let (v, value, trace) = curvilinear_search(data, &vq, &kernel, SearchObjective::Weighted, config)?;
        vq = v;
        objective = value;
        Some(StartRecord { index: starts.len(), objective: value, trace })
    } else {
        None
    };

    let bhat = orth_complement(&vq)?;
    Ok(FitResult { variant, vq, bhat, objective, kernel, starts, refine, stalled })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::subspace_error;
    use crate::objective::objective_ln;
    use crate::rng::seeded;
    use nalgebra::DVector;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn toy_data(n: usize, eta: f64, seed: u64) -> DataSet {
        let mut rng = seeded(seed);
        let x = DMatrix::from_fn(n, 2, |_, _| rng.sample(StandardNormal));
        let y = DVector::from_fn(n, |i, _| x[(i, 0)] + eta * rng.sample::<f64, _>(StandardNormal));
        DataSet::new(y, x).unwrap()
    }

    fn frame_at(theta: f64) -> StiefelPoint {
        StiefelPoint::new(DMatrix::from_column_slice(2, 1, &[theta.cos(), theta.sin()])).unwrap()
    }

    fn angle_between(v: &StiefelPoint, theta: f64) -> f64 {
        let c = (v.matrix()[(0, 0)] * theta.cos() + v.matrix()[(1, 0)] * theta.sin()).abs();
        c.min(1.0).acos()
    }

    #[test]
    fn toy_fit_matches_grid_search() {
        let data = toy_data(100, 0.1, 11);
        let kernel = KernelSpec::gaussian(BandwidthRule::RuleOfThumb.resolve(data.x(), 1).unwrap()).unwrap();
        let grid = 1000;
        let (theta_star, _) = (0..grid)
            .map(|i| std::f64::consts::PI * i as f64 / grid as f64)
            .map(|t| (t, objective_ln(&data, &frame_at(t), &kernel).unwrap()))
            .fold((0.0, f64::INFINITY), |acc, (t, f)| if f < acc.1 { (t, f) } else { acc });

        let fit = fit_cve(&data, 1, Variant::Cve, kernel, &OptimConfig { seed: 3, ..Default::default() }).unwrap();
        assert!(angle_between(&fit.vq, theta_star) <= 0.15, "theta* = {theta_star}");
        assert!(angle_between(&fit.vq, std::f64::consts::FRAC_PI_2) <= 0.15);
        assert!(angle_between(&fit.bhat, 0.0) <= 0.15);
    }

    #[test]
    fn noiseless_linear_model_recovers_least_squares_direction() {
        let (n, p) = (200, 5);
        let mut rng = seeded(8);
        let x = DMatrix::from_fn(n, p, |_, _| rng.sample(StandardNormal));
        let b = DVector::from_column_slice(&[1.0, -2.0, 0.5, 0.0, 1.0]);
        let y = &x * &b;
        let data = DataSet::new(y.clone(), x.clone()).unwrap();

        // Least-squares direction, computed independently of the estimator.
        let ls = (x.transpose() * &x).cholesky().unwrap().solve(&(x.transpose() * &y));
        let truth = StiefelPoint::orthonormalize(&DMatrix::from_column_slice(p, 1, ls.as_slice())).unwrap();

        let config = OptimConfig { m: 5, seed: 1, ..Default::default() };
        let fit = fit_cve(&data, 1, Variant::Cve, BandwidthRule::RuleOfThumb, &config).unwrap();
        let err = subspace_error(&truth, &fit.bhat).unwrap();
        assert!(err <= 0.1, "err = {err}");
    }

    fn sample_problem(seed: u64, n: usize, p: usize) -> DataSet {
        let mut rng = seeded(seed);
        let x: DMatrix<f64> = DMatrix::from_fn(n, p, |_, _| rng.sample(StandardNormal));
        let y = DVector::from_fn(n, |i, _| (x[(i, 0)] + x[(i, 1)]).sin() + 0.2 * rng.sample::<f64, _>(StandardNormal));
        DataSet::new(y, x).unwrap()
    }

    #[test]
    fn traces_are_monotone_and_orthonormal() {
        let data = sample_problem(2, 60, 4);
        for variant in Variant::ALL {
            let config = OptimConfig { m: 3, seed: 5, ..Default::default() };
            let fit = fit_cve(&data, 1, variant, BandwidthRule::RuleOfThumb, &config).unwrap();
            for record in fit.starts.iter().chain(fit.refine.iter()) {
                let values = record.trace.accepted_objectives();
                assert!(values.windows(2).all(|w| w[1] <= w[0]), "{variant}: {values:?}");
                assert!(record.trace.steps.iter().all(|s| s.defect <= 1e-10));
                assert_eq!(*values.last().unwrap(), record.objective);
            }
            assert!(orthonormality_defect(fit.vq.matrix()) <= 1e-10);
            assert!((fit.bhat.matrix().transpose() * fit.vq.matrix()).amax() <= 1e-8);
        }
    }

    #[test]
    fn objective_is_best_start() {
        let data = sample_problem(4, 50, 4);
        let config = OptimConfig { m: 6, seed: 9, ..Default::default() };
        let fit = fit_cve(&data, 2, Variant::Cve, BandwidthRule::RuleOfThumb, &config).unwrap();
        assert_eq!(fit.starts.len(), 6);
        let min = fit.starts.iter().map(|s| s.objective).fold(f64::INFINITY, f64::min);
        assert_eq!(fit.objective, min);
        assert!((objective_ln(&data, &fit.vq, &fit.kernel).unwrap() - fit.objective).abs() < 1e-12);
        assert!(fit.refine.is_none());
    }

    #[test]
    fn weighted_variants_report_weighted_objective() {
        let data = sample_problem(6, 50, 3);
        let config = OptimConfig { m: 2, seed: 1, ..Default::default() };
        for variant in [Variant::Wcve, Variant::Rcve] {
            let fit = fit_cve(&data, 1, variant, BandwidthRule::RuleOfThumb, &config).unwrap();
            let eval = SliceEvaluation::new(&data, &fit.vq, &fit.kernel).unwrap();
            assert!((eval.weighted_objective().unwrap() - fit.objective).abs() < 1e-12);
        }
    }

    #[test]
    fn rcve_refines_the_cve_winner() {
        let data = sample_problem(7, 50, 3);
        let config = OptimConfig { m: 3, seed: 2, ..Default::default() };
        let cve = fit_cve(&data, 1, Variant::Cve, BandwidthRule::RuleOfThumb, &config).unwrap();
        let rcve = fit_cve(&data, 1, Variant::Rcve, BandwidthRule::RuleOfThumb, &config).unwrap();
        assert_eq!(cve.starts, rcve.starts);
        let refine = rcve.refine.as_ref().unwrap();
        let start_value = SliceEvaluation::new(&data, &cve.vq, &cve.kernel).unwrap().weighted_objective().unwrap();
        assert_eq!(refine.trace.initial_objective, start_value);
        assert!(rcve.objective <= start_value);
    }

    #[test]
    fn fits_are_reproducible() {
        let data = sample_problem(3, 40, 4);
        let config = OptimConfig { m: 4, seed: 77, ..Default::default() };
        let a = fit_cve(&data, 1, Variant::Cve, BandwidthRule::RuleOfThumb, &config).unwrap();
        let b = fit_cve(&data, 1, Variant::Cve, BandwidthRule::RuleOfThumb, &config).unwrap();
        assert_eq!(a.vq.matrix(), b.vq.matrix());
        assert_eq!(a.starts, b.starts);

        let serial = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let c = serial.install(|| fit_cve(&data, 1, Variant::Cve, BandwidthRule::RuleOfThumb, &config).unwrap());
        assert_eq!(a.vq.matrix(), c.vq.matrix());
        assert_eq!(a.starts, c.starts);
    }

    #[test]
    fn sphere_search_bookkeeping() {
        let data = sample_problem(5, 40, 4);
        let config = OptimConfig { m: 2, ..Default::default() };
        let fit = fit_cve(&data, 3, Variant::Cve, BandwidthRule::RuleOfThumb, &config).unwrap();
        assert_eq!(fit.vq.q(), 1);
        assert_eq!(fit.bhat.q(), 3);
        assert_eq!(fit.k(), 3);
    }

    #[test]
    fn invalid_dimensions_are_rejected() {
        let data = sample_problem(5, 20, 3);
        let config = OptimConfig::default();
        for k in [0, 3, 4] {
            let err = fit_cve(&data, k, Variant::Cve, BandwidthRule::RuleOfThumb, &config).unwrap_err();
            assert!(matches!(err, CveError::InvalidDimension(_)));
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for config in [
            OptimConfig { gamma: 1.0, ..Default::default() },
            OptimConfig { gamma: 0.0, ..Default::default() },
            OptimConfig { tol: 0.0, ..Default::default() },
            OptimConfig { maxit: 0, ..Default::default() },
            OptimConfig { m: 0, ..Default::default() },
            OptimConfig { tau0: -1.0, ..Default::default() },
        ] {
            assert!(config.validate().is_err());
        }
    }

    #[test]
    fn converged_start_barely_moves() {
        let data = toy_data(200, 0.1, 21);
        let kernel = KernelSpec::gaussian(BandwidthRule::RuleOfThumb.resolve(data.x(), 1).unwrap()).unwrap();
        let config = OptimConfig::default();
        let (v, _, _) = curvilinear_search(&data, &frame_at(0.3), &kernel, SearchObjective::Unweighted, &config).unwrap();
        let (again, value, trace) = curvilinear_search(&data, &v, &kernel, SearchObjective::Unweighted, &config).unwrap();
        assert!(trace.accepted() <= 1 || trace.accepted_objectives().first().unwrap() - value < 1e-9);
        assert!(subspace_error(&v, &again).unwrap() < 1e-2);
    }

    #[test]
    fn variant_parsing_round_trips() {
        for v in Variant::ALL {
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
        }
        assert!("sir".parse::<Variant>().is_err());
    }
}
