//! Simulation models M1-M7 and the replication runner.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Bernoulli, ChiSquared, Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bandwidth::BandwidthRule;
use crate::dimension::cv_curve;
use crate::error::{CveError, Result};
use crate::manifold::{random_stiefel, subspace_error, StiefelPoint};
use crate::objective::{objective_ln, oracle_l_toy, DataSet, KernelSpec};
use crate::optimizer::{fit_cve, OptimConfig, Variant};
use crate::rng::{mix, seeded, substream};
use crate::special::gamma;

/// Error variance targeted by the M1 and M7 noise laws.
pub const TARGET_NOISE_VARIANCE: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelId {
    M1,
    M2,
    M3,
    M4,
    M5,
    M6,
    M7,
}

impl ModelId {
    pub const ALL: [ModelId; 7] = [ModelId::M1, ModelId::M2, ModelId::M3, ModelId::M4, ModelId::M5, ModelId::M6, ModelId::M7];

    pub fn number(&self) -> u64 {
        *self as u64 + 1
    }
}

impl fmt::Display for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "M{}", self.number())
    }
}

impl FromStr for ModelId {
    type Err = CveError;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        let digit = t.strip_prefix('M').or_else(|| t.strip_prefix('m')).and_then(|d| d.parse::<usize>().ok());
        match digit {
            Some(d @ 1..=7) => Ok(ModelId::ALL[d - 1]),
            _ => Err(CveError::InvalidArgument(format!("unknown model '{s}' (expected M1 to M7)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "kebab-case")]
pub enum PredictorLaw {
    /// `N(0, I)`.
    Gaussian,
    /// `N(0, Sigma)` with `Sigma_ij = rho^|i - j|`.
    ArGaussian { rho: f64 },
    /// `lambda Z 1_p + N(0, I)` with `Z = 2 Bernoulli(pmix) - 1` shared by all coordinates.
    Mixture { pmix: f64, lambda: f64 },
    /// Independent `U[0, 1]` entries.
    UniformCube,
    /// Multivariate t with identity scale.
    StudentT { df: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "kebab-case")]
pub enum ErrorLaw {
    Normal { sd: f64 },
    /// Generalized normal with location `a`, scale `b` and shape `c`.
    GNorm { a: f64, b: f64, c: f64 },
}

impl ErrorLaw {
    pub fn variance(&self) -> f64 {
        match *self {
            ErrorLaw::Normal { sd } => sd * sd,
            ErrorLaw::GNorm { b, c, .. } => gnorm_variance(b, c),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            ErrorLaw::Normal { sd } => sd * rng.sample::<f64, _>(StandardNormal),
            ErrorLaw::GNorm { a, b, c } => sample_gnorm(a, b, c, rng),
        }
    }
}

/// How the M1/M7 generalized-normal scales are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseScale {
    /// Scale solved from `Var(eps) = 0.25`.
    #[default]
    Variance,
    /// Scales exactly as tabulated: `sqrt(1/2)` for M1, `sqrt(1/Gamma(6))` for M7.
    Tabulated,
}

impl FromStr for NoiseScale {
    type Err = CveError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "variance" => Ok(NoiseScale::Variance),
            "tabulated" => Ok(NoiseScale::Tabulated),
            other => Err(CveError::InvalidArgument(format!("unknown noise scale '{other}' (expected variance or tabulated)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Link {
    /// `cos(u1)`
    Cos,
    /// `2 log(|u1| + 2)`
    LogAbs,
    /// `u1 / (0.5 + (1.5 + u2)^2)`
    Ratio,
    /// `cos(pi u1) (u2 + 1)^2`
    CosProduct,
    /// `u1^2 + u2^2 + u3^2`
    SumSquares,
    /// `u1 u2^2 + u3 u4`
    Interaction,
}

impl Link {
    pub fn eval(&self, u: &[f64]) -> f64 {
        match self {
            Link::Cos => u[0].cos(),
            Link::LogAbs => 2.0 * (u[0].abs() + 2.0).ln(),
            Link::Ratio => u[0] / (0.5 + (1.5 + u[1]).powi(2)),
            Link::CosProduct => (std::f64::consts::PI * u[0]).cos() * (u[1] + 1.0).powi(2),
            Link::SumSquares => u[..3].iter().map(|v| v * v).sum(),
            Link::Interaction => u[0] * u[1] * u[1] + u[2] * u[3],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub id: ModelId,
    pub n: usize,
    pub p: usize,
    pub b: StiefelPoint,
    pub predictors: PredictorLaw,
    pub error: ErrorLaw,
    pub link: Link,
}

/// Variance of `GN(a, b, c)`: `b^2 Gamma(3/c) / Gamma(1/c)`.
pub fn gnorm_variance(b: f64, c: f64) -> f64 {
    b * b * gamma(3.0 / c) / gamma(1.0 / c)
}

/// Scale `b` giving `GN(., b, c)` the requested variance.
pub fn gnorm_scale(variance: f64, c: f64) -> f64 {
    (variance * gamma(1.0 / c) / gamma(3.0 / c)).sqrt()
}

/// Draw from `GN(a, b, c)`, density `c / (2 b Gamma(1/c)) exp(-(|z - a| / b)^c)`.
pub fn sample_gnorm<R: Rng + ?Sized>(a: f64, b: f64, c: f64, rng: &mut R) -> f64 {
    debug_assert!(b > 0.0 && c > 0.0);
    let e: f64 = Gamma::new(1.0 / c, 1.0).expect("positive shape").sample(rng);
    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
    a + sign * b * e.powf(1.0 / c)
}

fn paired_directions(p: usize) -> DMatrix<f64> {
    let s = 6f64.sqrt().recip();
    DMatrix::from_fn(p, 2, |i, j| match (i, j) {
        (i, 0) if i < 6 => s,
        (i, 1) if i < 6 => if i % 2 == 0 { s } else { -s },
        _ => 0.0,
    })
}

fn coordinate_directions(p: usize, axes: &[usize]) -> DMatrix<f64> {
    let mut b = DMatrix::zeros(p, axes.len());
    for (col, &axis) in axes.iter().enumerate() {
        b[(axis, col)] = 1.0;
    }
    b
}

impl ModelId {
    pub fn k(&self) -> usize {
        match self {
            ModelId::M1 | ModelId::M2 | ModelId::M3 => 1,
            ModelId::M4 | ModelId::M5 => 2,
            ModelId::M6 => 3,
            ModelId::M7 => 4,
        }
    }

    pub fn default_n(&self) -> usize {
        match self {
            ModelId::M1 | ModelId::M2 | ModelId::M3 => 100,
            ModelId::M4 | ModelId::M5 | ModelId::M6 => 200,
            ModelId::M7 => 400,
        }
    }

    fn min_p(&self) -> usize {
        match self {
            ModelId::M6 => 3,
            ModelId::M7 => 4,
            _ => 6,
        }
    }
}

impl ModelSpec {
    /// Model with its default sample size, `p = 20`, `pmix = 0.3`, `lambda = 1`
    /// and variance-matched noise.
    pub fn new(id: ModelId) -> Self {
        Self::with_options(id, id.default_n(), 20, NoiseScale::Variance).expect("default model is valid")
    }

    pub fn with_options(id: ModelId, n: usize, p: usize, noise: NoiseScale) -> Result<Self> {
        if p < id.min_p() {
            return Err(CveError::InvalidDimension(format!("{id} needs p >= {}, got {p}", id.min_p())));
        }
        if n < 2 {
            return Err(CveError::InvalidArgument(format!("n must be at least 2, got {n}")));
        }
        let directions = match id {
            ModelId::M1 | ModelId::M2 | ModelId::M3 => paired_directions(p).columns(0, 1).into_owned(),
            ModelId::M4 | ModelId::M5 => paired_directions(p),
            ModelId::M6 => coordinate_directions(p, &[0, 1, p - 1]),
            ModelId::M7 => coordinate_directions(p, &[0, 1, p - 1, 2]),
        };
        let b = StiefelPoint::new(directions)?;
        let (predictors, link) = match id {
            ModelId::M1 => (PredictorLaw::ArGaussian { rho: 0.5 }, Link::Cos),
            ModelId::M2 => (PredictorLaw::Mixture { pmix: 0.3, lambda: 1.0 }, Link::Cos),
            ModelId::M3 => (PredictorLaw::Gaussian, Link::LogAbs),
            ModelId::M4 => (PredictorLaw::ArGaussian { rho: 0.5 }, Link::Ratio),
            ModelId::M5 => (PredictorLaw::UniformCube, Link::CosProduct),
            ModelId::M6 => (PredictorLaw::Gaussian, Link::SumSquares),
            ModelId::M7 => (PredictorLaw::StudentT { df: 3.0 }, Link::Interaction),
        };
        let error = match (id, noise) {
            (ModelId::M1, NoiseScale::Variance) => ErrorLaw::GNorm { a: 0.0, b: gnorm_scale(TARGET_NOISE_VARIANCE, 0.5), c: 0.5 },
            (ModelId::M1, NoiseScale::Tabulated) => ErrorLaw::GNorm { a: 0.0, b: 0.5f64.sqrt(), c: 0.5 },
            (ModelId::M7, NoiseScale::Variance) => ErrorLaw::GNorm { a: 0.0, b: gnorm_scale(TARGET_NOISE_VARIANCE, 1.0), c: 1.0 },
            (ModelId::M7, NoiseScale::Tabulated) => ErrorLaw::GNorm { a: 0.0, b: (1.0 / gamma(6.0)).sqrt(), c: 1.0 },
            _ => ErrorLaw::Normal { sd: 0.5 },
        };
        Ok(Self { id, n, p, b, predictors, error, link })
    }

    pub fn k(&self) -> usize {
        self.b.q()
    }

    pub fn with_mixture(mut self, pmix: f64, lambda: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&pmix) || !(lambda >= 0.0) {
            return Err(CveError::InvalidArgument(format!("mixture needs pmix in [0, 1] and lambda >= 0, got {pmix}, {lambda}")));
        }
        self.predictors = PredictorLaw::Mixture { pmix, lambda };
        Ok(self)
    }

    pub fn with_error(mut self, error: ErrorLaw) -> Self {
        self.error = error;
        self
    }
}

/// `n x p` predictor matrix drawn row by row.
pub fn sample_predictors<R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> DMatrix<f64> {
    let (n, p) = (spec.n, spec.p);
    let normal = |rng: &mut R| DMatrix::<f64>::from_fn(p, n, |_, _| rng.sample(StandardNormal));
    let columns = match spec.predictors {
        PredictorLaw::Gaussian => normal(rng),
        PredictorLaw::ArGaussian { rho } => {
            let sigma = DMatrix::from_fn(p, p, |i, j| rho.powi((i as i32 - j as i32).abs()));
            let chol = sigma.cholesky().expect("|rho| < 1 gives a positive definite covariance");
            chol.l() * normal(rng)
        }
        PredictorLaw::Mixture { pmix, lambda } => {
            let coin = Bernoulli::new(pmix).expect("pmix in [0, 1]");
            let mut cols = DMatrix::zeros(p, n);
            for mut col in cols.column_iter_mut() {
                let z = if coin.sample(rng) { 1.0 } else { -1.0 };
                for v in col.iter_mut() {
                    *v = lambda * z + rng.sample::<f64, _>(StandardNormal);
                }
            }
            cols
        }
        PredictorLaw::UniformCube => DMatrix::from_fn(p, n, |_, _| rng.random::<f64>()),
        PredictorLaw::StudentT { df } => {
            let chi = ChiSquared::new(df).expect("positive degrees of freedom");
            let mut cols = normal(rng);
            for mut col in cols.column_iter_mut() {
                let w: f64 = chi.sample(rng);
                col /= (w / df).sqrt();
            }
            cols
        }
    };
    columns.transpose()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub data: DataSet,
    pub b: StiefelPoint,
    /// `g(B^T X_i)` without noise.
    pub signal: DVector<f64>,
    pub noise: DVector<f64>,
}

/// Draws `(X, Y)` from the model: predictors first, then the errors.
pub fn generate<R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Result<Sample> {
    let x = sample_predictors(spec, rng);
    let u = &x * spec.b.matrix();
    let signal = DVector::from_fn(spec.n, |i, _| {
        let row: Vec<f64> = u.row(i).iter().copied().collect();
        spec.link.eval(&row)
    });
    let noise = DVector::from_fn(spec.n, |_, _| spec.error.sample(rng));
    let data = DataSet::new(&signal + &noise, x)?;
    Ok(Sample { data, b: spec.b.clone(), signal, noise })
}

/// Two-predictor linear toy model `Y = X_1 + eta eps` with `X ~ N(0, I_2)`,
/// whose population objective along `V(theta) = (cos theta, sin theta)` is
/// `cos^2 theta + eta^2`.
pub fn toy_sample<R: Rng + ?Sized>(n: usize, eta: f64, rng: &mut R) -> Result<DataSet> {
    let x = DMatrix::from_fn(n, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
    let eps = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    DataSet::new(x.column(0) + eps * eta, x)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub theta: f64,
    /// Sample objective `L_n(V(theta))`.
    pub ln: f64,
    /// Population objective `L(V(theta))`.
    pub oracle: f64,
}

/// Evaluates `L_n` and the closed-form toy objective at `theta = pi i / grid`,
/// `i = 0, ..., grid`.
pub fn sweep_theta(data: &DataSet, grid: usize, kernel: &KernelSpec, eta: f64) -> Result<Vec<SweepRow>> {
    if grid == 0 {
        return Err(CveError::InvalidArgument("grid must have at least one interval".into()));
    }
    if data.p() != 2 {
        return Err(CveError::InvalidDimension(format!("the toy sweep needs p = 2, got {}", data.p())));
    }
    let sigma = DMatrix::identity(2, 2);
    let b = DVector::from_column_slice(&[1.0, 0.0]);
    (0..=grid)
        .map(|i| {
            let theta = std::f64::consts::PI * i as f64 / grid as f64;
            let v = StiefelPoint::orthonormalize(&DMatrix::from_column_slice(2, 1, &[theta.cos(), theta.sin()]))?;
            Ok(SweepRow { theta, ln: objective_ln(data, &v, kernel)?, oracle: oracle_l_toy(&v, &sigma, &b, eta * eta)? })
        })
        .collect()
}

/// What produced a subspace estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Cve,
    Wcve,
    Rcve,
    /// Uniformly random `p x k` frame, a no-skill reference.
    Random,
}

impl From<Variant> for Method {
    fn from(v: Variant) -> Self {
        match v {
            Variant::Cve => Method::Cve,
            Variant::Wcve => Method::Wcve,
            Variant::Rcve => Method::Rcve,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Cve => "cve",
            Method::Wcve => "wcve",
            Method::Rcve => "rcve",
            Method::Random => "random",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub seed: u64,
    pub reps: usize,
    pub variants: Vec<Variant>,
    pub bandwidth: BandwidthRule,
    /// Only `m`, `tau0`, `gamma`, `tol` and `maxit` are used; start seeds are
    /// derived per replication.
    pub optim: OptimConfig,
    /// Also score the random-frame baseline.
    pub baseline: bool,
    /// Run dimension selection up to this `lmax` for every variant.
    pub dimension_lmax: Option<usize>,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            reps: 20,
            variants: vec![Variant::Cve],
            bandwidth: BandwidthRule::RuleOfThumb,
            optim: OptimConfig { m: 5, ..Default::default() },
            baseline: false,
            dimension_lmax: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepRecord {
    pub model: ModelId,
    pub n: usize,
    pub method: Method,
    pub rep: usize,
    /// Seed the replication's data were drawn with.
    pub seed: u64,
    pub err: Option<f64>,
    pub khat: Option<usize>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub model: ModelId,
    pub n: usize,
    pub method: Method,
    pub mean_err: f64,
    pub sd_err: f64,
    /// Successful replications.
    pub reps: usize,
    pub failures: usize,
    /// Replications whose selected dimension equals the true `k`.
    pub dim_correct: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySummary {
    pub seed: u64,
    pub rows: Vec<SummaryRow>,
    pub records: Vec<RepRecord>,
}

impl StudySummary {
    pub fn row(&self, model: ModelId, method: Method) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.model == model && r.method == method)
    }

    pub fn errors(&self, model: ModelId, method: Method) -> Vec<f64> {
        self.records.iter().filter(|r| r.model == model && r.method == method).filter_map(|r| r.err).collect()
    }
}

/// Seed of replication `rep` of `model`.
pub fn replication_seed(seed: u64, model: ModelId, rep: usize) -> u64 {
    mix(mix(seed, model.number()), rep as u64)
}

/// Mean and `n - 1` standard deviation; `sd = 0` for a single value.
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    (mean, (ss / (n - 1) as f64).sqrt())
}

fn run_replication(spec: &ModelSpec, rep: usize, config: &StudyConfig) -> Vec<RepRecord> {
    let seed = replication_seed(config.seed, spec.id, rep);
    let record = |method, err, khat, failure| RepRecord { model: spec.id, n: spec.n, method, rep, seed, err, khat, failure };
    let sample = match generate(spec, &mut seeded(seed)) {
        Ok(s) => s,
        Err(e) => {
            let methods = config.variants.iter().map(|&v| Method::from(v));
            let methods: Vec<Method> = methods.chain(config.baseline.then_some(Method::Random)).collect();
            return methods.into_iter().map(|m| record(m, None, None, Some(e.to_string()))).collect();
        }
    };
    let k = spec.k();
    let mut out = Vec::new();
    for (index, &variant) in config.variants.iter().enumerate() {
        let optim = OptimConfig { seed: mix(seed, index as u64 + 1), ..config.optim };
        let scored = fit_cve(&sample.data, k, variant, config.bandwidth, &optim)
            .and_then(|fit| subspace_error(&sample.b, &fit.bhat))
            .and_then(|err| {
                let khat = match config.dimension_lmax {
                    Some(lmax) => Some(cv_curve(&sample.data, lmax.min(spec.p), variant, config.bandwidth, &optim)?.khat),
                    None => None,
                };
                Ok((err, khat))
            });
        out.push(match scored {
            Ok((err, khat)) => record(variant.into(), Some(err), khat, None),
            Err(e) => record(variant.into(), None, None, Some(e.to_string())),
        });
    }
    if config.baseline {
        let mut rng = substream(seed, u64::MAX);
        let scored = random_stiefel(spec.p, k, &mut rng).and_then(|frame| subspace_error(&sample.b, &frame));
        out.push(match scored {
            Ok(err) => record(Method::Random, Some(err), None, None),
            Err(e) => record(Method::Random, None, None, Some(e.to_string())),
        });
    }
    out
}

/// Runs `reps` replications of every model, fitting every configured variant.
///
/// Replications run in parallel, each on its own seed, and are merged in
/// (model, rep) order so the summary does not depend on scheduling.
pub fn run_study(specs: &[ModelSpec], config: &StudyConfig) -> Result<StudySummary> {
    if config.reps == 0 {
        return Err(CveError::InvalidArgument("at least one replication is required".into()));
    }
    if config.variants.is_empty() && !config.baseline {
        return Err(CveError::InvalidArgument("nothing to run: no variants and no baseline".into()));
    }
    config.optim.validate()?;
    let jobs: Vec<(usize, usize)> = (0..specs.len()).flat_map(|s| (0..config.reps).map(move |r| (s, r))).collect();
    let records: Vec<RepRecord> = jobs
        .par_iter()
        .map(|&(s, rep)| run_replication(&specs[s], rep, config))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();

    let mut methods: Vec<Method> = config.variants.iter().map(|&v| v.into()).collect();
    if config.baseline {
        methods.push(Method::Random);
    }
    let mut rows = Vec::new();
    for spec in specs {
        for &method in &methods {
            let cell: Vec<&RepRecord> =
                records.iter().filter(|r| r.model == spec.id && r.n == spec.n && r.method == method).collect();
            let errs: Vec<f64> = cell.iter().filter_map(|r| r.err).collect();
            let (mean_err, sd_err) = mean_sd(&errs);
            let dim_correct = config
                .dimension_lmax
                .filter(|_| method != Method::Random)
                .map(|_| cell.iter().filter(|r| r.khat == Some(spec.k())).count());
            rows.push(SummaryRow {
                model: spec.id,
                n: spec.n,
                method,
                mean_err,
                sd_err,
                reps: errs.len(),
                failures: cell.len() - errs.len(),
                dim_correct,
            });
        }
    }
    Ok(StudySummary { seed: config.seed, rows, records })
}
