use std::path::Path;

use cve_core::bandwidth::BandwidthRule;
use cve_core::dimension::cv_curve;
use cve_core::gradients::audit_gradients;
use cve_core::manifold::random_stiefel;
use cve_core::optimizer::{fit_cve, OptimConfig, StartRecord, Variant};
use cve_core::rng::{seeded, substream};
use cve_core::simsuite::{run_study, sweep_theta, toy_sample, ModelId, ModelSpec, NoiseScale, StudyConfig};
use cve_core::{DataSet, GradientAudit, KernelSpec};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::io::{
    ensure_dir, fmt_f64, read_table, sidecar, standardize, write_csv, write_json, Clock, InputDigest, MatrixRecord,
    Standardization,
};
use crate::CliError;

/// Options shared by the fitting commands.
#[derive(Debug, Clone, Serialize)]
pub struct FitOptions {
    pub variant: Variant,
    pub bandwidth: BandwidthRule,
    pub optim: OptimConfig,
}

fn load(input: &Path, response: &str, standardize_data: bool) -> Result<(DataSet, Option<Standardization>, InputDigest), CliError> {
    let table = read_table(input, response)?;
    let digest = InputDigest { path: input.display().to_string(), sha256: table.sha256.clone() };
    if standardize_data {
        let (data, s) = standardize(&table)?;
        Ok((data, Some(s), digest))
    } else {
        Ok((table.data, None, digest))
    }
}

#[derive(Serialize)]
struct FitConfig<'a> {
    response: &'a str,
    dim: usize,
    standardize: bool,
    #[serde(flatten)]
    options: &'a FitOptions,
}

#[derive(Serialize)]
struct FitReport<'a> {
    variant: Variant,
    n: usize,
    p: usize,
    k: usize,
    q: usize,
    bandwidth: f64,
    objective: f64,
    stalled: bool,
    bhat: MatrixRecord,
    vq: MatrixRecord,
    starts: &'a [StartRecord],
    refine: Option<&'a StartRecord>,
    standardization: Option<Standardization>,
}

#[derive(Serialize)]
struct FitOutput<'a, C: Serialize> {
    manifest: crate::io::Manifest<C>,
    fit: FitReport<'a>,
}

pub fn fit(input: &Path, response: &str, dim: usize, standardize_data: bool, options: &FitOptions, out: &Path) -> Result<(), CliError> {
    let clock = Clock::start();
    let (data, standardization, digest) = load(input, response, standardize_data)?;
    let fit = fit_cve(&data, dim, options.variant, options.bandwidth, &options.optim)?;
    let report = FitReport {
        variant: fit.variant,
        n: data.n(),
        p: data.p(),
        k: fit.k(),
        q: fit.vq.q(),
        bandwidth: fit.kernel.bandwidth,
        objective: fit.objective,
        stalled: fit.stalled,
        bhat: fit.bhat.matrix().into(),
        vq: fit.vq.matrix().into(),
        starts: &fit.starts,
        refine: fit.refine.as_ref(),
        standardization,
    };
    let config = FitConfig { response, dim, standardize: standardize_data, options };
    let manifest = clock.manifest("fit", options.optim.seed, config, Some(digest));
    write_json(out, &FitOutput { manifest, fit: report })?;
    println!("objective {}", fmt_f64(fit.objective));
    if fit.stalled {
        return Err(CliError::Numerical("every start stalled before an accepted step; result written but flagged".into()));
    }
    Ok(())
}

#[derive(Serialize)]
struct DimConfig<'a> {
    response: &'a str,
    lmax: usize,
    standardize: bool,
    #[serde(flatten)]
    options: &'a FitOptions,
}

pub fn dim(
    input: &Path,
    response: &str,
    lmax: Option<usize>,
    standardize_data: bool,
    options: &FitOptions,
    out: &Path,
) -> Result<(), CliError> {
    let clock = Clock::start();
    let (data, standardization, digest) = load(input, response, standardize_data)?;
    let lmax = lmax.unwrap_or(data.p().min(10));
    let curve = cv_curve(&data, lmax, options.variant, options.bandwidth, &options.optim)?;

    ensure_dir(out)?;
    let rows: Vec<Vec<String>> = curve
        .values
        .iter()
        .map(|pt| vec![pt.l.to_string(), fmt_f64(pt.cv), fmt_f64(pt.bandwidth), pt.fallbacks.to_string()])
        .collect();
    write_csv(&out.join("cv_curve.csv"), &["l", "cv", "smoother_bandwidth", "fallbacks"], &rows)?;

    #[derive(Serialize)]
    struct DimOutput<'a, C: Serialize> {
        manifest: crate::io::Manifest<C>,
        khat: usize,
        curve: &'a cve_core::CvCurve,
        standardization: Option<Standardization>,
    }
    let config = DimConfig { response, lmax, standardize: standardize_data, options };
    let manifest = clock.manifest("dim", options.optim.seed, config, Some(digest));
    write_json(&out.join("dim.json"), &DimOutput { manifest, khat: curve.khat, curve: &curve, standardization })?;
    println!("khat {}", curve.khat);
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulateOptions {
    pub models: Vec<ModelId>,
    pub reps: usize,
    pub n: Option<usize>,
    pub p: usize,
    pub pmix: f64,
    pub lambda: f64,
    pub noise_scale: NoiseScale,
    pub variants: Vec<Variant>,
    pub baseline: bool,
    pub dim_lmax: Option<usize>,
    pub bandwidth: BandwidthRule,
    pub optim: OptimConfig,
}

pub fn simulate(options: &SimulateOptions, out: &Path) -> Result<(), CliError> {
    let clock = Clock::start();
    let specs = options
        .models
        .iter()
        .map(|&id| {
            let spec = ModelSpec::with_options(id, options.n.unwrap_or(id.default_n()), options.p, options.noise_scale)?;
            if id == ModelId::M2 {
                spec.with_mixture(options.pmix, options.lambda)
            } else {
                Ok(spec)
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    let config = StudyConfig {
        seed: options.optim.seed,
        reps: options.reps,
        variants: options.variants.clone(),
        bandwidth: options.bandwidth,
        optim: options.optim,
        baseline: options.baseline,
        dimension_lmax: options.dim_lmax,
    };
    let summary = run_study(&specs, &config)?;

    ensure_dir(out)?;
    let opt_f = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
    let opt_u = |v: Option<usize>| v.map(|k| k.to_string()).unwrap_or_default();
    let rows: Vec<Vec<String>> = summary
        .rows
        .iter()
        .map(|r| {
            vec![
                r.model.to_string(),
                r.method.to_string(),
                r.n.to_string(),
                fmt_f64(r.mean_err),
                fmt_f64(r.sd_err),
                r.reps.to_string(),
                r.failures.to_string(),
                opt_u(r.dim_correct),
            ]
        })
        .collect();
    write_csv(&out.join("summary.csv"), &["model", "variant", "n", "mean_err", "sd_err", "reps", "failures", "dim_correct"], &rows)?;
    let rows: Vec<Vec<String>> = summary
        .records
        .iter()
        .map(|r| {
            vec![
                r.model.to_string(),
                r.method.to_string(),
                r.n.to_string(),
                r.rep.to_string(),
                r.seed.to_string(),
                opt_f(r.err),
                opt_u(r.khat),
                r.failure.clone().unwrap_or_default(),
            ]
        })
        .collect();
    write_csv(&out.join("errors.csv"), &["model", "variant", "n", "rep", "seed", "err", "khat", "failure"], &rows)?;

    #[derive(Serialize)]
    struct StudyOutput<'a, C: Serialize> {
        manifest: crate::io::Manifest<C>,
        summary: &'a cve_core::StudySummary,
    }
    let manifest = clock.manifest("simulate", options.optim.seed, options, None);
    write_json(&out.join("summary.json"), &StudyOutput { manifest, summary: &summary })?;
    for r in &summary.rows {
        println!("{} {} mean_err {:.4} sd_err {:.4} reps {} failures {}", r.model, r.method, r.mean_err, r.sd_err, r.reps, r.failures);
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepOptions {
    pub n: usize,
    pub eta: f64,
    pub grid: usize,
    pub seed: u64,
    pub bandwidth: BandwidthRule,
}

pub fn sweep(options: &SweepOptions, out: &Path) -> Result<(), CliError> {
    let clock = Clock::start();
    let data = toy_sample(options.n, options.eta, &mut seeded(options.seed))?;
    let kernel = KernelSpec::gaussian(options.bandwidth.resolve(data.x(), 1)?)?;
    let rows = sweep_theta(&data, options.grid, &kernel, options.eta)?;
    let csv_rows: Vec<Vec<String>> = rows.iter().map(|r| vec![fmt_f64(r.theta), fmt_f64(r.ln), fmt_f64(r.oracle)]).collect();
    write_csv(out, &["theta", "ln", "oracle"], &csv_rows)?;

    #[derive(Serialize)]
    struct SweepManifest<'a> {
        bandwidth_value: f64,
        #[serde(flatten)]
        options: &'a SweepOptions,
    }
    let config = SweepManifest { bandwidth_value: kernel.bandwidth, options };
    write_json(&sidecar(out), &clock.manifest("sweep-theta", options.seed, config, None))?;

    let gap = rows.iter().map(|r| (r.ln - r.oracle).abs()).fold(0.0, f64::max);
    let argmin = rows.iter().fold(&rows[0], |best, r| if r.ln < best.ln { r } else { best });
    println!("max |L_n - L| {}", fmt_f64(gap));
    println!("argmin theta {}", fmt_f64(argmin.theta));
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub instances: usize,
    pub step: f64,
    pub tol: f64,
    pub constant_response: bool,
}

/// Random small instance `i`: `10 <= n <= 30`, `2 <= p <= 6`, `1 <= q < p`.
pub fn gradcheck_instance(seed: u64, index: usize, constant_response: bool) -> Result<(DataSet, cve_core::StiefelPoint, KernelSpec), CliError> {
    let mut rng = substream(seed, index as u64);
    let n = rng.random_range(10..=30);
    let p = rng.random_range(2..=6);
    let q = rng.random_range(1..p);
    let x = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
    let y = if constant_response {
        DVector::from_element(n, 1.0)
    } else {
        DVector::from_fn(n, |i, _| (x[(i, 0)] - x[(i, p - 1)]).sin() + 0.3 * rng.sample::<f64, _>(StandardNormal))
    };
    let v = random_stiefel(p, q, &mut rng)?;
    let data = DataSet::new(y, x)?;
    let kernel = KernelSpec::gaussian(BandwidthRule::RuleOfThumb.resolve(data.x(), q)?)?;
    Ok((data, v, kernel))
}

pub fn gradcheck(options: &GradcheckOptions) -> Result<(), CliError> {
    let mut worst = GradientAudit { ltilde: 0.0, ln: 0.0, weighted: 0.0 };
    for i in 0..options.instances {
        let (data, v, kernel) = gradcheck_instance(options.seed, i, options.constant_response)?;
        let audit = audit_gradients(&data, &v, &kernel, options.step)?;
        println!(
            "instance {i} n {} p {} q {}: ltilde {} ln {} weighted {}",
            data.n(),
            data.p(),
            v.q(),
            fmt_f64(audit.ltilde),
            fmt_f64(audit.ln),
            fmt_f64(audit.weighted)
        );
        worst = GradientAudit {
            ltilde: worst.ltilde.max(audit.ltilde),
            ln: worst.ln.max(audit.ln),
            weighted: worst.weighted.max(audit.weighted),
        };
    }
    println!("max ltilde {}", fmt_f64(worst.ltilde));
    println!("max ln {}", fmt_f64(worst.ln));
    println!("max weighted {}", fmt_f64(worst.weighted));
    if worst.max() <= options.tol {
        println!("gradcheck passed (tol {})", options.tol);
        Ok(())
    } else {
        Err(CliError::Numerical(format!("gradient discrepancy {} exceeds {}", worst.max(), options.tol)))
    }
}

