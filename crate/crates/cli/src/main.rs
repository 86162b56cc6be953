//! `cve`: conditional variance estimation from the command line.
//!
//! Exit codes: 0 success, 2 usage or input error, 3 numerical failure.

mod commands;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};
use cve_core::bandwidth::BandwidthRule;
use cve_core::optimizer::{OptimConfig, Variant};
use cve_core::simsuite::{ModelId, NoiseScale};

use commands::{FitOptions, GradcheckOptions, SimulateOptions, SweepOptions};

#[derive(Debug)]
pub enum CliError {
    Input(String),
    Numerical(String),
    Output(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) | CliError::Output(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Input(m) => write!(f, "input error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
            CliError::Output(m) => write!(f, "output error: {m}"),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "cve", version, about = "Conditional variance estimation for sufficient dimension reduction")]
struct Cli {
    /// Worker threads for parallel starts and replications (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct OptimArgs {
    /// Random starts per fit.
    #[arg(long)]
    starts: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Initial Cayley step size.
    #[arg(long, default_value_t = 1.0)]
    tau0: f64,
    /// Step reduction factor on rejection.
    #[arg(long, default_value_t = 0.5)]
    gamma: f64,
    /// Convergence tolerance on the projection change.
    #[arg(long, default_value_t = 1e-3)]
    tol: f64,
    /// Maximum number of accepted steps per search.
    #[arg(long, default_value_t = 50)]
    maxit: usize,
}

impl OptimArgs {
    fn config(&self, default_starts: usize) -> OptimConfig {
        OptimConfig {
            tau0: self.tau0,
            gamma: self.gamma,
            tol: self.tol,
            maxit: self.maxit,
            m: self.starts.unwrap_or(default_starts),
            seed: self.seed,
        }
    }
}

#[derive(Args, Debug, Clone)]
struct DataArgs {
    /// CSV file with a header row.
    #[arg(long)]
    input: PathBuf,
    /// Name of the response column; every other column is a predictor.
    #[arg(long)]
    response: String,
    /// Center and scale predictors and response before fitting.
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    standardize: bool,
    #[arg(long, default_value = "cve")]
    variant: Variant,
    /// rot, nobs=<x> or fixed=<h>.
    #[arg(long, default_value = "rot")]
    bandwidth: BandwidthRule,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Estimate span{B} for a given reduction dimension.
    Fit {
        #[command(flatten)]
        data: DataArgs,
        /// Reduction dimension k (number of columns of Bhat).
        #[arg(long)]
        dim: usize,
        #[command(flatten)]
        optim: OptimArgs,
        #[arg(long, default_value = "result.json")]
        out: PathBuf,
    },
    /// Select the reduction dimension by leave-one-out cross-validation.
    Dim {
        #[command(flatten)]
        data: DataArgs,
        /// Largest candidate dimension (default min(p, 10)).
        #[arg(long)]
        lmax: Option<usize>,
        #[command(flatten)]
        optim: OptimArgs,
        /// Output directory for cv_curve.csv and dim.json.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Monte Carlo study on the simulation models.
    Simulate {
        /// Comma-separated model ids, e.g. M1,M2.
        #[arg(long, value_delimiter = ',', required = true)]
        model: Vec<ModelId>,
        #[arg(long, default_value_t = 20)]
        reps: usize,
        /// Sample size (default: each model's own).
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, default_value_t = 20)]
        p: usize,
        #[arg(long, value_delimiter = ',', default_value = "cve")]
        variants: Vec<Variant>,
        /// Also score uniformly random frames.
        #[arg(long)]
        baseline: bool,
        /// Run dimension selection up to this dimension and count correct picks.
        #[arg(long)]
        dim_lmax: Option<usize>,
        /// Mixing probability of the M2 predictor law.
        #[arg(long, default_value_t = 0.3)]
        pmix: f64,
        /// Mode distance of the M2 predictor law.
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        /// variance (Var(eps) = 0.25) or tabulated generalized-normal scales.
        #[arg(long, default_value = "variance")]
        noise_scale: NoiseScale,
        #[arg(long, default_value = "rot")]
        bandwidth: BandwidthRule,
        #[command(flatten)]
        optim: OptimArgs,
        /// Output directory for summary.csv, errors.csv and summary.json.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Sample and population objective along V(theta) for the two-predictor toy model.
    SweepTheta {
        #[arg(long, default_value_t = 500)]
        n: usize,
        #[arg(long, default_value_t = 0.1)]
        eta: f64,
        /// Number of grid intervals over [0, pi].
        #[arg(long, default_value_t = 100)]
        grid: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "rot")]
        bandwidth: BandwidthRule,
        #[arg(long, default_value = "sweep.csv")]
        out: PathBuf,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        instances: usize,
        #[arg(long, default_value_t = 1e-6)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        /// Use a constant response, for which every gradient vanishes.
        #[arg(long)]
        constant_response: bool,
    },
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Fit { data, dim, optim, out } => {
            let options = FitOptions { variant: data.variant, bandwidth: data.bandwidth, optim: optim.config(10) };
            commands::fit(&data.input, &data.response, dim, data.standardize, &options, &out)
        }
        Command::Dim { data, lmax, optim, out } => {
            let options = FitOptions { variant: data.variant, bandwidth: data.bandwidth, optim: optim.config(10) };
            commands::dim(&data.input, &data.response, lmax, data.standardize, &options, &out)
        }
        Command::Simulate {
            model,
            reps,
            n,
            p,
            variants,
            baseline,
            dim_lmax,
            pmix,
            lambda,
            noise_scale,
            bandwidth,
            optim,
            out,
        } => {
            let options = SimulateOptions {
                models: model,
                reps,
                n,
                p,
                pmix,
                lambda,
                noise_scale,
                variants,
                baseline,
                dim_lmax,
                bandwidth,
                optim: optim.config(5),
            };
            commands::simulate(&options, &out)
        }
        Command::SweepTheta { n, eta, grid, seed, bandwidth, out } => {
            commands::sweep(&SweepOptions { n, eta, grid, seed, bandwidth }, &out)
        }
        Command::Gradcheck { seed, instances, step, tol, constant_response } => {
            commands::gradcheck(&GradcheckOptions { seed, instances, step, tol, constant_response })
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            eprintln!("cve: cannot configure {threads} threads: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("cve: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
