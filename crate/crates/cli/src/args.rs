use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use conquer::inference::CiMethod;
use conquer::{Bandwidth, KernelKind};

#[derive(Debug, Parser)]
#[command(
    name = "conquer",
    version,
    about = "Convolution-smoothed quantile regression",
    propagate_version = true
)]
pub struct Cli {
    /// Worker threads for bootstrap and simulation; results do not depend on it.
    #[arg(long, global = true, env = "CONQUER_THREADS")]
    pub threads: Option<usize>,

    /// Write the JSON result here instead of stdout.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a conquer estimator (optionally followed by a one-step refinement).
    Fit(FitArgs),
    /// Multiplier-bootstrap confidence intervals.
    Bootstrap(BootstrapArgs),
    /// Pilot fit plus one higher-order-kernel Newton step.
    Onestep(OneStepArgs),
    /// Run a Monte Carlo experiment described by a TOML or JSON spec.
    Simulate(SimulateArgs),
    /// Time single fits at growing n with p = floor(sqrt(n)) and t2 noise.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// CSV file with a header row.
    #[arg(long)]
    pub data: PathBuf,

    /// Name of the response column; every other column is a covariate.
    #[arg(long = "y-col", default_value = "y")]
    pub y_col: String,
}

#[derive(Debug, Args)]
pub struct SolverArgs {
    /// Quantile level in (0, 1).
    #[arg(long, allow_negative_numbers = true)]
    pub tau: f64,

    #[arg(long, default_value_t = KernelKind::Gaussian)]
    pub kernel: KernelKind,

    /// Bandwidth: a positive number or `auto`.
    #[arg(long, default_value_t = Bandwidth::Auto, allow_negative_numbers = true)]
    pub h: Bandwidth,

    /// Gradient-norm tolerance.
    #[arg(long, default_value_t = conquer::solver::DEFAULT_TOL)]
    pub tol: f64,

    #[arg(long = "max-iter", default_value_t = conquer::solver::DEFAULT_MAX_ITER)]
    pub max_iter: usize,

    /// Run on the raw design instead of the standardized one.
    #[arg(long = "no-standardize")]
    pub no_standardize: bool,
}

#[derive(Debug, Args)]
pub struct RefineArgs {
    /// Kernel order of the refinement step, 4 or 6.
    #[arg(long, default_value_t = 4)]
    pub order: u32,

    /// Refinement bandwidth: a positive number or `auto`.
    #[arg(long, default_value_t = Bandwidth::Auto, allow_negative_numbers = true)]
    pub b: Bandwidth,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub solver: SolverArgs,

    /// Follow the fit with a one-step higher-order refinement.
    #[arg(long = "one-step")]
    pub one_step: bool,
    #[command(flatten)]
    pub refine: RefineArgs,
}

#[derive(Debug, Args)]
pub struct BootstrapArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub solver: SolverArgs,

    /// Number of bootstrap replicates.
    #[arg(long = "B", alias = "reps", default_value_t = 1000)]
    pub reps: usize,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Comma-separated interval methods: per, piv, norm, normal.
    #[arg(long, value_delimiter = ',', default_value = "per,piv,norm")]
    pub method: Vec<CiMethod>,

    /// Significance level; intervals have level 1 - alpha.
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
}

#[derive(Debug, Args)]
pub struct OneStepArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[command(flatten)]
    pub refine: RefineArgs,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Experiment spec (`.toml` or `.json`).
    #[arg(long)]
    pub spec: PathBuf,

    /// Also write the tidy per-rep CSV here.
    #[arg(long)]
    pub csv: Option<PathBuf>,

    /// Zero wall-clock fields so repeated runs are byte-identical.
    #[arg(long = "no-timing")]
    pub no_timing: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Comma-separated sample sizes.
    #[arg(long = "n", value_delimiter = ',', default_value = "1000,5000,20000")]
    pub sizes: Vec<usize>,

    #[arg(long, default_value_t = 0.5)]
    pub tau: f64,

    #[arg(long, default_value_t = KernelKind::Gaussian)]
    pub kernel: KernelKind,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}
