//! `lpfa`: exploratory factor analysis with L^p component-loss rotation,
//! LASSO estimation, BIC model selection and post-selection intervals.

mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use report::Format;

pub const EXIT_INPUT: u8 = 2;
pub const EXIT_IDENTIFICATION: u8 = 3;
pub const EXIT_NOT_CONVERGED: u8 = 4;
pub const EXIT_NO_MODEL: u8 = 5;

/// A failed command: exit status and message.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn input(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_INPUT,
            message: message.into(),
        }
    }
}

impl From<lpfa::Error> for Failure {
    fn from(e: lpfa::Error) -> Self {
        Self::from(&e)
    }
}

impl From<&lpfa::Error> for Failure {
    fn from(e: &lpfa::Error) -> Self {
        use lpfa::Error as E;
        let code = match e {
            E::SingularCovariance { .. }
            | E::RankDeficient(_)
            | E::DegenerateColumn { .. }
            | E::NonIdentified { .. }
            | E::NoStandardErrors => EXIT_IDENTIFICATION,
            E::NotConverged { .. } => EXIT_NOT_CONVERGED,
            E::NoAdmissibleModel { .. } => EXIT_NO_MODEL,
            _ => EXIT_INPUT,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "lpfa",
    version,
    about = "L^p component-loss rotation and sparse estimation for factor analysis"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Maximum-likelihood EFA with orthogonal factors.
    Fit(FitArgs),
    /// EFA followed by an oblique rotation (L^p, quartimin or geomin).
    Rotate(RotateArgs),
    /// L^1-penalised maximum likelihood over one or more γ values.
    Lasso(LassoArgs),
    /// Rotation, hard-thresholding with BIC selection, CFA refit and
    /// post-selection intervals.
    Select(SelectArgs),
    /// Post-selection intervals for a given sign pattern.
    Ci(CiArgs),
    /// Seeded simulation study on a shipped fixture.
    Simulate(SimulateArgs),
    /// Criterion values over the 2×2 rotation grid for a two-factor matrix.
    Contour(ContourArgs),
}

#[derive(Args, Debug, Clone)]
pub struct InputArgs {
    /// CSV of raw responses (header = variable names) or, with
    /// --covariance, a J×J covariance matrix.
    #[arg(long)]
    pub input: PathBuf,
    /// Treat the input as a covariance matrix.
    #[arg(long)]
    pub covariance: bool,
    /// Sample size; required with --covariance.
    #[arg(long)]
    pub n_obs: Option<usize>,
    /// Divide by N - 1 instead of N when forming the covariance.
    #[arg(long)]
    pub bessel: bool,
    /// Number of factors K (taken from the pattern for `ci`).
    #[arg(long)]
    pub factors: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct OutputArgs {
    /// Report destination; stdout when omitted.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    /// Also write the loading table as CSV.
    #[arg(long)]
    pub loadings_csv: Option<PathBuf>,
    /// TOML file whose [subcommand] table supplies default flag values.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct EfaArgs {
    /// Projected-gradient tolerance of the initial ML fit.
    #[arg(long, default_value_t = 1e-7)]
    pub efa_tol: f64,
    #[arg(long, default_value_t = 5000)]
    pub efa_max_iter: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SmoothArg {
    Quartimin,
    Geomin,
}

#[derive(Args, Debug, Clone)]
pub struct RotationArgs {
    /// Exponent of the L^p component loss, in (0, 1].
    #[arg(long, required_unless_present = "criterion", conflicts_with = "criterion")]
    pub p: Option<f64>,
    /// Smooth rotation criterion instead of L^p.
    #[arg(long, value_enum)]
    pub criterion: Option<SmoothArg>,
    /// Final smoothing constant of the L^p loss.
    #[arg(long, default_value_t = 1e-4)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 0.01)]
    pub geomin_eps: f64,
    /// Seeded random starts added for p < 1.
    #[arg(long, default_value_t = 10)]
    pub random_starts: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10_000)]
    pub max_iter: usize,
    /// Rotate with L^q first and start the requested rotation there.
    #[arg(long)]
    pub warm_from_p: Option<f64>,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    efa: EfaArgs,
    #[command(flatten)]
    out: OutputArgs,
}

#[derive(Args, Debug)]
struct RotateArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    efa: EfaArgs,
    #[command(flatten)]
    rotation: RotationArgs,
    /// Loading table to align the solution to (column order and signs).
    #[arg(long)]
    align_to: Option<PathBuf>,
    /// Write the L^p criterion over the 2×2 rotation grid around the
    /// solution to this CSV (two factors only).
    #[arg(long)]
    contour: Option<PathBuf>,
    #[arg(long, default_value_t = 720)]
    contour_grid: usize,
    #[command(flatten)]
    out: OutputArgs,
}

#[derive(Args, Debug)]
struct LassoArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Penalty weights; several values are solved as a warm-started path.
    #[arg(long, value_delimiter = ',', required = true)]
    gamma: Vec<f64>,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long, default_value_t = 20_000)]
    max_iter: usize,
    #[command(flatten)]
    out: OutputArgs,
}

#[derive(Args, Debug, Clone)]
pub struct GridArgs {
    /// Explicit ascending threshold grid; overrides --grid-lo/hi/n.
    #[arg(long, value_delimiter = ',')]
    pub thresholds: Vec<f64>,
    #[arg(long, default_value_t = 0.05)]
    pub grid_lo: f64,
    #[arg(long, default_value_t = 0.5)]
    pub grid_hi: f64,
    #[arg(long, default_value_t = 20)]
    pub grid_n: usize,
}

#[derive(Args, Debug, Clone)]
pub struct CfaArgs {
    #[arg(long, default_value_t = 1e-7)]
    pub cfa_tol: f64,
    #[arg(long, default_value_t = 5000)]
    pub cfa_max_iter: usize,
    /// Information-matrix condition number above which a model counts as
    /// not identified.
    #[arg(long, default_value_t = 1e8)]
    pub ident_cutoff: f64,
}

#[derive(Args, Debug)]
struct SelectArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    efa: EfaArgs,
    #[command(flatten)]
    rotation: RotationArgs,
    #[command(flatten)]
    grid: GridArgs,
    #[command(flatten)]
    cfa: CfaArgs,
    /// Interval level is 1 - alpha.
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Skip the post-selection intervals.
    #[arg(long)]
    no_intervals: bool,
    /// Long-format CSV of estimates and intervals.
    #[arg(long)]
    intervals_csv: Option<PathBuf>,
    #[command(flatten)]
    out: OutputArgs,
}

#[derive(Args, Debug)]
struct CiArgs {
    #[command(flatten)]
    input: InputArgs,
    /// J×K table of -1, 0 and 1 giving the selected sign pattern.
    #[arg(long)]
    pattern: PathBuf,
    #[command(flatten)]
    cfa: CfaArgs,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long)]
    intervals_csv: Option<PathBuf>,
    #[command(flatten)]
    out: OutputArgs,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// One of the shipped fixtures.
    #[arg(long, default_value = "study1-15x3")]
    fixture: String,
    #[arg(long, value_delimiter = ',', default_values_t = [400, 800, 1600])]
    sample_sizes: Vec<usize>,
    #[arg(long, default_value_t = 50)]
    replications: usize,
    #[arg(long)]
    seed: u64,
    /// Any of lp_rotation, smooth_rotation, lasso.
    #[arg(long, value_delimiter = ',', default_values_t = ["lp_rotation".to_string(), "lasso".to_string()])]
    methods: Vec<String>,
    #[arg(long, value_delimiter = ',', default_values_t = [0.5, 1.0])]
    p_values: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [0.01, 0.05, 0.1, 0.2, 0.5])]
    gammas: Vec<f64>,
    /// Any of quartimin, geomin.
    #[arg(long, value_delimiter = ',', default_values_t = ["quartimin".to_string(), "geomin".to_string()])]
    smooth_criteria: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    thresholds: Vec<f64>,
    /// Skip the BIC selection step for rotation methods.
    #[arg(long)]
    no_select: bool,
    /// Compute post-selection intervals for the coverage table.
    #[arg(long)]
    intervals: bool,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, default_value_t = 1e-4)]
    epsilon: f64,
    #[arg(long, default_value_t = 10)]
    random_starts: usize,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    /// Directory receiving the CSV tables.
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ContourArgs {
    /// Shipped two-factor fixture, e.g. example-7x2.
    #[arg(long, required_unless_present = "loadings", conflicts_with = "loadings")]
    fixture: Option<String>,
    /// J×2 loading table.
    #[arg(long)]
    loadings: Option<PathBuf>,
    #[arg(long)]
    p: f64,
    /// Grid points per angle.
    #[arg(long, default_value_t = 720)]
    grid: usize,
    /// CSV destination of the grid (theta1, theta2, value).
    #[arg(long)]
    grid_csv: PathBuf,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
    #[arg(long)]
    config: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Fit(a) => commands::fit(&a.input, &a.efa, &a.out),
        Command::Rotate(a) => commands::rotate(
            &a.input,
            &a.efa,
            &a.rotation,
            a.align_to.as_deref(),
            a.contour.as_deref().map(|p| (p, a.contour_grid)),
            &a.out,
        ),
        Command::Lasso(a) => commands::lasso(&a.input, &a.gamma, a.tol, a.max_iter, &a.out),
        Command::Select(a) => commands::select(
            &a.input,
            &a.efa,
            &a.rotation,
            &a.grid,
            &a.cfa,
            (!a.no_intervals).then_some(a.alpha),
            a.intervals_csv.as_deref(),
            &a.out,
        ),
        Command::Ci(a) => commands::ci(
            &a.input,
            &a.pattern,
            &a.cfa,
            a.alpha,
            a.intervals_csv.as_deref(),
            &a.out,
        ),
        Command::Simulate(a) => {
            let spec = commands::SimulateRequest {
                fixture: a.fixture,
                sample_sizes: a.sample_sizes,
                replications: a.replications,
                seed: a.seed,
                methods: a.methods,
                p_values: a.p_values,
                gammas: a.gammas,
                smooth_criteria: a.smooth_criteria,
                thresholds: a.thresholds,
                select: !a.no_select,
                intervals: a.intervals,
                alpha: a.alpha,
                epsilon: a.epsilon,
                random_starts: a.random_starts,
            };
            commands::simulate(spec, a.jobs, &a.out_dir, a.format)
        }
        Command::Contour(a) => commands::contour(
            a.fixture.as_deref(),
            a.loadings.as_deref(),
            a.p,
            a.grid,
            &a.grid_csv,
            a.output.as_deref(),
            a.format,
        ),
    }
}

fn main() -> ExitCode {
    let args = match config::expand_args(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(EXIT_INPUT);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_INPUT)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
