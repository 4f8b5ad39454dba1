//! `recov`: fit the closed-form variance-component estimators to a CSV file,
//! run the simulation studies, and benchmark against spline REML.
//!
//! Exit codes: 0 success, 1 output I/O failure, 2 flag or config error,
//! 3 data or validation error, 4 numerical failure.

mod commands;
mod config;
mod manifest;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "recov", version, about = "Variance components of varying-coefficient mixed models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// File of `key = value` lines used for flags not given on the command line.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit the closed-form estimators to a dataset.
    Fit(FitArgs),
    /// Run a replication study on a simulation design.
    Simulate(SimulateArgs),
    /// Compare spline REML across knot counts with the closed-form estimator.
    BenchReml(BenchArgs),
    /// Print kernel moments.
    Moments(MomentsArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct FitArgs {
    /// Input CSV with a header row.
    #[arg(long)]
    pub data: PathBuf,
    /// Kernel half-width, in the units of `u`.
    #[arg(long)]
    pub bandwidth: f64,
    #[arg(long, default_value = "epanechnikov")]
    pub kernel: String,
    /// Number of coefficient functions (columns x1..xp).
    #[arg(long, default_value_t = 2)]
    pub p: usize,
    /// Number of random effects (columns z1..zq).
    #[arg(long, default_value_t = 2)]
    pub q: usize,
    /// Comma-separated covariate columns; overrides `--p`.
    #[arg(long, value_delimiter = ',')]
    pub x_cols: Option<Vec<String>>,
    /// Comma-separated random-effect columns; overrides `--q`.
    #[arg(long, value_delimiter = ',')]
    pub z_cols: Option<Vec<String>>,
    #[arg(long, default_value = "cluster")]
    pub cluster_col: String,
    #[arg(long, default_value = "u")]
    pub u_col: String,
    #[arg(long, default_value = "y")]
    pub y_col: String,
    /// `exact` fits at every observed u; `grid` interpolates from a grid.
    #[arg(long, default_value = "exact", value_parser = ["exact", "grid"])]
    pub eval_mode: String,
    #[arg(long, default_value_t = 200)]
    pub grid_size: usize,
    /// Regularize singular local fits instead of failing.
    #[arg(long)]
    pub ridge: bool,
    /// Fail on clusters with n_i <= q or rank-deficient Z_i instead of excluding them.
    #[arg(long)]
    pub strict: bool,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct DesignArgs {
    /// Clusters per replication.
    #[arg(long, default_value_t = 100)]
    pub m: usize,
    #[arg(long, default_value_t = 0.15)]
    pub bandwidth: f64,
    #[arg(long, default_value_t = 1.0)]
    pub sigma2: f64,
    /// Random effects; Sigma has variances 2 and covariances 1.5.
    #[arg(long, default_value_t = 2)]
    pub q: usize,
    #[arg(long, default_value_t = 100)]
    pub reps: usize,
    /// Index of the first replication.
    #[arg(long, default_value_t = 0)]
    pub first_rep: usize,
    /// Seeds every random draw; required.
    #[arg(long)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct SimulateArgs {
    /// `imp` runs the spline improvement study on the gaussian design.
    #[arg(long, value_parser = ["gaussian", "uniform_noise", "misspecified", "imp"])]
    pub scenario: String,
    #[command(flatten)]
    pub design: DesignArgs,
    /// Comma-separated: closed_form, reml@K.
    #[arg(long, default_value = "closed_form")]
    pub methods: String,
    /// Knot counts for `imp`: `7:15`, `7..15`, or a comma list.
    #[arg(long, default_value = "7:15")]
    pub knots: String,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct BenchArgs {
    #[arg(long, default_value = "gaussian", value_parser = ["gaussian", "uniform_noise", "misspecified"])]
    pub scenario: String,
    #[command(flatten)]
    pub design: DesignArgs,
    /// Interior knot counts: `6..10`, `6:10`, a comma list, or one value.
    #[arg(long, default_value = "6..10")]
    pub knots: String,
    /// Allow q > 3, where the simplex search is unreliable.
    #[arg(long)]
    pub force: bool,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct MomentsArgs {
    #[arg(long, default_value = "epanechnikov")]
    pub kernel: String,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: String) -> Self {
        Self { code: 2, message }
    }

    pub fn data(message: String) -> Self {
        Self { code: 3, message }
    }

    pub fn numerical(message: String) -> Self {
        Self { code: 4, message }
    }

    pub fn io(message: String) -> Self {
        Self { code: 1, message }
    }
}

impl From<recov::Error> for CliError {
    fn from(e: recov::Error) -> Self {
        use recov::Error as E;
        let code = match e.root() {
            E::InvalidBandwidth(_) | E::InvalidKernel(_) => 2,
            E::Schema(_)
            | E::Parse { .. }
            | E::EmptyDataset
            | E::InvalidData(_)
            | E::Cluster { .. }
            | E::TooFewClusters { .. }
            | E::DimensionMismatch(_)
            | E::Csv(_) => 3,
            E::Io(_) => 1,
            _ => 4,
        };
        Self { code, message: e.to_string() }
    }
}

impl From<recov_sim::SimError> for CliError {
    fn from(e: recov_sim::SimError) -> Self {
        use recov_sim::SimError as S;
        match e {
            S::Core(inner) => inner.into(),
            S::Config(m) => Self::usage(m),
            S::TooManyFailures { .. } => Self::numerical(e.to_string()),
            S::Csv(_) | S::Io(_) => Self::io(e.to_string()),
        }
    }
}

const SWITCHES: &[&str] = &["ridge", "strict", "force"];

fn run(args: Vec<OsString>) -> Result<(), CliError> {
    let args = config::merge_config(args, SWITCHES)?;
    let effective: Vec<String> = args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return Err(CliError {
                code: code as u8,
                message: String::new(),
            });
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::usage(format!("cannot configure threads: {e}")))?;
    }
    let ctx = commands::Context {
        arguments: effective,
        threads: cli.threads,
    };
    match cli.command {
        Command::Fit(a) => commands::fit(&a, ctx),
        Command::Simulate(a) => commands::simulate(&a, ctx),
        Command::BenchReml(a) => commands::bench_reml(&a, ctx),
        Command::Moments(a) => commands::moments(&a, ctx),
    }
}

fn main() -> ExitCode {
    match run(std::env::args_os().collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if !e.message.is_empty() {
                eprintln!("error: {}", e.message);
            }
            ExitCode::from(e.code)
        }
    }
}
