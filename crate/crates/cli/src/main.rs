//! `mfckit`: command-line front end for the mean-field control solvers.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use commands::Failure;
use manifest::RunManifest;

#[derive(Parser)]
#[command(name = "mfckit", version, about = "Linear-quadratic mean-field control by Riccati flows and reproducing kernels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve a problem file and write trajectories and a summary.
    Solve(SolveArgs),
    /// Run the built-in consistency checks.
    Verify(VerifyArgs),
    /// Write the kernel blocks on a lattice of grid nodes.
    ExportKernel(ExportArgs),
}

#[derive(Args)]
pub struct CommonArgs {
    /// Output directory.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// RNG seed; overrides the file and falls back to MFCKIT_SEED.
    #[arg(long, env = "MFCKIT_SEED")]
    pub seed: Option<u64>,
    /// Number of grid steps, overriding the file.
    #[arg(long)]
    pub grid_k: Option<usize>,
    /// Fixed-point tolerance for `solve`, check threshold for `verify`.
    #[arg(long)]
    pub tol: Option<f64>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Cos,
    Kernel,
    Nonlinear,
    Stochastic,
    KernelStochastic,
    Oracle,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Cos => "cos",
            Method::Kernel => "kernel",
            Method::Nonlinear => "nonlinear",
            Method::Stochastic => "stochastic",
            Method::KernelStochastic => "kernel-stochastic",
            Method::Oracle => "oracle",
        }
    }
}

#[derive(Args)]
pub struct SolveArgs {
    pub file: PathBuf,
    #[arg(long, value_enum, default_value = "cos")]
    pub method: Method,
    /// Monte Carlo paths for the stochastic methods.
    #[arg(long)]
    pub paths: Option<usize>,
    /// Coarse grid of the brute-force oracle; must divide the problem grid.
    #[arg(long)]
    pub coarse_k: Option<usize>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum FaultArg {
    FlipGammaSign,
}

#[derive(Args)]
pub struct VerifyArgs {
    /// Problem file to check instead of random problems.
    pub file: Option<PathBuf>,
    /// Check to run (repeatable); all checks by default.
    #[arg(long)]
    pub check: Vec<String>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long, value_enum, hide = true)]
    pub inject_fault: Option<FaultArg>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Args)]
pub struct ExportArgs {
    pub file: PathBuf,
    /// Keep every `stride`-th node in both time arguments.
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    /// Include the initial-state term of the kernel.
    #[arg(long)]
    pub initial_term: bool,
    #[command(flatten)]
    pub common: CommonArgs,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(commands::EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let (name, input, common) = match &cli.command {
        Command::Solve(a) => (format!("solve --method {}", a.method.name()), Some(a.file.as_path()), &a.common),
        Command::Verify(a) => ("verify".to_string(), a.file.as_deref(), &a.common),
        Command::ExportKernel(a) => ("export-kernel".to_string(), Some(a.file.as_path()), &a.common),
    };
    let mut manifest = RunManifest::new(name, input, &common.out);
    manifest.seed = common.seed;
    manifest.grid_k = common.grid_k;
    manifest.tolerance = common.tol;
    let result = match &cli.command {
        Command::Solve(a) => commands::solve(a, &mut manifest),
        Command::Verify(a) => commands::verify(a, &mut manifest),
        Command::ExportKernel(a) => commands::export_kernel(a, &mut manifest),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => report(&manifest, f),
    }
}

fn report(manifest: &RunManifest, f: Failure) -> ExitCode {
    if !matches!(f, Failure::ChecksFailed(_)) {
        eprintln!("error: {}", f.message());
    } else {
        eprintln!("{}", f.message());
    }
    commands::write_diagnostics(manifest, &f);
    ExitCode::from(f.code())
}
