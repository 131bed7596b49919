//! `ndde`: dataset generation, training, gradient checks and demonstrations
//! for neural delay differential equations.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Failure classes, mapped to exit statuses 1 and 2.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Numerical(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) | CliError::Numerical(m) => f.write_str(m),
        }
    }
}

impl From<ndde::Error> for CliError {
    fn from(e: ndde::Error) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Config(e.to_string())
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Config(format!("i/o error: {e}"))
    }
}

#[derive(Parser)]
#[command(name = "ndde", version, about = "Neural delay differential equation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct RunArgs {
    /// Experiment configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides both the data and the training seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `[output] dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Gradient mode, `dense` or `piecewise`.
    #[arg(long)]
    pub mode: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the dataset described by a config.
    Gen(RunArgs),
    /// Train the model described by a config.
    Train(RunArgs),
    /// Compare adjoint gradients with finite differences at initialization.
    Gradcheck {
        #[command(flatten)]
        run: RunArgs,
        /// Number of training samples in the checked loss.
        #[arg(long, default_value_t = 4)]
        members: usize,
        #[arg(long, default_value_t = 1e-6)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Push the concentric-annulus data through the hand-built separating NDDE.
    DemoAnnulus {
        #[arg(long, default_value_t = 0.75)]
        r: f64,
        #[arg(long, default_value_t = 10.0)]
        tau: f64,
        #[arg(long, default_value_t = 1.0)]
        step: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "runs/demo_annulus")]
        out: PathBuf,
    },
    /// Trajectories of x' = -2 x(t - tau) and of x' = -2 x from -1 and +1.
    DemoMap {
        #[arg(long, default_value_t = 1.0)]
        tau: f64,
        #[arg(long, default_value_t = 1.0)]
        t1: f64,
        #[arg(long, default_value_t = 0.01)]
        step: f64,
        #[arg(long, default_value = "runs/demo_map")]
        out: PathBuf,
    },
    /// Tabulate the summaries of finished runs.
    Report {
        /// Run directories containing `summary.txt`.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Gen(a) => commands::gen(&a),
        Command::Train(a) => commands::train(&a),
        Command::Gradcheck { run, members, eps, tol } => commands::gradcheck(&run, members, eps, tol),
        Command::DemoAnnulus {
            r,
            tau,
            step,
            seed,
            out,
        } => commands::demo_annulus(r, tau, step, seed, &out),
        Command::DemoMap { tau, t1, step, out } => commands::demo_map(tau, t1, step, &out),
        Command::Report { runs, out } => commands::report(&runs, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                CliError::Config(_) => 1,
                CliError::Numerical(_) => 2,
            })
        }
    }
}
