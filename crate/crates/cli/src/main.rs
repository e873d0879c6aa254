mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use meanref_core::Error;

#[derive(Parser, Debug)]
#[command(name = "meanref-lq", version, about = "LQ control under the expected path constraint E[X_t] >= L_t")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve and write solution.csv and report.txt.
    Solve(RunArgs),
    /// Simulate the optimal feedback; writes meanpath.csv and summary.csv.
    Simulate(RunArgs),
    /// Parallelogram, fuzz, complementarity and duality checks; writes verify.csv.
    Verify(RunArgs),
    /// Run every stage of the penalty schedule; writes trace.csv.
    SweepN(RunArgs),
    /// Compare penalized values with the binomial-tree optimizer; writes compare.csv.
    OracleCompare(RunArgs),
}

#[derive(Args, Debug, Clone)]
pub struct RunArgs {
    /// Problem file (JSON).
    #[arg(long)]
    problem: PathBuf,
    /// Resample the problem onto N steps.
    #[arg(long)]
    grid: Option<usize>,
    /// Monte Carlo paths.
    #[arg(long)]
    paths: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// First penalty weight.
    #[arg(long)]
    n0: Option<f64>,
    /// Ratio between penalty weights.
    #[arg(long)]
    ratio: Option<f64>,
    /// Number of penalty stages.
    #[arg(long)]
    stages: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Fixed-point tolerance of each penalized solve.
    #[arg(long)]
    fp_tol: Option<f64>,
    /// Iteration cap of each penalized solve.
    #[arg(long)]
    max_iter: Option<usize>,
    /// Relaxation of the penalized iteration, in (0, 1].
    #[arg(long)]
    damping: Option<f64>,
    /// Relative feasibility tolerance.
    #[arg(long)]
    feas_tol: Option<f64>,
    /// Relative complementarity tolerance.
    #[arg(long)]
    comp_tol: Option<f64>,
    /// Tree depth for oracle-compare.
    #[arg(long, default_value_t = 10)]
    tree_steps: usize,
    /// Random policy pairs for the parallelogram check.
    #[arg(long, default_value_t = 20)]
    pairs: usize,
    /// Admissible perturbations for the verification fuzz.
    #[arg(long, default_value_t = 100)]
    trials: usize,
}

/// Exit status and machine-readable category of a failure.
fn classify(err: &Error) -> (u8, &'static str, Option<&str>) {
    match err {
        Error::Field { field, .. } => (2, "config", Some(field)),
        Error::Dimension(_) | Error::InvalidArgument(_) | Error::OutOfRange { .. } | Error::Io(_) => {
            (2, "config", None)
        }
        Error::Assumption(_) => (3, "assumption", None),
        Error::NonConvergence { .. } | Error::NonFinite(_) => (4, "nonconvergence", None),
        Error::Infeasible { .. } => (5, "infeasible", Some("L")),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string();
            let first = first.lines().next().unwrap_or("invalid arguments");
            let message = first.trim_start_matches("error: ");
            eprintln!("error code=2 kind=config field=<args> message={message}");
            return ExitCode::from(2);
        }
    };
    let result = match &cli.command {
        Command::Solve(a) => commands::solve(a).map(|_| 0),
        Command::Simulate(a) => commands::simulate(a).map(|_| 0),
        Command::Verify(a) => commands::verify(a),
        Command::SweepN(a) => commands::sweep(a).map(|_| 0),
        Command::OracleCompare(a) => commands::oracle_compare(a).map(|_| 0),
    };
    match result {
        Ok(0) => ExitCode::SUCCESS,
        Ok(failed) => {
            eprintln!("error code=1 kind=verification field=- message={failed} verification checks failed");
            ExitCode::from(1)
        }
        Err(err) => {
            let (code, kind, field) = classify(&err);
            let message = err.to_string().replace('\n', " ");
            eprintln!(
                "error code={code} kind={kind} field={} message={message}",
                field.unwrap_or("-")
            );
            ExitCode::from(code)
        }
    }
}
