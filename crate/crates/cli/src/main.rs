use clap::Parser;
use riskshare_cli::{load, run, Command, RunOptions};
use std::path::PathBuf;
use std::process::ExitCode;

/// Optimal risk sharing, diagnostics and capital requirements on finite
/// scenario spaces.
#[derive(Debug, Parser)]
#[command(name = "riskshare", version)]
struct Args {
    #[arg(value_enum)]
    command: Command,
    /// Scenario file (TOML).
    #[arg(long)]
    scenario: PathBuf,
    /// Output directory for report.txt and the CSV tables.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    tolerance: Option<f64>,
    /// Box bound on intercepts or security coordinates.
    #[arg(long = "box")]
    box_bound: Option<f64>,
    /// Grid spacing of the brute-force oracle.
    #[arg(long)]
    grid: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let options = RunOptions {
        tolerance: args.tolerance,
        box_bound: args.box_bound,
        grid: args.grid,
        seed: args.seed,
    };
    let result = load(&args.scenario).and_then(|s| run(args.command, &s, &args.out, &options));
    match result {
        Ok(outcome) => {
            if !outcome.checks_passed {
                eprintln!("warning: checks failed; results were computed anyway");
            }
            ExitCode::from(outcome.exit_code())
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
