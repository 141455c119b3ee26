//! Command-line front end: `run` a config, `verify` a criteria suite, or
//! `probe` a stored run. Exit codes: 0 ok, 2 config-invalid, 3 run-failed,
//! 4 verify-failed.

use clap::{Parser, Subcommand};
use lagflow::{cli, verify};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "lagflow", version, about = "Monte-Carlo particle-flow solver for incompressible flow on a truncated box")]
struct Args {
    #[command(subcommand)]
    command: Command,
    /// Worker threads (default: LAGFLOW_WORKERS env var, else automatic).
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a run config and persist its artifacts.
    Run {
        config: PathBuf,
        /// Output root; the run directory is named by config hash + seed.
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Run a named acceptance suite: operators | flow | solver | statistics | all.
    Verify {
        suite: String,
        /// Also write the result table as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Interpolate a stored velocity series at probe points and times.
    Probe {
        run_dir: PathBuf,
        /// CSV file of probe points (one x_1,..,x_d row per line).
        #[arg(long)]
        points: PathBuf,
        /// Comma-separated probe times.
        #[arg(long)]
        times: String,
    },
}

fn effective_workers(flag: Option<usize>) -> Option<usize> {
    flag.or_else(|| {
        std::env::var("LAGFLOW_WORKERS").ok().and_then(|v| v.parse().ok())
    })
}

fn main() -> ExitCode {
    let args = Args::parse();
    let workers = effective_workers(args.workers);
    match args.command {
        Command::Run { config, out } => match cli::run(&config, &out, workers) {
            Ok((record, run_dir)) => {
                println!("run {}: verdict {}", run_dir.display(), record.verdict);
                println!("  horizon {:.6}, {} snapshots", record.horizon, record.times.len());
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(e.exit_code() as u8)
            }
        },
        Command::Verify { suite, json } => {
            let Some(suite) = verify::Suite::parse(&suite) else {
                eprintln!("error: unknown suite {suite:?} (operators | flow | solver | statistics | all)");
                return ExitCode::from(2);
            };
            let results = cli::install_pool(workers, || verify::run_suite(suite));
            for r in &results {
                println!("{}", r.line());
            }
            if let Some(path) = json {
                match serde_json::to_string_pretty(&results) {
                    Ok(text) => {
                        if let Err(e) = std::fs::write(&path, text) {
                            eprintln!("error writing {}: {e}", path.display());
                            return ExitCode::from(3);
                        }
                    }
                    Err(e) => {
                        eprintln!("error serializing results: {e}");
                        return ExitCode::from(3);
                    }
                }
            }
            if results.iter().all(|r| r.pass) {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(4)
            }
        }
        Command::Probe { run_dir, points, times } => {
            let run = || -> Result<String, cli::CliError> {
                let text = std::fs::read_to_string(&points)?;
                let pts = cli::parse_points(&text)?;
                let times: Vec<f64> = times
                    .split(',')
                    .map(|s| s.trim().parse::<f64>())
                    .collect::<Result<_, _>>()
                    .map_err(|e| cli::CliError::Io(format!("bad time list: {e}")))?;
                cli::probe(&run_dir, &pts, &times)
            };
            match run() {
                Ok(csv) => {
                    print!("{csv}");
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(e.exit_code() as u8)
                }
            }
        }
    }
}
