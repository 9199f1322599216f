use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedul::experiment::{emit_report, summary_table, Experiment, ExperimentConfig, Format};
use fedul::oracle::run_oracles;
use fedul::Error;

/// Federated training from unlabeled sets: experiment runner and self-checks.
#[derive(Debug, Parser)]
#[command(name = "fedul-lab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run every grid entry and seed of a config and write reports.
    Run {
        config: PathBuf,
        /// Output directory; defaults to the config's `output`, then `results`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Runs trained in parallel.
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Comma-separated subset of csv, json, table.
        #[arg(long, value_delimiter = ',', default_value = "csv,json,table")]
        format: Vec<String>,
    },
    /// Parse and check a config without running it.
    Validate { config: PathBuf },
    /// Run the built-in consistency checks and print the worst discrepancies.
    Oracle {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Single-line JSON on stderr so scripts can parse it.
fn report_error(kind: &str, e: &Error) {
    let mut obj = serde_json::json!({ "error": kind, "message": e.to_string() });
    if let Error::Config { pointer, .. } = e {
        obj["pointer"] = pointer.clone().into();
    }
    eprintln!("{obj}");
}

fn run(config: PathBuf, out: Option<PathBuf>, workers: usize, format: Vec<String>) -> ExitCode {
    let formats = match format.iter().map(|f| f.parse()).collect::<Result<Vec<Format>, _>>() {
        Ok(f) => f,
        Err(e) => {
            report_error("usage", &e);
            return ExitCode::from(1);
        }
    };
    let experiment = match ExperimentConfig::from_path(&config).and_then(Experiment::new) {
        Ok(x) => x,
        Err(e) => {
            report_error("config", &e);
            return ExitCode::from(1);
        }
    };
    let dir = out
        .or_else(|| experiment.config().output.clone())
        .unwrap_or_else(|| PathBuf::from("results"));
    let report = match experiment
        .run(Some(&dir.join("runs")), workers)
        .and_then(|r| emit_report(&r, &dir, &formats).map(|_| r))
    {
        Ok(r) => r,
        Err(e) => {
            report_error("io", &e);
            return ExitCode::from(1);
        }
    };
    print!("{}", summary_table(&report));
    ExitCode::from(report.exit_code() as u8)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            config,
            out,
            workers,
            format,
        } => run(config, out, workers, format),
        Command::Validate { config } => match ExperimentConfig::from_path(&config) {
            Ok(c) => {
                println!(
                    "ok: {} grid entries x {} seeds",
                    c.grid().len(),
                    c.seeds.len()
                );
                ExitCode::SUCCESS
            }
            Err(e) => {
                report_error("config", &e);
                ExitCode::from(1)
            }
        },
        Command::Oracle { seed } => match run_oracles(seed) {
            Ok(checks) => {
                println!("{:<16} {:>6} {:>14} {:>10}  status", "suite", "cases", "max_discrepancy", "tolerance");
                let mut ok = true;
                for c in &checks {
                    ok &= c.passed();
                    println!(
                        "{:<16} {:>6} {:>14.3e} {:>10.0e}  {}",
                        c.name,
                        c.cases,
                        c.max_discrepancy,
                        c.tolerance,
                        if c.passed() { "ok" } else { "FAIL" }
                    );
                }
                if ok {
                    ExitCode::SUCCESS
                } else {
                    ExitCode::from(2)
                }
            }
            Err(e) => {
                report_error("oracle", &e);
                ExitCode::from(1)
            }
        },
    }
}
