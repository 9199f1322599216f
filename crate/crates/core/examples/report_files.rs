//! Loads a config file, runs it, and writes metrics.csv, summary.json and
//! summary.txt. Defaults to `examples/configs/quick.json`.
//!
//! `cargo run --release --example report_files -- path/to/config.json out_dir`

use std::path::PathBuf;

use fedul::experiment::{emit_report, Experiment, ExperimentConfig, Format};

fn main() -> fedul::Result<()> {
    let mut args = std::env::args().skip(1);
    let config = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("examples/configs/quick.json"));
    let out = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("fedul-report"));
    let experiment = Experiment::new(ExperimentConfig::from_path(&config)?)?;
    let report = experiment.run(Some(&out.join("runs")), 2)?;
    for path in emit_report(&report, &out, &Format::ALL)? {
        println!("wrote {}", path.display());
    }
    Ok(())
}
