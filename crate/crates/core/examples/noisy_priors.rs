//! Sweeps the noise level on the class priors handed to clients and reports
//! how the final test error moves.

use fedul::experiment::{run_experiment, ExperimentConfig};

fn main() -> fedul::Result<()> {
    let mut config = ExperimentConfig::from_json(
        r#"{
            "task": {"kind": "gaussian", "classes": 3, "dim": 2, "separation": 1.7},
            "sets": [6], "rounds": 40, "local_lr": 1e-3, "hidden": [32], "seeds": [1, 2]
        }"#,
    )?;
    for noise in [0.0, 0.4, 0.8, 1.6] {
        config.prior_noise = noise;
        let report = run_experiment(&config, None, 1)?;
        let e = &report.entries[0];
        println!(
            "noise {noise:>3}: mean error {:.4}  failed runs {}",
            e.mean_error.unwrap_or(f64::NAN),
            e.failed_runs()
        );
    }
    Ok(())
}
