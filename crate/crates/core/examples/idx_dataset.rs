//! Writes a small synthetic IDX image/label pair, then trains from unlabeled
//! sets on it through a config with an `idx` task. Point `images`/`labels` at
//! real MNIST files to use them instead.

use fedul::data::encode_idx;
use fedul::experiment::{run_experiment, summary_table, ExperimentConfig};
use fedul::federation::rng_stream;
use rand::RngExt;

fn main() -> fedul::Result<()> {
    // Three classes of 4x4 images, each brightening a different band of rows.
    let mut rng = rng_stream(0, 0);
    let (n, side) = (600usize, 4u32);
    let mut pixels = Vec::with_capacity(n * 16);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = (i % 3) as u8;
        labels.push(y);
        for p in 0..16 {
            let hot = (p / 4) as u8 == y;
            let base: f64 = if hot { 200.0 } else { 40.0 };
            pixels.push((base + rng.random_range(-40.0..40.0)) as u8);
        }
    }
    let (img, lab) = encode_idx(side, side, &pixels, &labels);
    let dir = std::env::temp_dir().join("fedul-idx-example");
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("images.idx"), img)?;
    std::fs::write(dir.join("labels.idx"), lab)?;

    let config = ExperimentConfig::from_json(&format!(
        r#"{{
            "task": {{"kind": "idx", "images": {:?}, "labels": {:?}, "classes": 3}},
            "clients": 2, "sets": [3], "set_size": 100, "rounds": 30,
            "local_lr": 1e-2, "hidden": [8], "seeds": [1]
        }}"#,
        dir.join("images.idx"),
        dir.join("labels.idx"),
    ))?;
    print!("{}", summary_table(&run_experiment(&config, None, 1)?));
    Ok(())
}
