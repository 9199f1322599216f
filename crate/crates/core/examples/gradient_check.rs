//! Compares backpropagated gradients with central finite differences for a
//! small network, with and without a transition head.

use fedul::federation::rng_stream;
use fedul::nn::{grad_check, Activation, Batch, ModelParams};
use fedul::priors::{ClassPriorMatrix, PriorRole, PriorVector};
use fedul::transition::build_transition_matrix;
use ndarray::Array2;
use rand::RngExt;

fn main() -> fedul::Result<()> {
    let mut rng = rng_stream(3, 0);
    let params = ModelParams::init(4, &[6], Activation::Linear, 3, &mut rng)?;
    let x = Array2::from_shape_fn((8, 4), |_| rng.random_range(-1.0..1.0));

    let plain = Batch::new(x.clone(), vec![0, 1, 2, 0, 1, 2, 0, 1], 3)?;
    println!("plain cross-entropy:   max rel error {:.2e}", grad_check(&params, &plain, None, 1e-3, 1e-5)?);

    let priors = ClassPriorMatrix::from_rows(&[
        vec![0.6, 0.3, 0.1],
        vec![0.2, 0.5, 0.3],
        vec![0.1, 0.2, 0.7],
        vec![0.3, 0.3, 0.4],
    ])?;
    let head = build_transition_matrix(
        &PriorVector::uniform(3, PriorRole::Test),
        &PriorVector::uniform(4, PriorRole::Surrogate),
        &priors,
        4,
    )?;
    let surrogate = Batch::new(x, vec![0, 1, 2, 3, 3, 2, 1, 0], 4)?;
    println!(
        "through the head:      max rel error {:.2e}",
        grad_check(&params, &surrogate, Some(&head), 1e-3, 1e-5)?
    );
    Ok(())
}
