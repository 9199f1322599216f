//! Trains a classifier from unlabeled sets on a three-class Gaussian task,
//! wiring the pieces by hand, and compares it with FedAvg on the true labels.
//!
//! `cargo run --release --example fedul_gaussian`

use fedul::baselines::supervised_fraction_objective;
use fedul::data::{gen_gaussian_task, sample_test_set, sample_u_sets};
use fedul::federation::{
    client_init, rng_stream, streams, ClientState, Federation, LocalSettings, ServerState,
};
use fedul::nn::{Activation, ModelParams};
use fedul::priors::sample_prior_matrix;

fn main() -> fedul::Result<()> {
    let (seed, classes, clients, sets, rounds) = (1, 3, 5, 6, 60);
    let task = gen_gaussian_task(classes, 2, 1.7, &mut rng_stream(seed, streams::TASK))?;
    let bayes = task.bayes_error_monte_carlo(100_000, &mut rng_stream(seed, 99)).unwrap_or(f64::NAN);
    let test = sample_test_set(&task, task.test_prior(), 5000, &mut rng_stream(seed, streams::TEST_SET))?;
    let init = ModelParams::init(2, &[32], Activation::Relu, classes, &mut rng_stream(seed, streams::MODEL_INIT))?;
    let settings = LocalSettings { epochs: 1, batch_size: 128, l1_weight: 0.0 };

    let usets = (0..clients)
        .map(|c| {
            let mut rng = rng_stream(seed, streams::client_data(c));
            let priors = sample_prior_matrix(classes, sets, 0.1, 0.9, &mut rng)?;
            sample_u_sets(c, &task, &priors, &vec![400; sets], &mut rng)
        })
        .collect::<fedul::Result<Vec<_>>>()?;

    let unlabeled = usets
        .iter()
        .map(|u| client_init(u, task.test_prior(), sets, &init, settings, seed))
        .collect::<fedul::Result<Vec<_>>>()?;
    let labeled = usets
        .iter()
        .map(|u| {
            let obj = supervised_fraction_objective(u, 1.0, &mut rng_stream(seed, 0))?;
            ClientState::new(u.client(), Box::new(obj), &init, settings, seed)
        })
        .collect::<fedul::Result<Vec<_>>>()?;

    for (name, clients) in [("unlabeled sets", unlabeled), ("true labels", labeled)] {
        let mut fed = Federation {
            server: ServerState::new(init.clone(), 1.0),
            clients,
            test_set: test.clone(),
            client_test_sets: None,
            local_lr: 1e-3,
            record_timing: false,
        };
        let curve = fed.run_training(rounds, |m| {
            if m.round % 20 == 0 {
                println!("  [{name}] round {:>3} test error {:.4}", m.round, m.test_error);
            }
            Ok(())
        })?;
        println!("{name}: final test error {:.4}", curve.last().unwrap().test_error);
    }
    println!("Monte Carlo Bayes error {bayes:.4}");
    Ok(())
}
