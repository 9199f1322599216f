//! Prints per-client class profiles under the majority/minority split and the
//! resulting prior matrix of one client.

use fedul::data::allocate_clients_noniid;
use fedul::federation::rng_stream;
use fedul::priors::sample_prior_matrix_weighted;

fn main() -> fedul::Result<()> {
    let mut rng = rng_stream(5, 0);
    let profiles = allocate_clients_noniid(10, 5, 2, &mut rng)?;
    for (c, p) in profiles.iter().enumerate() {
        let shares: Vec<String> = p.iter().map(|v| format!("{:.3}", v)).collect();
        println!("client {c}: {}", shares.join(" "));
    }
    let priors = sample_prior_matrix_weighted(10, 10, 0.1, 0.9, Some(&profiles[0]), 100, &mut rng)?;
    println!("client 0 prior rows:");
    for row in priors.to_rows() {
        let shares: Vec<String> = row.iter().map(|v| format!("{:.3}", v)).collect();
        println!("  {}", shares.join(" "));
    }
    Ok(())
}
