//! Builds a transition head from class priors, maps a class posterior to the
//! set posterior and back, and checks the head against exact Bayes inversion on
//! a small discrete problem.

use fedul::federation::rng_stream;
use fedul::priors::{estimate_surrogate_prior, ClassPriorMatrix, PriorRole, PriorVector};
use fedul::transition::{
    apply_transition, bayes_oracle_discrete, build_transition_matrix, recover_eta,
    DiscreteInstance, SurrogatePriorMode,
};

fn main() -> fedul::Result<()> {
    let priors = ClassPriorMatrix::from_rows(&[
        vec![0.7, 0.2, 0.1],
        vec![0.1, 0.6, 0.3],
        vec![0.2, 0.2, 0.6],
        vec![0.4, 0.4, 0.2],
    ])?;
    let test_prior = PriorVector::uniform(3, PriorRole::Test);
    let set_prior = estimate_surrogate_prior(&[300, 100, 200, 400], 4)?;
    let head = build_transition_matrix(&test_prior, &set_prior, &priors, 4)?;
    println!("set prior {:?}", set_prior.values());
    for row in head.to_rows() {
        println!("  T row {row:.4?}");
    }

    let eta = [0.5, 0.3, 0.2];
    let q = apply_transition(&head, &eta)?;
    let back = recover_eta(&head, &q)?;
    println!("class posterior {eta:?}\nset posterior   {q:.6?}\nrecovered       {back:.12?}");

    let mut rng = rng_stream(7, 0);
    let inst = DiscreteInstance::random(8, 3, 5, 6, SurrogatePriorMode::FromCounts, &mut rng)?;
    println!("worst gap to exact Bayes inversion: {:.3e}", bayes_oracle_discrete(&inst)?);
    Ok(())
}
