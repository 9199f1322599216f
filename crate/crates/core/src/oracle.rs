//! Self-checks with known answers. `fedul-lab oracle` prints their results.

use ndarray::Array2;
use rand::{Rng, RngExt};
use serde::Serialize;

use crate::error::Result;
use crate::federation::rng_stream;
use crate::nn::{forward_cached, grad_check, Activation, Batch, ModelParams};
use crate::priors::{PriorRole, PriorVector};
use crate::transition::{
    apply_transition, bayes_oracle_discrete, build_transition_matrix, recover_eta,
    DiscreteInstance, SurrogatePriorMode,
};

/// Worst discrepancy seen by one suite.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleCheck {
    pub name: &'static str,
    pub cases: usize,
    pub max_discrepancy: f64,
    pub tolerance: f64,
}

impl OracleCheck {
    pub fn passed(&self) -> bool {
        self.max_discrepancy < self.tolerance
    }
}

fn random_posterior<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

/// Surrogate posteriors from direct Bayes inversion vs. the transition head,
/// on random finite-domain instances.
pub fn bayes_suite(seed: u64, cases: usize) -> Result<OracleCheck> {
    let mut rng = rng_stream(seed, 1);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let k = rng.random_range(2..=5);
        let active = rng.random_range(k..=8);
        let total = active + rng.random_range(0..=2);
        let domain = rng.random_range(1..=10);
        let mode = if rng.random::<bool>() {
            SurrogatePriorMode::Arbitrary
        } else {
            SurrogatePriorMode::FromCounts
        };
        let inst = DiscreteInstance::random(domain, k, active, total, mode, &mut rng)?;
        worst = worst.max(bayes_oracle_discrete(&inst)?);
    }
    Ok(OracleCheck {
        name: "bayes_inversion",
        cases,
        max_discrepancy: worst,
        tolerance: 1e-12,
    })
}

/// Round trips `η → Q(η) → η` through random transition heads.
pub fn injectivity_suite(seed: u64, cases: usize) -> Result<OracleCheck> {
    let mut rng = rng_stream(seed, 2);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let k = rng.random_range(2..=6);
        let m = rng.random_range(k..=10);
        let inst = DiscreteInstance::random(1, k, m, m, SurrogatePriorMode::Arbitrary, &mut rng)?;
        let head = build_transition_matrix(&inst.test_prior, &inst.surrogate_prior, &inst.priors, m)?;
        let eta = random_posterior(k, &mut rng);
        let back = recover_eta(&head, &apply_transition(&head, &eta)?)?;
        let err = eta.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst = worst.max(err);
    }
    Ok(OracleCheck {
        name: "injectivity",
        cases,
        max_discrepancy: worst,
        tolerance: 1e-8,
    })
}

/// With identity priors and matching surrogate prior the head is the identity.
pub fn identity_suite(seed: u64, cases: usize) -> Result<OracleCheck> {
    let mut rng = rng_stream(seed, 3);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let k = rng.random_range(2..=8);
        let pi = PriorVector::new(random_posterior(k, &mut rng), PriorRole::Test)?;
        let pibar = PriorVector::new(pi.values().to_vec(), PriorRole::Surrogate)?;
        let head = build_transition_matrix(&pi, &pibar, &crate::priors::ClassPriorMatrix::identity(k), k)?;
        let eta = random_posterior(k, &mut rng);
        let q = apply_transition(&head, &eta)?;
        let err = eta.iter().zip(&q).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst = worst.max(err);
    }
    Ok(OracleCheck {
        name: "identity_head",
        cases,
        max_discrepancy: worst,
        tolerance: 1e-15,
    })
}

const KINK_MARGIN: f64 = 1e-3;

/// Analytic gradients against central differences, with and without the head.
pub fn gradient_suite(seed: u64, cases: usize) -> Result<OracleCheck> {
    let mut rng = rng_stream(seed, 4);
    let mut worst = 0.0f64;
    for case in 0..cases {
        let k = rng.random_range(2..=4);
        let d = rng.random_range(1..=4);
        let hidden: Vec<usize> = (0..rng.random_range(0..=2))
            .map(|_| rng.random_range(2..=5))
            .collect();
        let act = if case % 2 == 0 {
            Activation::Linear
        } else {
            Activation::Relu
        };
        let n = rng.random_range(1..=6);
        // Finite differences are meaningless across a rectifier kink; redraw
        // until every hidden pre-activation is clear of zero.
        let (params, x) = loop {
            let params = ModelParams::init(d, &hidden, act, k, &mut rng)?;
            let x = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.5..1.5));
            if forward_cached(&params, x.view())?.min_abs_preactivation() > KINK_MARGIN {
                break (params, x);
            }
        };
        let with_head = case % 3 != 0;
        let (m, head) = if with_head {
            let m = rng.random_range(k..=k + 3);
            let inst = DiscreteInstance::random(1, k, m, m, SurrogatePriorMode::Arbitrary, &mut rng)?;
            let head = build_transition_matrix(&inst.test_prior, &inst.surrogate_prior, &inst.priors, m)?;
            (m, Some(head))
        } else {
            (k, None)
        };
        let labels = (0..n).map(|_| rng.random_range(0..m)).collect();
        let batch = Batch::new(x, labels, m)?;
        let l1 = if case % 4 == 1 { 1e-3 } else { 0.0 };
        worst = worst.max(grad_check(&params, &batch, head.as_ref(), l1, 1e-5)?);
    }
    Ok(OracleCheck {
        name: "gradients",
        cases,
        max_discrepancy: worst,
        tolerance: 1e-4,
    })
}

/// Every suite at its default size.
pub fn run_oracles(seed: u64) -> Result<Vec<OracleCheck>> {
    Ok(vec![
        bayes_suite(seed, 100)?,
        identity_suite(seed, 100)?,
        injectivity_suite(seed, 1000)?,
        gradient_suite(seed, 60)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_suites_pass() {
        for check in run_oracles(11).unwrap() {
            assert!(check.passed(), "{check:?}");
        }
    }
}
