//! The fixed transition head mapping a class posterior onto the surrogate
//! set-membership posterior, its brute-force Bayes oracle, and its inverse.
//!
//! For a client with set priors `Π` (`M_c × K`), surrogate prior `π̄` and test
//! prior `π`, the unnormalized head is `T = D_π̄ · Π · D_π⁻¹`, padded with zero
//! rows up to the federation-wide set count `M`. Applying the head is
//! `η̄ = Tη / Σ(Tη)`.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2};
use rand::{Rng, RngExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::priors::{sample_prior_matrix, ClassPriorMatrix, PriorRole, PriorVector};

/// Residual tolerance accepted by [`recover_eta`].
pub const RECOVERY_TOLERANCE: f64 = 1e-8;

/// `M × K` nonnegative matrix `D_π̄ Π D_π⁻¹`, rows past the client's own set count are zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionMatrix {
    matrix: Array2<f64>,
    active_sets: usize,
}

impl TransitionMatrix {
    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    /// Padded surrogate dimension `M`.
    pub fn sets(&self) -> usize {
        self.matrix.nrows()
    }

    /// Number of non-padded rows `M_c`.
    pub fn active_sets(&self) -> usize {
        self.active_sets
    }

    pub fn classes(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.matrix.rows().into_iter().map(|r| r.to_vec()).collect()
    }
}

/// Builds `T[m][k] = π̄^m Π[m][k] / π^k`, padding rows `m ≥ M_c` with zeros.
pub fn build_transition_matrix(
    test_prior: &PriorVector,
    surrogate_prior: &PriorVector,
    priors: &ClassPriorMatrix,
    total_sets: usize,
) -> Result<TransitionMatrix> {
    let (active, classes) = (priors.sets(), priors.classes());
    let violations = crate::priors::validate_prior_matrix(priors);
    if !violations.is_empty() {
        return Err(Error::InvalidPriors(
            violations
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join("; "),
        ));
    }
    if test_prior.len() != classes {
        return Err(Error::Shape(format!(
            "test prior has {} entries, priors have {classes} classes",
            test_prior.len()
        )));
    }
    if surrogate_prior.len() != total_sets || total_sets < active {
        return Err(Error::Shape(format!(
            "surrogate prior has {} entries; expected padded length {total_sets} >= {active}",
            surrogate_prior.len()
        )));
    }
    if let Some(k) = test_prior.values().iter().position(|&p| p == 0.0) {
        return Err(Error::SingularPrior { class: k });
    }
    if let Some(m) = surrogate_prior.values()[active..].iter().position(|&v| v != 0.0) {
        return Err(Error::InvalidArgument(format!(
            "padded surrogate prior entry {} is non-zero",
            active + m
        )));
    }
    let pi = test_prior.values();
    let pibar = surrogate_prior.values();
    let mut matrix = Array2::zeros((total_sets, classes));
    for m in 0..active {
        for k in 0..classes {
            matrix[[m, k]] = pibar[m] * priors.entries()[[m, k]] / pi[k];
        }
    }
    Ok(TransitionMatrix {
        matrix,
        active_sets: active,
    })
}

/// Maps a class posterior `η` to the surrogate posterior `Tη / Σ(Tη)`.
pub fn apply_transition(head: &TransitionMatrix, eta: &[f64]) -> Result<Vec<f64>> {
    if eta.len() != head.classes() {
        return Err(Error::Shape(format!(
            "posterior has {} entries, head expects {}",
            eta.len(),
            head.classes()
        )));
    }
    let q = head.matrix.dot(&Array1::from(eta.to_vec()));
    let total: f64 = q.sum();
    if !(total > 0.0) {
        return Err(Error::Invariant(format!(
            "transition output sums to {total}"
        )));
    }
    Ok(q.iter().map(|v| v / total).collect())
}

/// Inverts [`apply_transition`].
///
/// Solves `[T, -η̄; 1ᵀ, 0] [η; s] = [0; 1]` in the least-squares sense, where `s`
/// is the normalizer `Σ(Tη)`. Errors if the recovered `η` does not reproduce `η̄`.
pub fn recover_eta(head: &TransitionMatrix, surrogate: &[f64]) -> Result<Vec<f64>> {
    let (m, k) = (head.sets(), head.classes());
    if surrogate.len() != m {
        return Err(Error::Shape(format!(
            "surrogate posterior has {} entries, head has {m} rows",
            surrogate.len()
        )));
    }
    let mut a = DMatrix::<f64>::zeros(m + 1, k + 1);
    for i in 0..m {
        for j in 0..k {
            a[(i, j)] = head.matrix[[i, j]];
        }
        a[(i, k)] = -surrogate[i];
    }
    for j in 0..k {
        a[(m, j)] = 1.0;
    }
    let mut b = DVector::<f64>::zeros(m + 1);
    b[m] = 1.0;
    let solution = a
        .svd(true, true)
        .solve(&b, 1e-14)
        .map_err(|e| Error::Invariant(format!("least-squares solve failed: {e}")))?;
    let eta: Vec<f64> = solution.iter().take(k).copied().collect();
    let residual = match apply_transition(head, &eta) {
        Ok(back) => back
            .iter()
            .zip(surrogate)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max),
        Err(_) => f64::INFINITY,
    };
    if !(residual < RECOVERY_TOLERANCE) {
        return Err(Error::NotInImage { residual });
    }
    Ok(eta)
}

/// A finite-domain problem where every posterior can be computed exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteInstance {
    pub test_prior: PriorVector,
    pub surrogate_prior: PriorVector,
    pub priors: ClassPriorMatrix,
    /// `K × domain` table of `p(x | y = k)`.
    pub class_conditionals: Array2<f64>,
    /// Padded surrogate dimension `M`.
    pub total_sets: usize,
}

/// How [`DiscreteInstance::random`] chooses the surrogate prior.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SurrogatePriorMode {
    /// Any point in the simplex over the active sets.
    Arbitrary,
    /// Proportional to set sizes drawn as integers, as produced by data.
    FromCounts,
}

fn random_simplex<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Vec<f64> {
    let raw: Vec<f64> = (0..len).map(|_| rng.random_range(0.05..1.0)).collect();
    let s: f64 = raw.iter().sum();
    let mut v: Vec<f64> = raw.iter().map(|x| x / s).collect();
    // Put rounding slack on the first entry so the vector validates.
    let rest: f64 = v[1..].iter().sum();
    v[0] = 1.0 - rest;
    v
}

impl DiscreteInstance {
    /// A random instance with `active_sets` real sets padded to `total_sets`.
    pub fn random<R: Rng + ?Sized>(
        domain: usize,
        classes: usize,
        active_sets: usize,
        total_sets: usize,
        mode: SurrogatePriorMode,
        rng: &mut R,
    ) -> Result<Self> {
        if domain == 0 || classes == 0 || active_sets < classes || total_sets < active_sets {
            return Err(Error::InvalidArgument(format!(
                "bad instance shape: domain {domain}, K {classes}, M_c {active_sets}, M {total_sets}"
            )));
        }
        let test_prior = PriorVector::new(random_simplex(classes, rng), PriorRole::Test)?;
        let priors = sample_prior_matrix(classes, active_sets, 0.1, 0.9, rng)?;
        let mut pibar = match mode {
            SurrogatePriorMode::Arbitrary => random_simplex(active_sets, rng),
            SurrogatePriorMode::FromCounts => {
                let counts: Vec<usize> =
                    (0..active_sets).map(|_| rng.random_range(1..500)).collect();
                crate::priors::estimate_surrogate_prior(&counts, active_sets)?
                    .values()
                    .to_vec()
            }
        };
        pibar.resize(total_sets, 0.0);
        let surrogate_prior = PriorVector::new(pibar, PriorRole::Surrogate)?;
        let mut class_conditionals = Array2::zeros((classes, domain));
        for mut row in class_conditionals.rows_mut() {
            let pmf = random_simplex(domain, rng);
            row.iter_mut().zip(pmf).for_each(|(d, v)| *d = v);
        }
        Ok(Self {
            test_prior,
            surrogate_prior,
            priors,
            class_conditionals,
            total_sets,
        })
    }
}

/// Maximum absolute gap, over all domain points, between the surrogate posterior
/// computed by direct Bayes inversion of the joint and the transition head applied
/// to the directly computed class posterior.
///
/// Domain points with zero marginal probability are skipped.
pub fn bayes_oracle_discrete(instance: &DiscreteInstance) -> Result<f64> {
    let DiscreteInstance {
        test_prior,
        surrogate_prior,
        priors,
        class_conditionals,
        total_sets,
    } = instance;
    let classes = priors.classes();
    let active = priors.sets();
    if class_conditionals.nrows() != classes {
        return Err(Error::Shape("one conditional pmf per class required".into()));
    }
    let head = build_transition_matrix(test_prior, surrogate_prior, priors, *total_sets)?;
    let pi = test_prior.values();
    let pibar = surrogate_prior.values();
    let mut worst = 0.0f64;
    for x in 0..class_conditionals.ncols() {
        let px_given: Vec<f64> = (0..classes).map(|k| class_conditionals[[k, x]]).collect();

        // p(x, y = k) and p(y = k | x) under the test distribution.
        let joint: Vec<f64> = (0..classes).map(|k| pi[k] * px_given[k]).collect();
        let marginal: f64 = joint.iter().sum();
        if marginal <= 0.0 {
            continue;
        }
        let eta: Vec<f64> = joint.iter().map(|j| j / marginal).collect();

        // p̄(x, ȳ = m) = π̄^m Σ_k Π[m][k] p(x | k); padded sets have zero density.
        let surrogate_joint: Vec<f64> = (0..*total_sets)
            .map(|m| {
                if m >= active {
                    return 0.0;
                }
                let mixture: f64 = (0..classes)
                    .map(|k| priors.entries()[[m, k]] * px_given[k])
                    .sum();
                pibar[m] * mixture
            })
            .collect();
        let surrogate_marginal: f64 = surrogate_joint.iter().sum();
        if surrogate_marginal <= 0.0 {
            continue;
        }
        let head_out = apply_transition(&head, &eta)?;
        for (direct, via_head) in surrogate_joint.iter().zip(&head_out) {
            worst = worst.max((direct / surrogate_marginal - via_head).abs());
        }
    }
    Ok(worst)
}
