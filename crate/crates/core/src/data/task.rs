use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, RngExt};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::priors::{PriorRole, PriorVector};

/// Per-class input distributions shared by every client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClassConditionals {
    /// Axis-aligned Gaussians; `means` and `variances` are `K × d`.
    Gaussian {
        means: Array2<f64>,
        variances: Array2<f64>,
    },
    /// Finite example pools, one `n_k × d` array per class, sampled with replacement.
    Pools { pools: Vec<Array2<f64>> },
}

/// A classification task: class-conditionals plus the test class prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    classes: usize,
    dim: usize,
    conditionals: Arc<ClassConditionals>,
    test_prior: PriorVector,
}

impl TaskSpec {
    pub fn new(conditionals: ClassConditionals, test_prior: PriorVector) -> Result<Self> {
        let (classes, dim) = match &conditionals {
            ClassConditionals::Gaussian { means, variances } => {
                if means.dim() != variances.dim() {
                    return Err(Error::Shape("means and variances differ in shape".into()));
                }
                if variances.iter().any(|&v| !(v > 0.0)) {
                    return Err(Error::InvalidArgument("variances must be positive".into()));
                }
                means.dim()
            }
            ClassConditionals::Pools { pools } => {
                let dim = pools.first().map(|p| p.ncols()).unwrap_or(0);
                if pools.iter().any(|p| p.ncols() != dim) {
                    return Err(Error::Shape("class pools differ in feature width".into()));
                }
                if let Some(k) = pools.iter().position(|p| p.nrows() == 0) {
                    return Err(Error::InvalidArgument(format!("class {k} has no examples")));
                }
                (pools.len(), dim)
            }
        };
        if classes < 2 {
            return Err(Error::InvalidArgument("a task needs at least two classes".into()));
        }
        if dim == 0 {
            return Err(Error::InvalidArgument("input dimension must be positive".into()));
        }
        if test_prior.len() != classes {
            return Err(Error::Shape(format!(
                "test prior has {} entries for {classes} classes",
                test_prior.len()
            )));
        }
        Ok(Self {
            classes,
            dim,
            conditionals: Arc::new(conditionals),
            test_prior,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn conditionals(&self) -> &ClassConditionals {
        &self.conditionals
    }

    pub fn shares_conditionals_with(&self, other: &TaskSpec) -> bool {
        Arc::ptr_eq(&self.conditionals, &other.conditionals)
    }

    pub fn test_prior(&self) -> &PriorVector {
        &self.test_prior
    }

    /// Same class-conditionals under a different test prior.
    pub fn with_test_prior(&self, test_prior: PriorVector) -> Result<Self> {
        if test_prior.len() != self.classes {
            return Err(Error::Shape("test prior length differs from class count".into()));
        }
        Ok(Self {
            test_prior,
            ..self.clone()
        })
    }

    /// Draws one input from `p(x | y = class)` into `out`.
    pub fn sample_into<R: Rng + ?Sized>(&self, class: usize, out: &mut [f64], rng: &mut R) {
        match &*self.conditionals {
            ClassConditionals::Gaussian { means, variances } => {
                for (j, o) in out.iter_mut().enumerate() {
                    let z: f64 = rng.sample(StandardNormal);
                    *o = means[[class, j]] + variances[[class, j]].sqrt() * z;
                }
            }
            ClassConditionals::Pools { pools } => {
                let pool = &pools[class];
                let i = rng.random_range(0..pool.nrows());
                out.iter_mut()
                    .zip(pool.row(i))
                    .for_each(|(o, &v)| *o = v);
            }
        }
    }

    /// Exact `p(y | x)` under `prior` for Gaussian tasks; `None` for pooled data.
    pub fn posterior(&self, x: ArrayView1<'_, f64>, prior: &[f64]) -> Option<Vec<f64>> {
        let ClassConditionals::Gaussian { means, variances } = &*self.conditionals else {
            return None;
        };
        let logs: Vec<f64> = (0..self.classes)
            .map(|k| {
                let mut acc = prior[k].ln();
                for j in 0..self.dim {
                    let v = variances[[k, j]];
                    let d = x[j] - means[[k, j]];
                    acc -= 0.5 * (d * d / v + v.ln());
                }
                acc
            })
            .collect();
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
        let s: f64 = exps.iter().sum();
        Some(exps.iter().map(|e| e / s).collect())
    }

    /// Error of the Bayes classifier under the test prior, estimated from `samples` draws.
    pub fn bayes_error_monte_carlo<R: Rng + ?Sized>(&self, samples: usize, rng: &mut R) -> Option<f64> {
        if !matches!(&*self.conditionals, ClassConditionals::Gaussian { .. }) || samples == 0 {
            return None;
        }
        let prior = self.test_prior.values();
        let mut x = vec![0.0; self.dim];
        let mut wrong = 0usize;
        for _ in 0..samples {
            let y = sample_index(prior, rng);
            self.sample_into(y, &mut x, rng);
            let post = self.posterior(ArrayView1::from(&x[..]), prior)?;
            if crate::nn::argmax(post) != y {
                wrong += 1;
            }
        }
        Some(wrong as f64 / samples as f64)
    }
}

/// Categorical draw from a probability vector.
pub(crate) fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left u above the cumulative sum: take the last positive entry.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Vertices of a regular simplex centred at the origin, each at distance `radius`.
fn simplex_vertices(classes: usize, dim: usize, radius: f64) -> Array2<f64> {
    // e_i minus the centroid lies in a (K-1)-dimensional subspace; express it in
    // an orthonormal basis of that subspace.
    let centred: Vec<Array1<f64>> = (0..classes)
        .map(|i| {
            let mut v = Array1::from_elem(classes, -1.0 / classes as f64);
            v[i] += 1.0;
            v
        })
        .collect();
    let mut basis: Vec<Array1<f64>> = Vec::new();
    for v in centred.iter().take(classes - 1) {
        let mut u = v.clone();
        for b in &basis {
            let proj = u.dot(b);
            u.scaled_add(-proj, b);
        }
        let n = u.dot(&u).sqrt();
        basis.push(u / n);
    }
    let norm = ((classes - 1) as f64 / classes as f64).sqrt();
    let mut out = Array2::zeros((classes, dim));
    for (i, v) in centred.iter().enumerate() {
        for (j, b) in basis.iter().enumerate() {
            out[[i, j]] = v.dot(b) / norm * radius;
        }
    }
    out
}

/// Unit-variance Gaussian classes with means `separation` away from the origin.
///
/// With `K ≤ d + 1` the means are the vertices of a regular simplex (equal
/// pairwise distances); otherwise they point in random directions. The test
/// prior is uniform.
pub fn gen_gaussian_task<R: Rng + ?Sized>(
    classes: usize,
    dim: usize,
    separation: f64,
    rng: &mut R,
) -> Result<TaskSpec> {
    if classes < 2 || dim == 0 || !(separation > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "need K >= 2, d >= 1, separation > 0; got K={classes}, d={dim}, separation={separation}"
        )));
    }
    let means = if classes <= dim + 1 {
        simplex_vertices(classes, dim, separation)
    } else {
        let mut m = Array2::zeros((classes, dim));
        for mut row in m.rows_mut() {
            let dir: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter_mut()
                .zip(&dir)
                .for_each(|(o, v)| *o = v / n * separation);
        }
        m
    };
    TaskSpec::new(
        ClassConditionals::Gaussian {
            means,
            variances: Array2::ones((classes, dim)),
        },
        PriorVector::uniform(classes, PriorRole::Test),
    )
}
