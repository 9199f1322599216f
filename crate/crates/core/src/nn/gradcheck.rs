use super::network::{backward, Batch};
use super::params::{GradientSet, ModelParams};
use crate::error::{Error, Result};
use crate::transition::TransitionMatrix;

/// Relative error with the `max(|a|, |b|, 1e-8)` denominator.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the gradient returned by `objective` against central differences on
/// every coordinate and returns the largest relative error.
pub fn grad_check_with<F>(params: &ModelParams, fd_eps: f64, mut objective: F) -> Result<f64>
where
    F: FnMut(&ModelParams) -> Result<(f64, GradientSet)>,
{
    if !(fd_eps > 1e-7 && fd_eps < 1e-3) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step {fd_eps:e} outside (1e-7, 1e-3)"
        )));
    }
    if params.tensors().is_empty() {
        return Err(Error::InvalidArgument("network has no parameters".into()));
    }
    let (_, analytic) = objective(params)?;
    let base = params.tensors().to_flat();
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for (idx, (a, &original)) in analytic.iter().zip(&base).enumerate() {
        let set = |p: &mut ModelParams, v: f64| {
            *p.tensors_mut().flat_mut(idx).expect("index in range") = v;
        };
        set(&mut probe, original + fd_eps);
        let (plus, _) = objective(&probe)?;
        set(&mut probe, original - fd_eps);
        let (minus, _) = objective(&probe)?;
        set(&mut probe, original);
        let numeric = (plus - minus) / (2.0 * fd_eps);
        worst = worst.max(relative_error(*a, numeric));
    }
    Ok(worst)
}

/// Finite-difference check of [`backward`].
pub fn grad_check(
    params: &ModelParams,
    batch: &Batch,
    head: Option<&TransitionMatrix>,
    l1_weight: f64,
    fd_eps: f64,
) -> Result<f64> {
    grad_check_with(params, fd_eps, |p| backward(p, batch, head, l1_weight))
}
