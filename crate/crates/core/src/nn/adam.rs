use ndarray::Zip;
use serde::{Deserialize, Serialize};

use super::params::{GradientSet, ModelParams, Tensors};
use crate::error::{Error, Result};

/// First/second moment accumulators for Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    first: Tensors,
    second: Tensors,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    /// Zero moments with β1 = 0.9, β2 = 0.999, ε = 1e-8.
    pub fn new(params: &ModelParams) -> Self {
        Self::with_constants(params, 0.9, 0.999, 1e-8)
    }

    pub fn with_constants(params: &ModelParams, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            first: Tensors::zeros_like(params.tensors()),
            second: Tensors::zeros_like(params.tensors()),
            step: 0,
            beta1,
            beta2,
            epsilon,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &Tensors {
        &self.first
    }

    pub fn second_moment(&self) -> &Tensors {
        &self.second
    }
}

/// One Adam update of `params` in place.
///
/// A non-finite gradient leaves both `params` and `state` untouched and returns an error.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &GradientSet,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    params.tensors.ensure_same_shape(grads, "adam gradient")?;
    params.tensors.ensure_same_shape(&state.first, "adam state")?;
    if !grads.is_finite() {
        return Err(Error::NonFinite(format!(
            "gradient at adam step {}",
            state.step + 1
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);

    let update = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    };

    for (((p, m), v), g) in params
        .tensors
        .layers
        .iter_mut()
        .zip(state.first.layers.iter_mut())
        .zip(state.second.layers.iter_mut())
        .zip(&grads.layers)
    {
        Zip::from(&mut p.weights)
            .and(&mut m.weights)
            .and(&mut v.weights)
            .and(&g.weights)
            .for_each(|p, m, v, &g| update(p, m, v, g));
        Zip::from(&mut p.bias)
            .and(&mut m.bias)
            .and(&mut v.bias)
            .and(&g.bias)
            .for_each(|p, m, v, &g| update(p, m, v, g));
    }
    Ok(())
}
