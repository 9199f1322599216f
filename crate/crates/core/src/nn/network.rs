use ndarray::{Array2, ArrayView2, Axis, Zip};

use super::loss::{ce_logit_grad, ce_loss, softmax, softmax_backward, LOG_FLOOR};
use super::params::{Activation, GradientSet, ModelParams, Tensors};
use crate::error::{Error, Result};
use crate::transition::TransitionMatrix;

/// Inputs with integer labels in `[0, classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    inputs: Array2<f64>,
    labels: Vec<usize>,
    classes: usize,
}

impl Batch {
    pub fn new(inputs: Array2<f64>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if inputs.nrows() == 0 {
            return Err(Error::InvalidArgument("batch must contain at least one row".into()));
        }
        if inputs.nrows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} input rows but {} labels",
                inputs.nrows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} outside [0, {classes})"
            )));
        }
        Ok(Self {
            inputs,
            labels,
            classes,
        })
    }

    pub fn inputs(&self) -> &Array2<f64> {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Intermediate values retained by [`forward_cached`] for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer; entry 0 is the network input.
    layer_inputs: Vec<Array2<f64>>,
    /// Pre-activation of each hidden layer.
    hidden_pre: Vec<Array2<f64>>,
    logits: Array2<f64>,
}

impl ForwardCache {
    pub fn logits(&self) -> &Array2<f64> {
        &self.logits
    }

    /// Smallest `|z|` over all hidden pre-activations (distance to a rectifier kink).
    pub fn min_abs_preactivation(&self) -> f64 {
        self.hidden_pre
            .iter()
            .flat_map(|z| z.iter())
            .fold(f64::INFINITY, |m, z| m.min(z.abs()))
    }
}

fn check_input(params: &ModelParams, inputs: &ArrayView2<'_, f64>) -> Result<()> {
    if inputs.ncols() != params.input_dim() {
        return Err(Error::Shape(format!(
            "input width {} but network expects {}",
            inputs.ncols(),
            params.input_dim()
        )));
    }
    Ok(())
}

fn activate(act: Activation, z: &Array2<f64>) -> Array2<f64> {
    match act {
        Activation::Relu => z.mapv(|v| v.max(0.0)),
        Activation::Linear => z.clone(),
    }
}

pub fn forward_cached(params: &ModelParams, inputs: ArrayView2<'_, f64>) -> Result<ForwardCache> {
    check_input(params, &inputs)?;
    let layers = params.layers();
    let mut layer_inputs = Vec::with_capacity(layers.len());
    let mut hidden_pre = Vec::with_capacity(layers.len() - 1);
    let mut a = inputs.to_owned();
    for (i, layer) in layers.iter().enumerate() {
        let z = a.dot(&layer.weights.t()) + &layer.bias;
        layer_inputs.push(a);
        if i + 1 == layers.len() {
            return Ok(ForwardCache {
                layer_inputs,
                hidden_pre,
                logits: z,
            });
        }
        a = activate(params.activations[i], &z);
        hidden_pre.push(z);
    }
    unreachable!("a network has at least one layer")
}

/// Class scores for each input row.
pub fn forward(params: &ModelParams, inputs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    Ok(forward_cached(params, inputs)?.logits)
}

/// Backpropagates `dlogits` (already averaged over the batch) through the network.
///
/// Returns parameter gradients and, when `input_grad` is set, the gradient with
/// respect to the network input.
pub fn backward_from_logits(
    params: &ModelParams,
    cache: &ForwardCache,
    dlogits: Array2<f64>,
    input_grad: bool,
) -> (GradientSet, Option<Array2<f64>>) {
    let layers = params.layers();
    let mut grads = Tensors::zeros_like(params.tensors());
    let mut delta = dlogits;
    for i in (0..layers.len()).rev() {
        let a = &cache.layer_inputs[i];
        grads.layers[i].weights = delta.t().dot(a);
        grads.layers[i].bias = delta.sum_axis(Axis(0));
        if i == 0 && !input_grad {
            break;
        }
        let mut upstream = delta.dot(&layers[i].weights);
        if i == 0 {
            return (grads, Some(upstream));
        }
        if params.activations[i - 1] == Activation::Relu {
            Zip::from(&mut upstream)
                .and(&cache.hidden_pre[i - 1])
                .for_each(|d, &z| {
                    if z <= 0.0 {
                        *d = 0.0;
                    }
                });
        }
        delta = upstream;
    }
    (grads, None)
}

/// Adds `l1_weight · Σ|w|` over weight matrices to `grads` and returns the penalty.
pub fn add_l1(params: &ModelParams, grads: &mut GradientSet, l1_weight: f64) -> f64 {
    if l1_weight == 0.0 {
        return 0.0;
    }
    for (g, l) in grads.layers.iter_mut().zip(params.layers()) {
        Zip::from(&mut g.weights).and(&l.weights).for_each(|g, &w| {
            *g += l1_weight * sign(w);
        });
    }
    l1_weight * params.l1_norm()
}

fn sign(w: f64) -> f64 {
    if w > 0.0 {
        1.0
    } else if w < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Loss and logit gradient of `-ln Q(softmax(z))_ȳ`, where `Q` is the transition head.
pub fn transition_ce_logit_grad(
    probs: ArrayView2<'_, f64>,
    labels: &[usize],
    head: &TransitionMatrix,
) -> Result<(f64, Array2<f64>)> {
    let t = head.matrix();
    let n = probs.nrows() as f64;
    let q = probs.dot(&t.t());
    let mut dq = Array2::<f64>::zeros(q.dim());
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if t.row(y).iter().all(|&v| v == 0.0) {
            return Err(Error::Invariant(format!(
                "surrogate label {y} maps to an all-zero transition row"
            )));
        }
        let row = q.row(i);
        let total: f64 = row.sum();
        let qy = row[y].max(1e-300);
        loss -= (qy / total).max(LOG_FLOOR).ln();
        let inv_total = 1.0 / total;
        dq.row_mut(i).fill(inv_total / n);
        dq[[i, y]] -= 1.0 / qy / n;
    }
    let dprobs = dq.dot(t);
    Ok((loss / n, softmax_backward(probs, dprobs.view())))
}

/// Exact gradient of the mean cross-entropy of the network, optionally through a
/// transition head, plus the L1 weight penalty.
///
/// Without a head labels index classes; with a head they index surrogate sets.
pub fn backward(
    params: &ModelParams,
    batch: &Batch,
    head: Option<&TransitionMatrix>,
    l1_weight: f64,
) -> Result<(f64, GradientSet)> {
    let cache = forward_cached(params, batch.inputs.view())?;
    let probs = softmax(cache.logits.view());
    let (loss, dlogits) = match head {
        None => {
            if batch.classes != params.classes() {
                return Err(Error::Shape(format!(
                    "batch declares {} classes, network has {}",
                    batch.classes,
                    params.classes()
                )));
            }
            let loss = ce_loss(probs.view(), &batch.labels)?;
            (loss, ce_logit_grad(probs.view(), &batch.labels))
        }
        Some(head) => {
            if head.classes() != params.classes() || batch.classes != head.sets() {
                return Err(Error::Shape(format!(
                    "head is {}x{}, network has {} classes, batch declares {} labels",
                    head.sets(),
                    head.classes(),
                    params.classes(),
                    batch.classes
                )));
            }
            transition_ce_logit_grad(probs.view(), &batch.labels, head)?
        }
    };
    let (mut grads, _) = backward_from_logits(params, &cache, dlogits, false);
    let penalty = add_l1(params, &mut grads, l1_weight);
    Ok((loss + penalty, grads))
}

/// `argmax_k f(x)_k` per row; ties go to the lowest class index.
pub fn predict(params: &ModelParams, inputs: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
    let logits = forward(params, inputs)?;
    Ok(logits
        .rows()
        .into_iter()
        .map(|r| super::loss::argmax(r.iter().copied()))
        .collect())
}
