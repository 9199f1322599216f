use ndarray::{Array1, Array2, Zip};
use rand::{Rng, RngExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Activation applied after a hidden layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Linear,
}

/// One dense layer: `weights` is `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            weights: Array2::zeros((out_dim, in_dim)),
            bias: Array1::zeros(out_dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }
}

/// An ordered stack of layer tensors.
///
/// Used for model weights, gradients, Adam moments and model deltas alike; all
/// of them share the layer shapes of the network they belong to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensors {
    pub layers: Vec<Layer>,
}

/// Gradient of a scalar objective with respect to every parameter.
pub type GradientSet = Tensors;

/// A model difference `f_c - f` sent from a client to the server.
pub type ModelDelta = Tensors;

impl Tensors {
    pub fn zeros_like(other: &Tensors) -> Self {
        Self {
            layers: other
                .layers
                .iter()
                .map(|l| Layer::zeros(l.out_dim(), l.in_dim()))
                .collect(),
        }
    }

    pub fn same_shape(&self, other: &Tensors) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weights.dim() == b.weights.dim() && a.bias.len() == b.bias.len())
    }

    pub(crate) fn ensure_same_shape(&self, other: &Tensors, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!("{what}: tensor shapes differ")))
        }
    }

    /// Total number of scalar parameters.
    pub fn len(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }

    /// Visits weights then bias for each layer, in row-major order.
    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Tensors) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            Zip::from(&mut a.weights)
                .and(&b.weights)
                .for_each(|x, &y| *x += alpha * y);
            Zip::from(&mut a.bias)
                .and(&b.bias)
                .for_each(|x, &y| *x += alpha * y);
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.iter_mut().for_each(|v| *v *= alpha);
    }

    /// `self - other`, element-wise.
    pub fn difference(&self, other: &Tensors) -> Tensors {
        let mut out = self.clone();
        out.axpy(-1.0, other);
        out
    }

    pub fn max_abs_diff(&self, other: &Tensors) -> f64 {
        self.iter()
            .zip(other.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Mutable reference to the scalar at flat position `idx` (same order as [`Tensors::iter`]).
    pub fn flat_mut(&mut self, mut idx: usize) -> Option<&mut f64> {
        for l in &mut self.layers {
            let nw = l.weights.len();
            if idx < nw {
                return l.weights.iter_mut().nth(idx);
            }
            idx -= nw;
            if idx < l.bias.len() {
                return Some(&mut l.bias[idx]);
            }
            idx -= l.bias.len();
        }
        None
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.iter().copied().collect()
    }
}

/// Weights of a dense feed-forward classifier.
///
/// Hidden layers use the activation recorded for them; the final layer is
/// always linear and emits one score per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub(crate) tensors: Tensors,
    pub(crate) activations: Vec<Activation>,
}

impl ModelParams {
    /// Builds a network with uniform Glorot initialization, `±sqrt(6/(in+out))`.
    pub fn init<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: &[usize],
        activation: Activation,
        classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut widths = vec![input_dim];
        widths.extend_from_slice(hidden);
        widths.push(classes);
        if let Some(pos) = widths.iter().position(|&w| w == 0) {
            return Err(Error::InvalidArgument(format!(
                "layer width at position {pos} is zero"
            )));
        }
        let layers = widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weights =
                    Array2::from_shape_fn((fan_out, fan_in), |_| rng.random_range(-bound..=bound));
                Layer {
                    weights,
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        Ok(Self {
            tensors: Tensors { layers },
            activations: vec![activation; hidden.len()],
        })
    }

    /// Wraps explicit layers. `activations` has one entry per hidden layer.
    pub fn from_layers(layers: Vec<Layer>, activations: Vec<Activation>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("network has no layers".into()));
        }
        if activations.len() + 1 != layers.len() {
            return Err(Error::Shape(format!(
                "{} layers need {} hidden activations, got {}",
                layers.len(),
                layers.len() - 1,
                activations.len()
            )));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.in_dim() == 0 || l.out_dim() == 0 {
                return Err(Error::InvalidArgument(format!("layer {i} has a zero dimension")));
            }
            if l.bias.len() != l.out_dim() {
                return Err(Error::Shape(format!(
                    "layer {i}: bias length {} != out dim {}",
                    l.bias.len(),
                    l.out_dim()
                )));
            }
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::Shape(format!(
                    "layer {} outputs {} but layer {} expects {}",
                    i,
                    pair[0].out_dim(),
                    i + 1,
                    pair[1].in_dim()
                )));
            }
        }
        let params = Self {
            tensors: Tensors { layers },
            activations,
        };
        if !params.tensors.is_finite() {
            return Err(Error::NonFinite("model parameters".into()));
        }
        Ok(params)
    }

    pub fn tensors(&self) -> &Tensors {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut Tensors {
        &mut self.tensors
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn layers(&self) -> &[Layer] {
        &self.tensors.layers
    }

    pub fn input_dim(&self) -> usize {
        self.tensors.layers[0].in_dim()
    }

    pub fn classes(&self) -> usize {
        self.tensors.layers.last().map(Layer::out_dim).unwrap_or(0)
    }

    pub fn same_architecture(&self, other: &ModelParams) -> bool {
        self.activations == other.activations && self.tensors.same_shape(&other.tensors)
    }

    /// `self += alpha * delta`
    pub fn apply_delta(&mut self, alpha: f64, delta: &Tensors) -> Result<()> {
        self.tensors.ensure_same_shape(delta, "apply_delta")?;
        self.tensors.axpy(alpha, delta);
        Ok(())
    }

    /// Sum of absolute weight values (biases excluded).
    pub fn l1_norm(&self) -> f64 {
        self.tensors
            .layers
            .iter()
            .map(|l| l.weights.iter().map(|w| w.abs()).sum::<f64>())
            .sum()
    }
}
