//! Fully connected tanh network with a `2 * tanh` output head.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Action, State, MAX_TORQUE};
use crate::error::{Result, SfbcError};

pub const INPUT_DIM: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `(inputs, outputs)`
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Layer {
            weights: Array2::zeros((inputs, outputs)),
            bias: Array1::zeros(outputs),
        }
    }
}

/// Deterministic policy network mapping `(cos theta, sin theta, omega)` to torque.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

/// Per-layer activations kept for the backward pass.
pub struct ForwardCache {
    /// `activations[0]` is the input; `activations[l + 1]` the output of hidden layer `l`.
    activations: Vec<Array2<f64>>,
    /// Torque means, shape `(batch,)`.
    pub output: Array1<f64>,
}

impl Mlp {
    /// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` initialization.
    pub fn init<R: Rng + ?Sized>(hidden: &[usize], rng: &mut R) -> Self {
        let mut dims = vec![INPUT_DIM];
        dims.extend_from_slice(hidden);
        dims.push(1);
        let layers = dims
            .windows(2)
            .map(|w| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                let mut layer = Layer::zeros(w[0], w[1]);
                layer
                    .weights
                    .mapv_inplace(|_| rng.random_range(-bound..bound));
                layer.bias.mapv_inplace(|_| rng.random_range(-bound..bound));
                layer
            })
            .collect();
        Mlp { layers }
    }

    pub fn zeros_like(&self) -> Self {
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|l| Layer::zeros(l.weights.nrows(), l.weights.ncols()))
                .collect(),
        }
    }

    pub fn hidden_sizes(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(|l| l.weights.ncols())
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    pub fn zero_output_layer(&mut self) {
        let last = self.layers.last_mut().expect("network has an output layer");
        last.weights.fill(0.0);
        last.bias.fill(0.0);
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    /// Flattened view of all parameters, layer by layer, weights then bias.
    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()))
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> ForwardCache {
        let mut activations = Vec::with_capacity(self.layers.len());
        activations.push(x.to_owned());
        let (output_layer, hidden) = self.layers.split_last().expect("output layer");
        for layer in hidden {
            let mut z = activations.last().expect("input").dot(&layer.weights);
            z += &layer.bias;
            z.mapv_inplace(f64::tanh);
            activations.push(z);
        }
        let z = activations.last().expect("input").dot(&output_layer.weights);
        let bias = output_layer.bias[0];
        let output = z
            .column(0)
            .mapv(|v| MAX_TORQUE * (v + bias).tanh());
        ForwardCache {
            activations,
            output,
        }
    }

    /// Gradients of a loss given `d loss / d output` for each batch row.
    pub fn backward(&self, cache: &ForwardCache, d_output: &Array1<f64>) -> Mlp {
        let mut grads = self.zeros_like();
        // d(2 tanh z)/dz = 2 (1 - tanh^2 z) = 2 - mu^2 / 2
        let mut delta: Array2<f64> = Zip::from(d_output)
            .and(&cache.output)
            .map_collect(|&g, &mu| g * (MAX_TORQUE - mu * mu / MAX_TORQUE))
            .insert_axis(Axis(1));
        for l in (0..self.layers.len()).rev() {
            let input = &cache.activations[l];
            grads.layers[l].weights = input.t().dot(&delta);
            grads.layers[l].bias = delta.sum_axis(Axis(0));
            if l > 0 {
                let mut upstream = delta.dot(&self.layers[l].weights.t());
                Zip::from(&mut upstream)
                    .and(input)
                    .for_each(|u, &h| *u *= 1.0 - h * h);
                delta = upstream;
            }
        }
        grads
    }

    pub fn act(&self, s: &State) -> Action {
        let x = Array2::from_shape_vec((1, INPUT_DIM), s.features().to_vec())
            .expect("feature shape");
        Action::new(self.forward(x.view()).output[0])
    }

    pub fn act_batch(&self, states: &[State]) -> Vec<Action> {
        let x = features(states.iter());
        self.forward(x.view())
            .output
            .iter()
            .map(|&u| Action::new(u))
            .collect()
    }
}

pub fn features<'a>(states: impl ExactSizeIterator<Item = &'a State>) -> Array2<f64> {
    let n = states.len();
    let flat: Vec<f64> = states.flat_map(|s| s.features()).collect();
    Array2::from_shape_vec((n, INPUT_DIM), flat).expect("feature shape")
}

/// Serialized form: layer shapes plus row-major parameter arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl From<&Layer> for LayerRecord {
    fn from(l: &Layer) -> Self {
        LayerRecord {
            inputs: l.weights.nrows(),
            outputs: l.weights.ncols(),
            weights: l.weights.iter().copied().collect(),
            bias: l.bias.to_vec(),
        }
    }
}

impl TryFrom<&LayerRecord> for Layer {
    type Error = SfbcError;

    fn try_from(r: &LayerRecord) -> Result<Self> {
        let weights = Array2::from_shape_vec((r.inputs, r.outputs), r.weights.clone())
            .map_err(|e| SfbcError::InvalidArgument(format!("layer weights: {e}")))?;
        if r.bias.len() != r.outputs {
            return Err(SfbcError::InvalidArgument(format!(
                "layer bias has {} entries for {} outputs",
                r.bias.len(),
                r.outputs
            )));
        }
        Ok(Layer {
            weights,
            bias: Array1::from(r.bias.clone()),
        })
    }
}
