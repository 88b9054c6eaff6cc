//! Fully connected perceptron with analytic backpropagation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::{self, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

/// One affine layer: `z = x · weight + bias`, weight is `d_in × d_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    layers: Vec<Layer>,
    activation: Activation,
    seed: u64,
}

/// Per-layer inputs and pre-activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<Matrix>,
    pre_activations: Vec<Matrix>,
}

impl ForwardCache {
    pub fn len(&self) -> usize {
        self.pre_activations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pre_activations.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradient {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

/// Gradients shaped like the model's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGradient>,
}

impl Gradients {
    /// Parameter tensors in `(w0, b0, w1, b1, ...)` order.
    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.values(), l.bias.as_slice()])
            .collect()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.slices().concat()
    }

    pub fn is_zero(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|&v| v == 0.0))
    }
}

impl MlpModel {
    pub fn new(layers: Vec<Layer>, activation: Activation, seed: u64) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("model needs at least one layer".into()));
        }
        for (k, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.output_dim() {
                return Err(Error::shape(
                    "layer bias",
                    layer.output_dim(),
                    format!("{} (layer {k})", layer.bias.len()),
                ));
            }
            if !layer.weight.is_finite() || layer.bias.iter().any(|b| !b.is_finite()) {
                return Err(Error::NonFinite(format!("parameters of layer {k}")));
            }
            if k > 0 && layers[k - 1].output_dim() != layer.input_dim() {
                return Err(Error::shape(
                    "layer chain",
                    format!("d_in {} for layer {k}", layers[k - 1].output_dim()),
                    layer.input_dim(),
                ));
            }
        }
        Ok(MlpModel {
            layers,
            activation,
            seed,
        })
    }

    /// Glorot-uniform weights and zero biases. `dims` lists every width from
    /// input to output, e.g. `[2, 32, 32, 2]`.
    pub fn init(dims: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "layer widths must be positive and at least two: {dims:?}"
            )));
        }
        let mut rng = rng::stream(seed, Purpose::Weights, 0);
        let layers = dims
            .windows(2)
            .map(|w| {
                let (d_in, d_out) = (w[0], w[1]);
                let limit = (6.0 / (d_in + d_out) as f64).sqrt();
                let values = (0..d_in * d_out)
                    .map(|_| rng.random_range(-limit..=limit))
                    .collect();
                Layer {
                    weight: Matrix::from_raw(d_in, d_out, values),
                    bias: vec![0.0; d_out],
                }
            })
            .collect();
        MlpModel::new(layers, activation, seed)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(Error::shape("mlp_forward input", self.input_dim(), x.cols()));
        }
        Ok(())
    }

    /// Raw logits for `x` (n × d_in) together with the backprop cache.
    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, ForwardCache)> {
        self.check_input(x)?;
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut current = x.clone();
        for (k, layer) in self.layers.iter().enumerate() {
            let mut z = current.matmul(&layer.weight)?;
            z.add_row_vector(&layer.bias)?;
            let next = if k == last {
                z.clone()
            } else {
                z.map(|v| self.activation.apply(v))
            };
            inputs.push(current);
            pre_activations.push(z);
            current = next;
        }
        Ok((
            current,
            ForwardCache {
                inputs,
                pre_activations,
            },
        ))
    }

    /// Logits without retaining a cache.
    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        let last = self.layers.len() - 1;
        let mut current = x.clone();
        for (k, layer) in self.layers.iter().enumerate() {
            let mut z = current.matmul(&layer.weight)?;
            z.add_row_vector(&layer.bias)?;
            current = if k == last {
                z
            } else {
                z.map(|v| self.activation.apply(v))
            };
        }
        Ok(current)
    }

    pub fn backward(&self, cache: &ForwardCache, d_logits: &Matrix) -> Result<Gradients> {
        if cache.len() != self.layers.len() {
            return Err(Error::shape("forward cache layers", self.layers.len(), cache.len()));
        }
        let out = &cache.pre_activations[cache.len() - 1];
        out.ensure_same_shape(d_logits, "mlp_backward dLogits")?;

        let mut grads = Vec::with_capacity(self.layers.len());
        let mut d_z = d_logits.clone();
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            let input = &cache.inputs[k];
            grads.push(LayerGradient {
                weight: input.t_matmul(&d_z)?,
                bias: d_z.column_sums(),
            });
            if k > 0 {
                let d_a = d_z.matmul_t(&layer.weight)?;
                let z_prev = &cache.pre_activations[k - 1];
                d_z = Matrix::from_raw(
                    d_a.rows(),
                    d_a.cols(),
                    d_a.values()
                        .iter()
                        .zip(z_prev.values().iter().zip(input.values()))
                        .map(|(&g, (&z, &a))| g * self.activation.derivative(z, a))
                        .collect(),
                );
            }
        }
        grads.reverse();
        Ok(Gradients { layers: grads })
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.values_mut(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.values().iter().chain(&l.bias).copied())
            .collect()
    }

    /// Overwrites all parameters from a flat vector in [`MlpModel::params`] order.
    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        let expected: usize = self
            .layers
            .iter()
            .map(|l| l.weight.values().len() + l.bias.len())
            .sum();
        if flat.len() != expected {
            return Err(Error::shape("set_params", expected, flat.len()));
        }
        let mut offset = 0;
        for slot in self.param_slices_mut() {
            let n = slot.len();
            slot.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|v| v.is_finite())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            layers: self
                .layers
                .iter()
                .map(|l| CheckpointLayer {
                    rows: l.weight.rows(),
                    cols: l.weight.cols(),
                    weights: l.weight.values().to_vec(),
                    bias: l.bias.clone(),
                })
                .collect(),
            activation: self.activation,
            seed: self.seed,
        }
    }

    pub fn from_checkpoint(chk: Checkpoint) -> Result<Self> {
        let layers = chk
            .layers
            .into_iter()
            .map(|l| {
                Ok(Layer {
                    weight: Matrix::new(l.rows, l.cols, l.weights)?,
                    bias: l.bias,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        MlpModel::new(layers, chk.activation, chk.seed)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_checkpoint()).expect("checkpoint serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        MlpModel::from_checkpoint(serde_json::from_str(s)?)
    }

    /// SHA-256 of the checkpoint JSON, hex encoded.
    pub fn digest(&self) -> String {
        crate::io::sha256_hex(self.to_json().as_bytes())
    }
}

/// On-disk model layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub layers: Vec<CheckpointLayer>,
    pub activation: Activation,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointLayer {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}
