//! Feed-forward classifier with hand-written backpropagation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SelcError};
use crate::loss::softmax;
use crate::rng::{stream_rng, Stream};
use crate::tensor::Matrix2D;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    #[default]
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Weights (`fan_in × fan_out`) and bias of one affine layer. Also used to
/// hold the matching gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: Matrix2D,
    pub bias: Vec<f64>,
}

impl Layer {
    fn zeros_like(&self) -> Layer {
        Layer {
            weights: Matrix2D::zeros(self.weights.rows(), self.weights.cols()),
            bias: vec![0.0; self.bias.len()],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    layer_dims: Vec<usize>,
    layers: Vec<Layer>,
    activation: Activation,
}

/// Parameter gradients, laid out exactly like [`MlpModel`]'s layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Gradients {
    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.data(), l.bias.as_slice()])
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `activations[0]` is the input batch; the last entry is the logits.
    activations: Vec<Matrix2D>,
    pub probs: Matrix2D,
}

impl ForwardCache {
    pub fn logits(&self) -> &Matrix2D {
        self.activations.last().expect("at least input and logits")
    }
}

impl MlpModel {
    /// Glorot-uniform weights and zero biases drawn from the init stream of `seed`.
    pub fn new(layer_dims: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        if layer_dims.len() < 2 || layer_dims.contains(&0) {
            return Err(SelcError::param(format!(
                "layer dims {layer_dims:?} need at least an input and an output, all nonzero"
            )));
        }
        let mut rng = stream_rng(seed, Stream::Init);
        let layers = layer_dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-limit..=limit))
                    .collect();
                Layer {
                    weights: Matrix2D::from_vec(fan_in, fan_out, data).expect("sized above"),
                    bias: vec![0.0; fan_out],
                }
            })
            .collect();
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            layers,
            activation,
        })
    }

    /// Build from explicit layers; consecutive shapes must chain.
    pub fn from_layers(layers: Vec<Layer>, activation: Activation) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| SelcError::param("model needs at least one layer"))?;
        let mut dims = vec![first.weights.rows()];
        for (i, l) in layers.iter().enumerate() {
            if l.weights.rows() != *dims.last().unwrap() || l.bias.len() != l.weights.cols() {
                return Err(SelcError::dim(format!(
                    "layer {i}: weights {:?}, bias {}, previous width {}",
                    l.weights.shape(),
                    l.bias.len(),
                    dims.last().unwrap()
                )));
            }
            dims.push(l.weights.cols());
        }
        Ok(Self {
            layer_dims: dims,
            layers,
            activation,
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.data().len() + l.bias.len())
            .sum()
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.data(), l.bias.as_slice()])
            .collect()
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.data_mut(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.param_slices()
            .iter()
            .all(|s| s.iter().all(|v| v.is_finite()))
    }

    fn check_input(&self, batch: &Matrix2D) -> Result<()> {
        if batch.cols() != self.input_dim() {
            return Err(SelcError::dim(format!(
                "batch has {} features, model expects {}",
                batch.cols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Logits for every row of `batch`.
    pub fn forward(&self, batch: &Matrix2D) -> Result<Matrix2D> {
        self.check_input(batch)?;
        let last = self.layers.len() - 1;
        let mut h = batch.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = self.affine(&h, layer)?;
            if i < last {
                h.map_inplace(|x| self.activation.apply(x));
            }
        }
        Ok(h)
    }

    pub fn predict_proba(&self, batch: &Matrix2D) -> Result<Matrix2D> {
        Ok(softmax(&self.forward(batch)?))
    }

    pub fn forward_cached(&self, batch: &Matrix2D) -> Result<ForwardCache> {
        self.check_input(batch)?;
        let last = self.layers.len() - 1;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(batch.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            let mut h = self.affine(activations.last().unwrap(), layer)?;
            if i < last {
                h.map_inplace(|x| self.activation.apply(x));
            }
            activations.push(h);
        }
        let probs = softmax(activations.last().unwrap());
        Ok(ForwardCache { activations, probs })
    }

    fn affine(&self, input: &Matrix2D, layer: &Layer) -> Result<Matrix2D> {
        let mut z = input.matmul(&layer.weights)?;
        z.add_row_vector(&layer.bias)?;
        Ok(z)
    }

    /// Gradients of the batch-mean soft cross entropy `−(1/B)Σ tᵢᵀ log pᵢ`.
    ///
    /// At the logits this is `(mᵢ·pᵢ − tᵢ)/B` with `mᵢ = Σ tᵢ`, which reduces
    /// to `(p − t)/B` for targets on the simplex.
    pub fn backward_from(&self, cache: &ForwardCache, targets: &Matrix2D) -> Result<Gradients> {
        let probs = &cache.probs;
        if targets.shape() != probs.shape() {
            return Err(SelcError::dim(format!(
                "targets {:?} vs outputs {:?}",
                targets.shape(),
                probs.shape()
            )));
        }
        let batch = probs.rows().max(1) as f64;
        let mut delta = Matrix2D::zeros(probs.rows(), probs.cols());
        for r in 0..probs.rows() {
            let t = targets.row(r);
            let mass: f64 = t.iter().sum();
            for ((d, &p), &tv) in delta.row_mut(r).iter_mut().zip(probs.row(r)).zip(t) {
                *d = (mass * p - tv) / batch;
            }
        }

        let mut grads: Vec<Layer> = self.layers.iter().map(Layer::zeros_like).collect();
        for l in (0..self.layers.len()).rev() {
            let input = &cache.activations[l];
            grads[l].weights = input.t_matmul(&delta)?;
            grads[l].bias = delta.column_sums();
            if l > 0 {
                let mut back = delta.matmul_t(&self.layers[l].weights)?;
                for (b, &h) in back.data_mut().iter_mut().zip(input.data()) {
                    *b *= self.activation.derivative_from_output(h);
                }
                delta = back;
            }
        }
        Ok(Gradients { layers: grads })
    }

    /// Forward and backward in one call.
    pub fn backward(&self, batch: &Matrix2D, targets: &Matrix2D) -> Result<Gradients> {
        let cache = self.forward_cached(batch)?;
        self.backward_from(&cache, targets)
    }
}
