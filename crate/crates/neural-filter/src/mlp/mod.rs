//! Feedforward network approximating the one-step flow map.
//!
//! A model is a chain of affine layers with elementwise ReLU on the hidden
//! layers and a linear output layer. Besides plain evaluation it exposes the
//! exact input-Jacobian, obtained by chaining the per-layer Jacobians along
//! the forward pass: an affine layer contributes its weight matrix, and a
//! ReLU layer contributes its weight matrix with the rows of inactive units
//! zeroed. The derivative of ReLU at exactly zero preactivation is taken as
//! zero, so Jacobians are deterministic everywhere.
//!
//! Models are immutable after construction; only the training module mutates
//! parameters, through crate-internal accessors. Concurrent reads are safe.

mod io;

pub use io::ModelIoError;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Jacobian of the network output with respect to its input
/// (rows = output dim, cols = input dim).
pub type JacobianMatrix = DMatrix<f64>;

/// One vector per layer, in layer order.
pub(crate) type LayerValues = Vec<DVector<f64>>;

#[derive(Debug, Error)]
pub enum MlpError {
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("{what}: expected length {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Linear,
}

impl Activation {
    pub fn as_str(&self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Linear => "linear",
        }
    }

}

impl std::str::FromStr for Activation {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "relu" => Ok(Activation::Relu),
            "linear" => Ok(Activation::Linear),
            _ => Err(()),
        }
    }
}

/// Width and activation of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub width: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn relu(width: usize) -> Self {
        LayerSpec {
            width,
            activation: Activation::Relu,
        }
    }

    pub fn linear(width: usize) -> Self {
        LayerSpec {
            width,
            activation: Activation::Linear,
        }
    }
}

/// A fully connected network: per layer a weight matrix mapping the previous
/// width to the layer width, plus a bias vector (always stored; a bias-free
/// model keeps them at zero and never trains them).
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    input_dim: usize,
    layers: Vec<LayerSpec>,
    weights: Vec<DMatrix<f64>>,
    biases: Vec<DVector<f64>>,
    bias_enabled: bool,
}

fn validate_architecture(input_dim: usize, layers: &[LayerSpec]) -> Result<(), MlpError> {
    if input_dim == 0 {
        return Err(MlpError::InvalidArchitecture("input_dim must be >= 1".into()));
    }
    if layers.is_empty() {
        return Err(MlpError::InvalidArchitecture("at least one layer required".into()));
    }
    if let Some(i) = layers.iter().position(|l| l.width == 0) {
        return Err(MlpError::InvalidArchitecture(format!(
            "layer {i} has zero width"
        )));
    }
    if layers[layers.len() - 1].activation != Activation::Linear {
        return Err(MlpError::InvalidArchitecture(
            "output layer must be linear".into(),
        ));
    }
    Ok(())
}

impl MlpModel {
    /// Fresh model with fan-in-scaled uniform weights (He-style bounds for
    /// ReLU layers) and zero biases. The same seed reproduces the exact
    /// parameter tensors.
    pub fn init(input_dim: usize, layers: &[LayerSpec], seed: u64) -> Result<Self, MlpError> {
        Self::init_with_bias(input_dim, layers, seed, true)
    }

    /// Like [`MlpModel::init`] but the biases stay pinned at zero,
    /// in training as well.
    pub fn init_bias_free(
        input_dim: usize,
        layers: &[LayerSpec],
        seed: u64,
    ) -> Result<Self, MlpError> {
        Self::init_with_bias(input_dim, layers, seed, false)
    }

    fn init_with_bias(
        input_dim: usize,
        layers: &[LayerSpec],
        seed: u64,
        bias_enabled: bool,
    ) -> Result<Self, MlpError> {
        validate_architecture(input_dim, layers)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::with_capacity(layers.len());
        let mut biases = Vec::with_capacity(layers.len());
        let mut fan_in = input_dim;
        for layer in layers {
            let bound = match layer.activation {
                Activation::Relu => (6.0 / fan_in as f64).sqrt(),
                Activation::Linear => (3.0 / fan_in as f64).sqrt(),
            };
            // Row-major fill so the draw order is part of the contract.
            let data: Vec<f64> = (0..layer.width * fan_in)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            weights.push(DMatrix::from_row_slice(layer.width, fan_in, &data));
            biases.push(DVector::zeros(layer.width));
            fan_in = layer.width;
        }
        Ok(MlpModel {
            input_dim,
            layers: layers.to_vec(),
            weights,
            biases,
            bias_enabled,
        })
    }

    /// Assembles a model from explicit tensors, checking the shape chain.
    pub fn from_parts(
        input_dim: usize,
        layers: Vec<LayerSpec>,
        weights: Vec<DMatrix<f64>>,
        biases: Vec<DVector<f64>>,
    ) -> Result<Self, MlpError> {
        validate_architecture(input_dim, &layers)?;
        if weights.len() != layers.len() || biases.len() != layers.len() {
            return Err(MlpError::InvalidArchitecture(format!(
                "expected {} weight/bias tensors, got {}/{}",
                layers.len(),
                weights.len(),
                biases.len()
            )));
        }
        let mut fan_in = input_dim;
        for (i, layer) in layers.iter().enumerate() {
            if weights[i].nrows() != layer.width || weights[i].ncols() != fan_in {
                return Err(MlpError::InvalidArchitecture(format!(
                    "layer {i}: weight shape {}x{}, expected {}x{}",
                    weights[i].nrows(),
                    weights[i].ncols(),
                    layer.width,
                    fan_in
                )));
            }
            if biases[i].len() != layer.width {
                return Err(MlpError::InvalidArchitecture(format!(
                    "layer {i}: bias length {}, expected {}",
                    biases[i].len(),
                    layer.width
                )));
            }
            fan_in = layer.width;
        }
        if weights.iter().any(|w| w.iter().any(|v| !v.is_finite()))
            || biases.iter().any(|b| b.iter().any(|v| !v.is_finite()))
        {
            return Err(MlpError::NonFinite("model parameters"));
        }
        Ok(MlpModel {
            input_dim,
            layers,
            weights,
            biases,
            bias_enabled: true,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].width
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn weights(&self) -> &[DMatrix<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[DVector<f64>] {
        &self.biases
    }

    pub fn bias_enabled(&self) -> bool {
        self.bias_enabled
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + if self.bias_enabled {
                self.biases.iter().map(|b| b.len()).sum::<usize>()
            } else {
                0
            }
    }

    fn check_input(&self, x: &DVector<f64>) -> Result<(), MlpError> {
        if x.len() != self.input_dim {
            return Err(MlpError::DimensionMismatch {
                what: "forward: input",
                expected: self.input_dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Evaluates the network.
    pub fn forward(&self, x: &DVector<f64>) -> Result<DVector<f64>, MlpError> {
        self.check_input(x)?;
        let mut a = x.clone();
        for (layer, (w, b)) in self.layers.iter().zip(self.weights.iter().zip(&self.biases)) {
            let mut z = w * a + b;
            if layer.activation == Activation::Relu {
                z.apply(|v| *v = v.max(0.0));
            }
            a = z;
        }
        Ok(a)
    }

    /// Forward pass that keeps the preactivations and activations of every
    /// layer; this is what backpropagation consumes.
    pub(crate) fn forward_trace(
        &self,
        x: &DVector<f64>,
    ) -> Result<(LayerValues, LayerValues), MlpError> {
        self.check_input(x)?;
        let mut preacts = Vec::with_capacity(self.layers.len());
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.clone());
        for (layer, (w, b)) in self.layers.iter().zip(self.weights.iter().zip(&self.biases)) {
            let z = w * acts.last().expect("non-empty") + b;
            let a = match layer.activation {
                Activation::Relu => z.map(|v| v.max(0.0)),
                Activation::Linear => z.clone(),
            };
            preacts.push(z);
            acts.push(a);
        }
        Ok((preacts, acts))
    }

    /// Exact Jacobian of the output with respect to the input, evaluated
    /// along the forward pass at `x`. Biases contribute nothing; a ReLU
    /// unit with preactivation <= 0 zeroes its row.
    pub fn input_jacobian(&self, x: &DVector<f64>) -> Result<JacobianMatrix, MlpError> {
        self.check_input(x)?;
        let mut jac = DMatrix::<f64>::identity(self.input_dim, self.input_dim);
        let mut a = x.clone();
        for (layer, (w, b)) in self.layers.iter().zip(self.weights.iter().zip(&self.biases)) {
            let z = w * &a + b;
            jac = w * jac;
            match layer.activation {
                Activation::Relu => {
                    for (row, zi) in z.iter().enumerate() {
                        if *zi <= 0.0 {
                            jac.row_mut(row).fill(0.0);
                        }
                    }
                    a = z.map(|v| v.max(0.0));
                }
                Activation::Linear => a = z,
            }
        }
        Ok(jac)
    }

    pub(crate) fn tensors_mut(&mut self) -> (&mut Vec<DMatrix<f64>>, &mut Vec<DVector<f64>>) {
        (&mut self.weights, &mut self.biases)
    }
}

#[cfg(test)]
mod tests;
