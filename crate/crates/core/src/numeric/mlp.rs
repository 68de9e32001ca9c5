use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};

use super::array::DenseArray;
use super::kernels::{self, Activation};
use super::tape::{GradientTape, Var};

/// One dense layer; weights are row-major `out_dim × in_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    fn n_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// Multilayer perceptron with a smooth hidden activation and a linear output layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    layers: Vec<Layer>,
    activation: Activation,
}

impl MlpParams {
    pub fn from_layers(layers: Vec<Layer>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("MLP needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.in_dim == 0 || l.out_dim == 0 {
                return Err(Error::Shape(format!("layer {i} has a zero dimension")));
            }
            if l.weights.len() != l.in_dim * l.out_dim || l.bias.len() != l.out_dim {
                return Err(Error::Shape(format!("layer {i} buffers do not match its dims")));
            }
            ensure_finite(&l.weights, "weights")?;
            ensure_finite(&l.bias, "bias")?;
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::Shape(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    pair[0].out_dim,
                    i + 1,
                    pair[1].in_dim
                )));
            }
        }
        Ok(Self { layers, activation })
    }

    /// All-zero network with the given layer widths (`dims[0]` is the input).
    pub fn zeros(dims: &[usize], activation: Activation) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::InvalidArgument("need input and output dims".into()));
        }
        let layers = dims
            .windows(2)
            .map(|w| Layer {
                in_dim: w[0],
                out_dim: w[1],
                weights: vec![0.0; w[0] * w[1]],
                bias: vec![0.0; w[1]],
            })
            .collect();
        Self::from_layers(layers, activation)
    }

    /// Uniform fan-in initialization, `U(-1/√fan_in, 1/√fan_in)` for weights and biases.
    pub fn init<R: Rng + ?Sized>(dims: &[usize], activation: Activation, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(dims, activation)?;
        for l in &mut net.layers {
            let bound = 1.0 / (l.in_dim as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound);
            l.weights.iter_mut().for_each(|w| *w = dist.sample(rng));
            l.bias.iter_mut().for_each(|b| *b = dist.sample(rng));
        }
        Ok(net)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    /// Layer widths, input first.
    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(|l| l.out_dim))
            .collect()
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(Layer::n_params).sum()
    }

    /// Flat parameter vector: per layer, weights then bias.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.n_params(),
                flat.len()
            )));
        }
        ensure_finite(flat, "parameters")?;
        let mut at = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&flat[at..at + nw]);
            at += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[at..at + nb]);
            at += nb;
        }
        Ok(())
    }

    pub fn forward(&self, input: &DenseArray) -> Result<DenseArray> {
        if input.cols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "MLP expects {} input columns, got {}",
                self.input_dim(),
                input.cols()
            )));
        }
        let n = input.rows();
        let last = self.layers.len() - 1;
        let mut h = input.data().to_vec();
        for (i, l) in self.layers.iter().enumerate() {
            let mut y = kernels::matmul_t(&h, n, l.in_dim, &l.weights, l.out_dim);
            kernels::add_bias(&mut y, &l.bias);
            if i < last {
                y.iter_mut().for_each(|v| *v = self.activation.apply(*v));
            }
            h = y;
        }
        ensure_finite(&h, "MLP output")?;
        Ok(DenseArray::from_parts(n, self.output_dim(), h))
    }

    /// Records the forward pass on `tape`; parameter leaves are bound at
    /// `base_offset + ` their position in [`MlpParams::flatten`].
    pub fn forward_on_tape(&self, tape: &mut GradientTape, input: Var, base_offset: usize) -> Result<Var> {
        let (_, cols) = tape.shape(input);
        if cols != self.input_dim() {
            return Err(Error::Shape(format!(
                "MLP expects {} input columns, got {cols}",
                self.input_dim()
            )));
        }
        let last = self.layers.len() - 1;
        let mut at = base_offset;
        let mut h = input;
        for (i, l) in self.layers.iter().enumerate() {
            let w = tape.param(at, l.out_dim, l.in_dim, &l.weights)?;
            at += l.weights.len();
            let b = tape.param(at, 1, l.out_dim, &l.bias)?;
            at += l.bias.len();
            let z = tape.matmul_t(h, w)?;
            let y = tape.add_bias(z, b)?;
            h = if i < last { tape.activation(y, self.activation) } else { y };
        }
        Ok(h)
    }
}
