use rand::Rng;

use crate::error::{Error, Result};

use super::params::{prefixed, Parameters};
use super::tensor::{affine, affine_backward, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Tanh,
    Sigmoid,
}

impl Activation {
    fn apply(self, v: &mut [f64]) {
        match self {
            Activation::Linear => {}
            Activation::Tanh => v.iter_mut().for_each(|x| *x = x.tanh()),
            Activation::Sigmoid => v.iter_mut().for_each(|x| *x = sigmoid(*x)),
        }
    }

    /// Derivative expressed through the activation's output.
    fn grad_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Fully connected layer, `y = W x + b` with `W` of shape `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        Dense {
            weight: Tensor::uniform(&[output, input], bound, rng),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Dense {
            weight: Tensor::zeros(&[output, input]),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.output_dim()];
        affine(&self.weight, &self.bias, x, &mut out);
        out
    }

    /// Accumulates into `grads`; returns the gradient w.r.t. `x`.
    pub fn backward(&self, x: &[f64], dy: &[f64], grads: &mut Dense) -> Vec<f64> {
        let mut dx = vec![0.0; self.input_dim()];
        affine_backward(
            &self.weight,
            x,
            dy,
            &mut grads.weight,
            &mut grads.bias,
            &mut dx,
        );
        dx
    }
}

impl Parameters for Dense {
    fn tensors(&self) -> Vec<(String, &Tensor)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Multi-layer perceptron with tanh hidden units and a configurable output activation.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
    output: Activation,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    /// `activations[0]` is the input; `activations[i+1]` the output of layer `i`.
    activations: Vec<Vec<f64>>,
}

impl MlpCache {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("cache holds the input at least")
    }
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(widths: &[usize], output: Activation, rng: &mut R) -> Result<Self> {
        if widths.len() < 2 || widths.iter().any(|&w| w == 0) {
            return Err(Error::Shape(format!("invalid MLP widths {widths:?}")));
        }
        let layers = widths
            .windows(2)
            .map(|w| Dense::new(w[0], w[1], rng))
            .collect();
        Ok(Mlp { layers, output })
    }

    pub fn from_layers(layers: Vec<Dense>, output: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("MLP needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::Shape(format!(
                    "MLP layer widths incompatible: {} -> {}",
                    pair[0].output_dim(),
                    pair[1].input_dim()
                )));
            }
        }
        Ok(Mlp { layers, output })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn output_activation(&self) -> Activation {
        self.output
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(Dense::output_dim).unwrap_or(0)
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim()];
        w.extend(self.layers.iter().map(Dense::output_dim));
        w
    }

    fn activation_of(&self, layer: usize) -> Activation {
        if layer + 1 == self.layers.len() {
            self.output
        } else {
            Activation::Tanh
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<MlpCache> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "MLP expects input width {}, got {}",
                self.input_dim(),
                x.len()
            )));
        }
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.to_vec());
        for (i, layer) in self.layers.iter().enumerate() {
            let mut y = layer.forward(activations.last().unwrap());
            self.activation_of(i).apply(&mut y);
            activations.push(y);
        }
        Ok(MlpCache { activations })
    }

    /// Backpropagates `dy` (gradient w.r.t. the post-activation output),
    /// accumulating into `grads`; returns the gradient w.r.t. the input.
    pub fn backward(&self, cache: &MlpCache, dy: &[f64], grads: &mut Mlp) -> Vec<f64> {
        let mut upstream = dy.to_vec();
        for i in (0..self.layers.len()).rev() {
            let act = self.activation_of(i);
            let out = &cache.activations[i + 1];
            for (g, &y) in upstream.iter_mut().zip(out) {
                *g *= act.grad_from_output(y);
            }
            upstream = self.layers[i].backward(&cache.activations[i], &upstream, &mut grads.layers[i]);
        }
        upstream
    }
}

impl Parameters for Mlp {
    fn tensors(&self) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| prefixed(&format!("layer{i}"), l.tensors()))
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.tensors_mut()).collect()
    }
}
