//! LSTM layers with backpropagation through time.
//!
//! Gate layout inside the stacked weight matrix is `[input, forget, cell, output]`,
//! each block `hidden` rows tall. A layer's weight has shape
//! `4h x (in + h)` and multiplies the concatenation `[x_t ; h_{t-1}]`.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::error::{Error, Result};

use super::mlp::sigmoid;
use super::params::{prefixed, Parameters};
use super::tensor::{affine, affine_backward, Tensor};

static NEXT_REVISION: AtomicU64 = AtomicU64::new(1);

fn next_revision() -> u64 {
    NEXT_REVISION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone)]
pub struct LstmLayer {
    weight: Tensor,
    bias: Tensor,
    input_dim: usize,
    hidden_dim: usize,
    // Changes whenever parameters may have been mutated; caches record it.
    revision: u64,
}

impl PartialEq for LstmLayer {
    fn eq(&self, other: &Self) -> bool {
        self.weight == other.weight && self.bias == other.bias
    }
}

#[derive(Debug, Clone)]
struct StepCache {
    xh: Vec<f64>,
    c_prev: Vec<f64>,
    gates: Vec<f64>,
    tanh_c: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LayerCache {
    revision: u64,
    steps: Vec<StepCache>,
    hidden: Vec<Vec<f64>>,
}

impl LayerCache {
    /// Hidden state after every step.
    pub fn hidden_states(&self) -> &[Vec<f64>] {
        &self.hidden
    }
}

impl LstmLayer {
    pub fn new<R: Rng + ?Sized>(input_dim: usize, hidden_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / ((input_dim + hidden_dim) as f64).sqrt();
        let mut bias = Tensor::zeros(&[4 * hidden_dim]);
        bias.data_mut()[hidden_dim..2 * hidden_dim]
            .iter_mut()
            .for_each(|b| *b = 1.0);
        LstmLayer {
            weight: Tensor::uniform(&[4 * hidden_dim, input_dim + hidden_dim], bound, rng),
            bias,
            input_dim,
            hidden_dim,
            revision: next_revision(),
        }
    }

    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        LstmLayer {
            weight: Tensor::zeros(&[4 * hidden_dim, input_dim + hidden_dim]),
            bias: Tensor::zeros(&[4 * hidden_dim]),
            input_dim,
            hidden_dim,
            revision: next_revision(),
        }
    }

    pub fn from_tensors(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.shape().len() != 2 || weight.rows() % 4 != 0 {
            return Err(Error::Shape(format!(
                "LSTM weight must be 4h x (in+h), got {:?}",
                weight.shape()
            )));
        }
        let hidden_dim = weight.rows() / 4;
        if weight.cols() <= hidden_dim || bias.len() != 4 * hidden_dim {
            return Err(Error::Shape(format!(
                "LSTM weight {:?} / bias {:?} inconsistent",
                weight.shape(),
                bias.shape()
            )));
        }
        Ok(LstmLayer {
            input_dim: weight.cols() - hidden_dim,
            hidden_dim,
            weight,
            bias,
            revision: next_revision(),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn forward(&self, inputs: &[Vec<f64>]) -> Result<LayerCache> {
        let h = self.hidden_dim;
        let mut h_prev = vec![0.0; h];
        let mut c_prev = vec![0.0; h];
        let mut steps = Vec::with_capacity(inputs.len());
        let mut hidden = Vec::with_capacity(inputs.len());
        let mut z = vec![0.0; 4 * h];
        for x in inputs {
            if x.len() != self.input_dim {
                return Err(Error::Shape(format!(
                    "LSTM expects input width {}, got {}",
                    self.input_dim,
                    x.len()
                )));
            }
            let mut xh = Vec::with_capacity(self.input_dim + h);
            xh.extend_from_slice(x);
            xh.extend_from_slice(&h_prev);
            affine(&self.weight, &self.bias, &xh, &mut z);
            let mut gates = z.clone();
            for (k, v) in gates.iter_mut().enumerate() {
                *v = if (2 * h..3 * h).contains(&k) {
                    v.tanh()
                } else {
                    sigmoid(*v)
                };
            }
            let mut c = vec![0.0; h];
            let mut tanh_c = vec![0.0; h];
            let mut h_new = vec![0.0; h];
            for j in 0..h {
                let (i, f, g, o) = (gates[j], gates[h + j], gates[2 * h + j], gates[3 * h + j]);
                c[j] = f * c_prev[j] + i * g;
                tanh_c[j] = c[j].tanh();
                h_new[j] = o * tanh_c[j];
            }
            steps.push(StepCache {
                xh,
                c_prev: std::mem::replace(&mut c_prev, c),
                gates,
                tanh_c,
            });
            hidden.push(h_new.clone());
            h_prev = h_new;
        }
        Ok(LayerCache {
            revision: self.revision,
            steps,
            hidden,
        })
    }

    /// BPTT over the cached sequence. `dh[t]` is the upstream gradient on the
    /// hidden output of step `t` (missing trailing entries count as zero).
    /// Accumulates parameter gradients into `grads` and returns per-step
    /// input gradients.
    pub fn backward(
        &self,
        cache: &LayerCache,
        dh: &[Vec<f64>],
        grads: &mut LstmLayer,
    ) -> Result<Vec<Vec<f64>>> {
        if cache.revision != self.revision {
            return Err(Error::Usage(
                "LSTM cache is stale: parameters changed since the forward pass".into(),
            ));
        }
        let h = self.hidden_dim;
        let n = cache.steps.len();
        if dh.len() > n || dh.iter().any(|g| g.len() != h) {
            return Err(Error::Shape("upstream gradient does not match LSTM cache".into()));
        }
        let mut dx_all = vec![Vec::new(); n];
        let mut dh_next = vec![0.0; h];
        let mut dc_next = vec![0.0; h];
        let mut dz = vec![0.0; 4 * h];
        for t in (0..n).rev() {
            let step = &cache.steps[t];
            let g = &step.gates;
            for j in 0..h {
                let dh_total = dh_next[j] + dh.get(t).map_or(0.0, |v| v[j]);
                let (i, f, gc, o) = (g[j], g[h + j], g[2 * h + j], g[3 * h + j]);
                let tc = step.tanh_c[j];
                let d_o = dh_total * tc;
                let dc = dc_next[j] + dh_total * o * (1.0 - tc * tc);
                let di = dc * gc;
                let dg = dc * i;
                let df = dc * step.c_prev[j];
                dc_next[j] = dc * f;
                dz[j] = di * i * (1.0 - i);
                dz[h + j] = df * f * (1.0 - f);
                dz[2 * h + j] = dg * (1.0 - gc * gc);
                dz[3 * h + j] = d_o * o * (1.0 - o);
            }
            let mut dxh = vec![0.0; self.input_dim + h];
            affine_backward(
                &self.weight,
                &step.xh,
                &dz,
                &mut grads.weight,
                &mut grads.bias,
                &mut dxh,
            );
            dh_next.copy_from_slice(&dxh[self.input_dim..]);
            dxh.truncate(self.input_dim);
            dx_all[t] = dxh;
        }
        Ok(dx_all)
    }
}

impl Parameters for LstmLayer {
    fn tensors(&self) -> Vec<(String, &Tensor)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.revision = next_revision();
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Layers of LSTMs where layer `l+1` consumes the hidden sequence of layer `l`.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedLstm {
    layers: Vec<LstmLayer>,
}

#[derive(Debug, Clone)]
pub struct StackedCache {
    layers: Vec<LayerCache>,
}

impl StackedCache {
    /// Top-layer hidden state after the last step (zeros for an empty sequence).
    pub fn final_hidden(&self) -> Vec<f64> {
        self.layers
            .last()
            .and_then(|c| c.hidden.last().cloned())
            .unwrap_or_default()
    }

    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, |c| c.steps.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl StackedLstm {
    pub fn new<R: Rng + ?Sized>(
        input_dim: usize,
        hidden_dim: usize,
        num_layers: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if num_layers == 0 || hidden_dim == 0 || input_dim == 0 {
            return Err(Error::Shape("stacked LSTM needs positive dims and ≥1 layer".into()));
        }
        let layers = (0..num_layers)
            .map(|l| LstmLayer::new(if l == 0 { input_dim } else { hidden_dim }, hidden_dim, rng))
            .collect();
        Ok(StackedLstm { layers })
    }

    pub fn zeros(input_dim: usize, hidden_dim: usize, num_layers: usize) -> Self {
        StackedLstm {
            layers: (0..num_layers)
                .map(|l| LstmLayer::zeros(if l == 0 { input_dim } else { hidden_dim }, hidden_dim))
                .collect(),
        }
    }

    pub fn from_layers(layers: Vec<LstmLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("stacked LSTM needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[1].input_dim != pair[0].hidden_dim {
                return Err(Error::Shape("stacked LSTM layer widths incompatible".into()));
            }
        }
        Ok(StackedLstm { layers })
    }

    pub fn layers(&self) -> &[LstmLayer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.layers.last().unwrap().hidden_dim
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn forward(&self, inputs: &[Vec<f64>]) -> Result<StackedCache> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut seq: Vec<Vec<f64>> = inputs.to_vec();
        for layer in &self.layers {
            let cache = layer.forward(&seq)?;
            seq = cache.hidden.clone();
            caches.push(cache);
        }
        Ok(StackedCache { layers: caches })
    }

    /// Backpropagates a gradient on the top layer's final hidden state.
    pub fn backward_final(
        &self,
        cache: &StackedCache,
        d_final: &[f64],
        grads: &mut StackedLstm,
    ) -> Result<Vec<Vec<f64>>> {
        let n = cache.len();
        let h = self.hidden_dim();
        if d_final.len() != h {
            return Err(Error::Shape("final-state gradient has wrong width".into()));
        }
        let mut dh = vec![vec![0.0; h]; n];
        if let Some(last) = dh.last_mut() {
            last.copy_from_slice(d_final);
        }
        self.backward(cache, &dh, grads)
    }

    /// Backpropagates per-step gradients on the top layer's hidden outputs.
    pub fn backward(
        &self,
        cache: &StackedCache,
        dh_top: &[Vec<f64>],
        grads: &mut StackedLstm,
    ) -> Result<Vec<Vec<f64>>> {
        if cache.layers.len() != self.layers.len() {
            return Err(Error::Usage("cache does not belong to this stacked LSTM".into()));
        }
        let mut upstream = dh_top.to_vec();
        for l in (0..self.layers.len()).rev() {
            upstream = self.layers[l].backward(&cache.layers[l], &upstream, &mut grads.layers[l])?;
        }
        Ok(upstream)
    }
}

impl Parameters for StackedLstm {
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::SeedTree;

    fn random_inputs(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = SeedTree::new(seed).rng("inputs");
        (0..n)
            .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect()
    }

    #[test]
    fn parameter_count_formula() {
        let mut rng = SeedTree::new(1).rng("init");
        let net = StackedLstm::new(7, 5, 2, &mut rng).unwrap();
        let expected = 4 * 5 * (7 + 5 + 1) + 4 * 5 * (5 + 5 + 1);
        assert_eq!(net.param_count(), expected);
    }

    #[test]
    fn forget_bias_starts_at_one() {
        let mut rng = SeedTree::new(1).rng("init");
        let layer = LstmLayer::new(3, 4, &mut rng);
        let b = layer.bias().data();
        assert!(b[..4].iter().all(|&v| v == 0.0));
        assert!(b[4..8].iter().all(|&v| v == 1.0));
        assert!(b[8..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_parameters_collapse_to_zero_state() {
        let net = StackedLstm::zeros(4, 6, 2);
        let cache = net.forward(&random_inputs(5, 4, 9)).unwrap();
        assert!(cache.final_hidden().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_cell_matches_hand_evaluation() {
        // in = 1, h = 1; weights per gate row = [w_x, w_h], bias per gate.
        let w = Tensor::from_vec(&[4, 2], vec![0.5, 0.1, -0.3, 0.2, 0.8, -0.4, 1.2, 0.3]).unwrap();
        let b = Tensor::from_vec(&[4], vec![0.1, 1.0, -0.2, 0.05]).unwrap();
        let layer = LstmLayer::from_tensors(w, b).unwrap();
        let x = 0.7;
        let cache = layer.forward(&[vec![x]]).unwrap();
        let s = |v: f64| 1.0 / (1.0 + (-v).exp());
        let i = s(0.5 * x + 0.1);
        let _f = s(-0.3 * x + 1.0);
        let g = (0.8 * x - 0.2).tanh();
        let o = s(1.2 * x + 0.05);
        let c = i * g; // c_prev = 0
        let h = o * c.tanh();
        assert!((cache.hidden_states()[0][0] - h).abs() < 1e-15);
    }

    #[test]
    fn order_matters() {
        let mut rng = SeedTree::new(5).rng("init");
        let net = StackedLstm::new(3, 4, 2, &mut rng).unwrap();
        let xs = random_inputs(4, 3, 11);
        let mut rev = xs.clone();
        rev.reverse();
        let a = net.forward(&xs).unwrap().final_hidden();
        let b = net.forward(&rev).unwrap().final_hidden();
        assert_ne!(a, b);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = SeedTree::new(5).rng("init");
        let net = StackedLstm::new(3, 4, 2, &mut rng).unwrap();
        let cache = net.forward(&random_inputs(3, 3, 2)).unwrap();
        let mut grads = StackedLstm::zeros(3, 4, 2);
        net.backward_final(&cache, &[0.0; 4], &mut grads).unwrap();
        assert_eq!(grads.squared_norm(), 0.0);
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut rng = SeedTree::new(5).rng("init");
        let mut net = StackedLstm::new(3, 4, 1, &mut rng).unwrap();
        let cache = net.forward(&random_inputs(2, 3, 2)).unwrap();
        net.tensors_mut()[0].data_mut()[0] += 0.1;
        let mut grads = StackedLstm::zeros(3, 4, 1);
        let err = net.backward_final(&cache, &[1.0; 4], &mut grads).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
    }

    #[test]
    fn dimension_mismatch_is_shape_error() {
        let net = StackedLstm::zeros(3, 2, 1);
        assert!(matches!(net.forward(&[vec![1.0; 4]]), Err(Error::Shape(_))));
    }

    #[test]
    fn shared_weight_gradient_sums_over_steps() {
        // Two identical steps: the weight gradient equals the sum of the
        // contributions recovered by differentiating each step separately.
        let w = Tensor::from_vec(&[4, 2], vec![0.4, 0.3, -0.2, 0.5, 0.9, -0.6, 0.7, 0.1]).unwrap();
        let b = Tensor::from_vec(&[4], vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        let layer = LstmLayer::from_tensors(w, b).unwrap();
        let xs = vec![vec![0.5], vec![-0.8]];
        let cache = layer.forward(&xs).unwrap();
        let mut total = LstmLayer::zeros(1, 1);
        layer.backward(&cache, &[vec![0.0], vec![1.0]], &mut total).unwrap();

        // Contribution of step 2 alone: backprop only through the last step,
        // stopping the recurrence.
        let single = |t: usize, dh_t: f64, dc_t: f64| -> Vec<f64> {
            let s = &cache.steps[t];
            let g = &s.gates;
            let tc = s.tanh_c[0];
            let d_o = dh_t * tc;
            let dc = dc_t + dh_t * g[3] * (1.0 - tc * tc);
            let dz = [
                dc * g[2] * g[0] * (1.0 - g[0]),
                dc * s.c_prev[0] * g[1] * (1.0 - g[1]),
                dc * g[0] * (1.0 - g[2] * g[2]),
                d_o * g[3] * (1.0 - g[3]),
            ];
            let mut out = Vec::new();
            for r in 0..4 {
                out.push(dz[r] * s.xh[0]);
                out.push(dz[r] * s.xh[1]);
            }
            out
        };
        // Upstream into step 1: dh via W_h^T dz2 and dc via f2.
        let s2 = &cache.steps[1];
        let g2 = &s2.gates;
        let tc2 = s2.tanh_c[0];
        let dc2 = g2[3] * (1.0 - tc2 * tc2);
        let dz2 = [
            dc2 * g2[2] * g2[0] * (1.0 - g2[0]),
            dc2 * s2.c_prev[0] * g2[1] * (1.0 - g2[1]),
            dc2 * g2[0] * (1.0 - g2[2] * g2[2]),
            tc2 * g2[3] * (1.0 - g2[3]),
        ];
        let wd = layer.weight().data();
        let dh1: f64 = (0..4).map(|r| wd[r * 2 + 1] * dz2[r]).sum();
        let dc1 = dc2 * g2[1];
        let a = single(1, 1.0, 0.0);
        let b1 = single(0, dh1, dc1);
        for k in 0..8 {
            let expect = a[k] + b1[k];
            assert!((total.weight().data()[k] - expect).abs() < 1e-14);
        }
    }
}
