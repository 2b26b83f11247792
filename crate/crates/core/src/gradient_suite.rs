//! Registered gradient paths checked against central finite differences.

use rand::Rng as _;
use serde::Serialize;

use crate::agent::{Critic, Encoder};
use crate::error::Result;
use crate::neural::gradcheck::{numeric_gradient, vector_relative_error, DEFAULT_STEP};
use crate::neural::{
    one_hot, softmax_cross_entropy, Activation, Dense, LstmLayer, Mlp, Parameters, StackedLstm, Tensor,
};
use crate::reward::RewardNet;
use crate::seed::{Rng, SeedTree};

pub const TOLERANCE: f64 = 1e-5;
pub const PATHS: [&str; 5] = ["mlp", "lstm_cell", "stacked_lstm_ce", "critic_mse", "reward_net_mse"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathReport {
    pub path: String,
    pub instances: usize,
    pub max_relative_error: f64,
    pub passed: bool,
}

fn dim(rng: &mut Rng) -> usize {
    rng.gen_range(1..=8)
}

fn vector(n: usize, rng: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn sequence(len: usize, width: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    (0..len).map(|_| vector(width, rng)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Relative error between the analytic gradient and central differences,
/// measured on the whole parameter vector.
fn check<P: Parameters + Clone, F: Fn(&P) -> f64>(model: &P, analytic: &P, loss: F, step: f64) -> f64 {
    let numeric = numeric_gradient(model, &loss, step);
    vector_relative_error(&analytic.flatten(), &numeric)
}

/// Redraws every parameter from `U(-1, 1)` so that no path is checked only
/// in its near-zero initial regime.
fn randomize<P: Parameters>(p: &mut P, rng: &mut Rng) {
    for t in p.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
    }
}

fn zeroed<P: Parameters + Clone>(p: &P) -> P {
    let mut g = p.clone();
    g.zero();
    g
}

fn mlp_instance(rng: &mut Rng) -> Result<f64> {
    let depth = rng.gen_range(2..=4);
    let widths: Vec<usize> = (0..depth).map(|_| dim(rng)).collect();
    let mut net = Mlp::new(&widths, Activation::Tanh, rng)?;
    randomize(&mut net, rng);
    let x = vector(widths[0], rng);
    let w = vector(*widths.last().expect("non-empty"), rng);
    let cache = net.forward(&x)?;
    let mut g = zeroed(&net);
    net.backward(&cache, &w, &mut g);
    Ok(check(&net, &g, |m: &Mlp| dot(m.forward(&x).expect("forward").output(), &w), DEFAULT_STEP))
}

fn lstm_cell_instance(rng: &mut Rng) -> Result<f64> {
    let (d, h, len) = (dim(rng), dim(rng), rng.gen_range(1..=4));
    let mut cell = LstmLayer::new(d, h, rng);
    randomize(&mut cell, rng);
    let xs = sequence(len, d, rng);
    let ws = sequence(len, h, rng);
    let loss = |c: &LstmLayer| -> f64 {
        let cache = c.forward(&xs).expect("forward");
        cache.hidden_states().iter().zip(&ws).map(|(hs, w)| dot(hs, w)).sum()
    };
    let cache = cell.forward(&xs)?;
    let mut g = LstmLayer::zeros(d, h);
    cell.backward(&cache, &ws, &mut g)?;
    Ok(check(&cell, &g, loss, DEFAULT_STEP))
}

#[derive(Clone)]
struct LstmClassifier {
    lstm: StackedLstm,
    head: Dense,
}

impl Parameters for LstmClassifier {
    fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut v = self.lstm.tensors();
        v.extend(self.head.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.lstm.tensors_mut();
        v.extend(self.head.tensors_mut());
        v
    }
}

fn stacked_ce_instance(rng: &mut Rng) -> Result<f64> {
    let (d, h, classes, len) = (dim(rng), dim(rng), rng.gen_range(2..=8), rng.gen_range(1..=4));
    let mut model = LstmClassifier {
        lstm: StackedLstm::new(d, h, 2, rng)?,
        head: Dense::new(h, classes, rng),
    };
    randomize(&mut model, rng);
    let xs = sequence(len, d, rng);
    let target = one_hot(rng.gen_range(0..classes), classes);
    let loss = |m: &LstmClassifier| -> f64 {
        let c = m.lstm.forward(&xs).expect("forward");
        softmax_cross_entropy(&m.head.forward(&c.final_hidden()), &target).expect("ce").0
    };
    let cache = model.lstm.forward(&xs)?;
    let last = cache.final_hidden();
    let (_, d_logits) = softmax_cross_entropy(&model.head.forward(&last), &target)?;
    let mut g = zeroed(&model);
    let dh = model.head.backward(&last, &d_logits, &mut g.head);
    model.lstm.backward_final(&cache, &dh, &mut g.lstm)?;
    Ok(check(&model, &g, loss, DEFAULT_STEP))
}

fn critic_instance(rng: &mut Rng) -> Result<f64> {
    let (obs, embed, h, actions) = (dim(rng), dim(rng), dim(rng), rng.gen_range(1..=8));
    let history = rng.gen_range(1..=4);
    let encoder = Encoder::new(obs, embed, h, 2, history, rng)?;
    let mut critic = Critic::new(h, actions, dim(rng), Some(encoder), rng)?;
    randomize(&mut critic, rng);
    let xs = sequence(rng.gen_range(1..=history), obs, rng);
    let action = rng.gen_range(0..actions);
    let y = rng.gen_range(-1.0..1.0);
    let loss = |c: &Critic| -> f64 {
        let s = c.encoder.as_ref().expect("encoder").encode(&xs).expect("encode");
        let q = c.q(&s, action).expect("q");
        (q - y) * (q - y)
    };
    let enc = critic.encoder.as_ref().expect("encoder");
    let (state, enc_cache) = enc.forward(&xs)?;
    let cache = critic.forward(&state, action)?;
    let mut g = zeroed(&critic);
    let dc = critic.backward(&cache, 2.0 * (cache.q - y), &mut g.net);
    enc.backward(&enc_cache, &dc, g.encoder.as_mut().expect("encoder"))?;
    Ok(check(&critic, &g, loss, DEFAULT_STEP))
}

fn reward_net_instance(rng: &mut Rng) -> Result<f64> {
    let (m, h, window) = (rng.gen_range(1..=4), dim(rng), rng.gen_range(1..=4));
    let mut net = RewardNet::new(m, h, 2, window, 1.0, rng)?;
    randomize(&mut net, rng);
    let width = crate::reward::net::reward_input_dim(m);
    let xs = sequence(window, width, rng);
    let y = rng.gen_range(-1.0..1.0);
    let loss = |n: &RewardNet| -> f64 {
        let out = n.forward(&xs).expect("forward").0;
        (out - y) * (out - y)
    };
    let (out, cache) = net.forward(&xs)?;
    let mut g = net.zeros_like();
    net.backward(&cache, 2.0 * (out - y), &mut g)?;
    Ok(check(&net, &g, loss, DEFAULT_STEP))
}

/// Runs `instances` random instances of every registered path.
pub fn run(seed: u64, instances: usize) -> Result<Vec<PathReport>> {
    let seeds = SeedTree::new(seed);
    let mut out = Vec::with_capacity(PATHS.len());
    for path in PATHS {
        let mut rng = seeds.rng(path);
        let mut worst: f64 = 0.0;
        for _ in 0..instances {
            let e = match path {
                "mlp" => mlp_instance(&mut rng)?,
                "lstm_cell" => lstm_cell_instance(&mut rng)?,
                "stacked_lstm_ce" => stacked_ce_instance(&mut rng)?,
                "critic_mse" => critic_instance(&mut rng)?,
                _ => reward_net_instance(&mut rng)?,
            };
            worst = worst.max(if e.is_nan() { f64::INFINITY } else { e });
        }
        out.push(PathReport {
            path: path.to_string(),
            instances,
            max_relative_error: worst,
            passed: worst < TOLERANCE,
        });
    }
    Ok(out)
}
