use crate::error::{Error, Result};
use crate::neural::params::prefixed;
use crate::neural::{softmax, Activation, Dense, Mlp, MlpCache, Parameters, StackedCache, StackedLstm, Tensor};
use crate::seed::Rng;

/// History encoder `f_φ1`: a per-step tanh embedding followed by a stacked
/// LSTM. Histories are cut to the last `history` observations and padded on
/// the left with zero observations.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub embed: Mlp,
    pub lstm: StackedLstm,
    pub history: usize,
}

#[derive(Debug, Clone)]
pub struct EncoderCache {
    embed: Vec<MlpCache>,
    lstm: StackedCache,
}

impl Encoder {
    pub fn new(obs_dim: usize, embed_dim: usize, hidden: usize, layers: usize, history: usize, rng: &mut Rng) -> Result<Self> {
        if history == 0 {
            return Err(Error::Config("encoder history length must be at least 1".into()));
        }
        let embed = Mlp::new(&[obs_dim, embed_dim], Activation::Tanh, rng)?;
        let lstm = StackedLstm::new(embed_dim, hidden, layers, rng)?;
        Ok(Encoder { embed, lstm, history })
    }

    pub fn obs_dim(&self) -> usize {
        self.embed.input_dim()
    }

    pub fn hidden_dim(&self) -> usize {
        self.lstm.hidden_dim()
    }

    pub fn pad(&self, history: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        if history.is_empty() {
            return Err(Error::Usage("cannot encode an empty history".into()));
        }
        let d = self.obs_dim();
        if let Some(bad) = history.iter().find(|o| o.len() != d) {
            return Err(Error::Shape(format!("observation width {} != {d}", bad.len())));
        }
        let tail = &history[history.len().saturating_sub(self.history)..];
        let mut out = vec![vec![0.0; d]; self.history - tail.len()];
        out.extend(tail.iter().cloned());
        Ok(out)
    }

    pub fn forward(&self, history: &[Vec<f64>]) -> Result<(Vec<f64>, EncoderCache)> {
        let padded = self.pad(history)?;
        let embed = padded
            .iter()
            .map(|o| self.embed.forward(o))
            .collect::<Result<Vec<_>>>()?;
        let seq: Vec<Vec<f64>> = embed.iter().map(|c| c.output().to_vec()).collect();
        let lstm = self.lstm.forward(&seq)?;
        Ok((lstm.final_hidden(), EncoderCache { embed, lstm }))
    }

    pub fn encode(&self, history: &[Vec<f64>]) -> Result<Vec<f64>> {
        Ok(self.forward(history)?.0)
    }

    pub fn backward(&self, cache: &EncoderCache, dc: &[f64], grads: &mut Encoder) -> Result<()> {
        let d_seq = self.lstm.backward_final(&cache.lstm, dc, &mut grads.lstm)?;
        for (c, d) in cache.embed.iter().zip(&d_seq) {
            if d.iter().any(|&v| v != 0.0) {
                self.embed.backward(c, d, &mut grads.embed);
            }
        }
        Ok(())
    }
}

impl Parameters for Encoder {
    fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut v = prefixed("embed", self.embed.tensors());
        v.extend(prefixed("lstm", self.lstm.tensors()));
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.embed.tensors_mut();
        v.extend(self.lstm.tensors_mut());
        v
    }
}

/// Actor `π_θ` on top of the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub encoder: Encoder,
    pub head: Dense,
}

#[derive(Debug, Clone)]
pub struct PolicyCache {
    pub encoder: EncoderCache,
    pub state: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

impl Policy {
    pub fn new(encoder: Encoder, num_stations: usize, rng: &mut Rng) -> Self {
        let head = Dense::new(encoder.hidden_dim(), num_stations, rng);
        Policy { encoder, head }
    }

    pub fn num_actions(&self) -> usize {
        self.head.output_dim()
    }

    pub fn forward(&self, history: &[Vec<f64>]) -> Result<PolicyCache> {
        let (state, encoder) = self.encoder.forward(history)?;
        let logits = self.head.forward(&state);
        let probs = softmax(&logits);
        Ok(PolicyCache { encoder, state, logits, probs })
    }

    pub fn probabilities(&self, history: &[Vec<f64>]) -> Result<Vec<f64>> {
        Ok(self.forward(history)?.probs)
    }

    /// Backpropagates a gradient on the logits.
    pub fn backward(&self, cache: &PolicyCache, d_logits: &[f64], grads: &mut Policy) -> Result<()> {
        let dc = self.head.backward(&cache.state, d_logits, &mut grads.head);
        self.encoder.backward(&cache.encoder, &dc, &mut grads.encoder)
    }
}

impl Parameters for Policy {
    fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut v = prefixed("encoder", self.encoder.tensors());
        v.extend(prefixed("head", self.head.tensors()));
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.encoder.tensors_mut();
        v.extend(self.head.tensors_mut());
        v
    }
}

/// Critic `Q_w(c, a)`: an MLP on the state concatenated with a one-hot action.
/// `encoder` is `Some` when the critic does not share the actor's encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Critic {
    pub net: Mlp,
    pub encoder: Option<Encoder>,
    pub num_actions: usize,
}

pub struct CriticCache {
    mlp: MlpCache,
    pub q: f64,
}

impl Critic {
    pub fn new(state_dim: usize, num_actions: usize, hidden: usize, encoder: Option<Encoder>, rng: &mut Rng) -> Result<Self> {
        let net = Mlp::new(&[state_dim + num_actions, hidden, 1], Activation::Linear, rng)?;
        Ok(Critic { net, encoder, num_actions })
    }

    pub fn state_dim(&self) -> usize {
        self.net.input_dim() - self.num_actions
    }

    pub fn forward(&self, state: &[f64], action: usize) -> Result<CriticCache> {
        let mut x = Vec::with_capacity(self.net.input_dim());
        x.extend_from_slice(state);
        x.extend((0..self.num_actions).map(|a| if a == action { 1.0 } else { 0.0 }));
        let mlp = self.net.forward(&x)?;
        let q = mlp.output()[0];
        Ok(CriticCache { mlp, q })
    }

    pub fn q(&self, state: &[f64], action: usize) -> Result<f64> {
        Ok(self.forward(state, action)?.q)
    }

    /// Accumulates `dq · ∇_w Q` into `grads` and returns `dq · ∂Q/∂c`.
    pub fn backward(&self, cache: &CriticCache, dq: f64, grads: &mut Mlp) -> Vec<f64> {
        let mut dx = self.net.backward(&cache.mlp, &[dq], grads);
        dx.truncate(self.state_dim());
        dx
    }
}

impl Parameters for Critic {
    fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut v = prefixed("net", self.net.tensors());
        if let Some(e) = &self.encoder {
            v.extend(prefixed("encoder", e.tensors()));
        }
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.net.tensors_mut();
        if let Some(e) = &mut self.encoder {
            v.extend(e.tensors_mut());
        }
        v
    }
}

/// Gradient of the critic loss: its MLP plus whichever encoder feeds it.
#[derive(Debug, Clone)]
pub struct CriticGrads {
    pub net: Mlp,
    pub encoder: Encoder,
}

impl Parameters for CriticGrads {
    fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut v = prefixed("net", self.net.tensors());
        v.extend(prefixed("encoder", self.encoder.tensors()));
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.net.tensors_mut();
        v.extend(self.encoder.tensors_mut());
        v
    }
}

/// Actor, live critic and target critic.
#[derive(Debug, Clone, PartialEq)]
pub struct Nets {
    pub policy: Policy,
    pub critic: Critic,
    pub target: Critic,
}

impl Nets {
    pub fn num_actions(&self) -> usize {
        self.policy.num_actions()
    }

    pub fn shared_encoder(&self) -> bool {
        self.critic.encoder.is_none()
    }

    pub fn critic_encoder(&self) -> &Encoder {
        self.critic.encoder.as_ref().unwrap_or(&self.policy.encoder)
    }

    pub fn target_encoder(&self) -> &Encoder {
        self.target.encoder.as_ref().unwrap_or(&self.policy.encoder)
    }

    pub fn update_target(&mut self) {
        self.target = self.critic.clone();
    }

    pub fn zero_policy_grads(&self) -> Policy {
        let mut g = self.policy.clone();
        g.zero();
        g
    }

    pub fn zero_critic_grads(&self) -> CriticGrads {
        let mut g = CriticGrads {
            net: self.critic.net.clone(),
            encoder: self.critic_encoder().clone(),
        };
        g.zero();
        g
    }
}

impl Parameters for Nets {
    fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut v = prefixed("policy", self.policy.tensors());
        v.extend(prefixed("critic", self.critic.tensors()));
        v.extend(prefixed("target", self.target.tensors()));
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.policy.tensors_mut();
        v.extend(self.critic.tensors_mut());
        v.extend(self.target.tensors_mut());
        v
    }
}
