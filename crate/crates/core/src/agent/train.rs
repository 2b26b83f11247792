use std::io::Write;
use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::{clip_global_norm, sgd_step, softmax_backward, Parameters};
use crate::reward::{RewardNet, RewardSource};
use crate::seed::{Rng, SeedTree};

use super::buffer::ReplayBuffer;
use super::nets::{EncoderCache, Nets, Policy, PolicyCache};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularizer {
    /// Softmax cross-entropy gradient `π − â` on the logits.
    CrossEntropy,
    /// Per-station binary-CE output gradient chained through the softmax.
    Elementwise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyGradient {
    /// `∇ log π(a|c) · Q_w(c, a)` with `a ~ π`.
    Q,
    /// `∇ log π(a|c) · (−δ)` for the action the TD error refers to.
    Td,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderMode {
    Shared,
    Separate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticAction {
    Logged,
    Sampled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardUpdate {
    Supervised,
    TdCoupled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RacConfig {
    pub learning_rate: f64,
    pub epsilon: f64,
    pub gamma: f64,
    pub horizon: usize,
    pub history: usize,
    pub embed: usize,
    pub hidden: usize,
    pub layers: usize,
    pub critic_hidden: usize,
    pub target_copy_interval: u64,
    pub clip_norm: f64,
    pub epochs: usize,
    /// Sequences per update (`I`).
    pub episodes: usize,
    /// Updates per epoch; by default enough to visit the buffer once.
    pub updates_per_epoch: Option<usize>,
    pub buffer_capacity: Option<usize>,
    /// Critic values are learned in reward units divided by this.
    pub critic_scale: f64,
    pub regularizer: Regularizer,
    pub policy_gradient: PolicyGradient,
    pub encoder: EncoderMode,
    pub critic_action: CriticAction,
    pub reward_update: RewardUpdate,
    pub reward_learning_rate: f64,
    pub warmup: bool,
    pub warmup_salt: String,
    pub finetune_epochs: usize,
    /// Keep the fine-tuning snapshot with the best validation P@1 and stop
    /// after `patience` epochs without improvement.
    pub early_stopping: bool,
    pub patience: usize,
}

impl Default for RacConfig {
    fn default() -> Self {
        RacConfig {
            learning_rate: 0.001,
            epsilon: 0.5,
            gamma: 0.99,
            horizon: 10,
            history: 5,
            embed: 64,
            hidden: 100,
            layers: 2,
            critic_hidden: 64,
            target_copy_interval: 100,
            clip_norm: 5.0,
            epochs: 50,
            episodes: 8,
            updates_per_epoch: None,
            buffer_capacity: None,
            critic_scale: 100.0,
            regularizer: Regularizer::CrossEntropy,
            policy_gradient: PolicyGradient::Q,
            encoder: EncoderMode::Shared,
            critic_action: CriticAction::Logged,
            reward_update: RewardUpdate::Supervised,
            reward_learning_rate: 0.001,
            warmup: true,
            warmup_salt: "warmup".into(),
            finetune_epochs: 50,
            early_stopping: true,
            patience: 10,
        }
    }
}

impl RacConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(0.0..=1.0).contains(&self.epsilon) {
            return bad("epsilon must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1]");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.reward_learning_rate >= 0.0) {
            return bad("reward_learning_rate must be non-negative");
        }
        if !(self.critic_scale > 0.0) {
            return bad("critic_scale must be positive");
        }
        if self.horizon == 0 || self.history == 0 || self.embed == 0 || self.hidden == 0 || self.layers == 0 {
            return bad("horizon, history, embed, hidden and layers must be positive");
        }
        if self.critic_hidden == 0 || self.episodes == 0 || self.target_copy_interval == 0 {
            return bad("critic_hidden, episodes and target_copy_interval must be positive");
        }
        if self.updates_per_epoch == Some(0) {
            return bad("updates_per_epoch must be positive");
        }
        if !self.clip_norm.is_finite() {
            return bad("clip_norm must be finite");
        }
        Ok(())
    }

    pub fn updates_for(&self, buffer: &ReplayBuffer) -> usize {
        self.updates_per_epoch
            .unwrap_or_else(|| buffer.len().div_ceil(self.episodes).max(1))
    }
}

/// `y = r + γ·Q_tar`, or `r` at a terminal step.
pub fn td_target(reward: f64, gamma: f64, q_target: f64, terminal: bool) -> f64 {
    if terminal || gamma == 0.0 {
        reward
    } else {
        reward + gamma * q_target
    }
}

pub const PROB_FLOOR: f64 = 1e-7;

/// `η_k = (â_k − π_k) / ((1 − π_k) π_k) / M` with `π` clamped away from 0 and 1.
pub fn regularization_gradient(probs: &[f64], target: &[f64]) -> Vec<f64> {
    let m = probs.len() as f64;
    probs
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let p = p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
            (t - p) / ((1.0 - p) * p) / m
        })
        .collect()
}

/// Descent direction on the logits for the imitation term.
pub fn regularizer_logit_grad(kind: Regularizer, probs: &[f64], action: usize) -> Vec<f64> {
    match kind {
        Regularizer::CrossEntropy => probs
            .iter()
            .enumerate()
            .map(|(k, &p)| if k == action { p - 1.0 } else { p })
            .collect(),
        Regularizer::Elementwise => {
            let target: Vec<f64> = (0..probs.len()).map(|k| if k == action { 1.0 } else { 0.0 }).collect();
            let eta = regularization_gradient(probs, &target);
            let d_probs: Vec<f64> = eta.iter().map(|e| -e).collect();
            softmax_backward(probs, &d_probs)
        }
    }
}

/// Descent direction on the logits for `−A · log π(a)`.
pub fn policy_gradient_logits(probs: &[f64], action: usize, advantage: f64) -> Vec<f64> {
    probs
        .iter()
        .enumerate()
        .map(|(k, &p)| -advantage * (if k == action { 1.0 } else { 0.0 } - p))
        .collect()
}

pub fn sample_categorical(probs: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (k, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    probs.len() - 1
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub critic_mse: f64,
    pub ce_loss: f64,
    pub mean_reward: f64,
    pub wallclock_ms: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BatchStats {
    pub steps: usize,
    pub squared_td: f64,
    pub cross_entropy: f64,
    pub sampled_reward: f64,
    /// `δ_t` per processed step, in batch order, from pre-update parameters.
    pub deltas: Vec<f64>,
}

impl BatchStats {
    fn absorb(&mut self, other: BatchStats) {
        self.steps += other.steps;
        self.squared_td += other.squared_td;
        self.cross_entropy += other.cross_entropy;
        self.sampled_reward += other.sampled_reward;
    }
}

/// Runs the regularized actor-critic updates over a fixed buffer.
pub struct Trainer<'a> {
    cfg: &'a RacConfig,
    buffer: &'a ReplayBuffer,
    reward: &'a dyn RewardSource,
    batch_rng: Rng,
    action_rng: Rng,
    updates: u64,
    coupled: Option<RewardNet>,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &'a RacConfig, buffer: &'a ReplayBuffer, reward: &'a dyn RewardSource, seeds: &SeedTree) -> Result<Self> {
        cfg.validate()?;
        if buffer.is_empty() {
            return Err(Error::Usage("replay buffer is empty".into()));
        }
        let coupled = match cfg.reward_update {
            RewardUpdate::Supervised => None,
            RewardUpdate::TdCoupled => Some(
                reward
                    .forecaster()
                    .ok_or_else(|| Error::Config("td_coupled reward updates need a learned reward network".into()))?
                    .0
                    .clone(),
            ),
        };
        Ok(Trainer {
            cfg,
            buffer,
            reward,
            batch_rng: seeds.rng("buffer"),
            action_rng: seeds.rng("actions"),
            updates: 0,
            coupled,
        })
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    /// The reward network as updated by coupled training.
    pub fn into_reward_net(self) -> Option<RewardNet> {
        self.coupled
    }

    pub fn sample_batch(&mut self) -> Vec<usize> {
        self.buffer.sample(self.cfg.episodes, &mut self.batch_rng)
    }

    pub fn epoch(&mut self, nets: &mut Nets, epoch: usize) -> Result<EpochLog> {
        let started = Instant::now();
        let mut total = BatchStats::default();
        for _ in 0..self.cfg.updates_for(self.buffer) {
            let batch = self.sample_batch();
            total.absorb(self.update(nets, &batch)?);
        }
        let n = total.steps.max(1) as f64;
        Ok(EpochLog {
            epoch,
            critic_mse: total.squared_td / n,
            ce_loss: total.cross_entropy / n,
            mean_reward: total.sampled_reward / n,
            wallclock_ms: started.elapsed().as_millis() as u64,
        })
    }

    /// One update of critic, encoder and actor from the given windows.
    pub fn update(&mut self, nets: &mut Nets, batch: &[usize]) -> Result<BatchStats> {
        let cfg = self.cfg;
        let eps = cfg.epsilon;
        let n: usize = batch.iter().map(|&w| self.buffer.window(w).len()).sum();
        let inv_n = 1.0 / n as f64;
        let mut g_pol = nets.zero_policy_grads();
        let mut g_crit = nets.zero_critic_grads();
        let mut g_rew = self.coupled.as_ref().map(RewardNet::zeros_like);
        let mut stats = BatchStats::default();

        for &w in batch {
            let steps = self.buffer.window(w);
            let pol: Vec<PolicyCache> = steps
                .iter()
                .map(|s| nets.policy.forward(&s.history))
                .collect::<Result<_>>()?;
            let own: Option<Vec<(Vec<f64>, EncoderCache)>> = match &nets.critic.encoder {
                Some(enc) => Some(steps.iter().map(|s| enc.forward(&s.history)).collect::<Result<_>>()?),
                None => None,
            };
            for (t, s) in steps.iter().enumerate() {
                let pc = &pol[t];
                let sampled = sample_categorical(&pc.probs, &mut self.action_rng);
                let ca = match cfg.critic_action {
                    CriticAction::Logged => s.action,
                    CriticAction::Sampled => sampled,
                };

                let mut reward = s.rewards[ca];
                let mut coupled_grad = None;
                if let (Some(net), Some((_, table, stations))) = (&self.coupled, self.reward.forecaster()) {
                    if let Some(x) = net.inputs(table, stations, ca, s.point.hour) {
                        let terms = self.reward.terms(&s.point, ca)?;
                        let (raw, cache) = net.forward(&x)?;
                        let z = (raw * net.wait_scale).max(0.0);
                        reward = crate::reward::RewardTerms { z_hat: z, ..terms }.reward();
                        if raw > 0.0 {
                            let dr_draw = -terms.scale / terms.z_norm * net.wait_scale;
                            coupled_grad = Some((cache, dr_draw));
                        }
                    }
                }

                let terminal = t + 1 == steps.len();
                let q_next = if terminal {
                    0.0
                } else {
                    let a_next = sample_categorical(&pol[t + 1].probs, &mut self.action_rng);
                    let c_next = match &nets.target.encoder {
                        Some(enc) => enc.encode(&steps[t + 1].history)?,
                        None => pol[t + 1].state.clone(),
                    };
                    nets.target.q(&c_next, a_next)?
                };
                let y = td_target(reward / cfg.critic_scale, cfg.gamma, q_next, terminal);

                let (c_crit, crit_cache) = match &own {
                    Some(v) => (&v[t].0, &v[t].1),
                    None => (&pc.state, &pc.encoder),
                };
                let qc = nets.critic.forward(c_crit, ca)?;
                let delta = qc.q - y;
                let ce = -pc.probs[s.action].max(f64::MIN_POSITIVE).ln();
                if !(delta.is_finite() && pc.probs.iter().all(|p| p.is_finite())) {
                    return Err(Error::Numeric {
                        message: format!("non-finite loss at update {}", self.updates + 1),
                        dump: format!(
                            "window {w} step {t}: action {} critic action {ca} reward {reward} q {} y {y} probs {:?} logits {:?}",
                            s.action, qc.q, pc.probs, pc.logits
                        ),
                    });
                }

                let dc = nets.critic.backward(&qc, delta * inv_n, &mut g_crit.net);
                nets.critic_encoder().backward(crit_cache, &dc, &mut g_crit.encoder)?;
                if let (Some((cache, dr)), Some(net), Some(g)) = (coupled_grad, &self.coupled, &mut g_rew) {
                    // δ depends on the forecast through y = r/scale + ...
                    net.backward(&cache, -delta * inv_n * dr / cfg.critic_scale, g)?;
                }

                let mut d_logits = if eps != 0.0 {
                    regularizer_logit_grad(cfg.regularizer, &pc.probs, s.action)
                        .into_iter()
                        .map(|g| eps * g)
                        .collect()
                } else {
                    vec![0.0; pc.probs.len()]
                };
                if eps != 1.0 {
                    let (action, advantage) = match cfg.policy_gradient {
                        PolicyGradient::Q => (sampled, nets.critic.q(c_crit, sampled)?),
                        PolicyGradient::Td => (ca, -delta),
                    };
                    let pg = policy_gradient_logits(&pc.probs, action, advantage);
                    for (d, g) in d_logits.iter_mut().zip(pg) {
                        *d += (1.0 - eps) * g;
                    }
                }
                for d in &mut d_logits {
                    *d *= inv_n;
                }
                nets.policy.backward(pc, &d_logits, &mut g_pol)?;

                stats.steps += 1;
                stats.squared_td += delta * delta;
                stats.cross_entropy += ce;
                stats.sampled_reward += s.rewards[sampled];
                stats.deltas.push(delta);
            }
        }

        clip_global_norm(&mut g_pol, cfg.clip_norm);
        clip_global_norm(&mut g_crit, cfg.clip_norm);
        sgd_step(&mut nets.policy, &g_pol, cfg.learning_rate)?;
        sgd_step(&mut nets.critic.net, &g_crit.net, cfg.learning_rate)?;
        match &mut nets.critic.encoder {
            Some(enc) => sgd_step(enc, &g_crit.encoder, cfg.learning_rate)?,
            None => sgd_step(&mut nets.policy.encoder, &g_crit.encoder, cfg.learning_rate)?,
        }
        if let (Some(net), Some(mut g)) = (&mut self.coupled, g_rew) {
            clip_global_norm(&mut g, cfg.clip_norm);
            sgd_step(net, &g, cfg.reward_learning_rate)?;
        }
        self.updates += 1;
        if self.updates % cfg.target_copy_interval == 0 {
            nets.update_target();
        }
        if !(nets.policy.all_finite() && nets.critic.all_finite()) {
            return Err(Error::Numeric {
                message: format!("parameters became non-finite at update {}", self.updates),
                dump: format!("batch windows {batch:?}"),
            });
        }
        Ok(stats)
    }
}

/// Output of a full training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    pub updates: u64,
    pub reward_net: Option<RewardNet>,
}

pub fn write_log_line<W: Write + ?Sized>(sink: &mut W, entry: &EpochLog) -> Result<()> {
    let line = serde_json::to_string(entry).map_err(|e| Error::Format(e.to_string()))?;
    writeln!(sink, "{line}").map_err(|e| Error::io("<training log>", e))
}

/// Trains for `cfg.epochs` epochs, emitting one JSON line per epoch to `sink`.
pub fn train_rac(
    nets: &mut Nets,
    buffer: &ReplayBuffer,
    reward: &dyn RewardSource,
    cfg: &RacConfig,
    seeds: &SeedTree,
    mut sink: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(cfg, buffer, reward, seeds)?;
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let entry = trainer.epoch(nets, epoch)?;
        if let Some(s) = sink.as_deref_mut() {
            write_log_line(s, &entry)?;
        }
        log.push(entry);
    }
    let updates = trainer.updates();
    Ok(TrainOutcome {
        log,
        updates,
        reward_net: trainer.into_reward_net(),
    })
}

/// Supervised cross-entropy training of the actor alone.
pub struct CeTrainer<'a> {
    cfg: &'a RacConfig,
    buffer: &'a ReplayBuffer,
    batch_rng: Rng,
}

impl<'a> CeTrainer<'a> {
    pub fn new(cfg: &'a RacConfig, buffer: &'a ReplayBuffer, seeds: &SeedTree) -> Result<Self> {
        cfg.validate()?;
        if buffer.is_empty() {
            return Err(Error::Usage("replay buffer is empty".into()));
        }
        Ok(CeTrainer {
            cfg,
            buffer,
            batch_rng: seeds.rng("buffer"),
        })
    }

    pub fn sample_batch(&mut self) -> Vec<usize> {
        self.buffer.sample(self.cfg.episodes, &mut self.batch_rng)
    }

    /// One step of mean softmax cross-entropy; returns the batch loss.
    pub fn update(&self, policy: &mut Policy, batch: &[usize]) -> Result<f64> {
        let n: usize = batch.iter().map(|&w| self.buffer.window(w).len()).sum();
        let inv_n = 1.0 / n as f64;
        let mut grads = policy.clone();
        grads.zero();
        let mut loss = 0.0;
        for &w in batch {
            for s in self.buffer.window(w) {
                let pc = policy.forward(&s.history)?;
                loss -= pc.probs[s.action].max(f64::MIN_POSITIVE).ln();
                let mut d = regularizer_logit_grad(Regularizer::CrossEntropy, &pc.probs, s.action);
                for v in &mut d {
                    *v *= inv_n;
                }
                policy.backward(&pc, &d, &mut grads)?;
            }
        }
        clip_global_norm(&mut grads, self.cfg.clip_norm);
        sgd_step(policy, &grads, self.cfg.learning_rate)?;
        Ok(loss * inv_n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn td_target_cases() {
        assert_eq!(td_target(-200.0, 0.99, -100.0, false), -299.0);
        assert_eq!(td_target(-200.0, 0.99, -100.0, true), -200.0);
        assert_eq!(td_target(-5.0, 0.0, 1e9, false), -5.0);
    }

    #[test]
    fn eta_cases() {
        let e = regularization_gradient(&[0.5, 0.5], &[1.0, 0.0]);
        assert!((e[0] - 1.0).abs() < 1e-12 && (e[1] + 1.0).abs() < 1e-12);
        let single = regularization_gradient(&[0.9], &[1.0]);
        assert!((single[0] - 1.0 / 0.09 * 0.1).abs() < 1e-12);
        assert!((single[0] - 1.1111111111111112).abs() < 1e-9);
        assert_eq!(regularization_gradient(&[0.3, 0.7], &[0.3, 0.7]), vec![0.0, 0.0]);
        assert!(regularization_gradient(&[0.0, 1.0], &[1.0, 0.0]).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn categorical_sampling_matches_probabilities() {
        let mut rng = SeedTree::new(5).rng("s");
        let probs = [0.2, 0.5, 0.3];
        let mut counts = [0usize; 3];
        for _ in 0..20000 {
            counts[sample_categorical(&probs, &mut rng)] += 1;
        }
        for k in 0..3 {
            assert!((counts[k] as f64 / 20000.0 - probs[k]).abs() < 0.02);
        }
    }
}
