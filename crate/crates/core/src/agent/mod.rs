//! Regularized actor-critic recommender.

pub mod buffer;
pub mod model;
pub mod nets;
pub mod train;

use chrono::{DateTime, Utc};
use serde::Serialize;

use crate::dataset::{format_time, ChargingEvent};
use crate::error::{Error, Result};
use crate::evaluation::rank_desc;
use crate::features::{hour_index, FeatureSpace};
use crate::geospatial::StationTable;
use crate::reward::{DecisionPoint, RewardSource};
use crate::seed::Rng;

pub use buffer::{build_steps, ReplayBuffer, Step};
pub use model::{train_population, DriverModel, PopulationLog, RacModel, RacRecommender};
pub use nets::{Critic, Encoder, Nets, Policy};
pub use train::{
    regularization_gradient, td_target, train_rac, CeTrainer, CriticAction, EncoderMode, EpochLog, PolicyGradient,
    RacConfig, Regularizer, RewardUpdate, TrainOutcome, Trainer,
};

/// Freshly initialized actor, critic and target for `obs_dim`-wide observations over `m` stations.
pub fn init_nets(cfg: &RacConfig, obs_dim: usize, m: usize, rng: &mut Rng) -> Result<Nets> {
    cfg.validate()?;
    let encoder = Encoder::new(obs_dim, cfg.embed, cfg.hidden, cfg.layers, cfg.history, rng)?;
    let policy = Policy::new(encoder, m, rng);
    let critic_encoder = match cfg.encoder {
        EncoderMode::Shared => None,
        EncoderMode::Separate => Some(Encoder::new(obs_dim, cfg.embed, cfg.hidden, cfg.layers, cfg.history, rng)?),
    };
    let critic = Critic::new(cfg.hidden, m, cfg.critic_hidden, critic_encoder, rng)?;
    Ok(Nets {
        target: critic.clone(),
        policy,
        critic,
    })
}

pub fn encode_history(encoder: &Encoder, history: &[Vec<f64>]) -> Result<Vec<f64>> {
    encoder.encode(history)
}

pub fn actor_forward(policy: &Policy, history: &[Vec<f64>]) -> Result<Vec<f64>> {
    policy.probabilities(history)
}

/// Observations of the last `k` events of `prefix` (a driver's events in time order).
pub fn history_observations(
    prefix: &[ChargingEvent],
    k: usize,
    features: &FeatureSpace,
    stations: &StationTable,
) -> Result<Vec<Vec<f64>>> {
    // One extra leading event supplies the previous station of the first kept observation.
    let from = prefix.len().saturating_sub(k + 1);
    let (_, obs) = buffer::trajectory_observations(&prefix[from..], features, stations)?;
    Ok(obs[obs.len().saturating_sub(k)..].to_vec())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecommendationItem {
    pub station_id: String,
    pub prob: f64,
    pub est_wait_min: f64,
    pub est_dist_km: f64,
    pub est_reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Recommendation {
    pub driver_id: String,
    pub timestamp: String,
    pub items: Vec<RecommendationItem>,
}

/// Top-`k` stations by probability (ties in station order), each annotated
/// with the reward terms at `when`.
#[allow(clippy::too_many_arguments)]
pub fn recommend(
    probs: &[f64],
    k: usize,
    driver_id: &str,
    when: DateTime<Utc>,
    previous: Option<usize>,
    favourite: Option<usize>,
    stations: &StationTable,
    reward: &dyn RewardSource,
) -> Result<Recommendation> {
    let m = probs.len();
    if k == 0 || k > m {
        return Err(Error::Usage(format!("K must lie in 1..={m}, got {k}")));
    }
    let point = DecisionPoint {
        previous,
        hour: hour_index(&when),
        favourite,
    };
    let items = rank_desc(probs)
        .into_iter()
        .take(k)
        .map(|s| {
            let terms = reward.terms(&point, s)?;
            Ok(RecommendationItem {
                station_id: stations.id(s).to_string(),
                prob: probs[s],
                est_wait_min: terms.z_hat,
                est_dist_km: terms.d_hat,
                est_reward: terms.reward(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Recommendation {
        driver_id: driver_id.to_string(),
        timestamp: format_time(&when),
        items,
    })
}
