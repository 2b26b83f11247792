//! Population training: an optional warm-up model on an anonymized early
//! slice of everyone's events, then one fine-tuned copy per driver.

use std::collections::BTreeMap;
use std::ops::Range;

use rayon::prelude::*;

use crate::dataset::{build_trajectories, warmup_pool, ChargingEvent, DriverTrajectory, SplitSpec};
use crate::error::{Error, Result};
use crate::evaluation::{rank_desc, Recommender};
use crate::features::FeatureSpace;
use crate::geospatial::StationTable;
use crate::reward::{favourite_station, RewardSource};
use crate::seed::SeedTree;

use super::buffer::{build_steps, ReplayBuffer};
use super::nets::Nets;
use super::train::{EpochLog, RacConfig, Trainer};
use super::{history_observations, init_nets};

#[derive(Debug, Clone, PartialEq)]
pub struct DriverModel {
    pub nets: Nets,
    pub favourite: Option<usize>,
    pub epochs: usize,
    pub val_p1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RacModel {
    pub config: RacConfig,
    pub seed: u64,
    pub features: FeatureSpace,
    pub station_ids: Vec<String>,
    /// The warm-up model, also used for drivers without their own copy.
    pub shared: Option<Nets>,
    pub drivers: BTreeMap<String, DriverModel>,
}

impl RacModel {
    pub fn nets_for(&self, driver_id: &str) -> Result<&Nets> {
        self.drivers
            .get(driver_id)
            .map(|d| &d.nets)
            .or(self.shared.as_ref())
            .ok_or_else(|| Error::Lookup {
                kind: "driver",
                id: driver_id.to_string(),
            })
    }

    pub fn check_stations(&self, stations: &StationTable) -> Result<()> {
        let ids: Vec<&str> = stations.stations().iter().map(|s| s.station_id.as_str()).collect();
        if ids != self.station_ids.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(Error::Config("station table differs from the one the model was trained on".into()));
        }
        Ok(())
    }

    /// Next-station distribution after the events in `prefix`.
    pub fn probabilities(&self, driver_id: &str, prefix: &[ChargingEvent], stations: &StationTable) -> Result<Vec<f64>> {
        let nets = self.nets_for(driver_id)?;
        let obs = history_observations(prefix, self.config.history, &self.features, stations)?;
        nets.policy.probabilities(&obs)
    }

    pub fn favourite(&self, driver_id: &str) -> Option<usize> {
        self.drivers.get(driver_id).and_then(|d| d.favourite)
    }
}

/// Read-only view pairing a model with its station table.
pub struct RacRecommender<'a> {
    pub model: &'a RacModel,
    pub stations: &'a StationTable,
    pub label: String,
}

impl Recommender for RacRecommender<'_> {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn scores(&self, driver_id: &str, prefix: &[ChargingEvent]) -> Result<Vec<f64>> {
        self.model.probabilities(driver_id, prefix, self.stations)
    }
}

/// Training curves from a population run.
#[derive(Debug, Clone, Default)]
pub struct PopulationLog {
    pub warmup: Vec<EpochLog>,
    pub drivers: BTreeMap<String, Vec<EpochLog>>,
}

fn station_indices(events: &[ChargingEvent], stations: &StationTable) -> Result<Vec<usize>> {
    events.iter().map(|e| stations.index_of(&e.station_id)).collect()
}

fn val_p1(nets: &Nets, events: &[ChargingEvent], val: &Range<usize>, k: usize, features: &FeatureSpace, stations: &StationTable) -> Result<f64> {
    let mut hits = 0usize;
    for j in val.clone() {
        let obs = history_observations(&events[..j], k, features, stations)?;
        let probs = nets.policy.probabilities(&obs)?;
        if rank_desc(&probs)[0] == stations.index_of(&events[j].station_id)? {
            hits += 1;
        }
    }
    Ok(hits as f64 / val.len().max(1) as f64)
}

struct FineTune<'a> {
    cfg: &'a RacConfig,
    features: &'a FeatureSpace,
    stations: &'a StationTable,
    reward: &'a dyn RewardSource,
}

impl FineTune<'_> {
    /// Trains up to `cfg.finetune_epochs` epochs. With early stopping and a
    /// validation range, the best-scoring snapshot is kept and training stops
    /// after `patience` epochs without improvement.
    fn run(
        &self,
        mut nets: Nets,
        buffer: &ReplayBuffer,
        seeds: &SeedTree,
        val: Option<(&[ChargingEvent], Range<usize>)>,
    ) -> Result<(Nets, Vec<EpochLog>, usize, Option<f64>)> {
        let k = self.cfg.history;
        let score = |n: &Nets| -> Result<Option<f64>> {
            match &val {
                Some((ev, r)) if !r.is_empty() => Ok(Some(val_p1(n, ev, r, k, self.features, self.stations)?)),
                _ => Ok(None),
            }
        };
        if buffer.is_empty() {
            let s = score(&nets)?;
            return Ok((nets, Vec::new(), 0, s));
        }
        let mut trainer = Trainer::new(self.cfg, buffer, self.reward, seeds)?;
        let mut log = Vec::new();
        if !self.cfg.early_stopping {
            for epoch in 1..=self.cfg.finetune_epochs {
                log.push(trainer.epoch(&mut nets, epoch)?);
            }
            let s = score(&nets)?;
            return Ok((nets, log, self.cfg.finetune_epochs, s));
        }
        let mut best = (score(&nets)?, nets.clone(), 0usize);
        let mut stale = 0usize;
        for epoch in 1..=self.cfg.finetune_epochs {
            log.push(trainer.epoch(&mut nets, epoch)?);
            match score(&nets)? {
                Some(p) => {
                    if best.0.is_none_or(|b| p > b) {
                        best = (Some(p), nets.clone(), epoch);
                        stale = 0;
                    } else {
                        stale += 1;
                        if stale >= self.cfg.patience {
                            break;
                        }
                    }
                }
                None => best = (None, nets.clone(), epoch),
            }
        }
        let (p, nets, epochs) = best;
        Ok((nets, log, epochs, p))
    }
}

/// Warm-up (when enabled and the pool yields any decision) followed by
/// per-driver fine-tuning on each driver's training split.
#[allow(clippy::too_many_arguments)]
pub fn train_population(
    trajectories: &BTreeMap<String, DriverTrajectory>,
    split: &SplitSpec,
    stations: &StationTable,
    features: &FeatureSpace,
    reward: &dyn RewardSource,
    cfg: &RacConfig,
    seed: u64,
) -> Result<(RacModel, PopulationLog)> {
    cfg.validate()?;
    let seeds = SeedTree::new(seed);
    let obs_dim = features.observation_dim();
    let m = stations.len();
    let mut log = PopulationLog::default();

    let shared = if cfg.warmup {
        let pool = warmup_pool(trajectories, &cfg.warmup_salt);
        let mut buffer = ReplayBuffer::new(cfg.horizon, cfg.buffer_capacity)?;
        for traj in build_trajectories(&pool).values() {
            buffer.push_trajectory(build_steps(&traj.events, 1..traj.len(), cfg.history, None, features, stations, reward)?);
        }
        if buffer.is_empty() {
            log::warn!("warm-up pool yields no decisions; training every driver from scratch");
            None
        } else {
            let ws = seeds.child("warmup");
            let mut nets = init_nets(cfg, obs_dim, m, &mut ws.rng("init"))?;
            let mut trainer = Trainer::new(cfg, &buffer, reward, &ws)?;
            for epoch in 1..=cfg.epochs {
                log.warmup.push(trainer.epoch(&mut nets, epoch)?);
            }
            Some(nets)
        }
    } else {
        None
    };

    let tuner = FineTune { cfg, features, stations, reward };
    let per_driver: Vec<(String, DriverModel, Vec<EpochLog>)> = trajectories
        .par_iter()
        .map(|(id, traj)| {
            let ds = seeds.child("driver").child(id);
            let nets = match &shared {
                Some(n) => n.clone(),
                None => init_nets(cfg, obs_dim, m, &mut ds.rng("init"))?,
            };
            let sizes = split.sizes(traj.len());
            let (decisions, val) = match sizes {
                Some(s) => (1..s.train, Some((traj.events.as_slice(), s.val_range()))),
                None => (1..traj.len(), None),
            };
            let fav_events = &traj.events[..decisions.end.max(1).min(traj.len())];
            let favourite = favourite_station(&station_indices(fav_events, stations)?);
            let mut buffer = ReplayBuffer::new(cfg.horizon, cfg.buffer_capacity)?;
            buffer.push_trajectory(build_steps(&traj.events, decisions, cfg.history, favourite, features, stations, reward)?);
            let (nets, dlog, epochs, val_p1) = tuner.run(nets, &buffer, &ds, val)?;
            Ok((id.clone(), DriverModel { nets, favourite, epochs, val_p1 }, dlog))
        })
        .collect::<Result<_>>()?;

    let mut drivers = BTreeMap::new();
    for (id, model, dlog) in per_driver {
        log.drivers.insert(id.clone(), dlog);
        drivers.insert(id, model);
    }
    Ok((
        RacModel {
            config: cfg.clone(),
            seed,
            features: *features,
            station_ids: stations.stations().iter().map(|s| s.station_id.clone()).collect(),
            shared,
            drivers,
        },
        log,
    ))
}
