//! End-to-end wiring shared by the CLI and the integration tests.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use chrono::{DateTime, Utc};

use crate::agent::{recommend, train_population, PopulationLog, RacModel, RacRecommender, Recommendation};
use crate::baselines::{
    FpmcModel, FpmcRecommender, MarkovModel, MarkovRecommender, PopularityModel, PopularityRecommender, Sequences,
};
use crate::checkpoint::Checkpoint;
use crate::config::{Config, ForecastMode};
use crate::dataset::{build_trajectories, parse_events, Adapter, ChargingEvent, DriverTrajectory, SplitSpec};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalReport, Recommender, RunEcho, Segment};
use crate::features::FeatureSpace;
use crate::geospatial::poi::load_poi;
use crate::geospatial::{load_stations, station_norms, StationTable};
use crate::persist::{self, Baseline};
use crate::reward::{favourite_station, train_reward_net, RewardEnv, RewardNet, RewardTrainReport, WaitTable};
use crate::seed::SeedTree;

/// Events, stations and everything fitted on the training split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub events: Vec<ChargingEvent>,
    pub trajectories: BTreeMap<String, DriverTrajectory>,
    pub stations: StationTable,
    pub features: FeatureSpace,
    pub train_events: Vec<ChargingEvent>,
    pub split: SplitSpec,
}

/// Training-split events of every driver; drivers too short to split are
/// used in full since they are never evaluated.
pub fn training_events(trajectories: &BTreeMap<String, DriverTrajectory>, split: &SplitSpec) -> Vec<ChargingEvent> {
    trajectories
        .values()
        .flat_map(|t| {
            let n = split.sizes(t.len()).map_or(t.len(), |s| s.train);
            t.events[..n].iter().cloned()
        })
        .collect()
}

impl Dataset {
    /// Attaches station norms from the training split and fits the feature space.
    pub fn new(events: Vec<ChargingEvent>, mut stations: StationTable, split: SplitSpec) -> Result<Self> {
        split.validate()?;
        for e in &events {
            stations.index_of(&e.station_id)?;
        }
        let trajectories = build_trajectories(&events);
        let train_events = training_events(&trajectories, &split);
        stations.set_norms(&station_norms(&train_events, &stations)?)?;
        let features = FeatureSpace::fit(&train_events, &stations)?;
        Ok(Dataset { events, trajectories, stations, features, train_events, split })
    }

    pub fn load(cfg: &Config) -> Result<Self> {
        let outcome = parse_events(cfg.require(&cfg.data.events, "events")?, Adapter::Canonical)?;
        if !outcome.rejects.is_empty() {
            log::warn!("{} malformed event rows skipped", outcome.rejects.len());
        }
        let mut stations = load_stations(cfg.require(&cfg.data.stations, "stations")?)?;
        if let Some(p) = &cfg.data.poi {
            stations.attach_poi(&load_poi(p)?);
        }
        Self::new(outcome.events, stations, cfg.split)
    }

    /// Station-index sequences of each driver's training events.
    pub fn train_sequences(&self) -> Result<Sequences> {
        self.trajectories
            .iter()
            .map(|(id, t)| {
                let n = self.split.sizes(t.len()).map_or(t.len(), |s| s.train);
                let seq = t.events[..n]
                    .iter()
                    .map(|e| self.stations.index_of(&e.station_id))
                    .collect::<Result<Vec<_>>>()?;
                Ok((id.clone(), seq))
            })
            .collect()
    }
}

pub fn train_forecaster(ds: &Dataset, cfg: &Config) -> Result<(RewardNet, RewardTrainReport)> {
    let table = WaitTable::build(&ds.train_events, &ds.stations, None)?;
    let mut rng = SeedTree::new(cfg.seed).child("reward").rng("train");
    train_reward_net(&table, &ds.stations, &cfg.reward_net, &mut rng)
}

/// Reward environment over the full wait series. The forecaster is loaded
/// from `data.reward_model` when set, otherwise trained on the training split.
pub fn reward_env(ds: &Dataset, cfg: &Config) -> Result<RewardEnv> {
    let table = WaitTable::build(&ds.events, &ds.stations, None)?;
    let net = match cfg.forecast {
        ForecastMode::Observed => None,
        ForecastMode::Net => Some(match &cfg.data.reward_model {
            Some(p) => {
                let ck = Checkpoint::load(p)?;
                persist::check_stations(&ck, &ds.stations)?;
                persist::reward_net_from_checkpoint(&ck)?
            }
            None => train_forecaster(ds, cfg)?.0,
        }),
    };
    RewardEnv::new(cfg.reward, ds.stations.clone(), table, net)
}

pub fn train_rac(ds: &Dataset, env: &RewardEnv, cfg: &Config) -> Result<(RacModel, PopulationLog)> {
    train_population(&ds.trajectories, &ds.split, &ds.stations, &ds.features, env, &cfg.rac, cfg.seed)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    #[default]
    #[serde(alias = "mc")]
    Markov,
    Fpmc,
    Popularity,
}

impl std::str::FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mc" | "markov" => Ok(BaselineKind::Markov),
            "fpmc" => Ok(BaselineKind::Fpmc),
            "popularity" | "pop" => Ok(BaselineKind::Popularity),
            other => Err(Error::Usage(format!("unknown baseline '{other}' (expected mc, fpmc or popularity)"))),
        }
    }
}

pub fn fit_baseline(kind: BaselineKind, ds: &Dataset, cfg: &Config) -> Result<Baseline> {
    let seqs = ds.train_sequences()?;
    let m = ds.stations.len();
    Ok(match kind {
        BaselineKind::Markov => Baseline::Markov(MarkovModel::fit(&seqs, m, cfg.baseline.mc_smoothing)?),
        BaselineKind::Fpmc => {
            let mut rng = SeedTree::new(cfg.seed).child("fpmc").rng("negatives");
            Baseline::Fpmc(FpmcModel::fit(&seqs, m, &cfg.baseline.fpmc, &mut rng)?)
        }
        BaselineKind::Popularity => Baseline::Popularity(PopularityModel::fit(&seqs, m)),
    })
}

/// Any trained model, as stored in a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Rac(Box<RacModel>),
    Baseline(Baseline),
}

impl Model {
    pub fn load(ck: &Checkpoint) -> Result<Self> {
        match ck.kind.as_str() {
            persist::KIND_RAC => Ok(Model::Rac(Box::new(persist::rac_from_checkpoint(ck)?))),
            _ => persist::baseline_from_checkpoint(ck).map(Model::Baseline),
        }
    }

    pub fn epsilon(&self) -> Option<f64> {
        match self {
            Model::Rac(m) => Some(m.config.epsilon),
            Model::Baseline(_) => None,
        }
    }

    pub fn recommender<'a>(&'a self, stations: &'a StationTable) -> Box<dyn Recommender + 'a> {
        match self {
            Model::Rac(m) => Box::new(RacRecommender { model: m, stations, label: "rac".into() }),
            Model::Baseline(Baseline::Markov(m)) => Box::new(MarkovRecommender { model: m, stations }),
            Model::Baseline(Baseline::Fpmc(m)) => Box::new(FpmcRecommender { model: m, stations }),
            Model::Baseline(Baseline::Popularity(m)) => Box::new(PopularityRecommender { model: m }),
        }
    }
}

pub fn evaluate_model(
    model: &dyn Recommender,
    ds: &Dataset,
    env: &RewardEnv,
    segment: Segment,
    ks: &[usize],
    echo: &RunEcho,
) -> Result<EvalReport> {
    evaluate(model, &ds.trajectories, &ds.split, segment, ks, &ds.stations, env, echo)
}

/// Scores as a probability vector: normalized when non-negative with positive
/// mass, softmax otherwise.
pub fn score_distribution(scores: &[f64]) -> Vec<f64> {
    let total: f64 = scores.iter().sum();
    if scores.iter().all(|s| s.is_finite() && *s >= 0.0) && total > 0.0 {
        return scores.iter().map(|s| s / total).collect();
    }
    let max = scores.iter().cloned().filter(|s| s.is_finite()).fold(f64::MIN, f64::max);
    let exp: Vec<f64> = scores.iter().map(|s| if s.is_finite() { (s - max).exp() } else { 0.0 }).collect();
    let z: f64 = exp.iter().sum();
    exp.iter().map(|e| e / z).collect()
}

/// Top-`k` stations for `driver` given the events that started before `when`
/// (all of them when `when` is `None`, in which case the decision time is the
/// end of the last event).
pub fn recommend_for(
    model: &Model,
    ds: &Dataset,
    env: &RewardEnv,
    driver: &str,
    when: Option<DateTime<Utc>>,
    k: usize,
) -> Result<Recommendation> {
    let traj = ds
        .trajectories
        .get(driver)
        .ok_or_else(|| Error::Lookup { kind: "driver", id: driver.to_string() })?;
    let prefix: Vec<ChargingEvent> = match when {
        Some(t) => traj.events.iter().filter(|e| e.start_time < t).cloned().collect(),
        None => traj.events.clone(),
    };
    let last = prefix
        .last()
        .ok_or_else(|| Error::Usage(format!("driver '{driver}' has no events before the requested time")))?;
    let when = when.unwrap_or_else(|| last.end_time());
    let previous = Some(ds.stations.index_of(&last.station_id)?);
    let (probs, favourite) = match model {
        Model::Rac(m) => (m.probabilities(driver, &prefix, &ds.stations)?, m.favourite(driver)),
        Model::Baseline(_) => {
            let scores = model.recommender(&ds.stations).scores(driver, &prefix)?;
            let train = ds.train_sequences()?;
            let fav = train.get(driver).and_then(|seq| favourite_station(seq));
            (score_distribution(&scores), fav)
        }
    };
    recommend(&probs, k, driver, when, previous, favourite, &ds.stations, env)
}
