//! Conversions between trained models and [`Checkpoint`]s.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::agent::{init_nets, DriverModel, Nets, RacConfig, RacModel};
use crate::baselines::{FpmcModel, MarkovModel, PopularityModel};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::features::FeatureSpace;
use crate::geospatial::StationTable;
use crate::neural::Tensor;
use crate::reward::RewardNet;
use crate::seed::SeedTree;

pub const KIND_RAC: &str = "rac";
pub const KIND_MC: &str = "mc";
pub const KIND_FPMC: &str = "fpmc";
pub const KIND_POPULARITY: &str = "popularity";
pub const KIND_REWARD: &str = "reward_net";

#[derive(Serialize, Deserialize)]
struct StationIds {
    ids: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct RacDims {
    seed: String,
    obs_dim: usize,
    num_stations: usize,
    has_shared: bool,
}

#[derive(Serialize, Deserialize)]
struct DriverMeta {
    favourite: Option<usize>,
    epochs: usize,
    val_p1: Option<f64>,
}

fn station_ids(stations: &StationTable) -> Vec<String> {
    stations.stations().iter().map(|s| s.station_id.clone()).collect()
}

/// Station ids recorded in a checkpoint.
pub fn checkpoint_stations(ck: &Checkpoint) -> Result<Vec<String>> {
    Ok(ck.section::<StationIds>("stations")?.ids)
}

/// Fails unless `ck` was written against exactly this station table.
pub fn check_stations(ck: &Checkpoint, stations: &StationTable) -> Result<()> {
    if checkpoint_stations(ck)? != station_ids(stations) {
        return Err(Error::Config("station table differs from the one the checkpoint was trained on".into()));
    }
    Ok(())
}

fn matrix(rows: &[Vec<f64>]) -> Result<Tensor> {
    let cols = rows.first().map_or(0, Vec::len);
    Tensor::from_vec(&[rows.len(), cols], rows.concat())
}

fn unmatrix(t: &Tensor) -> Vec<Vec<f64>> {
    let cols = t.shape().get(1).copied().unwrap_or(0).max(1);
    t.data().chunks(cols).map(<[f64]>::to_vec).collect()
}

pub fn rac_to_checkpoint(model: &RacModel) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new(KIND_RAC);
    ck.set_section("rac", &model.config)?;
    ck.set_section(
        "dims",
        &RacDims {
            seed: model.seed.to_string(),
            obs_dim: model.features.observation_dim(),
            num_stations: model.station_ids.len(),
            has_shared: model.shared.is_some(),
        },
    )?;
    ck.set_section("features", &model.features)?;
    ck.set_section("stations", &StationIds { ids: model.station_ids.clone() })?;
    let meta: BTreeMap<&str, DriverMeta> = model
        .drivers
        .iter()
        .map(|(id, d)| (id.as_str(), DriverMeta { favourite: d.favourite, epochs: d.epochs, val_p1: d.val_p1 }))
        .collect();
    ck.set_section("drivers", &meta)?;
    if let Some(n) = &model.shared {
        ck.put_params("shared/", n);
    }
    for (id, d) in &model.drivers {
        ck.put_params(&format!("driver/{id}/"), &d.nets);
    }
    Ok(ck)
}

pub fn rac_from_checkpoint(ck: &Checkpoint) -> Result<RacModel> {
    ck.expect_kind(KIND_RAC)?;
    let config: RacConfig = ck.section("rac")?;
    config.validate()?;
    let dims: RacDims = ck.section("dims")?;
    let seed = dims
        .seed
        .parse()
        .map_err(|_| Error::Format(format!("checkpoint seed '{}' is not an integer", dims.seed)))?;
    let features: FeatureSpace = ck.section("features")?;
    if features.observation_dim() != dims.obs_dim || features.num_stations != dims.num_stations {
        return Err(Error::Format("checkpoint feature space disagrees with its dimensions".into()));
    }
    let station_ids = checkpoint_stations(ck)?;
    let meta: BTreeMap<String, DriverMeta> = ck.section("drivers")?;
    let skeleton = init_nets(&config, dims.obs_dim, dims.num_stations, &mut SeedTree::new(0).rng("skeleton"))?;
    let load = |prefix: &str| -> Result<Nets> {
        let mut n = skeleton.clone();
        ck.fill_params(prefix, &mut n)?;
        Ok(n)
    };
    let shared = if dims.has_shared { Some(load("shared/")?) } else { None };
    let mut drivers = BTreeMap::new();
    for (id, m) in meta {
        let nets = load(&format!("driver/{id}/"))?;
        drivers.insert(id, DriverModel { nets, favourite: m.favourite, epochs: m.epochs, val_p1: m.val_p1 });
    }
    Ok(RacModel { config, seed, features, station_ids, shared, drivers })
}

#[derive(Serialize, Deserialize)]
struct McMeta {
    smoothing: f64,
}

pub fn markov_to_checkpoint(model: &MarkovModel, stations: &StationTable) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new(KIND_MC);
    ck.set_section("mc", &McMeta { smoothing: model.smoothing })?;
    ck.set_section("stations", &StationIds { ids: station_ids(stations) })?;
    ck.arrays.insert("global".into(), matrix(&model.global)?);
    for (id, rows) in &model.drivers {
        ck.arrays.insert(format!("driver/{id}"), matrix(rows)?);
    }
    Ok(ck)
}

pub fn markov_from_checkpoint(ck: &Checkpoint) -> Result<MarkovModel> {
    ck.expect_kind(KIND_MC)?;
    let meta: McMeta = ck.section("mc")?;
    let global = unmatrix(ck.array("global")?);
    let m = global.len();
    let mut drivers = BTreeMap::new();
    for (name, t) in &ck.arrays {
        if let Some(id) = name.strip_prefix("driver/") {
            if t.shape() != [m, m] {
                return Err(Error::Format(format!("array '{name}' is not {m}x{m}")));
            }
            drivers.insert(id.to_string(), unmatrix(t));
        }
    }
    Ok(MarkovModel { smoothing: meta.smoothing, global, drivers })
}

#[derive(Serialize, Deserialize)]
struct FpmcMeta {
    factors: usize,
    drivers: Vec<String>,
}

pub fn fpmc_to_checkpoint(model: &FpmcModel, stations: &StationTable) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new(KIND_FPMC);
    ck.set_section("fpmc", &FpmcMeta { factors: model.factors, drivers: model.drivers.clone() })?;
    ck.set_section("stations", &StationIds { ids: station_ids(stations) })?;
    let f = model.factors;
    ck.arrays.insert("vu".into(), Tensor::from_vec(&[model.drivers.len(), f], model.vu.clone())?);
    for (name, v) in [("vi", &model.vi), ("vil", &model.vil), ("vli", &model.vli)] {
        ck.arrays.insert(name.into(), Tensor::from_vec(&[model.num_stations, f], v.clone())?);
    }
    Ok(ck)
}

pub fn fpmc_from_checkpoint(ck: &Checkpoint) -> Result<FpmcModel> {
    ck.expect_kind(KIND_FPMC)?;
    let meta: FpmcMeta = ck.section("fpmc")?;
    let get = |n: &str| -> Result<Vec<f64>> { Ok(ck.array(n)?.data().to_vec()) };
    FpmcModel::from_factors(meta.factors, meta.drivers, get("vu")?, get("vi")?, get("vil")?, get("vli")?)
}

pub fn popularity_to_checkpoint(model: &PopularityModel, stations: &StationTable) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new(KIND_POPULARITY);
    ck.set_section("stations", &StationIds { ids: station_ids(stations) })?;
    ck.arrays.insert("global".into(), Tensor::from_vec(&[model.global.len()], model.global.clone())?);
    for (id, c) in &model.drivers {
        ck.arrays.insert(format!("driver/{id}"), Tensor::from_vec(&[c.len()], c.clone())?);
    }
    Ok(ck)
}

pub fn popularity_from_checkpoint(ck: &Checkpoint) -> Result<PopularityModel> {
    ck.expect_kind(KIND_POPULARITY)?;
    let global = ck.array("global")?.data().to_vec();
    let drivers = ck
        .arrays
        .iter()
        .filter_map(|(n, t)| n.strip_prefix("driver/").map(|id| (id.to_string(), t.data().to_vec())))
        .collect();
    Ok(PopularityModel { global, drivers })
}

/// Any of the reference recommenders.
#[derive(Debug, Clone, PartialEq)]
pub enum Baseline {
    Markov(MarkovModel),
    Fpmc(FpmcModel),
    Popularity(PopularityModel),
}

pub fn baseline_from_checkpoint(ck: &Checkpoint) -> Result<Baseline> {
    match ck.kind.as_str() {
        KIND_MC => markov_from_checkpoint(ck).map(Baseline::Markov),
        KIND_FPMC => fpmc_from_checkpoint(ck).map(Baseline::Fpmc),
        KIND_POPULARITY => popularity_from_checkpoint(ck).map(Baseline::Popularity),
        other => Err(Error::Format(format!("checkpoint kind '{other}' is not a baseline"))),
    }
}

#[derive(Serialize, Deserialize)]
struct RewardMeta {
    hidden: usize,
    layers: usize,
    window: usize,
    wait_scale: f64,
}

pub fn reward_net_to_checkpoint(net: &RewardNet, hidden: usize, layers: usize, stations: &StationTable) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new(KIND_REWARD);
    ck.set_section("reward_net", &RewardMeta { hidden, layers, window: net.window, wait_scale: net.wait_scale })?;
    ck.set_section("stations", &StationIds { ids: station_ids(stations) })?;
    ck.put_params("net/", net);
    Ok(ck)
}

pub fn reward_net_from_checkpoint(ck: &Checkpoint) -> Result<RewardNet> {
    ck.expect_kind(KIND_REWARD)?;
    let meta: RewardMeta = ck.section("reward_net")?;
    let m = checkpoint_stations(ck)?.len();
    let mut net = RewardNet::new(m, meta.hidden, meta.layers, meta.window, meta.wait_scale, &mut SeedTree::new(0).rng("skeleton"))?;
    ck.fill_params("net/", &mut net)?;
    Ok(net)
}
