//! Timely reward `r̂ = −scale·(ẑ/z̃ + ζ·d̂/d̃)` and the environment serving it.

pub mod net;
pub mod wait;

use std::collections::HashMap;
use std::sync::RwLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geospatial::StationTable;

pub use net::{train_reward_net, Forecast, RewardNet, RewardNetConfig, RewardTrainReport};
pub use wait::WaitTable;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardParams {
    pub scale: f64,
    pub zeta_familiar: f64,
    pub zeta_default: f64,
}

impl Default for RewardParams {
    fn default() -> Self {
        RewardParams {
            scale: 100.0,
            zeta_familiar: 0.8,
            zeta_default: 1.0,
        }
    }
}

impl RewardParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) {
            return Err(Error::Config("reward scale must be positive".into()));
        }
        Ok(())
    }

    pub fn zeta(&self, favourite: Option<usize>, station: usize) -> f64 {
        if favourite == Some(station) {
            self.zeta_familiar
        } else {
            self.zeta_default
        }
    }
}

pub fn compute_reward(z_hat: f64, d_hat: f64, z_norm: f64, d_norm: f64, zeta: f64) -> Result<f64> {
    reward_with_scale(100.0, z_hat, d_hat, z_norm, d_norm, zeta)
}

pub fn reward_with_scale(scale: f64, z_hat: f64, d_hat: f64, z_norm: f64, d_norm: f64, zeta: f64) -> Result<f64> {
    if !(z_norm > 0.0) || !(d_norm > 0.0) {
        return Err(Error::Domain(format!(
            "reward normalizers must be positive (z̃ = {z_norm}, d̃ = {d_norm})"
        )));
    }
    if z_hat < 0.0 || d_hat < 0.0 {
        return Err(Error::Domain(format!("negative wait {z_hat} or distance {d_hat}")));
    }
    Ok(-scale * (z_hat / z_norm + zeta * d_hat / d_norm))
}

/// The strictly most-visited station among training visits; ties give `None`.
pub fn favourite_station(visits: &[usize]) -> Option<usize> {
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for &s in visits {
        *counts.entry(s).or_default() += 1;
    }
    let best = *counts.values().max()?;
    let mut top = counts.iter().filter(|(_, &c)| c == best);
    let (&station, _) = top.next()?;
    if top.next().is_some() {
        None
    } else {
        Some(station)
    }
}

/// Everything `r̂` is computed from, kept for inspection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RewardTerms {
    pub z_hat: f64,
    pub d_hat: f64,
    pub z_norm: f64,
    pub d_norm: f64,
    pub zeta: f64,
    pub scale: f64,
    pub fallback: bool,
}

impl RewardTerms {
    pub fn reward(&self) -> f64 {
        -self.scale * (self.z_hat / self.z_norm + self.zeta * self.d_hat / self.d_norm)
    }
}

/// What a reward depends on besides the candidate station.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecisionPoint {
    pub previous: Option<usize>,
    pub hour: i64,
    pub favourite: Option<usize>,
}

pub trait RewardSource: Sync {
    fn num_stations(&self) -> usize;

    fn terms(&self, point: &DecisionPoint, candidate: usize) -> Result<RewardTerms>;

    fn reward(&self, point: &DecisionPoint, candidate: usize) -> Result<f64> {
        Ok(self.terms(point, candidate)?.reward())
    }

    /// Learned-forecaster access for coupled training; `None` for fixed rewards.
    fn forecaster(&self) -> Option<(&RewardNet, &WaitTable, &StationTable)> {
        None
    }
}

/// Reward environment backed by the wait series and (optionally) a trained forecaster.
#[derive(Debug)]
pub struct RewardEnv {
    pub params: RewardParams,
    pub stations: StationTable,
    pub table: WaitTable,
    pub net: Option<RewardNet>,
    cache: RwLock<HashMap<(usize, i64), Forecast>>,
}

impl RewardEnv {
    pub fn new(params: RewardParams, stations: StationTable, table: WaitTable, net: Option<RewardNet>) -> Result<Self> {
        params.validate()?;
        if table.num_stations() != stations.len() {
            return Err(Error::Shape("wait table and station table disagree on station count".into()));
        }
        Ok(RewardEnv {
            params,
            stations,
            table,
            net,
            cache: RwLock::new(HashMap::new()),
        })
    }

    /// Forecast for `station` at `hour`; without a net this is the observed
    /// bucket (or `z̃` outside the table).
    pub fn forecast(&self, station: usize, hour: i64) -> Result<Forecast> {
        if let Some(f) = self.cache.read().expect("forecast cache").get(&(station, hour)) {
            return Ok(*f);
        }
        let f = match &self.net {
            Some(net) => net.predict(&self.table, &self.stations, station, hour)?,
            None => match self.table.value(station, hour) {
                Some(v) => Forecast { minutes: v, fallback: false, clamped: false },
                None => Forecast { minutes: self.stations.get(station).mean_wait, fallback: true, clamped: false },
            },
        };
        self.cache.write().expect("forecast cache").insert((station, hour), f);
        Ok(f)
    }
}

impl RewardSource for RewardEnv {
    fn num_stations(&self) -> usize {
        self.stations.len()
    }

    fn terms(&self, point: &DecisionPoint, candidate: usize) -> Result<RewardTerms> {
        let f = self.forecast(candidate, point.hour)?;
        let st = self.stations.get(candidate);
        let terms = RewardTerms {
            z_hat: f.minutes,
            d_hat: point.previous.map_or(0.0, |p| self.stations.distance(p, candidate)),
            z_norm: st.mean_wait,
            d_norm: st.mean_distance,
            zeta: self.params.zeta(point.favourite, candidate),
            scale: self.params.scale,
            fallback: f.fallback,
        };
        reward_with_scale(terms.scale, terms.z_hat, terms.d_hat, terms.z_norm, terms.d_norm, terms.zeta)?;
        Ok(terms)
    }

    fn forecaster(&self) -> Option<(&RewardNet, &WaitTable, &StationTable)> {
        self.net.as_ref().map(|n| (n, &self.table, &self.stations))
    }
}

/// Fixed rewards by `(previous station, candidate)`; row 0 is "no previous".
#[derive(Debug, Clone, PartialEq)]
pub struct TableReward {
    rewards: Vec<Vec<f64>>,
}

impl TableReward {
    /// Same reward for a candidate regardless of where the driver came from.
    pub fn per_station(rewards: Vec<f64>) -> Self {
        let m = rewards.len();
        TableReward { rewards: vec![rewards; m + 1] }
    }

    pub fn by_transition(rows: Vec<Vec<f64>>) -> Result<Self> {
        let m = rows.first().map_or(0, Vec::len);
        if rows.len() != m + 1 || rows.iter().any(|r| r.len() != m) {
            return Err(Error::Shape("transition reward table must be (M+1) x M".into()));
        }
        Ok(TableReward { rewards: rows })
    }
}

impl RewardSource for TableReward {
    fn num_stations(&self) -> usize {
        self.rewards[0].len()
    }

    fn terms(&self, point: &DecisionPoint, candidate: usize) -> Result<RewardTerms> {
        let row = point.previous.map_or(0, |p| p + 1);
        let r = self.rewards[row][candidate];
        Ok(RewardTerms {
            z_hat: -r / 100.0,
            d_hat: 0.0,
            z_norm: 1.0,
            d_norm: 1.0,
            zeta: 1.0,
            scale: 100.0,
            fallback: false,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plug_in_values() {
        assert_eq!(compute_reward(20.0, 10.0, 20.0, 10.0, 1.0).unwrap(), -200.0);
        assert!((compute_reward(20.0, 10.0, 20.0, 10.0, 0.8).unwrap() + 180.0).abs() < 1e-12);
        assert_eq!(compute_reward(30.0, 5.0, 20.0, 10.0, 1.0).unwrap(), -200.0);
        assert_eq!(compute_reward(0.0, 0.0, 20.0, 10.0, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn non_positive_norms_are_domain_errors() {
        assert!(matches!(compute_reward(1.0, 1.0, 0.0, 1.0, 1.0), Err(Error::Domain(_))));
        assert!(matches!(compute_reward(1.0, 1.0, 1.0, -2.0, 1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn favourite_rules() {
        let p = RewardParams::default();
        let visits = [1, 1, 1, 1, 1, 2, 2];
        let fav = favourite_station(&visits);
        assert_eq!(p.zeta(fav, 1), 0.8);
        assert_eq!(p.zeta(fav, 2), 1.0);
        assert_eq!(favourite_station(&[0, 0, 0, 3, 3, 3]), None);
        assert_eq!(favourite_station(&[]), None);
    }

    #[test]
    fn table_reward_round_trips_values() {
        let t = TableReward::per_station(vec![-100.0, -300.0]);
        let pt = DecisionPoint { previous: Some(1), hour: 0, favourite: None };
        assert_eq!(t.reward(&pt, 0).unwrap(), -100.0);
        assert_eq!(t.reward(&pt, 1).unwrap(), -300.0);
    }
}
