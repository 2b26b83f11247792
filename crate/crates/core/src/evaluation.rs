//! Offline evaluation on chronological splits.
//!
//! * `P@K` is the per-event hit rate: the share of test events whose true
//!   station is in the top `K`, pooled over all drivers.
//! * `R@K` is per-driver coverage: distinct true stations that were hit in a
//!   top `K` divided by distinct true stations in the driver's test segment,
//!   averaged over drivers.
//! * `MAR` is the mean timely reward of the top-1 recommendation over all test
//!   events.
//!
//! Rankings sort by score descending and break ties by station index, which is
//! lexicographic station-id order.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{ChargingEvent, DriverTrajectory, SplitSpec};
use crate::error::{Error, Result};
use crate::features::hour_index;
use crate::geospatial::StationTable;
use crate::reward::{favourite_station, DecisionPoint, RewardSource};

pub fn rank_desc(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        let (x, y) = (scores[a], scores[b]);
        match (x.is_nan(), y.is_nan()) {
            (true, true) => std::cmp::Ordering::Equal,
            (true, false) => std::cmp::Ordering::Greater,
            (false, true) => std::cmp::Ordering::Less,
            _ => y.partial_cmp(&x).expect("non-NaN"),
        }
        .then(a.cmp(&b))
    });
    idx
}

/// A model that scores every station for a driver's next charge.
pub trait Recommender: Sync {
    fn name(&self) -> String;

    /// Scores after the driver's events `prefix` (time order, non-empty).
    fn scores(&self, driver_id: &str, prefix: &[ChargingEvent]) -> Result<Vec<f64>>;
}

fn check_k(k: usize) -> Result<()> {
    if k < 1 {
        Err(Error::Usage("K must be at least 1".into()))
    } else {
        Ok(())
    }
}

pub fn precision_at_k(rankings: &[Vec<usize>], truths: &[usize], k: usize) -> Result<f64> {
    check_k(k)?;
    if rankings.len() != truths.len() {
        return Err(Error::Shape("one ranking per ground truth required".into()));
    }
    if truths.is_empty() {
        return Ok(0.0);
    }
    let hits = rankings
        .iter()
        .zip(truths)
        .filter(|(r, t)| r.iter().take(k).any(|s| s == *t))
        .count();
    Ok(hits as f64 / truths.len() as f64)
}

/// Coverage for one driver; `None` when the driver has no test events.
pub fn driver_recall_at_k(rankings: &[Vec<usize>], truths: &[usize], k: usize) -> Result<Option<f64>> {
    check_k(k)?;
    let distinct: BTreeSet<usize> = truths.iter().copied().collect();
    if distinct.is_empty() {
        return Ok(None);
    }
    let hit: BTreeSet<usize> = rankings
        .iter()
        .zip(truths)
        .filter(|(r, t)| r.iter().take(k).any(|s| s == *t))
        .map(|(_, &t)| t)
        .collect();
    Ok(Some(hit.len() as f64 / distinct.len() as f64))
}

/// Macro average of per-driver coverage over drivers with test events.
pub fn recall_at_k(per_driver: &[(Vec<Vec<usize>>, Vec<usize>)], k: usize) -> Result<f64> {
    let mut vals = Vec::new();
    for (r, t) in per_driver {
        if let Some(v) = driver_recall_at_k(r, t, k)? {
            vals.push(v);
        }
    }
    Ok(if vals.is_empty() { 0.0 } else { vals.iter().sum::<f64>() / vals.len() as f64 })
}

pub fn mean_average_reward(rewards: &[f64]) -> f64 {
    if rewards.is_empty() {
        0.0
    } else {
        rewards.iter().sum::<f64>() / rewards.len() as f64
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segment {
    Val,
    #[default]
    Test,
}

impl std::str::FromStr for Segment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "val" => Ok(Segment::Val),
            "test" => Ok(Segment::Test),
            other => Err(Error::Usage(format!("unknown split '{other}' (expected val or test)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DriverMetrics {
    pub driver_id: String,
    pub events: usize,
    pub precision: BTreeMap<usize, f64>,
    pub recall: BTreeMap<usize, f64>,
    pub mar: f64,
    /// Mean `ẑ/z̃` and `d̂/d̃` at the top-1 recommendation.
    pub mean_norm_wait: f64,
    pub mean_norm_distance: f64,
    pub fallback_events: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub model: String,
    pub split: Segment,
    pub ks: Vec<usize>,
    pub seed: u64,
    pub epsilon: Option<f64>,
    pub drivers_evaluated: usize,
    pub events_evaluated: usize,
    pub precision: BTreeMap<usize, f64>,
    pub recall: BTreeMap<usize, f64>,
    pub mar: f64,
    pub fallback_events: usize,
    pub per_driver: Vec<DriverMetrics>,
}

struct DriverOutcome {
    driver_id: String,
    rankings: Vec<Vec<usize>>,
    truths: Vec<usize>,
    rewards: Vec<f64>,
    norm_wait: Vec<f64>,
    norm_dist: Vec<f64>,
    fallback: usize,
}

/// Identifies the run in the report.
#[derive(Debug, Clone, Default)]
pub struct RunEcho {
    pub seed: u64,
    pub epsilon: Option<f64>,
}

#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    model: &dyn Recommender,
    trajectories: &BTreeMap<String, DriverTrajectory>,
    split: &SplitSpec,
    segment: Segment,
    ks: &[usize],
    stations: &StationTable,
    reward: &dyn RewardSource,
    echo: &RunEcho,
) -> Result<EvalReport> {
    if ks.is_empty() {
        return Err(Error::Usage("at least one K is required".into()));
    }
    for &k in ks {
        check_k(k)?;
    }
    let outcomes: Vec<DriverOutcome> = trajectories
        .par_iter()
        .filter_map(|(id, traj)| {
            let sizes = split.sizes(traj.len())?;
            let range = match segment {
                Segment::Val => sizes.val_range(),
                Segment::Test => sizes.test_range(),
            };
            if range.is_empty() {
                return None;
            }
            Some((id, traj, sizes, range))
        })
        .map(|(id, traj, sizes, range)| {
            let idx = traj
                .events
                .iter()
                .map(|e| stations.index_of(&e.station_id))
                .collect::<Result<Vec<_>>>()?;
            let favourite = favourite_station(&idx[sizes.train_range()]);
            let mut out = DriverOutcome {
                driver_id: id.clone(),
                rankings: Vec::new(),
                truths: Vec::new(),
                rewards: Vec::new(),
                norm_wait: Vec::new(),
                norm_dist: Vec::new(),
                fallback: 0,
            };
            for j in range {
                let scores = model.scores(id, &traj.events[..j])?;
                if scores.len() != stations.len() {
                    return Err(Error::Shape(format!("{} returned {} scores for {} stations", model.name(), scores.len(), stations.len())));
                }
                let ranking = rank_desc(&scores);
                let point = DecisionPoint {
                    previous: Some(idx[j - 1]),
                    hour: hour_index(&traj.events[j].start_time),
                    favourite,
                };
                let terms = reward.terms(&point, ranking[0])?;
                out.rewards.push(terms.reward());
                out.norm_wait.push(terms.z_hat / terms.z_norm);
                out.norm_dist.push(terms.d_hat / terms.d_norm);
                out.fallback += terms.fallback as usize;
                out.truths.push(idx[j]);
                out.rankings.push(ranking);
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let mut precision = BTreeMap::new();
    let mut recall = BTreeMap::new();
    let all_rankings: Vec<Vec<usize>> = outcomes.iter().flat_map(|o| o.rankings.iter().cloned()).collect();
    let all_truths: Vec<usize> = outcomes.iter().flat_map(|o| o.truths.iter().copied()).collect();
    let groups: Vec<(Vec<Vec<usize>>, Vec<usize>)> = outcomes.iter().map(|o| (o.rankings.clone(), o.truths.clone())).collect();
    for &k in ks {
        precision.insert(k, precision_at_k(&all_rankings, &all_truths, k)?);
        recall.insert(k, recall_at_k(&groups, k)?);
    }
    let all_rewards: Vec<f64> = outcomes.iter().flat_map(|o| o.rewards.iter().copied()).collect();

    let per_driver = outcomes
        .iter()
        .map(|o| {
            let mut p = BTreeMap::new();
            let mut r = BTreeMap::new();
            for &k in ks {
                p.insert(k, precision_at_k(&o.rankings, &o.truths, k)?);
                r.insert(k, driver_recall_at_k(&o.rankings, &o.truths, k)?.unwrap_or(0.0));
            }
            Ok(DriverMetrics {
                driver_id: o.driver_id.clone(),
                events: o.truths.len(),
                precision: p,
                recall: r,
                mar: mean_average_reward(&o.rewards),
                mean_norm_wait: mean_average_reward(&o.norm_wait),
                mean_norm_distance: mean_average_reward(&o.norm_dist),
                fallback_events: o.fallback,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(EvalReport {
        model: model.name(),
        split: segment,
        ks: ks.to_vec(),
        seed: echo.seed,
        epsilon: echo.epsilon,
        drivers_evaluated: outcomes.len(),
        events_evaluated: all_truths.len(),
        precision,
        recall,
        mar: mean_average_reward(&all_rewards),
        fallback_events: outcomes.iter().map(|o| o.fallback).sum(),
        per_driver,
    })
}

impl EvalReport {
    pub fn p_at(&self, k: usize) -> f64 {
        self.precision.get(&k).copied().unwrap_or(f64::NAN)
    }

    pub fn r_at(&self, k: usize) -> f64 {
        self.recall.get(&k).copied().unwrap_or(f64::NAN)
    }

    /// `driver_id,metric,k,value` rows; the pooled metrics use driver `AGGREGATE`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(writer);
        let err = |e: csv::Error| Error::Format(format!("report write failed: {e}"));
        w.write_record(["driver_id", "metric", "k", "value"]).map_err(err)?;
        let mut rows = |driver: &str, p: &BTreeMap<usize, f64>, r: &BTreeMap<usize, f64>, mar: f64, events: usize| -> Result<()> {
            for (k, v) in p {
                w.write_record([driver, "precision", &k.to_string(), &v.to_string()]).map_err(err)?;
            }
            for (k, v) in r {
                w.write_record([driver, "recall", &k.to_string(), &v.to_string()]).map_err(err)?;
            }
            w.write_record([driver, "mar", "", &mar.to_string()]).map_err(err)?;
            w.write_record([driver, "events", "", &events.to_string()]).map_err(err)?;
            Ok(())
        };
        for d in &self.per_driver {
            rows(&d.driver_id, &d.precision, &d.recall, d.mar, d.events)?;
        }
        rows("AGGREGATE", &self.precision, &self.recall, self.mar, self.events_evaluated)?;
        w.flush().map_err(|e| Error::io("<report csv>", e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub eps: f64,
    pub p1: f64,
    pub r1: f64,
    pub mar: f64,
}

pub fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::Usage("epsilon grid is empty".into()));
    }
    if let Some(bad) = grid.iter().find(|e| !(0.0..=1.0).contains(*e)) {
        return Err(Error::Usage(format!("epsilon {bad} outside [0, 1]")));
    }
    Ok(())
}

/// Runs `train_and_eval` once per grid value (in grid order).
pub fn epsilon_sweep<F>(grid: &[f64], mut train_and_eval: F) -> Result<Vec<SweepRow>>
where
    F: FnMut(f64) -> Result<EvalReport>,
{
    validate_grid(grid)?;
    grid.iter()
        .map(|&eps| {
            let r = train_and_eval(eps)?;
            Ok(SweepRow { eps, p1: r.p_at(1), r1: r.r_at(1), mar: r.mar })
        })
        .collect()
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], writer: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(writer);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(format!("sweep write failed: {e}")))?;
    }
    w.flush().map_err(|e| Error::io("<sweep csv>", e))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseRow {
    pub driver_id: String,
    pub eps: f64,
    pub p1: f64,
    pub r1: f64,
    pub mean_wait: f64,
    pub mean_distance: f64,
}

/// Per-driver rows from reports evaluated at each `ε`.
pub fn case_study(drivers: &[String], reports: &[(f64, EvalReport)]) -> Result<Vec<CaseRow>> {
    let mut rows = Vec::new();
    for d in drivers {
        for (eps, report) in reports {
            let m = report
                .per_driver
                .iter()
                .find(|m| &m.driver_id == d)
                .ok_or_else(|| Error::Usage(format!("driver '{d}' has no evaluated events")))?;
            rows.push(CaseRow {
                driver_id: d.clone(),
                eps: *eps,
                p1: m.precision.get(&1).copied().unwrap_or(f64::NAN),
                r1: m.recall.get(&1).copied().unwrap_or(f64::NAN),
                mean_wait: m.mean_norm_wait,
                mean_distance: m.mean_norm_distance,
            });
        }
    }
    Ok(rows)
}

pub fn write_case_csv<W: Write>(rows: &[CaseRow], writer: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(writer);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(format!("case-study write failed: {e}")))?;
    }
    w.flush().map_err(|e| Error::io("<case csv>", e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranking_ties_follow_index() {
        assert_eq!(rank_desc(&[0.25, 0.25, 0.25, 0.25]), vec![0, 1, 2, 3]);
        assert_eq!(rank_desc(&[0.1, 0.6, 0.3]), vec![1, 2, 0]);
        assert_eq!(rank_desc(&[f64::NAN, 1.0]), vec![1, 0]);
    }

    #[test]
    fn worked_precision_and_recall() {
        let r = vec![vec![0, 1, 2], vec![1, 0, 2], vec![2, 1, 0], vec![1, 2, 3]];
        let t = vec![0, 0, 0, 0];
        assert_eq!(precision_at_k(&r, &t, 3).unwrap(), 0.75);
        let rr = vec![vec![0, 1], vec![0, 1]];
        assert_eq!(driver_recall_at_k(&rr, &[0, 1], 1).unwrap(), Some(0.5));
        assert_eq!(driver_recall_at_k(&[], &[], 1).unwrap(), None);
        assert!(precision_at_k(&r, &t, 0).is_err());
    }

    #[test]
    fn mar_is_a_mean() {
        assert_eq!(mean_average_reward(&[-100.0, -300.0]), -200.0);
    }
}
