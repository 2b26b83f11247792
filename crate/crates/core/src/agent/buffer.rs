use std::collections::VecDeque;
use std::ops::Range;

use rand::Rng as _;

use crate::dataset::ChargingEvent;
use crate::error::{Error, Result};
use crate::features::{hour_index, FeatureSpace};
use crate::geospatial::StationTable;
use crate::reward::{DecisionPoint, RewardSource};
use crate::seed::Rng;

/// One logged decision: the observations before it, the station the driver
/// chose, and the reward every candidate would have earned.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub history: Vec<Vec<f64>>,
    pub action: usize,
    pub rewards: Vec<f64>,
    pub point: DecisionPoint,
}

/// Observation vectors for every event of a trajectory.
pub fn trajectory_observations(
    events: &[ChargingEvent],
    features: &FeatureSpace,
    stations: &StationTable,
) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
    let idx = events
        .iter()
        .map(|e| stations.index_of(&e.station_id))
        .collect::<Result<Vec<_>>>()?;
    let obs = events
        .iter()
        .enumerate()
        .map(|(i, e)| features.observe(e, idx[i], i.checked_sub(1).map(|p| idx[p]), stations))
        .collect::<Result<Vec<_>>>()?;
    Ok((idx, obs))
}

/// Decision steps whose targets are `events[j]` for `j` in `decisions`
/// (indices below 1 are skipped: the first event has no history).
pub fn build_steps(
    events: &[ChargingEvent],
    decisions: Range<usize>,
    history_len: usize,
    favourite: Option<usize>,
    features: &FeatureSpace,
    stations: &StationTable,
    reward: &dyn RewardSource,
) -> Result<Vec<Step>> {
    if decisions.end > events.len() {
        return Err(Error::Usage("decision range exceeds trajectory".into()));
    }
    let (idx, obs) = trajectory_observations(events, features, stations)?;
    let m = stations.len();
    decisions
        .filter(|&j| j >= 1)
        .map(|j| {
            let point = DecisionPoint {
                previous: Some(idx[j - 1]),
                hour: hour_index(&events[j].start_time),
                favourite,
            };
            let rewards = (0..m).map(|a| reward.reward(&point, a)).collect::<Result<Vec<_>>>()?;
            Ok(Step {
                history: obs[j.saturating_sub(history_len)..j].to_vec(),
                action: idx[j],
                rewards,
                point,
            })
        })
        .collect()
}

/// Logged sequences cut into overlapping windows of `horizon` steps.
#[derive(Debug, Clone, Default)]
pub struct ReplayBuffer {
    horizon: usize,
    capacity: Option<usize>,
    steps: Vec<Step>,
    windows: VecDeque<Range<usize>>,
}

impl ReplayBuffer {
    pub fn new(horizon: usize, capacity: Option<usize>) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::Config("horizon T must be at least 1".into()));
        }
        if capacity == Some(0) {
            return Err(Error::Config("buffer capacity must be positive".into()));
        }
        Ok(ReplayBuffer {
            horizon,
            capacity,
            steps: Vec::new(),
            windows: VecDeque::new(),
        })
    }

    /// Adds one trajectory's steps. Windows start at every step from which a
    /// full horizon fits; a trajectory shorter than the horizon yields one
    /// shorter window.
    pub fn push_trajectory(&mut self, steps: Vec<Step>) {
        if steps.is_empty() {
            return;
        }
        let base = self.steps.len();
        let n = steps.len();
        self.steps.extend(steps);
        let starts = n.saturating_sub(self.horizon) + 1;
        for s in 0..starts {
            self.windows.push_back(base + s..base + (s + self.horizon).min(n));
            if let Some(cap) = self.capacity {
                while self.windows.len() > cap {
                    self.windows.pop_front();
                }
            }
        }
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn window(&self, i: usize) -> &[Step] {
        &self.steps[self.windows[i].clone()]
    }

    pub fn steps(&self) -> &[Step] {
        &self.steps
    }

    /// `n` window indices drawn uniformly with replacement. Draws go through
    /// `u64` so the sequence does not depend on the platform word size.
    pub fn sample(&self, n: usize, rng: &mut Rng) -> Vec<usize> {
        let len = self.windows.len() as u64;
        (0..n).map(|_| rng.gen_range(0..len) as usize).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::SeedTree;

    fn step(a: usize) -> Step {
        Step {
            history: vec![vec![a as f64]],
            action: a,
            rewards: vec![0.0],
            point: DecisionPoint { previous: None, hour: 0, favourite: None },
        }
    }

    #[test]
    fn windows_overlap_with_stride_one() {
        let mut b = ReplayBuffer::new(3, None).unwrap();
        b.push_trajectory((0..5).map(step).collect());
        assert_eq!(b.len(), 3);
        assert_eq!(b.window(0).iter().map(|s| s.action).collect::<Vec<_>>(), [0, 1, 2]);
        assert_eq!(b.window(2).iter().map(|s| s.action).collect::<Vec<_>>(), [2, 3, 4]);
        b.push_trajectory((0..2).map(step).collect());
        assert_eq!(b.len(), 4);
        assert_eq!(b.window(3).len(), 2);
    }

    #[test]
    fn capacity_evicts_oldest_windows() {
        let mut b = ReplayBuffer::new(1, Some(2)).unwrap();
        b.push_trajectory((0..4).map(step).collect());
        assert_eq!(b.len(), 2);
        assert_eq!(b.window(0)[0].action, 2);
    }

    #[test]
    fn sampling_is_reproducible() {
        let mut b = ReplayBuffer::new(2, None).unwrap();
        b.push_trajectory((0..50).map(step).collect());
        let t = SeedTree::new(11);
        assert_eq!(b.sample(20, &mut t.rng("buffer")), b.sample(20, &mut t.rng("buffer")));
    }
}
