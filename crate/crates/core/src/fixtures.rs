//! Small synthetic populations with known structure, used by the acceptance
//! suite and the CLI tests.

use chrono::{DateTime, Duration, TimeZone, Utc};
use rand::Rng as _;

use crate::dataset::{ChargingEvent, SplitSpec};
use crate::error::Result;
use crate::geospatial::{Station, StationTable};
use crate::pipeline::Dataset;
use crate::reward::TableReward;
use crate::seed::SeedTree;

/// A dataset plus the fixed per-station reward it is scored with.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub dataset: Dataset,
    pub reward: TableReward,
}

pub fn station_id(i: usize) -> String {
    format!("cs{i:03}")
}

/// `m` stations roughly 1 km apart along a meridian.
pub fn stations(m: usize) -> Result<StationTable> {
    StationTable::new(
        (0..m)
            .map(|i| Station::new(station_id(i), 56.46 + 0.009 * i as f64, -2.97))
            .collect::<Result<_>>()?,
    )
}

fn origin() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2021, 3, 1, 6, 0, 0).single().expect("valid date")
}

/// Events visiting `visits` in order, one a week at the same time of day, so
/// that time and charge features carry no signal.
pub fn driver_events(driver: &str, offset: i64, visits: &[usize]) -> Result<Vec<ChargingEvent>> {
    visits
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let t = origin() + Duration::minutes(offset) + Duration::weeks(i as i64);
            ChargingEvent::new(format!("{driver}-{i:04}"), driver, station_id(s), t, 60.0, 12.0)
        })
        .collect()
}

fn build(events: Vec<ChargingEvent>, m: usize, reward: TableReward) -> Result<Fixture> {
    let dataset = Dataset::new(events, stations(m)?, SplitSpec::default())?;
    Ok(Fixture { dataset, reward })
}

/// One driver choosing uniformly at random between two stations worth
/// −100 and −300.
pub fn bandit(events: usize, seed: u64) -> Result<Fixture> {
    let mut rng = SeedTree::new(seed).rng("bandit");
    let visits: Vec<usize> = (0..events).map(|_| rng.gen_range(0..2)).collect();
    build(driver_events("bandit", 0, &visits)?, 2, TableReward::per_station(vec![-100.0, -300.0]))
}

/// Three stations; driver `d` walks the cycle forwards when `d` is even and
/// backwards when odd, starting at `d mod 3`. Rewards are flat.
pub fn cyclic(drivers: usize, events: usize) -> Result<Fixture> {
    let mut all = Vec::new();
    for d in 0..drivers {
        let visits: Vec<usize> = (0..events)
            .map(|i| if d % 2 == 0 { (d + i) % 3 } else { (d + 3 * events - i) % 3 })
            .collect();
        all.extend(driver_events(&format!("drv{d:02}"), d as i64, &visits)?);
    }
    build(all, 3, TableReward::per_station(vec![-100.0; 3]))
}

/// Group `g` owns stations `2g` (visited with probability `preference`) and
/// `2g + 1`. The better reward goes to the rarely visited station when
/// `conflict` is set and to the habitual one otherwise, with gap `gaps[g]`.
pub fn preference_groups(
    gaps: &[f64],
    drivers_per_group: usize,
    events: usize,
    preference: f64,
    conflict: bool,
    seed: u64,
) -> Result<Fixture> {
    let mut rng = SeedTree::new(seed).rng("groups");
    let mut rewards = Vec::with_capacity(2 * gaps.len());
    let mut all = Vec::new();
    for (g, &gap) in gaps.iter().enumerate() {
        let (habit, other) = if conflict { (-100.0 - gap, -100.0) } else { (-100.0, -100.0 - gap) };
        rewards.extend([habit, other]);
        for d in 0..drivers_per_group {
            let visits: Vec<usize> = (0..events)
                .map(|_| if rng.gen_bool(preference) { 2 * g } else { 2 * g + 1 })
                .collect();
            all.extend(driver_events(&format!("g{g}-d{d:02}"), (g * drivers_per_group + d) as i64, &visits)?);
        }
    }
    build(all, 2 * gaps.len(), TableReward::per_station(rewards))
}

/// Everyone follows the forward 3-cycle from a random start. `heavy` drivers
/// have `heavy_events` events each; `cold` drivers have three or four.
pub fn warmup_population(heavy: usize, heavy_events: usize, cold: usize, seed: u64) -> Result<Fixture> {
    let mut rng = SeedTree::new(seed).rng("population");
    let mut all = Vec::new();
    let mut add = |id: String, n: usize, rng: &mut crate::seed::Rng, offset: i64| -> Result<()> {
        let start = rng.gen_range(0..3);
        let visits: Vec<usize> = (0..n).map(|i| (start + i) % 3).collect();
        all.extend(driver_events(&id, offset, &visits)?);
        Ok(())
    };
    for d in 0..heavy {
        add(format!("heavy{d:02}"), heavy_events, &mut rng, d as i64)?;
    }
    for d in 0..cold {
        let n = 3 + d % 2;
        add(format!("cold{d:02}"), n, &mut rng, (heavy + d) as i64)?;
    }
    build(all, 3, TableReward::per_station(vec![-100.0; 3]))
}
