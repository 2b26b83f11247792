//! Station geometry and location context.

pub mod poi;

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use crate::dataset::{build_trajectories, ChargingEvent};
use crate::error::{Error, Result};
use crate::reward::wait::WaitTable;

pub use poi::{PoiCounts, POI_DIM};

pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// Great-circle distance in km.
pub fn haversine(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> Result<f64> {
    for (lat, lon) in [(lat1, lon1), (lat2, lon2)] {
        check_coordinates(lat, lon)?;
    }
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = p2 - p1;
    let dl = (lon2 - lon1).to_radians();
    let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    Ok(2.0 * EARTH_RADIUS_KM * a.sqrt().min(1.0).asin())
}

fn check_coordinates(lat: f64, lon: f64) -> Result<()> {
    if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
        return Err(Error::Domain(format!(
            "coordinates ({lat}, {lon}) outside [-90,90] x [-180,180]"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Station {
    pub station_id: String,
    pub latitude: f64,
    pub longitude: f64,
    pub poi: PoiCounts,
    /// Typical wait (minutes), z̃.
    pub mean_wait: f64,
    /// Typical arrival distance (km), d̃.
    pub mean_distance: f64,
}

impl Station {
    pub fn new(station_id: impl Into<String>, latitude: f64, longitude: f64) -> Result<Self> {
        check_coordinates(latitude, longitude)?;
        Ok(Station {
            station_id: station_id.into(),
            latitude,
            longitude,
            poi: vec![0; POI_DIM],
            mean_wait: 1.0,
            mean_distance: 1.0,
        })
    }

    /// POI counts as a distribution (all zeros when there are no POIs).
    pub fn poi_distribution(&self) -> Vec<f64> {
        let total: u32 = self.poi.iter().sum();
        if total == 0 {
            return vec![0.0; POI_DIM];
        }
        self.poi.iter().map(|&c| c as f64 / total as f64).collect()
    }
}

/// Stations indexed by position; positions follow lexicographic `station_id`
/// order, which is also the tie-break order for rankings.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StationTable {
    stations: Vec<Station>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

impl StationTable {
    pub fn new(mut stations: Vec<Station>) -> Result<Self> {
        stations.sort_by(|a, b| a.station_id.cmp(&b.station_id));
        let mut index = BTreeMap::new();
        for (i, s) in stations.iter().enumerate() {
            if index.insert(s.station_id.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate station '{}'", s.station_id)));
            }
        }
        if stations.is_empty() {
            return Err(Error::Config("station table is empty".into()));
        }
        Ok(StationTable { stations, index })
    }

    pub fn len(&self) -> usize {
        self.stations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stations.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Station {
        &self.stations[idx]
    }

    pub fn stations(&self) -> &[Station] {
        &self.stations
    }

    pub fn index_of(&self, station_id: &str) -> Result<usize> {
        self.index.get(station_id).copied().ok_or_else(|| Error::Lookup {
            kind: "station",
            id: station_id.to_string(),
        })
    }

    pub fn id(&self, idx: usize) -> &str {
        &self.stations[idx].station_id
    }

    pub fn distance(&self, a: usize, b: usize) -> f64 {
        if a == b {
            return 0.0;
        }
        let (s, t) = (&self.stations[a], &self.stations[b]);
        haversine(s.latitude, s.longitude, t.latitude, t.longitude)
            .expect("station coordinates validated at construction")
    }

    /// Attaches POI counts; returns ids of stations absent from `counts`
    /// (they keep all-zero vectors).
    pub fn attach_poi(&mut self, counts: &BTreeMap<String, PoiCounts>) -> Vec<String> {
        let mut missing = Vec::new();
        for s in &mut self.stations {
            match counts.get(&s.station_id) {
                Some(c) => s.poi = c.clone(),
                None => {
                    log::warn!("no POI record for station {}; using zero vector", s.station_id);
                    s.poi = vec![0; POI_DIM];
                    missing.push(s.station_id.clone());
                }
            }
        }
        missing
    }

    pub fn set_norms(&mut self, norms: &[StationNorm]) -> Result<()> {
        if norms.len() != self.len() {
            return Err(Error::Shape("one norm per station required".into()));
        }
        for (s, n) in self.stations.iter_mut().zip(norms) {
            s.mean_wait = n.mean_wait;
            s.mean_distance = n.mean_distance;
        }
        Ok(())
    }
}

/// Reads `station_id,latitude,longitude`.
pub fn load_stations(path: &Path) -> Result<StationTable> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_stations(file)
}

pub fn parse_stations<R: std::io::Read>(reader: R) -> Result<StationTable> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut stations = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Format(format!("stations file line {line}: {e}")))?;
        let num = |k: usize| -> Result<f64> {
            rec.get(k)
                .and_then(|v| v.parse::<f64>().ok())
                .ok_or_else(|| Error::Format(format!("stations file line {line}: bad coordinate")))
        };
        let id = rec
            .get(0)
            .filter(|s| !s.is_empty())
            .ok_or_else(|| Error::Format(format!("stations file line {line}: missing id")))?;
        let station = Station::new(id, num(1)?, num(2)?)
            .map_err(|e| Error::Format(format!("stations file line {line}: {e}")))?;
        stations.push(station);
    }
    StationTable::new(stations)
}

/// Location part of an observation.
#[derive(Debug, Clone, PartialEq)]
pub struct LocationContext {
    pub dist_prev: f64,
    pub onehot: Vec<f64>,
    pub poi: Vec<f64>,
}

pub fn build_location_context(
    current: &str,
    previous: Option<&str>,
    stations: &StationTable,
) -> Result<LocationContext> {
    let cur = stations.index_of(current)?;
    let prev = previous.map(|p| stations.index_of(p)).transpose()?;
    Ok(location_context(cur, prev, stations))
}

pub fn location_context(current: usize, previous: Option<usize>, stations: &StationTable) -> LocationContext {
    let mut onehot = vec![0.0; stations.len()];
    onehot[current] = 1.0;
    LocationContext {
        dist_prev: previous.map_or(0.0, |p| stations.distance(p, current)),
        onehot,
        poi: stations.get(current).poi_distribution(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StationNorm {
    pub mean_wait: f64,
    pub mean_distance: f64,
}

/// Per-station z̃ (mean non-zero hourly wait proxy) and d̃ (mean arrival hop
/// distance) from training events. Zero means fall back to the global mean
/// over stations (or 1.0 when that is also zero).
pub fn station_norms(train_events: &[ChargingEvent], stations: &StationTable) -> Result<Vec<StationNorm>> {
    if train_events.is_empty() {
        return Err(Error::Config("no training events to derive station norms from".into()));
    }
    let waits = WaitTable::build(train_events, stations, None)?;
    let wait_means: Vec<f64> = (0..stations.len()).map(|s| waits.mean_occupied(s)).collect();

    let m = stations.len();
    let mut sum = vec![0.0; m];
    let mut count = vec![0usize; m];
    let mut all_sum = 0.0;
    let mut all_count = 0usize;
    for traj in build_trajectories(train_events).values() {
        for pair in traj.events.windows(2) {
            let a = stations.index_of(&pair[0].station_id)?;
            let b = stations.index_of(&pair[1].station_id)?;
            let d = stations.distance(a, b);
            sum[b] += d;
            count[b] += 1;
            all_sum += d;
            all_count += 1;
        }
    }
    let dist_means: Vec<f64> = (0..m)
        .map(|s| if count[s] > 0 { sum[s] / count[s] as f64 } else { 0.0 })
        .collect();
    let global_dist = if all_count > 0 { all_sum / all_count as f64 } else { 0.0 };
    let nonzero_waits: Vec<f64> = wait_means.iter().copied().filter(|&w| w > 0.0).collect();
    let global_wait = if nonzero_waits.is_empty() {
        0.0
    } else {
        nonzero_waits.iter().sum::<f64>() / nonzero_waits.len() as f64
    };
    let fallback = |v: f64, global: f64| {
        if v > 0.0 {
            v
        } else if global > 0.0 {
            global
        } else {
            1.0
        }
    };
    Ok((0..m)
        .map(|s| StationNorm {
            mean_wait: fallback(wait_means[s], global_wait),
            mean_distance: fallback(dist_means[s], global_dist),
        })
        .collect())
}
