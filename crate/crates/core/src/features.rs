//! Per-event observation vectors `o = (l, e, τ)`.

use chrono::{DateTime, Datelike, Timelike, Utc};
use serde::{Deserialize, Serialize};

use crate::dataset::{approximate_soc, ChargingEvent};
use crate::error::{Error, Result};
use crate::geospatial::{location_context, StationTable, POI_DIM};

pub const TIME_DIM: usize = 7 + 24;
pub const CHARGE_DIM: usize = 2;

/// Day-of-week one-hot (Monday first) followed by hour-of-day one-hot.
pub fn time_features(t: &DateTime<Utc>) -> [f64; TIME_DIM] {
    let mut v = [0.0; TIME_DIM];
    v[t.weekday().num_days_from_monday() as usize] = 1.0;
    v[7 + t.hour() as usize] = 1.0;
    v
}

pub fn hour_index(t: &DateTime<Utc>) -> i64 {
    t.timestamp().div_euclid(3600)
}

pub fn hour_start(hour: i64) -> DateTime<Utc> {
    DateTime::from_timestamp(hour * 3600, 0).expect("hour index within chrono range")
}

/// Normalization constants for observation features, fitted on training data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpace {
    pub num_stations: usize,
    /// Longest training-split duration (minutes), the SOC proxy denominator.
    pub max_duration: f64,
    pub max_energy: f64,
    /// Scale applied to the previous-hop distance (km).
    pub dist_scale: f64,
}

impl FeatureSpace {
    pub fn fit(train_events: &[ChargingEvent], stations: &StationTable) -> Result<Self> {
        let max_duration = train_events.iter().map(|e| e.duration_min).fold(0.0, f64::max);
        if !(max_duration > 0.0) {
            return Err(Error::Config(
                "training split has no positive charging duration; SOC proxy undefined".into(),
            ));
        }
        let max_energy = train_events.iter().map(|e| e.energy_kwh).fold(0.0, f64::max);
        let dist = stations
            .stations()
            .iter()
            .map(|s| s.mean_distance)
            .sum::<f64>()
            / stations.len() as f64;
        Ok(FeatureSpace {
            num_stations: stations.len(),
            max_duration,
            max_energy,
            dist_scale: if dist > 0.0 { dist } else { 1.0 },
        })
    }

    /// `(1 + M + 76) + 2 + 31`.
    pub fn observation_dim(&self) -> usize {
        1 + self.num_stations + POI_DIM + CHARGE_DIM + TIME_DIM
    }

    pub fn observe(
        &self,
        event: &ChargingEvent,
        station: usize,
        previous: Option<usize>,
        stations: &StationTable,
    ) -> Result<Vec<f64>> {
        let loc = location_context(station, previous, stations);
        let mut o = Vec::with_capacity(self.observation_dim());
        o.push(loc.dist_prev / self.dist_scale);
        o.extend_from_slice(&loc.onehot);
        o.extend_from_slice(&loc.poi);
        o.push(approximate_soc(event.duration_min, self.max_duration)?);
        o.push(if self.max_energy > 0.0 {
            (event.energy_kwh / self.max_energy).clamp(0.0, 1.0)
        } else {
            0.0
        });
        o.extend_from_slice(&time_features(&event.start_time));
        debug_assert_eq!(o.len(), self.observation_dim());
        Ok(o)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geospatial::Station;
    use chrono::TimeZone;

    #[test]
    fn time_features_one_hot() {
        // 2018-06-06 was a Wednesday.
        let t = Utc.with_ymd_and_hms(2018, 6, 6, 8, 30, 0).unwrap();
        let v = time_features(&t);
        assert_eq!(v.iter().sum::<f64>(), 2.0);
        assert_eq!(v[2], 1.0);
        assert_eq!(v[7 + 8], 1.0);
    }

    #[test]
    fn observation_width_and_layout() {
        let stations = StationTable::new(
            (0..8)
                .map(|i| Station::new(format!("cs{i}"), 56.0, -3.0 + i as f64 * 0.01).unwrap())
                .collect(),
        )
        .unwrap();
        let t = Utc.with_ymd_and_hms(2018, 6, 6, 8, 30, 0).unwrap();
        let e = ChargingEvent::new("e", "d", "cs2", t, 30.0, 5.0).unwrap();
        let fs = FeatureSpace::fit(std::slice::from_ref(&e), &stations).unwrap();
        assert_eq!(fs.observation_dim(), (1 + 8 + 76) + 2 + 31);
        let o = fs.observe(&e, 2, Some(0), &stations).unwrap();
        assert_eq!(o.len(), fs.observation_dim());
        assert_eq!(o[1 + 2], 1.0);
        assert_eq!(o[1 + 8 + 76], 1.0); // soc = 30 / 30
        assert_eq!(o[1 + 8 + 76 + 1], 1.0); // energy = 5 / 5
    }

    #[test]
    fn zero_duration_training_split_is_config_error() {
        let stations = StationTable::new(vec![Station::new("a", 0.0, 0.0).unwrap()]).unwrap();
        let t = Utc.with_ymd_and_hms(2018, 6, 6, 8, 30, 0).unwrap();
        let e = ChargingEvent::new("e", "d", "a", t, 0.0, 5.0).unwrap();
        assert!(matches!(FeatureSpace::fit(&[e], &stations), Err(Error::Config(_))));
    }
}
