//! Hourly per-station wait proxy: minutes of charging sessions overlapping
//! each clock hour.

use std::io::Write;

use rayon::prelude::*;

use crate::dataset::ChargingEvent;
use crate::error::{Error, Result};
use crate::features::{hour_index, hour_start};
use crate::geospatial::StationTable;

#[derive(Debug, Clone, PartialEq)]
pub struct WaitTable {
    start_hour: i64,
    hours: usize,
    /// `series[station][h - start_hour]`.
    series: Vec<Vec<f64>>,
}

impl WaitTable {
    /// Buckets cover `[range.0, range.1)` in hour indices, or the span of the
    /// events when `range` is `None`.
    pub fn build(
        events: &[ChargingEvent],
        stations: &StationTable,
        range: Option<(i64, i64)>,
    ) -> Result<Self> {
        let mut sessions: Vec<Vec<(i64, i64)>> = vec![Vec::new(); stations.len()];
        for e in events {
            let s = stations.index_of(&e.station_id)?;
            let start = e.start_time.timestamp();
            let end = e.end_time().timestamp();
            sessions[s].push((start, end));
        }
        let (start_hour, end_hour) = match range {
            Some(r) => r,
            None => {
                let lo = events.iter().map(|e| hour_index(&e.start_time)).min();
                let hi = events.iter().map(|e| hour_index(&e.end_time())).max();
                match (lo, hi) {
                    (Some(lo), Some(hi)) => (lo, hi + 1),
                    _ => (0, 0),
                }
            }
        };
        if end_hour < start_hour {
            return Err(Error::Usage("wait-series range end precedes start".into()));
        }
        let hours = (end_hour - start_hour) as usize;
        let series = sessions
            .par_iter()
            .map(|list| {
                let mut v = vec![0.0; hours];
                for &(s, e) in list {
                    let first = s.div_euclid(3600).max(start_hour);
                    let last = (e - 1).div_euclid(3600).min(end_hour - 1);
                    let mut h = first;
                    while h <= last {
                        let lo = s.max(h * 3600);
                        let hi = e.min((h + 1) * 3600);
                        if hi > lo {
                            v[(h - start_hour) as usize] += (hi - lo) as f64 / 60.0;
                        }
                        h += 1;
                    }
                }
                v
            })
            .collect();
        Ok(WaitTable {
            start_hour,
            hours,
            series,
        })
    }

    pub fn start_hour(&self) -> i64 {
        self.start_hour
    }

    pub fn end_hour(&self) -> i64 {
        self.start_hour + self.hours as i64
    }

    pub fn num_stations(&self) -> usize {
        self.series.len()
    }

    pub fn series(&self, station: usize) -> &[f64] {
        &self.series[station]
    }

    pub fn value(&self, station: usize, hour: i64) -> Option<f64> {
        if hour < self.start_hour || hour >= self.end_hour() {
            return None;
        }
        Some(self.series[station][(hour - self.start_hour) as usize])
    }

    /// Buckets `hour - k .. hour - 1` when all are inside the table.
    pub fn window(&self, station: usize, hour: i64, k: usize) -> Option<&[f64]> {
        let first = hour - k as i64;
        if first < self.start_hour || hour > self.end_hour() {
            return None;
        }
        let a = (first - self.start_hour) as usize;
        Some(&self.series[station][a..a + k])
    }

    /// Mean over hours with a non-zero value (0 when there are none).
    pub fn mean_occupied(&self, station: usize) -> f64 {
        let (sum, n) = self.series[station]
            .iter()
            .filter(|&&v| v > 0.0)
            .fold((0.0, 0usize), |(s, n), &v| (s + v, n + 1));
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }

    /// CSV `station_id,date,hour,wait_min`, one row per bucket.
    pub fn write_csv<W: Write>(&self, stations: &StationTable, writer: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(writer);
        let err = |e: csv::Error| Error::Format(format!("wait-series write failed: {e}"));
        w.write_record(["station_id", "date", "hour", "wait_min"]).map_err(err)?;
        for (s, series) in self.series.iter().enumerate() {
            for (i, v) in series.iter().enumerate() {
                let t = hour_start(self.start_hour + i as i64);
                w.write_record([
                    stations.id(s),
                    &t.format("%Y-%m-%d").to_string(),
                    &t.format("%H").to_string(),
                    &v.to_string(),
                ])
                .map_err(err)?;
            }
        }
        w.flush().map_err(|e| Error::io("<wait series>", e))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geospatial::Station;
    use chrono::{TimeZone, Utc};

    fn stations() -> StationTable {
        StationTable::new(vec![Station::new("cs1", 56.0, -3.0).unwrap()]).unwrap()
    }

    fn ev(id: &str, h: u32, m: u32, dur: f64) -> ChargingEvent {
        ChargingEvent::new(id, "d", "cs1", Utc.with_ymd_and_hms(2018, 6, 6, h, m, 0).unwrap(), dur, 1.0).unwrap()
    }

    fn day_range() -> (i64, i64) {
        let h0 = hour_index(&Utc.with_ymd_and_hms(2018, 6, 6, 0, 0, 0).unwrap());
        (h0, h0 + 24)
    }

    #[test]
    fn single_full_hour_session() {
        let (h0, h1) = day_range();
        let t = WaitTable::build(&[ev("a", 8, 0, 60.0)], &stations(), Some((h0, h1))).unwrap();
        for h in 0..24 {
            assert_eq!(t.value(0, h0 + h).unwrap(), if h == 8 { 60.0 } else { 0.0 });
        }
    }

    #[test]
    fn session_spanning_two_hours() {
        let (h0, h1) = day_range();
        let t = WaitTable::build(&[ev("a", 8, 30, 90.0)], &stations(), Some((h0, h1))).unwrap();
        assert_eq!(t.value(0, h0 + 8), Some(30.0));
        assert_eq!(t.value(0, h0 + 9), Some(60.0));
        assert_eq!(t.value(0, h0 + 10), Some(0.0));
    }

    #[test]
    fn overlapping_sessions_add() {
        let (h0, h1) = day_range();
        let t = WaitTable::build(&[ev("a", 10, 0, 30.0), ev("b", 10, 20, 30.0)], &stations(), Some((h0, h1))).unwrap();
        assert_eq!(t.value(0, h0 + 10), Some(60.0));
    }

    #[test]
    fn later_events_do_not_touch_earlier_buckets() {
        let (h0, h1) = day_range();
        let early = vec![ev("a", 3, 10, 200.0), ev("b", 9, 0, 20.0)];
        let mut all = early.clone();
        all.push(ev("c", 12, 0, 300.0));
        let a = WaitTable::build(&early, &stations(), Some((h0, h1))).unwrap();
        let b = WaitTable::build(&all, &stations(), Some((h0, h1))).unwrap();
        for h in 0..=11 {
            assert_eq!(a.value(0, h0 + h), b.value(0, h0 + h));
        }
    }

    #[test]
    fn window_requires_full_history() {
        let (h0, h1) = day_range();
        let t = WaitTable::build(&[ev("a", 8, 0, 60.0)], &stations(), Some((h0, h1))).unwrap();
        assert!(t.window(0, h0 + 5, 10).is_none());
        assert_eq!(t.window(0, h0 + 10, 10).unwrap().len(), 10);
    }

    #[test]
    fn csv_export_has_contract_header() {
        let (h0, _) = day_range();
        let t = WaitTable::build(&[ev("a", 0, 0, 60.0)], &stations(), Some((h0, h0 + 2))).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&stations(), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "station_id,date,hour,wait_min\ncs1,2018-06-06,00,60\ncs1,2018-06-06,01,0\n");
    }
}
