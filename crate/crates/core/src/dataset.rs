//! Charging-event ingestion, per-driver trajectories, chronological splits and
//! the anonymized warm-up pool.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use chrono::{DateTime, NaiveDate, NaiveDateTime, NaiveTime, Timelike, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const CANONICAL_HEADER: [&str; 6] = [
    "event_id",
    "driver_id",
    "station_id",
    "start_time",
    "duration_min",
    "energy_kwh",
];

const TIME_FORMAT: &str = "%Y-%m-%dT%H:%M:%SZ";

#[derive(Debug, Clone, PartialEq)]
pub struct ChargingEvent {
    pub event_id: String,
    pub driver_id: String,
    pub station_id: String,
    pub start_time: DateTime<Utc>,
    pub duration_min: f64,
    pub energy_kwh: f64,
}

impl ChargingEvent {
    pub fn new(
        event_id: impl Into<String>,
        driver_id: impl Into<String>,
        station_id: impl Into<String>,
        start_time: DateTime<Utc>,
        duration_min: f64,
        energy_kwh: f64,
    ) -> Result<Self> {
        if !(duration_min.is_finite() && duration_min >= 0.0) {
            return Err(Error::Domain(format!("duration must be ≥ 0, got {duration_min}")));
        }
        if !(energy_kwh.is_finite() && energy_kwh >= 0.0) {
            return Err(Error::Domain(format!("energy must be ≥ 0, got {energy_kwh}")));
        }
        Ok(ChargingEvent {
            event_id: event_id.into(),
            driver_id: driver_id.into(),
            station_id: station_id.into(),
            start_time: truncate_to_minute(start_time),
            duration_min,
            energy_kwh,
        })
    }

    pub fn end_time(&self) -> DateTime<Utc> {
        self.start_time + chrono::Duration::milliseconds((self.duration_min * 60_000.0).round() as i64)
    }
}

fn truncate_to_minute(t: DateTime<Utc>) -> DateTime<Utc> {
    t.with_second(0).and_then(|t| t.with_nanosecond(0)).unwrap_or(t)
}

pub fn format_time(t: &DateTime<Utc>) -> String {
    t.format(TIME_FORMAT).to_string()
}

/// Source layout of a raw event file.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Adapter {
    #[default]
    Canonical,
    Dundee,
    Glasgow,
}

impl FromStr for Adapter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "canonical" => Ok(Adapter::Canonical),
            "dundee" => Ok(Adapter::Dundee),
            "glasgow" => Ok(Adapter::Glasgow),
            other => Err(Error::Usage(format!(
                "unknown adapter '{other}' (expected canonical, dundee or glasgow)"
            ))),
        }
    }
}

impl fmt::Display for Adapter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Adapter::Canonical => "canonical",
            Adapter::Dundee => "dundee",
            Adapter::Glasgow => "glasgow",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Reject {
    pub line: u64,
    pub raw: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct ParseOutcome {
    pub events: Vec<ChargingEvent>,
    pub rejects: Vec<Reject>,
}

pub fn parse_events(path: &Path, adapter: Adapter) -> Result<ParseOutcome> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_events_from(file, adapter)
}

/// Parses a raw event table. Malformed rows land in `rejects`; more than half
/// of the rows rejected is treated as a wrong layout and fails.
pub fn parse_events_from<R: Read>(reader: R, adapter: Adapter) -> Result<ParseOutcome> {
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Format(format!("cannot read header: {e}")))?
        .clone();
    let layout = ColumnLayout::resolve(&headers, adapter)?;
    let mut out = ParseOutcome::default();
    let mut total = 0usize;
    for (i, rec) in rdr.records().enumerate() {
        total += 1;
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map_or(i as u64 + 2, |p| p.line());
                out.rejects.push(Reject {
                    line,
                    raw: String::new(),
                    reason: format!("unreadable row: {e}"),
                });
                continue;
            }
        };
        let line = rec.position().map_or(i as u64 + 2, |p| p.line());
        match layout.event(&rec, line) {
            Ok(ev) => out.events.push(ev),
            Err(reason) => out.rejects.push(Reject {
                line,
                raw: rec.iter().collect::<Vec<_>>().join(","),
                reason,
            }),
        }
    }
    if total > 0 && out.rejects.len() * 2 > total {
        return Err(Error::Format(format!(
            "{} of {total} rows rejected for adapter '{adapter}'; first: line {} ({})",
            out.rejects.len(),
            out.rejects[0].line,
            out.rejects[0].reason
        )));
    }
    Ok(out)
}

fn normalize_header(h: &str) -> String {
    h.chars()
        .filter(|c| c.is_ascii_alphanumeric())
        .map(|c| c.to_ascii_lowercase())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum DateOrder {
    DayFirst,
}

#[derive(Debug)]
struct ColumnLayout {
    adapter: Adapter,
    event_id: Option<usize>,
    driver: usize,
    station: usize,
    start: StartColumns,
    end: Option<StartColumns>,
    duration: Option<usize>,
    energy: usize,
    order: DateOrder,
}

#[derive(Debug, Clone, Copy)]
enum StartColumns {
    Combined(usize),
    Split { date: usize, time: usize },
}

impl ColumnLayout {
    fn resolve(headers: &csv::StringRecord, adapter: Adapter) -> Result<Self> {
        let names: Vec<String> = headers.iter().map(normalize_header).collect();
        let find = |aliases: &[&str]| -> Option<usize> {
            aliases
                .iter()
                .find_map(|a| names.iter().position(|n| n == a))
        };
        let require = |aliases: &[&str], what: &str| -> Result<usize> {
            find(aliases).ok_or_else(|| {
                Error::Format(format!(
                    "adapter '{adapter}': no column for {what} (looked for {aliases:?})"
                ))
            })
        };
        if adapter == Adapter::Canonical {
            for (i, expected) in CANONICAL_HEADER.iter().enumerate() {
                if names.get(i).map(String::as_str) != Some(&expected.replace('_', "")) {
                    return Err(Error::Format(format!(
                        "canonical header must be {}",
                        CANONICAL_HEADER.join(",")
                    )));
                }
            }
            return Ok(ColumnLayout {
                adapter,
                event_id: Some(0),
                driver: 1,
                station: 2,
                start: StartColumns::Combined(3),
                end: None,
                duration: Some(4),
                energy: 5,
                order: DateOrder::DayFirst,
            });
        }
        let station_aliases: &[&str] = match adapter {
            Adapter::Dundee => &["cpid", "chargepointid", "stationid", "site"],
            _ => &["cpid", "chargepointid", "chargepoint", "stationid", "site"],
        };
        let start = match find(&["startdatetime", "start"]) {
            Some(c) => StartColumns::Combined(c),
            None => StartColumns::Split {
                date: require(&["startdate"], "start date")?,
                time: require(&["starttime"], "start time")?,
            },
        };
        let end = match find(&["enddatetime", "end"]) {
            Some(c) => Some(StartColumns::Combined(c)),
            None => match (find(&["enddate"]), find(&["endtime"])) {
                (Some(date), Some(time)) => Some(StartColumns::Split { date, time }),
                _ => None,
            },
        };
        let duration = find(&["pluginduration", "durationmin", "duration", "chargingduration"]);
        if duration.is_none() && end.is_none() {
            return Err(Error::Format(format!(
                "adapter '{adapter}': need a duration column or end date/time columns"
            )));
        }
        Ok(ColumnLayout {
            adapter,
            event_id: find(&["chargingevent", "eventid", "sessionid", "chargingeventid", "id"]),
            driver: require(&["userid", "driverid", "user", "customerid"], "user id")?,
            station: require(station_aliases, "charging station id")?,
            start,
            end,
            duration,
            energy: require(
                &["energy", "energykwh", "totalkwh", "consumedenergy", "kwh"],
                "energy",
            )?,
            order: DateOrder::DayFirst,
        })
    }

    fn event(&self, rec: &csv::StringRecord, line: u64) -> std::result::Result<ChargingEvent, String> {
        let field = |i: usize| -> std::result::Result<&str, String> {
            rec.get(i)
                .filter(|s| !s.is_empty())
                .ok_or_else(|| format!("missing field {}", i + 1))
        };
        let event_id = match self.event_id {
            Some(i) => field(i)?.to_string(),
            None => format!("{}-{line}", self.adapter),
        };
        let driver = field(self.driver)?.to_string();
        let station = field(self.station)?.to_string();
        let start = self.timestamp(rec, self.start)?;
        let duration = match self.duration {
            Some(i) => parse_duration(field(i)?)?,
            None => {
                let end = self.timestamp(rec, self.end.expect("checked at resolve"))?;
                (end - start).num_seconds() as f64 / 60.0
            }
        };
        let energy: f64 = field(self.energy)?
            .parse()
            .map_err(|_| format!("energy '{}' is not a number", rec.get(self.energy).unwrap_or("")))?;
        ChargingEvent::new(event_id, driver, station, start, duration, energy).map_err(|e| e.to_string())
    }

    fn timestamp(
        &self,
        rec: &csv::StringRecord,
        cols: StartColumns,
    ) -> std::result::Result<DateTime<Utc>, String> {
        let get = |i: usize| rec.get(i).unwrap_or("").to_string();
        match cols {
            StartColumns::Combined(c) => parse_timestamp(&get(c), self.order),
            StartColumns::Split { date, time } => {
                let d = parse_date(&get(date), self.order)?;
                let t = parse_clock(&get(time))?;
                Ok(NaiveDateTime::new(d, t).and_utc())
            }
        }
    }
}

fn parse_timestamp(s: &str, order: DateOrder) -> std::result::Result<DateTime<Utc>, String> {
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Ok(t.with_timezone(&Utc));
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M"] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Ok(t.and_utc());
        }
    }
    if let Some((d, t)) = s.split_once(' ') {
        return Ok(NaiveDateTime::new(parse_date(d, order)?, parse_clock(t)?).and_utc());
    }
    Err(format!("unparseable timestamp '{s}'"))
}

fn parse_date(s: &str, order: DateOrder) -> std::result::Result<NaiveDate, String> {
    let formats: &[&str] = match order {
        DateOrder::DayFirst => &["%Y-%m-%d", "%d/%m/%Y", "%d-%m-%Y", "%d.%m.%Y", "%d/%m/%y"],
    };
    formats
        .iter()
        .find_map(|f| NaiveDate::parse_from_str(s, f).ok())
        .ok_or_else(|| format!("unparseable date '{s}'"))
}

fn parse_clock(s: &str) -> std::result::Result<NaiveTime, String> {
    ["%H:%M:%S", "%H:%M"]
        .iter()
        .find_map(|f| NaiveTime::parse_from_str(s, f).ok())
        .ok_or_else(|| format!("unparseable time '{s}'"))
}

/// Minutes, either a plain number or `H:MM[:SS]`.
fn parse_duration(s: &str) -> std::result::Result<f64, String> {
    if let Ok(v) = s.parse::<f64>() {
        return Ok(v);
    }
    let parts: Vec<&str> = s.split(':').collect();
    if (2..=3).contains(&parts.len()) {
        let nums: std::result::Result<Vec<f64>, _> = parts.iter().map(|p| p.parse::<f64>()).collect();
        if let Ok(n) = nums {
            let secs = n.get(2).copied().unwrap_or(0.0);
            return Ok(n[0] * 60.0 + n[1] + secs / 60.0);
        }
    }
    Err(format!("duration '{s}' is not a number"))
}

/// Writes events in canonical CSV (header, ISO-8601 UTC, LF endings).
pub fn write_canonical<W: Write>(events: &[ChargingEvent], writer: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(writer);
    let io = |e: csv::Error| Error::Format(format!("csv write failed: {e}"));
    w.write_record(CANONICAL_HEADER).map_err(io)?;
    for ev in events {
        w.write_record([
            ev.event_id.as_str(),
            ev.driver_id.as_str(),
            ev.station_id.as_str(),
            &format_time(&ev.start_time),
            &ev.duration_min.to_string(),
            &ev.energy_kwh.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io("<canonical output>", e))?;
    Ok(())
}

pub fn write_rejects<W: Write>(rejects: &[Reject], writer: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(writer);
    let io = |e: csv::Error| Error::Format(format!("csv write failed: {e}"));
    w.write_record(["line", "raw", "reason"]).map_err(io)?;
    for r in rejects {
        w.write_record([r.line.to_string().as_str(), &r.raw, &r.reason])
            .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io("<rejects output>", e))?;
    Ok(())
}

/// One driver's events, ascending by `(start_time, event_id)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DriverTrajectory {
    pub driver_id: String,
    pub events: Vec<ChargingEvent>,
}

impl DriverTrajectory {
    pub fn new(driver_id: impl Into<String>, mut events: Vec<ChargingEvent>) -> Self {
        events.sort_by(|a, b| {
            a.start_time
                .cmp(&b.start_time)
                .then_with(|| a.event_id.cmp(&b.event_id))
        });
        DriverTrajectory {
            driver_id: driver_id.into(),
            events,
        }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn split(&self, spec: &SplitSpec) -> Option<SplitSizes> {
        spec.sizes(self.len())
    }
}

pub fn build_trajectories(events: &[ChargingEvent]) -> BTreeMap<String, DriverTrajectory> {
    let mut by_driver: BTreeMap<String, Vec<ChargingEvent>> = BTreeMap::new();
    for ev in events {
        by_driver.entry(ev.driver_id.clone()).or_default().push(ev.clone());
    }
    by_driver
        .into_iter()
        .map(|(d, evs)| (d.clone(), DriverTrajectory::new(d, evs)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_frac: 0.8,
            val_frac: 0.1,
            test_frac: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSizes {
    pub fn train_range(&self) -> std::ops::Range<usize> {
        0..self.train
    }

    pub fn val_range(&self) -> std::ops::Range<usize> {
        self.train..self.train + self.val
    }

    pub fn test_range(&self) -> std::ops::Range<usize> {
        self.train + self.val..self.train + self.val + self.test
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let fr = [self.train_frac, self.val_frac, self.test_frac];
        if fr.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::Config("split fractions must lie in [0, 1]".into()));
        }
        if (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config("split fractions must sum to 1".into()));
        }
        Ok(())
    }

    /// Chronological segment sizes: `val = max(1, floor(val_frac n))`,
    /// `train = min(floor(train_frac n), n - val - 1)`, test gets the rest.
    /// `None` for `n < 3`.
    pub fn sizes(&self, n: usize) -> Option<SplitSizes> {
        if n < 3 {
            return None;
        }
        let val = ((self.val_frac * n as f64).floor() as usize).max(1);
        let train = ((self.train_frac * n as f64).floor() as usize).min(n - val - 1);
        Some(SplitSizes {
            train,
            val,
            test: n - train - val,
        })
    }
}

pub const WARMUP_MIN_EVENTS: usize = 10;
pub const WARMUP_FRACTION: f64 = 0.05;

/// Anonymized token for a driver id.
pub fn anonymize(driver_id: &str, salt: &str) -> String {
    let digest = Sha256::new()
        .chain_update(salt.as_bytes())
        .chain_update([0u8])
        .chain_update(driver_id.as_bytes())
        .finalize();
    let hex: String = digest.iter().take(8).map(|b| format!("{b:02x}")).collect();
    format!("anon-{hex}")
}

/// Earliest `max(1, floor(0.05 n))` events of every driver with more than ten
/// events, with driver ids replaced by salted hash tokens.
pub fn warmup_pool(trajectories: &BTreeMap<String, DriverTrajectory>, salt: &str) -> Vec<ChargingEvent> {
    let mut pool = Vec::new();
    for traj in trajectories.values() {
        let n = traj.len();
        if n <= WARMUP_MIN_EVENTS {
            continue;
        }
        let take = ((WARMUP_FRACTION * n as f64).floor() as usize).max(1);
        let token = anonymize(&traj.driver_id, salt);
        for ev in &traj.events[..take] {
            let mut e = ev.clone();
            e.driver_id = token.clone();
            pool.push(e);
        }
    }
    pool
}

/// State-of-charge proxy `min(duration / d_max, 1)`.
pub fn approximate_soc(duration_min: f64, max_duration: f64) -> Result<f64> {
    if !(max_duration > 0.0) {
        return Err(Error::Config(format!(
            "maximum training duration must be positive to approximate SOC, got {max_duration}"
        )));
    }
    Ok((duration_min / max_duration).clamp(0.0, 1.0))
}
