//! Run configuration: a sectioned `key = value` (TOML) file with every
//! numeric validated at load and unknown keys rejected. Any key can also be
//! overridden with a dotted path, e.g. `rac.epsilon=0.2`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::agent::RacConfig;
use crate::baselines::FpmcConfig;
use crate::dataset::{Adapter, SplitSpec};
use crate::error::{Error, Result};
use crate::evaluation::{validate_grid, Segment};
use crate::pipeline::BaselineKind;
use crate::reward::{RewardNetConfig, RewardParams};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataPaths {
    /// Raw event export read by `ingest`.
    pub raw: Option<PathBuf>,
    pub adapter: Adapter,
    /// Canonical event CSV.
    pub events: Option<PathBuf>,
    pub stations: Option<PathBuf>,
    pub poi: Option<PathBuf>,
    /// A trained forecaster checkpoint; when absent one is trained on demand.
    pub reward_model: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForecastMode {
    /// LSTM forecaster over the past wait buckets.
    #[default]
    Net,
    /// The realized bucket at the decision hour.
    Observed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub kind: BaselineKind,
    pub mc_smoothing: f64,
    pub fpmc: FpmcConfig,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig { kind: BaselineKind::Markov, mc_smoothing: 1.0, fpmc: FpmcConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub split: Segment,
    /// Values of `ε` visited by `sweep` and `case-study`.
    pub grid: Vec<f64>,
    /// Drivers reported by `case-study`.
    pub drivers: Vec<String>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            ks: vec![1, 3, 5],
            split: Segment::Test,
            grid: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            drivers: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub seed: u64,
    pub forecast: ForecastMode,
    pub data: DataPaths,
    pub split: SplitSpec,
    pub rac: RacConfig,
    pub reward: RewardParams,
    pub reward_net: RewardNetConfig,
    pub baseline: BaselineConfig,
    pub eval: EvalConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 0,
            forecast: ForecastMode::Net,
            data: DataPaths::default(),
            split: SplitSpec::default(),
            rac: RacConfig::default(),
            reward: RewardParams::default(),
            reward_net: RewardNetConfig::default(),
            baseline: BaselineConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn parse_literal(raw: &str) -> Value {
    let doc = format!("v = {raw}");
    match doc.parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// Sets `path` (dot-separated) in `table`, creating intermediate tables.
pub fn set_path(table: &mut Table, path: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Usage(format!("malformed config key '{path}'")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("config key '{p}' is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

const PATH_KEYS: [&str; 5] = ["raw", "events", "stations", "poi", "reward_model"];

fn resolve_data_paths(table: &mut Table, dir: &Path) {
    let Some(Value::Table(data)) = table.get_mut("data") else { return };
    for key in PATH_KEYS {
        if let Some(Value::String(p)) = data.get_mut(key) {
            if Path::new(p.as_str()).is_relative() {
                *p = dir.join(&*p).to_string_lossy().into_owned();
            }
        }
    }
}

impl Config {
    /// Builds the effective configuration from an optional file plus
    /// `key=value` overrides applied in order. Relative data paths in a file
    /// resolve against the file's directory.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                let mut t = text
                    .parse::<Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                if let Some(dir) = p.parent() {
                    resolve_data_paths(&mut t, dir);
                }
                t
            }
            None => Table::new(),
        };
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("override '{o}' is not key=value")))?;
            set_path(&mut table, k.trim(), parse_literal(v.trim()))?;
        }
        let cfg: Config = Value::Table(table)
            .try_into()
            .map_err(|e| Error::Config(format!("invalid configuration: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.split.validate()?;
        self.rac.validate()?;
        self.reward.validate()?;
        let rn = &self.reward_net;
        if rn.hidden == 0 || rn.layers == 0 || rn.window == 0 || rn.batch_size == 0 {
            return Err(Error::Config("reward_net hidden, layers, window and batch_size must be positive".into()));
        }
        if !(rn.learning_rate > 0.0) || !(0.0..1.0).contains(&rn.val_fraction) {
            return Err(Error::Config("reward_net learning_rate must be positive and val_fraction in [0, 1)".into()));
        }
        if !(self.baseline.mc_smoothing >= 0.0) {
            return Err(Error::Config("baseline.mc_smoothing must be non-negative".into()));
        }
        let f = &self.baseline.fpmc;
        if f.factors == 0 || f.negatives == 0 || !(f.learning_rate > 0.0) || !(f.regularization >= 0.0) {
            return Err(Error::Config("baseline.fpmc needs positive factors, negatives and learning_rate".into()));
        }
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return Err(Error::Config("eval.ks must be a non-empty list of positive integers".into()));
        }
        validate_grid(&self.eval.grid).map_err(|e| Error::Config(format!("eval.grid: {e}")))?;
        Ok(())
    }

    pub fn require<'a>(&self, path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
        path.as_deref()
            .ok_or_else(|| Error::Usage(format!("data.{key} is not set (use --{key} or the config file)")))
    }

    /// The configuration as a TOML table, for echoing into artifacts.
    pub fn to_table(&self) -> Result<Table> {
        match Value::try_from(self) {
            Ok(Value::Table(t)) => Ok(t),
            _ => Err(Error::Config("configuration cannot be rendered".into())),
        }
    }
}
