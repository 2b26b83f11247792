//! Wait-time forecaster `g_φ2`: a stacked LSTM over the previous `k` hourly
//! buckets of one station followed by a linear head.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{hour_start, time_features, TIME_DIM};
use crate::geospatial::{StationTable, POI_DIM};
use crate::neural::{clip_global_norm, sgd_step, Dense, Parameters, StackedCache, StackedLstm, Tensor};
use crate::neural::params::prefixed;
use crate::seed::Rng;

use super::wait::WaitTable;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardNetConfig {
    pub hidden: usize,
    pub layers: usize,
    pub window: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    /// Trailing share of the hour range held out for validation.
    pub val_fraction: f64,
    pub max_val_samples: usize,
}

impl Default for RewardNetConfig {
    fn default() -> Self {
        RewardNetConfig {
            hidden: 100,
            layers: 2,
            window: 10,
            epochs: 20,
            steps_per_epoch: 50,
            batch_size: 32,
            learning_rate: 0.05,
            clip_norm: 5.0,
            val_fraction: 0.1,
            max_val_samples: 2000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RewardNet {
    pub lstm: StackedLstm,
    pub head: Dense,
    pub num_stations: usize,
    pub window: usize,
    /// Waits enter and leave the network divided by this.
    pub wait_scale: f64,
}

/// One forecast with its provenance flags.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Forecast {
    pub minutes: f64,
    pub fallback: bool,
    pub clamped: bool,
}

pub fn reward_input_dim(num_stations: usize) -> usize {
    1 + num_stations + POI_DIM + TIME_DIM
}

impl RewardNet {
    pub fn new(num_stations: usize, hidden: usize, layers: usize, window: usize, wait_scale: f64, rng: &mut Rng) -> Result<Self> {
        Ok(RewardNet {
            lstm: StackedLstm::new(reward_input_dim(num_stations), hidden, layers, rng)?,
            head: Dense::new(hidden, 1, rng),
            num_stations,
            window,
            wait_scale,
        })
    }

    /// Zero-valued copy used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        g.zero();
        g
    }

    /// Per-step inputs for forecasting `station` at `hour`, or `None` when
    /// fewer than `window` past buckets exist.
    pub fn inputs(&self, table: &WaitTable, stations: &StationTable, station: usize, hour: i64) -> Option<Vec<Vec<f64>>> {
        let past = table.window(station, hour, self.window)?;
        let poi = stations.get(station).poi_distribution();
        let tau = time_features(&hour_start(hour));
        Some(
            past.iter()
                .map(|&z| {
                    let mut x = Vec::with_capacity(reward_input_dim(self.num_stations));
                    x.push(z / self.wait_scale);
                    x.extend((0..self.num_stations).map(|s| if s == station { 1.0 } else { 0.0 }));
                    x.extend_from_slice(&poi);
                    x.extend_from_slice(&tau);
                    x
                })
                .collect(),
        )
    }

    /// Raw output in scaled units.
    pub fn forward(&self, inputs: &[Vec<f64>]) -> Result<(f64, StackedCache)> {
        let cache = self.lstm.forward(inputs)?;
        let out = self.head.forward(&cache.final_hidden())[0];
        Ok((out, cache))
    }

    /// Accumulates `d out` (scaled units) into `grads`.
    pub fn backward(&self, cache: &StackedCache, d_out: f64, grads: &mut RewardNet) -> Result<()> {
        let dh = self.head.backward(&cache.final_hidden(), &[d_out], &mut grads.head);
        self.lstm.backward_final(cache, &dh, &mut grads.lstm)?;
        Ok(())
    }

    pub fn predict(&self, table: &WaitTable, stations: &StationTable, station: usize, hour: i64) -> Result<Forecast> {
        match self.inputs(table, stations, station, hour) {
            None => Ok(Forecast {
                minutes: stations.get(station).mean_wait,
                fallback: true,
                clamped: false,
            }),
            Some(x) => {
                let raw = self.forward(&x)?.0 * self.wait_scale;
                Ok(clamp_forecast(raw))
            }
        }
    }
}

pub fn clamp_forecast(raw: f64) -> Forecast {
    if raw < 0.0 {
        log::debug!("wait forecast {raw:.3} clamped to 0");
        Forecast { minutes: 0.0, fallback: false, clamped: true }
    } else {
        Forecast { minutes: raw, fallback: false, clamped: false }
    }
}

impl Parameters for RewardNet {
    fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut v = prefixed("lstm", self.lstm.tensors());
        v.extend(prefixed("head", self.head.tensors()));
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.lstm.tensors_mut();
        v.extend(self.head.tensors_mut());
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RewardTrainReport {
    pub train_samples: usize,
    pub val_samples: usize,
    /// Squared minutes.
    pub train_mse: f64,
    pub val_mse: f64,
    /// Variance of validation targets; the predict-the-mean baseline.
    pub val_variance: f64,
    pub skipped_stations: Vec<String>,
}

/// Fits one-step-ahead forecasts on every `(station, hour)` with a full window.
/// The last `val_fraction` of the hour range is held out.
pub fn train_reward_net(
    table: &WaitTable,
    stations: &StationTable,
    cfg: &RewardNetConfig,
    rng: &mut Rng,
) -> Result<(RewardNet, RewardTrainReport)> {
    if cfg.window == 0 || cfg.hidden == 0 || cfg.layers == 0 {
        return Err(Error::Config("reward net needs positive window, hidden and layers".into()));
    }
    if !(0.0..1.0).contains(&cfg.val_fraction) {
        return Err(Error::Config("reward val_fraction must lie in [0, 1)".into()));
    }
    let k = cfg.window as i64;
    let start = table.start_hour();
    let end = table.end_hour();
    let cutoff = start + ((1.0 - cfg.val_fraction) * (end - start) as f64).floor() as i64;

    let mut skipped = Vec::new();
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut occupied = (0.0, 0usize);
    for s in 0..stations.len() {
        let series = table.series(s);
        let first = match series.iter().position(|&v| v > 0.0) {
            Some(i) => start + i as i64,
            None => {
                skipped.push(stations.id(s).to_string());
                continue;
            }
        };
        if end - first < k + 1 {
            log::warn!("station {} has fewer than {} hourly points; skipped", stations.id(s), k + 1);
            skipped.push(stations.id(s).to_string());
            continue;
        }
        for h in (first + k).max(start + k)..end {
            if h < cutoff {
                train.push((s, h));
            } else {
                val.push((s, h));
            }
        }
        for &v in series[..(cutoff - start).max(0) as usize].iter().filter(|&&v| v > 0.0) {
            occupied.0 += v;
            occupied.1 += 1;
        }
    }
    if train.is_empty() {
        return Err(Error::Domain(
            "reward net training window is empty: no station has enough hourly history".into(),
        ));
    }
    let wait_scale = if occupied.1 > 0 { occupied.0 / occupied.1 as f64 } else { 1.0 };
    let mut net = RewardNet::new(stations.len(), cfg.hidden, cfg.layers, cfg.window, wait_scale, rng)?;

    let target = |s: usize, h: i64| table.value(s, h).expect("target inside table") / wait_scale;
    let mut order = train.clone();
    let mut grads = net.zeros_like();
    let mut cursor = order.len();
    for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for _ in 0..cfg.steps_per_epoch {
            grads.zero();
            let mut batch = Vec::with_capacity(cfg.batch_size);
            for _ in 0..cfg.batch_size.max(1) {
                if cursor == order.len() {
                    order.shuffle(rng);
                    cursor = 0;
                }
                batch.push(order[cursor]);
                cursor += 1;
            }
            let n = batch.len() as f64;
            for &(s, h) in &batch {
                let x = net.inputs(table, stations, s, h).expect("sample has a full window");
                let (y, cache) = net.forward(&x)?;
                let d = y - target(s, h);
                loss_sum += d * d;
                seen += 1;
                net.backward(&cache, 2.0 * d / n, &mut grads)?;
            }
            clip_global_norm(&mut grads, cfg.clip_norm);
            sgd_step(&mut net, &grads, cfg.learning_rate)?;
        }
        if !net.all_finite() {
            return Err(Error::Numeric {
                message: format!("reward net diverged at epoch {epoch}"),
                dump: format!("wait scale {wait_scale}, learning rate {}", cfg.learning_rate),
            });
        }
        log::debug!(
            "reward net epoch {epoch}: train mse {:.4}",
            loss_sum / seen.max(1) as f64 * wait_scale * wait_scale
        );
    }

    let mse = |samples: &[(usize, i64)]| -> Result<(f64, f64)> {
        if samples.is_empty() {
            return Ok((f64::NAN, f64::NAN));
        }
        let stride = (samples.len() / cfg.max_val_samples.max(1)).max(1);
        let picked: Vec<_> = samples.iter().step_by(stride).collect();
        let mut err = 0.0;
        let mut ys = Vec::with_capacity(picked.len());
        for &&(s, h) in &picked {
            let x = net.inputs(table, stations, s, h).expect("sample has a full window");
            let pred = (net.forward(&x)?.0 * wait_scale).max(0.0);
            let y = table.value(s, h).expect("target inside table");
            err += (pred - y).powi(2);
            ys.push(y);
        }
        let mean = ys.iter().sum::<f64>() / ys.len() as f64;
        let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / ys.len() as f64;
        Ok((err / picked.len() as f64, var))
    };
    let (train_mse, _) = mse(&train)?;
    let (val_mse, val_variance) = mse(&val)?;
    log::info!("reward net: train mse {train_mse:.3}, val mse {val_mse:.3} (variance {val_variance:.3})");
    Ok((
        net,
        RewardTrainReport {
            train_samples: train.len(),
            val_samples: val.len(),
            train_mse,
            val_mse,
            val_variance,
            skipped_stations: skipped,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ChargingEvent;
    use crate::geospatial::Station;
    use crate::seed::SeedTree;
    use chrono::{TimeZone, Utc};

    fn stations(n: usize) -> StationTable {
        StationTable::new((0..n).map(|i| Station::new(format!("cs{i}"), 56.0, -3.0 + 0.01 * i as f64).unwrap()).collect()).unwrap()
    }

    fn small_cfg() -> RewardNetConfig {
        RewardNetConfig { hidden: 8, layers: 2, epochs: 10, steps_per_epoch: 40, batch_size: 8, learning_rate: 0.1, ..Default::default() }
    }

    #[test]
    fn short_history_falls_back_to_norm() {
        let mut st = stations(1);
        st.set_norms(&[crate::geospatial::StationNorm { mean_wait: 17.0, mean_distance: 2.0 }]).unwrap();
        let t0 = Utc.with_ymd_and_hms(2018, 1, 1, 0, 0, 0).unwrap();
        let e = ChargingEvent::new("e", "d", "cs0", t0, 60.0, 1.0).unwrap();
        let table = WaitTable::build(&[e], &st, None).unwrap();
        let net = RewardNet::new(1, 4, 2, 10, 1.0, &mut SeedTree::new(1).rng("r")).unwrap();
        let f = net.predict(&table, &st, 0, table.start_hour() + 3).unwrap();
        assert_eq!(f, Forecast { minutes: 17.0, fallback: true, clamped: false });
    }

    #[test]
    fn negative_raw_output_is_clamped() {
        assert_eq!(clamp_forecast(-3.0), Forecast { minutes: 0.0, fallback: false, clamped: true });
        assert_eq!(clamp_forecast(4.5).minutes, 4.5);
    }

    #[test]
    fn empty_training_window_is_an_error() {
        let st = stations(1);
        let t0 = Utc.with_ymd_and_hms(2018, 1, 1, 0, 0, 0).unwrap();
        let e = ChargingEvent::new("e", "d", "cs0", t0, 60.0, 1.0).unwrap();
        let table = WaitTable::build(&[e], &st, None).unwrap();
        let err = train_reward_net(&table, &st, &small_cfg(), &mut SeedTree::new(1).rng("r")).unwrap_err();
        assert!(matches!(err, Error::Domain(_)));
    }

    #[test]
    fn constant_series_is_learned() {
        let st = stations(1);
        let t0 = Utc.with_ymd_and_hms(2018, 1, 1, 0, 0, 0).unwrap();
        let events: Vec<_> = (0..200)
            .map(|h| ChargingEvent::new(format!("e{h}"), "d", "cs0", t0 + chrono::Duration::hours(h), 30.0, 1.0).unwrap())
            .collect();
        let table = WaitTable::build(&events, &st, None).unwrap();
        let (net, report) = train_reward_net(&table, &st, &small_cfg(), &mut SeedTree::new(3).rng("r")).unwrap();
        assert!(report.val_samples > 0);
        for h in table.end_hour() - 10..table.end_hour() {
            let f = net.predict(&table, &st, 0, h).unwrap();
            assert!((f.minutes - 30.0).abs() <= 0.05 * 30.0, "hour {h}: {}", f.minutes);
        }
    }
}
