//! Reference next-station recommenders.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;

use crate::dataset::ChargingEvent;
use crate::error::{Error, Result};
use crate::evaluation::{rank_desc, Recommender};
use crate::geospatial::StationTable;
use crate::neural::mlp::sigmoid;
use crate::seed::Rng;

/// Station-index sequences per driver.
pub type Sequences = BTreeMap<String, Vec<usize>>;

pub fn transition_counts(seq: &[usize], m: usize) -> Vec<Vec<f64>> {
    let mut c = vec![vec![0.0; m]; m];
    for w in seq.windows(2) {
        c[w[0]][w[1]] += 1.0;
    }
    c
}

/// `P(j|i) = (c_ij + λ) / (Σ_k c_ik + λM)`; rows without mass become uniform.
pub fn smooth_rows(counts: &[Vec<f64>], smoothing: f64) -> Vec<Vec<f64>> {
    let m = counts.len();
    counts
        .iter()
        .map(|row| {
            let denom = row.iter().sum::<f64>() + smoothing * m as f64;
            if denom > 0.0 {
                row.iter().map(|&c| (c + smoothing) / denom).collect()
            } else {
                vec![1.0 / m as f64; m]
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarkovModel {
    pub smoothing: f64,
    pub global: Vec<Vec<f64>>,
    pub drivers: BTreeMap<String, Vec<Vec<f64>>>,
}

impl MarkovModel {
    /// Drivers with at least two events get their own matrix; everyone
    /// contributes to the pooled global matrix used as the fallback.
    pub fn fit(train: &Sequences, m: usize, smoothing: f64) -> Result<Self> {
        if !(smoothing >= 0.0) {
            return Err(Error::Config("Markov smoothing must be non-negative".into()));
        }
        let mut pooled = vec![vec![0.0; m]; m];
        let mut drivers = BTreeMap::new();
        for (id, seq) in train {
            let c = transition_counts(seq, m);
            for (p, r) in pooled.iter_mut().zip(&c) {
                for (a, b) in p.iter_mut().zip(r) {
                    *a += b;
                }
            }
            if seq.len() >= 2 {
                drivers.insert(id.clone(), smooth_rows(&c, smoothing));
            }
        }
        Ok(MarkovModel {
            smoothing,
            global: smooth_rows(&pooled, smoothing),
            drivers,
        })
    }

    pub fn num_stations(&self) -> usize {
        self.global.len()
    }

    pub fn row(&self, driver_id: &str, last: Option<usize>) -> Vec<f64> {
        let m = self.num_stations();
        match last {
            Some(i) if i < m => self.drivers.get(driver_id).unwrap_or(&self.global)[i].clone(),
            _ => vec![1.0 / m as f64; m],
        }
    }

    pub fn predict(&self, driver_id: &str, last: Option<usize>, k: usize) -> Vec<usize> {
        rank_desc(&self.row(driver_id, last)).into_iter().take(k).collect()
    }
}

fn last_station(prefix: &[ChargingEvent], stations: &StationTable) -> Option<usize> {
    prefix.last().and_then(|e| stations.index_of(&e.station_id).ok())
}

pub struct MarkovRecommender<'a> {
    pub model: &'a MarkovModel,
    pub stations: &'a StationTable,
}

impl Recommender for MarkovRecommender<'_> {
    fn name(&self) -> String {
        "mc".into()
    }

    fn scores(&self, driver_id: &str, prefix: &[ChargingEvent]) -> Result<Vec<f64>> {
        Ok(self.model.row(driver_id, last_station(prefix, self.stations)))
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FpmcConfig {
    pub factors: usize,
    pub epochs: usize,
    pub negatives: usize,
    pub learning_rate: f64,
    pub regularization: f64,
    pub init_scale: f64,
}

impl Default for FpmcConfig {
    fn default() -> Self {
        FpmcConfig {
            factors: 16,
            epochs: 200,
            negatives: 4,
            learning_rate: 0.05,
            regularization: 0.001,
            init_scale: 0.1,
        }
    }
}

/// `score(u, l, i) = <VU_u, VI_i> + <VIL_i, VLI_l>`, row-major factor tables.
#[derive(Debug, Clone, PartialEq)]
pub struct FpmcModel {
    pub factors: usize,
    pub num_stations: usize,
    pub drivers: Vec<String>,
    pub vu: Vec<f64>,
    pub vi: Vec<f64>,
    pub vil: Vec<f64>,
    pub vli: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl FpmcModel {
    pub fn from_factors(
        factors: usize,
        drivers: Vec<String>,
        vu: Vec<f64>,
        vi: Vec<f64>,
        vil: Vec<f64>,
        vli: Vec<f64>,
    ) -> Result<Self> {
        let m = vi.len() / factors.max(1);
        if factors == 0
            || vu.len() != drivers.len() * factors
            || vi.len() != m * factors
            || vil.len() != m * factors
            || vli.len() != m * factors
        {
            return Err(Error::Shape("FPMC factor tables have inconsistent sizes".into()));
        }
        Ok(FpmcModel { factors, num_stations: m, drivers, vu, vi, vil, vli })
    }

    fn slice(v: &[f64], i: usize, f: usize) -> &[f64] {
        &v[i * f..(i + 1) * f]
    }

    fn driver_index(&self, driver_id: &str) -> Option<usize> {
        self.drivers.binary_search_by(|d| d.as_str().cmp(driver_id)).ok()
    }

    pub fn score(&self, driver: Option<usize>, last: Option<usize>, item: usize) -> f64 {
        let f = self.factors;
        let mut s = 0.0;
        if let Some(u) = driver {
            s += dot(Self::slice(&self.vu, u, f), Self::slice(&self.vi, item, f));
        }
        if let Some(l) = last {
            s += dot(Self::slice(&self.vil, item, f), Self::slice(&self.vli, l, f));
        }
        s
    }

    pub fn scores(&self, driver_id: &str, last: Option<usize>) -> Vec<f64> {
        let u = self.driver_index(driver_id);
        (0..self.num_stations).map(|i| self.score(u, last, i)).collect()
    }

    pub fn predict(&self, driver_id: &str, last: Option<usize>, k: usize) -> Vec<usize> {
        rank_desc(&self.scores(driver_id, last)).into_iter().take(k).collect()
    }

    /// Pairwise ranking with sampled negatives and SGD.
    pub fn fit(train: &Sequences, m: usize, cfg: &FpmcConfig, rng: &mut Rng) -> Result<Self> {
        if cfg.factors == 0 {
            return Err(Error::Config("FPMC needs at least one factor".into()));
        }
        let drivers: Vec<String> = train.keys().cloned().collect();
        let mut samples: Vec<(usize, usize, usize)> = Vec::new();
        for (u, seq) in train.values().enumerate() {
            for w in seq.windows(2) {
                samples.push((u, w[0], w[1]));
            }
        }
        if samples.is_empty() {
            return Err(Error::Usage("FPMC needs at least one observed transition".into()));
        }
        if m < 2 {
            return Err(Error::Usage("FPMC needs at least two stations".into()));
        }
        let f = cfg.factors;
        let mut init = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-cfg.init_scale..cfg.init_scale)).collect() };
        let mut model = FpmcModel {
            factors: f,
            num_stations: m,
            vu: init(drivers.len() * f),
            vi: init(m * f),
            vil: init(m * f),
            vli: init(m * f),
            drivers,
        };
        let (lr, reg) = (cfg.learning_rate, cfg.regularization);
        for _ in 0..cfg.epochs {
            samples.shuffle(rng);
            for &(u, l, i) in &samples {
                for _ in 0..cfg.negatives {
                    let mut j = rng.gen_range(0..m as u64 - 1) as usize;
                    if j >= i {
                        j += 1;
                    }
                    let x = model.score(Some(u), Some(l), i) - model.score(Some(u), Some(l), j);
                    let g = sigmoid(-x);
                    for k in 0..f {
                        let (vu, vi_i, vi_j) = (model.vu[u * f + k], model.vi[i * f + k], model.vi[j * f + k]);
                        let (vil_i, vil_j, vli_l) = (model.vil[i * f + k], model.vil[j * f + k], model.vli[l * f + k]);
                        model.vu[u * f + k] += lr * (g * (vi_i - vi_j) - reg * vu);
                        model.vi[i * f + k] += lr * (g * vu - reg * vi_i);
                        model.vi[j * f + k] += lr * (-g * vu - reg * vi_j);
                        model.vil[i * f + k] += lr * (g * vli_l - reg * vil_i);
                        model.vil[j * f + k] += lr * (-g * vli_l - reg * vil_j);
                        model.vli[l * f + k] += lr * (g * (vil_i - vil_j) - reg * vli_l);
                    }
                }
            }
        }
        if ![&model.vu, &model.vi, &model.vil, &model.vli].iter().all(|v| v.iter().all(|x| x.is_finite())) {
            return Err(Error::Numeric {
                message: "FPMC factors diverged".into(),
                dump: format!("learning rate {lr}, regularization {reg}"),
            });
        }
        Ok(model)
    }
}

pub struct FpmcRecommender<'a> {
    pub model: &'a FpmcModel,
    pub stations: &'a StationTable,
}

impl Recommender for FpmcRecommender<'_> {
    fn name(&self) -> String {
        "fpmc".into()
    }

    fn scores(&self, driver_id: &str, prefix: &[ChargingEvent]) -> Result<Vec<f64>> {
        Ok(self.model.scores(driver_id, last_station(prefix, self.stations)))
    }
}

/// Visit frequency: the driver's own counts first, global counts break ties.
#[derive(Debug, Clone, PartialEq)]
pub struct PopularityModel {
    pub global: Vec<f64>,
    pub drivers: BTreeMap<String, Vec<f64>>,
}

impl PopularityModel {
    pub fn fit(train: &Sequences, m: usize) -> Self {
        let drivers: BTreeMap<String, Vec<f64>> = train
            .par_iter()
            .map(|(id, seq)| {
                let mut c = vec![0.0; m];
                for &s in seq {
                    c[s] += 1.0;
                }
                (id.clone(), c)
            })
            .collect();
        let mut global = vec![0.0; m];
        for c in drivers.values() {
            for (g, v) in global.iter_mut().zip(c) {
                *g += v;
            }
        }
        PopularityModel { global, drivers }
    }

    pub fn scores(&self, driver_id: &str) -> Vec<f64> {
        let total: f64 = self.global.iter().sum::<f64>() + 1.0;
        let own = self.drivers.get(driver_id);
        (0..self.global.len())
            .map(|s| own.map_or(0.0, |c| c[s]) + self.global[s] / total)
            .collect()
    }
}

pub struct PopularityRecommender<'a> {
    pub model: &'a PopularityModel,
}

impl Recommender for PopularityRecommender<'_> {
    fn name(&self) -> String {
        "popularity".into()
    }

    fn scores(&self, driver_id: &str, _prefix: &[ChargingEvent]) -> Result<Vec<f64>> {
        Ok(self.model.scores(driver_id))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::SeedTree;

    #[test]
    fn worked_markov_row() {
        let mut train = Sequences::new();
        train.insert("d".into(), vec![0, 1, 0, 1, 0, 1, 0, 2]);
        let mc = MarkovModel::fit(&train, 3, 1.0).unwrap();
        let row = mc.row("d", Some(0));
        let want = [1.0 / 7.0, 4.0 / 7.0, 2.0 / 7.0];
        for (a, b) in row.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn markov_edge_cases() {
        let empty = MarkovModel::fit(&Sequences::new(), 2, 1.0).unwrap();
        assert_eq!(empty.row("x", Some(0)), vec![0.5, 0.5]);
        let mut t = Sequences::new();
        t.insert("d".into(), vec![0, 0]);
        let mc = MarkovModel::fit(&t, 3, 0.0).unwrap();
        assert_eq!(mc.row("d", Some(0)), vec![1.0, 0.0, 0.0]);
        assert_eq!(mc.row("d", None), vec![1.0 / 3.0; 3]);
        assert_eq!(mc.predict("d", Some(2), 1), vec![0]);
    }

    #[test]
    fn fpmc_pinned_factors() {
        let m = FpmcModel::from_factors(1, vec!["u".into()], vec![2.0], vec![3.0, -1.0], vec![0.5, 4.0], vec![1.5, -2.0]).unwrap();
        assert_eq!(m.score(Some(0), Some(0), 0), 2.0 * 3.0 + 0.5 * 1.5);
        assert_eq!(m.score(Some(0), Some(1), 1), 2.0 * -1.0 + 4.0 * -2.0);
        assert_eq!(m.predict("u", Some(0), 2), vec![0, 1]);
        assert_eq!(m.scores("stranger", Some(0)), vec![0.75, 6.0]);
    }

    #[test]
    fn fpmc_learns_a_cycle_deterministically() {
        let mut train = Sequences::new();
        for d in 0..4 {
            train.insert(format!("d{d}"), (0..20).map(|i| (i + d) % 2).collect());
        }
        let cfg = FpmcConfig { epochs: 60, ..Default::default() };
        let a = FpmcModel::fit(&train, 3, &cfg, &mut SeedTree::new(3).rng("neg")).unwrap();
        let b = FpmcModel::fit(&train, 3, &cfg, &mut SeedTree::new(3).rng("neg")).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.predict("d0", Some(0), 1), vec![1]);
        assert_eq!(a.predict("d1", Some(1), 1), vec![0]);
        assert!(FpmcModel::fit(&Sequences::new(), 3, &cfg, &mut SeedTree::new(3).rng("neg")).is_err());
    }
}
