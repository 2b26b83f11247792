use std::collections::BTreeMap;

use chrono::{Duration, TimeZone, Utc};
use proptest::prelude::*;

use rac_core::baselines::{MarkovModel, Sequences};
use rac_core::dataset::{
    build_trajectories, parse_events_from, warmup_pool, write_canonical, Adapter, ChargingEvent, SplitSpec,
    WARMUP_FRACTION, WARMUP_MIN_EVENTS,
};
use rac_core::evaluation::{driver_recall_at_k, mean_average_reward, precision_at_k, rank_desc};
use rac_core::features::hour_index;
use rac_core::geospatial::poi::POI_DIM;
use rac_core::geospatial::{haversine, Station, StationTable};
use rac_core::neural::loss::softmax;
use rac_core::reward::compute_reward;
use rac_core::reward::wait::WaitTable;
use rac_core::seed::SeedTree;

fn station_table(m: usize) -> StationTable {
    StationTable::new((0..m).map(|i| Station::new(format!("s{i}"), 56.0 + 0.01 * i as f64, -3.0).unwrap()).collect())
        .unwrap()
}

/// `(driver, station, minute offset, duration in quarter minutes)`.
fn raw_events(drivers: usize, stations: usize, max_len: usize) -> impl Strategy<Value = Vec<(usize, usize, i64, u32)>> {
    prop::collection::vec((0..drivers, 0..stations, 0i64..20_000, 0u32..1_000), 1..max_len)
}

fn materialize(raw: &[(usize, usize, i64, u32)]) -> Vec<ChargingEvent> {
    let t0 = Utc.with_ymd_and_hms(2019, 3, 1, 0, 0, 0).unwrap();
    raw.iter()
        .enumerate()
        .map(|(i, &(d, s, off, q))| {
            ChargingEvent::new(format!("e{i:04}"), format!("d{d}"), format!("s{s}"), t0 + Duration::minutes(off), q as f64 / 4.0, 1.5)
                .unwrap()
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn split_partitions_every_trajectory(n in 3usize..500) {
        let s = SplitSpec::default().sizes(n).unwrap();
        prop_assert_eq!(s.train + s.val + s.test, n);
        prop_assert!(s.val >= 1 && s.test >= 1);
    }

    #[test]
    fn test_events_never_precede_train_events(raw in raw_events(4, 3, 80)) {
        let events = materialize(&raw);
        for traj in build_trajectories(&events).values() {
            let Some(sizes) = traj.split(&SplitSpec::default()) else { continue };
            let last_train = traj.events[sizes.train_range()].iter().map(|e| e.start_time).max();
            let first_test = traj.events[sizes.test_range()].iter().map(|e| e.start_time).min().unwrap();
            if let Some(t) = last_train {
                prop_assert!(t <= first_test);
            }
        }
    }

    #[test]
    fn warmup_pool_size_matches_formula(raw in raw_events(5, 3, 200)) {
        let events = materialize(&raw);
        let trajectories = build_trajectories(&events);
        let expected: usize = trajectories
            .values()
            .filter(|t| t.len() > WARMUP_MIN_EVENTS)
            .map(|t| ((WARMUP_FRACTION * t.len() as f64).floor() as usize).max(1))
            .sum();
        prop_assert_eq!(warmup_pool(&trajectories, "salt").len(), expected);
    }

    #[test]
    fn canonical_csv_round_trips(raw in raw_events(3, 4, 40)) {
        let events = materialize(&raw);
        let mut first = Vec::new();
        write_canonical(&events, &mut first).unwrap();
        let parsed = parse_events_from(first.as_slice(), Adapter::Canonical).unwrap();
        prop_assert!(parsed.rejects.is_empty());
        prop_assert_eq!(&parsed.events, &events);
        let mut second = Vec::new();
        write_canonical(&parsed.events, &mut second).unwrap();
        prop_assert_eq!(first, second);
    }

    #[test]
    fn haversine_is_a_metric(
        a in (-90.0f64..=90.0, -180.0f64..=180.0),
        b in (-90.0f64..=90.0, -180.0f64..=180.0),
        c in (-90.0f64..=90.0, -180.0f64..=180.0),
    ) {
        let ab = haversine(a.0, a.1, b.0, b.1).unwrap();
        let ba = haversine(b.0, b.1, a.0, a.1).unwrap();
        let ac = haversine(a.0, a.1, c.0, c.1).unwrap();
        let cb = haversine(c.0, c.1, b.0, b.1).unwrap();
        prop_assert_eq!(ab, ba);
        prop_assert_eq!(haversine(a.0, a.1, a.0, a.1).unwrap(), 0.0);
        prop_assert!(ab >= 0.0);
        prop_assert!(ab <= ac + cb + 1e-9);
    }

    #[test]
    fn poi_distribution_is_normalized(counts in prop::collection::vec(0u32..50, POI_DIM)) {
        let mut station = Station::new("s", 0.0, 0.0).unwrap();
        station.poi = counts.clone();
        let dist = station.poi_distribution();
        let total: f64 = dist.iter().sum();
        if counts.iter().all(|&c| c == 0) {
            prop_assert!(dist.iter().all(|&p| p == 0.0));
        } else {
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_is_a_distribution(logits in prop::collection::vec(-300.0f64..300.0, 1..12)) {
        let p = softmax(&logits);
        prop_assert!(p.iter().all(|&x| x > 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn reward_decreases_in_wait_and_distance(
        z in 0.0f64..500.0, dz in 1e-3f64..100.0,
        d in 0.0f64..50.0, dd in 1e-3f64..10.0,
        zn in 0.5f64..100.0, dn in 0.1f64..20.0,
        zeta in prop::sample::select(vec![0.8, 1.0]),
    ) {
        let base = compute_reward(z, d, zn, dn, zeta).unwrap();
        prop_assert!(compute_reward(z + dz, d, zn, dn, zeta).unwrap() < base);
        prop_assert!(compute_reward(z, d + dd, zn, dn, zeta).unwrap() < base);
    }

    #[test]
    fn favourite_discount_never_lowers_reward(
        z in 0.0f64..500.0, d in 0.0f64..50.0, zn in 0.5f64..100.0, dn in 0.1f64..20.0,
    ) {
        let fav = compute_reward(z, d, zn, dn, 0.8).unwrap();
        let other = compute_reward(z, d, zn, dn, 1.0).unwrap();
        prop_assert!(fav >= other);
        prop_assert_eq!(fav == other, d == 0.0);
    }

    #[test]
    fn wait_term_is_scale_free(z in 0.0f64..500.0, zn in 0.5f64..100.0) {
        let a = compute_reward(z, 0.0, zn, 1.0, 1.0).unwrap();
        let b = compute_reward(2.0 * z, 0.0, 2.0 * zn, 1.0, 1.0).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn wait_series_is_causal(raw in raw_events(2, 3, 60), cut in 0i64..20_000) {
        let events = materialize(&raw);
        let stations = station_table(3);
        let full = WaitTable::build(&events, &stations, None).unwrap();
        let range = Some((full.start_hour(), full.end_hour()));
        let t0 = Utc.with_ymd_and_hms(2019, 3, 1, 0, 0, 0).unwrap();
        let h = hour_index(&(t0 + Duration::minutes(cut)));
        let kept: Vec<_> = events.iter().filter(|e| hour_index(&e.start_time) <= h).cloned().collect();
        let truncated = WaitTable::build(&kept, &stations, range).unwrap();
        for s in 0..3 {
            for hour in full.start_hour()..=h.min(full.end_hour() - 1) {
                prop_assert_eq!(full.value(s, hour), truncated.value(s, hour));
            }
        }
    }

    #[test]
    fn markov_rows_are_distributions(
        seqs in prop::collection::vec(prop::collection::vec(0usize..5, 0..25), 1..5),
        smoothing in prop::sample::select(vec![0.0, 0.5, 1.0]),
    ) {
        let train: Sequences = seqs.into_iter().enumerate().map(|(i, s)| (format!("d{i}"), s)).collect();
        let model = MarkovModel::fit(&train, 5, smoothing).unwrap();
        let drivers: Vec<String> = train.keys().cloned().chain(["unseen".to_string()]).collect();
        for d in &drivers {
            for last in std::iter::once(None).chain((0..5).map(Some)) {
                let row = model.row(d, last);
                prop_assert!(row.iter().all(|&p| p >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ranking_ignores_a_constant_shift(scores in prop::collection::vec(-20i32..20, 1..10), c in -100i32..100) {
        let base: Vec<f64> = scores.iter().map(|&s| s as f64).collect();
        let shifted: Vec<f64> = scores.iter().map(|&s| (s + c) as f64).collect();
        prop_assert_eq!(rank_desc(&base), rank_desc(&shifted));
    }

    #[test]
    fn cutoff_metrics_grow_with_k(
        cases in prop::collection::vec((prop::collection::vec(-5i32..5, 6), 0usize..6), 1..50),
    ) {
        let rankings: Vec<Vec<usize>> = cases.iter().map(|(s, _)| rank_desc(&s.iter().map(|&x| x as f64).collect::<Vec<_>>())).collect();
        let truths: Vec<usize> = cases.iter().map(|(_, t)| *t).collect();
        let mut prev = (0.0, 0.0);
        for k in 1..=6 {
            let p = precision_at_k(&rankings, &truths, k).unwrap();
            let r = driver_recall_at_k(&rankings, &truths, k).unwrap().unwrap();
            prop_assert!(p >= prev.0 && r >= prev.1);
            prop_assert!((0.0..=1.0).contains(&p) && (0.0..=1.0).contains(&r));
            prev = (p, r);
        }
        prop_assert_eq!(prev, (1.0, 1.0));
    }

    #[test]
    fn mar_ignores_event_order(rewards in prop::collection::vec(-400i32..0, 1..60), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let values: Vec<f64> = rewards.iter().map(|&r| r as f64 / 8.0).collect();
        let mut shuffled = values.clone();
        shuffled.shuffle(&mut SeedTree::new(seed).rng("shuffle"));
        prop_assert_eq!(mean_average_reward(&values), mean_average_reward(&shuffled));
    }

    #[test]
    fn named_seeds_do_not_depend_on_other_consumers(root in any::<u64>(), names in prop::collection::vec("[a-z]{1,8}", 0..6)) {
        let tree = SeedTree::new(root);
        let before = tree.seed("buffer");
        for n in &names {
            let _ = tree.rng(n);
        }
        prop_assert_eq!(before, SeedTree::new(root).seed("buffer"));
        prop_assert_eq!(tree.seed("buffer"), before);
    }
}

#[test]
fn markov_fallback_rows_cover_unknown_drivers() {
    let mut train: Sequences = BTreeMap::new();
    train.insert("a".into(), vec![0, 1, 0, 1]);
    let model = MarkovModel::fit(&train, 3, 0.0).unwrap();
    let row = model.row("nobody", Some(2));
    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}
