use chrono::{Duration, TimeZone, Utc};

use rac_core::dataset::ChargingEvent;
use rac_core::geospatial::{Station, StationTable};
use rac_core::reward::net::{train_reward_net, RewardNetConfig};
use rac_core::reward::wait::WaitTable;
use rac_core::seed::SeedTree;

/// Occupancy ramps from 5 to 55 minutes over each day, then drops back.
fn sawtooth_table(days: i64) -> (WaitTable, StationTable) {
    let stations = StationTable::new(vec![Station::new("cs0", 56.46, -2.97).unwrap()]).unwrap();
    let t0 = Utc.with_ymd_and_hms(2018, 6, 4, 0, 0, 0).unwrap();
    let events: Vec<_> = (0..days * 24)
        .map(|h| {
            let minutes = 5.0 + 50.0 * (h % 24) as f64 / 23.0;
            ChargingEvent::new(format!("e{h:05}"), "d", "cs0", t0 + Duration::hours(h), minutes.round(), 2.0).unwrap()
        })
        .collect();
    (WaitTable::build(&events, &stations, None).unwrap(), stations)
}

#[test]
fn sawtooth_forecast_beats_the_mean() {
    let (table, stations) = sawtooth_table(40);
    let cfg = RewardNetConfig {
        hidden: 16,
        layers: 1,
        window: 24,
        epochs: 30,
        steps_per_epoch: 60,
        batch_size: 16,
        learning_rate: 0.05,
        ..Default::default()
    };
    let (_, report) = train_reward_net(&table, &stations, &cfg, &mut SeedTree::new(11).rng("reward")).unwrap();
    assert!(report.val_samples > 0);
    assert!(
        report.val_mse < report.val_variance,
        "held-out mse {} vs variance {}",
        report.val_mse,
        report.val_variance
    );
}

#[test]
fn forecaster_training_is_reproducible() {
    let (table, stations) = sawtooth_table(6);
    let cfg = RewardNetConfig { hidden: 4, layers: 1, window: 6, epochs: 2, steps_per_epoch: 5, batch_size: 4, ..Default::default() };
    let a = train_reward_net(&table, &stations, &cfg, &mut SeedTree::new(2).rng("reward")).unwrap();
    let b = train_reward_net(&table, &stations, &cfg, &mut SeedTree::new(2).rng("reward")).unwrap();
    assert_eq!(a.1, b.1);
}
