use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chrono::{DateTime, Utc};
use serde::Serialize;
use serde_json::{json, Value};

use rac_core::agent::RacRecommender;
use rac_core::checkpoint::Checkpoint;
use rac_core::config::Config;
use rac_core::dataset::{build_trajectories, parse_events, write_canonical, write_rejects};
use rac_core::evaluation::{case_study, epsilon_sweep, write_case_csv, write_sweep_csv, EvalReport, RunEcho};
use rac_core::gradient_suite;
use rac_core::persist::{self, Baseline};
use rac_core::pipeline::{self, Dataset, Model};
use rac_core::reward::WaitTable;
use rac_core::{Error, Result};

use crate::Command;

const RUN_SECTION: &str = "run";

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn flush(mut w: BufWriter<File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

/// Effective configuration next to a CSV or JSON-lines artifact, as `<file>.config.toml`.
fn write_config_sidecar(artifact: &Path, cfg: &Config) -> Result<()> {
    let mut name = artifact.as_os_str().to_owned();
    name.push(".config.toml");
    let path = PathBuf::from(name);
    let text = toml::to_string(&cfg.to_table()?).map_err(|e| Error::Config(format!("cannot render configuration: {e}")))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn with_config<T: Serialize>(value: &T, cfg: &Config) -> Result<Value> {
    let mut v = serde_json::to_value(value).map_err(|e| Error::Format(e.to_string()))?;
    if let Value::Object(map) = &mut v {
        map.insert("config".into(), serde_json::to_value(cfg).map_err(|e| Error::Format(e.to_string()))?);
    }
    Ok(v)
}

fn emit_json(value: &Value, path: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    match path {
        Some(p) => {
            let mut w = create(p)?;
            writeln!(w, "{text}").map_err(|e| Error::io(p, e))?;
            flush(w, p)
        }
        None => match writeln!(std::io::stdout().lock(), "{text}") {
            Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::io("<stdout>", e)),
            _ => Ok(()),
        },
    }
}

fn save_checkpoint(mut ck: Checkpoint, cfg: &Config, path: &Path) -> Result<()> {
    ck.set_section(RUN_SECTION, &cfg.to_table()?)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    ck.save(path)
}

fn load_model(path: &Path, ds: &Dataset) -> Result<Model> {
    let ck = Checkpoint::load(path)?;
    persist::check_stations(&ck, &ds.stations)?;
    Model::load(&ck)
}

fn ingest(cfg: &Config, out: &Path, rejects: Option<&Path>) -> Result<()> {
    let input = cfg.require(&cfg.data.raw, "raw")?;
    let parsed = parse_events(input, cfg.data.adapter)?;
    let w = create(out)?;
    write_canonical(&parsed.events, w)?;
    write_config_sidecar(out, cfg)?;
    if let Some(p) = rejects {
        write_rejects(&parsed.rejects, create(p)?)?;
    }
    if !parsed.rejects.is_empty() {
        log::warn!("{} rows rejected", parsed.rejects.len());
    }
    emit_json(
        &json!({
            "events": parsed.events.len(),
            "drivers": build_trajectories(&parsed.events).len(),
            "rejects": parsed.rejects.len(),
            "adapter": cfg.data.adapter,
        }),
        None,
    )
}

fn features(cfg: &Config, out_dir: &Path) -> Result<()> {
    let ds = Dataset::load(cfg)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let stations_path = out_dir.join("stations.csv");
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(create(&stations_path)?);
    w.write_record(["station_id", "latitude", "longitude", "mean_wait", "mean_distance", "poi_total"])
        .map_err(|e| Error::Format(e.to_string()))?;
    for s in ds.stations.stations() {
        let poi_total: u64 = s.poi.iter().map(|&c| c as u64).sum();
        w.write_record([
            s.station_id.clone(),
            s.latitude.to_string(),
            s.longitude.to_string(),
            s.mean_wait.to_string(),
            s.mean_distance.to_string(),
            poi_total.to_string(),
        ])
        .map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(&stations_path, e))?;
    write_config_sidecar(&stations_path, cfg)?;

    let waits_path = out_dir.join("wait_series.csv");
    WaitTable::build(&ds.events, &ds.stations, None)?.write_csv(&ds.stations, create(&waits_path)?)?;
    write_config_sidecar(&waits_path, cfg)?;

    let summary = json!({
        "events": ds.events.len(),
        "train_events": ds.train_events.len(),
        "drivers": ds.trajectories.len(),
        "stations": ds.stations.len(),
        "observation_dim": ds.features.observation_dim(),
        "feature_space": ds.features,
    });
    emit_json(&with_config(&summary, cfg)?, Some(&out_dir.join("features.json")))
}

fn train_reward(cfg: &Config, out: &Path, report: Option<&Path>) -> Result<()> {
    let ds = Dataset::load(cfg)?;
    let (net, rep) = pipeline::train_forecaster(&ds, cfg)?;
    let ck = persist::reward_net_to_checkpoint(&net, cfg.reward_net.hidden, cfg.reward_net.layers, &ds.stations)?;
    save_checkpoint(ck, cfg, out)?;
    emit_json(&with_config(&rep, cfg)?, report)
}

fn train_rac(cfg: &Config, out: &Path, log_path: Option<&Path>) -> Result<()> {
    let ds = Dataset::load(cfg)?;
    let env = pipeline::reward_env(&ds, cfg)?;
    let (model, log) = pipeline::train_rac(&ds, &env, cfg)?;
    save_checkpoint(persist::rac_to_checkpoint(&model)?, cfg, out)?;

    let log_path = log_path.map(Path::to_path_buf).unwrap_or_else(|| out.with_extension("jsonl"));
    let mut w = create(&log_path)?;
    let tagged = |entry: &rac_core::agent::EpochLog, phase: &str, driver: Option<&str>| -> Result<String> {
        let mut v = serde_json::to_value(entry).map_err(|e| Error::Format(e.to_string()))?;
        if let Value::Object(map) = &mut v {
            map.insert("phase".into(), json!(phase));
            if let Some(d) = driver {
                map.insert("driver".into(), json!(d));
            }
        }
        Ok(v.to_string())
    };
    for entry in &log.warmup {
        writeln!(w, "{}", tagged(entry, "warmup", None)?).map_err(|e| Error::io(&log_path, e))?;
    }
    for (driver, entries) in &log.drivers {
        for entry in entries {
            writeln!(w, "{}", tagged(entry, "finetune", Some(driver))?).map_err(|e| Error::io(&log_path, e))?;
        }
    }
    flush(w, &log_path)?;
    write_config_sidecar(&log_path, cfg)?;
    emit_json(
        &json!({
            "checkpoint": out,
            "log": log_path,
            "drivers": model.drivers.len(),
            "warmup": model.shared.is_some(),
            "epsilon": model.config.epsilon,
        }),
        None,
    )
}

fn train_baseline(cfg: &Config, out: &Path) -> Result<()> {
    let ds = Dataset::load(cfg)?;
    let ck = match pipeline::fit_baseline(cfg.baseline.kind, &ds, cfg)? {
        Baseline::Markov(m) => persist::markov_to_checkpoint(&m, &ds.stations)?,
        Baseline::Fpmc(m) => persist::fpmc_to_checkpoint(&m, &ds.stations)?,
        Baseline::Popularity(m) => persist::popularity_to_checkpoint(&m, &ds.stations)?,
    };
    let kind = ck.kind.clone();
    save_checkpoint(ck, cfg, out)?;
    emit_json(&json!({ "checkpoint": out, "kind": kind }), None)
}

fn evaluate_checkpoint(cfg: &Config, model_path: &Path, out: Option<&Path>, csv_path: Option<&Path>) -> Result<()> {
    let ds = Dataset::load(cfg)?;
    let model = load_model(model_path, &ds)?;
    let env = pipeline::reward_env(&ds, cfg)?;
    let seed = match &model {
        Model::Rac(m) => m.seed,
        Model::Baseline(_) => cfg.seed,
    };
    let echo = RunEcho { seed, epsilon: model.epsilon() };
    let rec = model.recommender(&ds.stations);
    let report = pipeline::evaluate_model(rec.as_ref(), &ds, &env, cfg.eval.split, &cfg.eval.ks, &echo)?;
    if let Some(p) = csv_path {
        let w = create(p)?;
        report.write_csv(w)?;
        write_config_sidecar(p, cfg)?;
    }
    emit_json(&with_config(&report, cfg)?, out)
}

/// Trains and evaluates one RAC model per grid value.
fn reports_over_grid(cfg: &Config, ks: &[usize]) -> Result<(Dataset, Vec<(f64, EvalReport)>)> {
    let ds = Dataset::load(cfg)?;
    let env = pipeline::reward_env(&ds, cfg)?;
    let mut reports = Vec::new();
    for &eps in &cfg.eval.grid {
        let mut c = cfg.clone();
        c.rac.epsilon = eps;
        log::info!("training with epsilon {eps}");
        let (model, _) = pipeline::train_rac(&ds, &env, &c)?;
        let rec = RacRecommender { model: &model, stations: &ds.stations, label: "rac".into() };
        let echo = RunEcho { seed: c.seed, epsilon: Some(eps) };
        reports.push((eps, pipeline::evaluate_model(&rec, &ds, &env, c.eval.split, ks, &echo)?));
    }
    Ok((ds, reports))
}

fn sweep(cfg: &Config, out: &Path) -> Result<()> {
    let (_, reports) = reports_over_grid(cfg, &[1])?;
    let mut iter = reports.into_iter();
    let rows = epsilon_sweep(&cfg.eval.grid, |_| Ok(iter.next().expect("one report per grid value").1))?;
    write_sweep_csv(&rows, create(out)?)?;
    write_config_sidecar(out, cfg)?;
    emit_json(&json!({ "output": out, "rows": rows }), None)
}

fn case(cfg: &Config, out: &Path) -> Result<()> {
    if cfg.eval.drivers.is_empty() {
        return Err(Error::Usage("case-study needs --drivers or eval.drivers".into()));
    }
    let (ds, reports) = reports_over_grid(cfg, &[1])?;
    for d in &cfg.eval.drivers {
        if !ds.trajectories.contains_key(d) {
            return Err(Error::Lookup { kind: "driver", id: d.clone() });
        }
    }
    let rows = case_study(&cfg.eval.drivers, &reports)?;
    write_case_csv(&rows, create(out)?)?;
    write_config_sidecar(out, cfg)?;
    emit_json(&json!({ "output": out, "rows": rows.len() }), None)
}

fn recommend(cfg: &Config, model_path: &Path, driver: &str, at: Option<&str>, k: Option<usize>) -> Result<()> {
    let when = at
        .map(|s| {
            DateTime::parse_from_rfc3339(s)
                .map(|t| t.with_timezone(&Utc))
                .map_err(|e| Error::Usage(format!("--at '{s}' is not an RFC 3339 timestamp: {e}")))
        })
        .transpose()?;
    let ds = Dataset::load(cfg)?;
    let model = load_model(model_path, &ds)?;
    let env = pipeline::reward_env(&ds, cfg)?;
    let k = k.unwrap_or_else(|| ds.stations.len().min(5));
    let rec = pipeline::recommend_for(&model, &ds, &env, driver, when, k)?;
    emit_json(&serde_json::to_value(&rec).map_err(|e| Error::Format(e.to_string()))?, None)
}

fn gradcheck(cfg: &Config, instances: usize) -> Result<ExitCode> {
    if instances == 0 {
        return Err(Error::Usage("--instances must be at least 1".into()));
    }
    let reports = gradient_suite::run(cfg.seed, instances)?;
    let passed = reports.iter().all(|r| r.passed);
    emit_json(
        &json!({ "tolerance": gradient_suite::TOLERANCE, "passed": passed, "paths": reports }),
        None,
    )?;
    Ok(if passed { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

pub fn dispatch(command: &Command, cfg: &Config) -> Result<ExitCode> {
    match command {
        Command::Ingest { out, rejects, .. } => ingest(cfg, out, rejects.as_deref())?,
        Command::Features { out_dir } => features(cfg, out_dir)?,
        Command::TrainReward { out, report } => train_reward(cfg, out, report.as_deref())?,
        Command::TrainRac { out, log, .. } => train_rac(cfg, out, log.as_deref())?,
        Command::TrainBaseline { out, .. } => train_baseline(cfg, out)?,
        Command::Eval { model, out, csv, .. } => evaluate_checkpoint(cfg, model, out.as_deref(), csv.as_deref())?,
        Command::Sweep { out, .. } => sweep(cfg, out)?,
        Command::CaseStudy { out, .. } => case(cfg, out)?,
        Command::Recommend { model, driver, at, k } => recommend(cfg, model, driver, at.as_deref(), *k)?,
        Command::Gradcheck { instances } => return gradcheck(cfg, *instances),
    }
    Ok(ExitCode::SUCCESS)
}
