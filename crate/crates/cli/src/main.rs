//! `rac`: command-line pipeline for the charging-station recommender.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand};
use rac_core::config::Config;
use rac_core::Error;

const LONG_VERSION: &str = concat!(
    env!("CARGO_PKG_VERSION"),
    "\ncheckpoint format: 1\nbuild profile: ",
    env!("RAC_BUILD_PROFILE"),
    "\ntarget: ",
    env!("RAC_BUILD_TARGET"),
);

#[derive(Debug, Parser)]
#[command(name = "rac", version, long_version = LONG_VERSION, about = "Charging-station recommendation with a regularized actor-critic")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Override any configuration key, e.g. `--set rac.gamma=0.9` (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,

    /// Root seed (`seed`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Canonical event CSV (`data.events`).
    #[arg(long, global = true, value_name = "FILE")]
    pub events: Option<PathBuf>,

    /// Station CSV (`data.stations`).
    #[arg(long, global = true, value_name = "FILE")]
    pub stations: Option<PathBuf>,

    /// POI count CSV (`data.poi`).
    #[arg(long, global = true, value_name = "FILE")]
    pub poi: Option<PathBuf>,

    /// Trained forecaster checkpoint (`data.reward_model`).
    #[arg(long = "reward-model", global = true, value_name = "FILE")]
    pub reward_model: Option<PathBuf>,

    /// Worker threads for per-driver training and evaluation.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,

    /// More log output on stderr (repeatable); `RUST_LOG` takes precedence.
    #[arg(short, long, global = true, action = ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert a raw city export into canonical event CSV.
    Ingest {
        /// Raw export (`data.raw`).
        #[arg(long, value_name = "FILE")]
        input: Option<PathBuf>,
        /// canonical, dundee or glasgow (`data.adapter`).
        #[arg(long)]
        adapter: Option<String>,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Malformed rows with line number and reason.
        #[arg(long, value_name = "FILE")]
        rejects: Option<PathBuf>,
    },
    /// Write station contexts, the hourly wait series and feature metadata.
    Features {
        #[arg(long, value_name = "DIR")]
        out_dir: PathBuf,
    },
    /// Train the wait-time forecaster.
    TrainReward {
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Training report JSON (stdout when absent).
        #[arg(long, value_name = "FILE")]
        report: Option<PathBuf>,
    },
    /// Train the recommender (warm-up plus per-driver fine-tuning).
    TrainRac {
        /// Regularization weight (`rac.epsilon`).
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// JSON-lines training log (defaults to the checkpoint path with a `.jsonl` extension).
        #[arg(long, value_name = "FILE")]
        log: Option<PathBuf>,
    },
    /// Fit a baseline: mc, fpmc or popularity.
    TrainBaseline {
        /// Baseline kind (`baseline.kind`).
        #[arg(long)]
        kind: Option<String>,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the val or test split.
    Eval {
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
        /// val or test (`eval.split`).
        #[arg(long)]
        split: Option<String>,
        /// Comma-separated cut-offs, e.g. `1,3,5` (`eval.ks`).
        #[arg(long)]
        k: Option<String>,
        /// Report JSON (stdout when absent).
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
        /// Flat per-driver metric CSV.
        #[arg(long, value_name = "FILE")]
        csv: Option<PathBuf>,
    },
    /// Train and evaluate once per ε; writes `eps,p1,r1,mar` rows.
    Sweep {
        /// Comma-separated ε values (`eval.grid`).
        #[arg(long)]
        grid: Option<String>,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Per-driver metrics across ε for selected drivers.
    CaseStudy {
        /// Comma-separated driver ids (`eval.drivers`).
        #[arg(long)]
        drivers: Option<String>,
        #[arg(long)]
        grid: Option<String>,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Top-K stations for one driver as JSON.
    Recommend {
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
        #[arg(long)]
        driver: String,
        /// Decision time (RFC 3339); defaults to the end of the driver's last event.
        #[arg(long)]
        at: Option<String>,
        /// Number of stations listed (default 5, capped at the station count).
        #[arg(long)]
        k: Option<usize>,
    },
    /// Check every registered gradient path against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
}

fn toml_string(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

fn absolute(p: &std::path::Path) -> Result<PathBuf, Error> {
    std::path::absolute(p).map_err(|e| Error::io(p, e))
}

fn split_list(raw: &str) -> Vec<&str> {
    raw.split(',').map(str::trim).filter(|s| !s.is_empty()).collect()
}

fn number_list<T: std::str::FromStr>(raw: &str, flag: &str) -> Result<Vec<T>, Error> {
    split_list(raw)
        .into_iter()
        .map(|v| v.parse().map_err(|_| Error::Usage(format!("--{flag}: '{v}' is not a valid number"))))
        .collect()
}

fn toml_array<T: ToString>(values: &[T]) -> String {
    format!("[{}]", values.iter().map(ToString::to_string).collect::<Vec<_>>().join(", "))
}

/// `--set` values followed by the convenience flags, which therefore win.
fn overrides(cli: &Cli) -> Result<Vec<String>, Error> {
    let mut out = cli.set.clone();
    if let Some(s) = cli.seed {
        out.push(format!("seed={s}"));
    }
    for (key, path) in [
        ("events", &cli.events),
        ("stations", &cli.stations),
        ("poi", &cli.poi),
        ("reward_model", &cli.reward_model),
    ] {
        if let Some(p) = path {
            out.push(format!("data.{key}={}", toml_string(&absolute(p)?.to_string_lossy())));
        }
    }
    match &cli.command {
        Command::Ingest { input, adapter, .. } => {
            if let Some(p) = input {
                out.push(format!("data.raw={}", toml_string(&absolute(p)?.to_string_lossy())));
            }
            if let Some(a) = adapter {
                let a: rac_core::dataset::Adapter = a.parse()?;
                out.push(format!("data.adapter={}", toml_string(&a.to_string())));
            }
        }
        Command::TrainRac { epsilon: Some(e), .. } => out.push(format!("rac.epsilon={e:?}")),
        Command::TrainBaseline { kind: Some(k), .. } => {
            let kind: rac_core::pipeline::BaselineKind = k.parse()?;
            let name = toml::Value::try_from(kind).map_err(|e| Error::Usage(e.to_string()))?;
            out.push(format!("baseline.kind={name}"));
        }
        Command::Eval { split, k, .. } => {
            if let Some(s) = split {
                let seg: rac_core::evaluation::Segment = s.parse()?;
                out.push(format!("eval.split={}", toml::Value::try_from(seg).map_err(|e| Error::Usage(e.to_string()))?));
            }
            if let Some(k) = k {
                out.push(format!("eval.ks={}", toml_array(&number_list::<usize>(k, "k")?)));
            }
        }
        Command::Sweep { grid, .. } | Command::CaseStudy { grid, .. } => {
            if let Some(g) = grid {
                let values: Vec<f64> = number_list(g, "grid")?;
                out.push(format!("eval.grid=[{}]", values.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(", ")));
            }
            if let Command::CaseStudy { drivers: Some(d), .. } = &cli.command {
                let ids: Vec<String> = split_list(d).into_iter().map(toml_string).collect();
                out.push(format!("eval.drivers=[{}]", ids.join(", ")));
            }
        }
        _ => {}
    }
    Ok(out)
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(Error::Usage("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Usage(format!("cannot size the worker pool: {e}")))?;
    }
    let cfg = Config::load(cli.config.as_deref(), &overrides(&cli)?)?;
    commands::dispatch(&cli.command, &cfg)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) => 2,
        Error::Io { .. } => 3,
        Error::Config(_) => 4,
        _ => 1,
    }
}

fn report_error(kind: &str, message: &str) {
    eprintln!("{}", serde_json::json!({ "error": kind, "message": message }));
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            report_error("usage", e.render().to_string().trim());
            return ExitCode::from(2);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .target(env_logger::Target::Stderr)
        .init();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            report_error(e.kind(), &e.to_string());
            ExitCode::from(exit_code(&e))
        }
    }
}
