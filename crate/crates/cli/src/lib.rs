//! The `deferral` command line: fit, update, evaluate, sweep, report, serve
//! and synthetic-data generation over a working directory.
//!
//! Exit codes: 0 when a command succeeds or a refit is promoted, 2 when the
//! parity gate refuses, 1 on any operational error.

pub mod commands;
pub mod config;
pub mod error;
pub mod remote;
pub mod server;
pub mod workspace;

use std::ffi::OsString;
use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use deferral_core::artifacts::ReportFormat;
use deferral_core::bench::{PriceModel, SyntheticSpec};

use crate::commands::{Outcome, EXIT_ERROR, EXIT_OK};
use crate::config::{ConfigLayer, RunConfig};
use crate::error::CliError;
use crate::workspace::{unix_time, LogEntry, Workspace};

#[derive(Debug, Parser)]
#[command(name = "deferral", version, about = "Learn when a cheap surrogate can answer instead of the teacher")]
pub struct Cli {
    /// TOML configuration file. Also read from DEFERRAL_CONFIG.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: ConfigLayer,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Markdown,
    Json,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a routing pipeline on a trace file, replacing the working buffer.
    Fit { traces: PathBuf },
    /// Merge a batch of new traces into the working buffer and refit.
    Update { traces: Option<PathBuf> },
    /// Score the current routing state on a labeled trace file.
    Evaluate {
        traces: PathBuf,
        /// Price of 1,000 teacher calls.
        #[arg(long, default_value_t = 2.60)]
        rate: f64,
        /// Queries per day.
        #[arg(long, default_value_t = 10_000.0)]
        volume: f64,
    },
    /// Replay the daily protocol at several alphas and print a summary table.
    Sweep {
        traces: PathBuf,
        /// Held-out traces for the final evaluation.
        #[arg(long, value_name = "FILE")]
        test: PathBuf,
        #[arg(long, value_delimiter = ',')]
        alphas: Option<Vec<f64>>,
        /// Number of day tags to replay; defaults to all days in the file.
        #[arg(long)]
        days: Option<usize>,
    },
    /// Print a stored report.
    Report {
        #[arg(long)]
        version: Option<u64>,
        #[arg(long, value_enum, default_value_t = Format::Markdown)]
        format: Format,
    },
    /// Serve classification, ingestion and refits over HTTP.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
    /// Write a synthetic world as train.jsonl and test.jsonl.
    Generate {
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value_t = 32)]
        d: usize,
        #[arg(long, default_value_t = 8.0)]
        separation: f64,
        /// Probability that a teacher label is flipped.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 1000)]
        n_per_day: usize,
        #[arg(long, default_value_t = 5)]
        days: u32,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Fit { .. } => "fit",
            Command::Update { .. } => "update",
            Command::Evaluate { .. } => "evaluate",
            Command::Sweep { .. } => "sweep",
            Command::Report { .. } => "report",
            Command::Serve { .. } => "serve",
            Command::Generate { .. } => "generate",
        }
    }

    fn inputs(&self) -> Vec<String> {
        let show = |p: &PathBuf| p.display().to_string();
        match self {
            Command::Fit { traces } | Command::Evaluate { traces, .. } => vec![show(traces)],
            Command::Update { traces } => traces.iter().map(show).collect(),
            Command::Sweep { traces, test, .. } => vec![show(traces), show(test)],
            _ => Vec::new(),
        }
    }
}

/// Resolves the configuration layers: file, then flags, then environment.
pub fn resolve_config(cli: &Cli, env: impl Fn(&str) -> Option<String>) -> Result<RunConfig, CliError> {
    let path = cli.config.clone().or_else(|| env("DEFERRAL_CONFIG").map(PathBuf::from));
    let file = match path {
        Some(p) => ConfigLayer::from_toml_file(&p)?,
        None => ConfigLayer::default(),
    };
    let env_layer = ConfigLayer::from_env(&env)?;
    RunConfig::resolve(file.overlay(cli.overrides.clone()).overlay(env_layer))
}

fn dispatch(cfg: &RunConfig, command: &Command) -> Result<Outcome, CliError> {
    match command {
        Command::Fit { traces } => commands::fit(cfg, traces),
        Command::Update { traces } => commands::update(cfg, traces.as_deref()),
        Command::Evaluate { traces, rate, volume } => commands::evaluate(
            cfg,
            traces,
            PriceModel {
                rate_per_1000: *rate,
                daily_volume: *volume,
            },
        ),
        Command::Sweep { traces, test, alphas, days } => commands::sweep(cfg, traces, test, alphas.as_deref(), *days),
        Command::Report { version, format } => commands::report(
            cfg,
            *version,
            match format {
                Format::Markdown => ReportFormat::HumanReadable,
                Format::Json => ReportFormat::Structured,
            },
        ),
        Command::Serve { addr } => server::serve_blocking(cfg, *addr),
        Command::Generate {
            k,
            d,
            separation,
            noise,
            n_per_day,
            days,
        } => commands::generate(
            cfg,
            SyntheticSpec {
                k: *k,
                d: *d,
                separation: *separation,
                noise: *noise,
                n_per_day: *n_per_day,
                days: *days,
                seed: cfg.seed,
            },
        ),
    }
}

/// Runs one invocation and returns the process exit code.
pub fn run<I, T>(args: I, env: impl Fn(&str) -> Option<String>) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
        }
    };
    let cfg = match resolve_config(&cli, env) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_ERROR;
        }
    };
    let (exit_code, outcome) = match dispatch(&cfg, &cli.command) {
        Ok(o) => (o.exit_code, o.record),
        Err(e) => {
            eprintln!("error: {e}");
            (EXIT_ERROR, serde_json::json!({ "error": e.to_string() }))
        }
    };
    let entry = LogEntry {
        unix_time: unix_time(),
        command: cli.command.name(),
        config: &cfg,
        inputs: cli.command.inputs(),
        outcome,
        exit_code,
    };
    if let Err(e) = Workspace::new(&cfg.out).append_log(&entry) {
        eprintln!("warning: could not write run log: {e}");
    }
    exit_code
}
