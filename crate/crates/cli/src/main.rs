mod config;

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use autodml::{load_csv, monte_carlo, run_pipeline, EstimateReport};
use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::config::{Command, RunConfig};

#[derive(Parser)]
#[command(name = "autodml", version, about = "Debiased estimation of smooth functionals of M-estimands")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Estimate one functional on a CSV dataset and write a JSON report.
    Estimate {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `data` in the config.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Overrides `out`; stdout when neither is set.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a Monte Carlo study and write the metrics CSV.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads (default: all cores). Output does not depend on it.
        #[arg(long)]
        workers: Option<usize>,
    },
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Estimation(String),
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Data(_) => "data",
            CliError::Estimation(_) => "estimation",
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Estimation(_) => 4,
        }
    }
}

impl From<autodml::Error> for CliError {
    fn from(e: autodml::Error) -> Self {
        let msg = e.to_string();
        match e.root() {
            _ if e.is_data_error() => CliError::Data(msg),
            autodml::Error::InvalidConfig(_)
            | autodml::Error::UnsupportedFamily(_)
            | autodml::Error::InvalidFoldCount { .. } => CliError::Config(msg),
            _ => CliError::Estimation(msg),
        }
    }
}

#[derive(Serialize)]
struct ErrorDocument<'a> {
    error: &'a str,
    exit_code: u8,
    message: String,
}

#[derive(Serialize)]
struct ReportDocument<'a> {
    config: &'a RunConfig,
    report: &'a EstimateReport,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let doc = ErrorDocument {
                error: e.kind(),
                exit_code: e.exit_code(),
                message: e.to_string(),
            };
            eprintln!("{}", serde_json::to_string(&doc).expect("error document serializes"));
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cmd: Cmd) -> Result<(), CliError> {
    match cmd {
        Cmd::Estimate { config, data, out } => {
            let mut cfg = RunConfig::load(&config)?;
            cfg.data = data.or(cfg.data);
            cfg.out = out.or(cfg.out);
            cfg.validate_for(Command::Estimate)?;
            estimate(&cfg)
        }
        Cmd::Simulate { config, out, workers } => {
            let mut cfg = RunConfig::load(&config)?;
            cfg.out = out.or(cfg.out);
            cfg.workers = workers.or(cfg.workers);
            cfg.validate_for(Command::Simulate)?;
            match cfg.workers {
                Some(w) => rayon::ThreadPoolBuilder::new()
                    .num_threads(w)
                    .build()
                    .map_err(|e| CliError::Config(format!("thread pool: {e}")))?
                    .install(|| simulate(&cfg)),
                None => simulate(&cfg),
            }
        }
    }
}

fn estimate(cfg: &RunConfig) -> Result<(), CliError> {
    let path = cfg.data.as_ref().expect("validated");
    let data = load_csv(path, cfg.problem.roles())?;
    let report = run_pipeline(&data, &cfg.problem, cfg.estimators()?[0])?;
    let doc = ReportDocument { config: cfg, report: &report };
    let mut text = serde_json::to_string_pretty(&doc).map_err(|e| CliError::Estimation(e.to_string()))?;
    text.push('\n');
    write_output(cfg.out.as_deref(), text.as_bytes())
}

fn simulate(cfg: &RunConfig) -> Result<(), CliError> {
    let mc = cfg.monte_carlo()?;
    let table = monte_carlo(&mc)?;
    let mut buf = Vec::new();
    table.write_csv(&mut buf, &cfg.replay_toml())?;
    write_output(cfg.out.as_deref(), &buf)
}

fn write_output(path: Option<&Path>, bytes: &[u8]) -> Result<(), CliError> {
    let io_err = |e: io::Error| CliError::Data(format!("cannot write output: {e}"));
    match path {
        Some(p) => {
            let mut w = BufWriter::new(File::create(p).map_err(io_err)?);
            w.write_all(bytes).map_err(io_err)?;
            w.flush().map_err(io_err)
        }
        None => io::stdout().write_all(bytes).map_err(io_err),
    }
}
