//! `nav-cli`: dataset generation, training, evaluation, closed-loop runs,
//! Grad-CAM, dataset statistics, the simulator gateway and gradient checks.
//!
//! Machine-readable output is one JSON object per line on stdout, each
//! tagged with a `kind`. The first line of every run is the resolved
//! configuration. Logs go to stderr.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::Value;
use thiserror::Error;

use nav_core::collect::EnvChoice;
use nav_core::nets::{Arch, Branch};

mod commands;
mod settings;

pub use settings::Settings;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    World(#[from] nav_core::world::WorldError),
    #[error(transparent)]
    Collect(#[from] nav_core::collect::CollectError),
    #[error(transparent)]
    Dataset(#[from] nav_core::dataset::DatasetError),
    #[error(transparent)]
    Nets(#[from] nav_core::nets::NetsError),
    #[error(transparent)]
    Train(#[from] nav_core::train::TrainError),
    #[error(transparent)]
    Policy(#[from] nav_core::policy::PolicyError),
    #[error(transparent)]
    Gateway(#[from] nav_gateway::GatewayError),
    #[error(transparent)]
    Tensor(#[from] nav_tensor::TensorError),
    #[error("gradient check failed: max relative error {max:.3e} above {tol:.0e}")]
    GradCheck { max: f64, tol: f64 },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            _ => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "nav-cli", version, about = "Multimodal steering: data, training, evaluation and simulation")]
pub struct Cli {
    /// Seed for every random choice of the run.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Flat JSON object of settings. Flags take precedence over it.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a labeled dataset with the scripted driver.
    GenData(GenDataArgs),
    /// Train a network on the training split of a dataset.
    Train(TrainArgs),
    /// Report steering RMSE per environment.
    Eval(EvalArgs),
    /// Drive seeded closed-loop episodes with a trained network.
    Run(RunArgs),
    /// Grad-CAM map of one record.
    Gradcam(GradcamArgs),
    /// Record counts, DR share and steering histogram of a dataset.
    Stats(StatsArgs),
    /// Host the simulator for teleoperation and autopilot clients.
    Serve(ServeArgs),
    /// Compare taped gradients with finite differences.
    CheckGrad(CheckGradArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Run(_) => "run",
            Command::Gradcam(_) => "gradcam",
            Command::Stats(_) => "stats",
            Command::Serve(_) => "serve",
            Command::CheckGrad(_) => "check-grad",
        }
    }

    fn flags(&self) -> serde_json::Result<Value> {
        match self {
            Command::GenData(a) => serde_json::to_value(a),
            Command::Train(a) => serde_json::to_value(a),
            Command::Eval(a) => serde_json::to_value(a),
            Command::Run(a) => serde_json::to_value(a),
            Command::Gradcam(a) => serde_json::to_value(a),
            Command::Stats(a) => serde_json::to_value(a),
            Command::Serve(a) => serde_json::to_value(a),
            Command::CheckGrad(a) => serde_json::to_value(a),
        }
    }
}

// Flag structs serialize only what was given on the command line; that
// map is layered over the config file.

#[derive(Debug, Default, Args, Serialize)]
pub struct NetArgs {
    /// Points per cloud fed to the set encoder.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub points: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct GenDataArgs {
    /// normal_city, collapsed_house, collapsed_city, cave or mixed.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub env: Option<EnvChoice>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub records: Option<usize>,
    /// Share of records captured in appearance-randomized worlds.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dr_fraction: Option<f64>,
    /// Dataset file to write.
    #[arg(long, value_name = "FILE")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long, value_name = "FILE")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    /// rgbnet or nmfnet.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub arch: Option<Arch>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub momentum: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch: Option<usize>,
    /// Training share of the seeded split.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split: Option<f64>,
    #[command(flatten)]
    #[serde(flatten)]
    pub net: NetArgs,
    /// Weights file to write.
    #[arg(long, value_name = "FILE")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long, value_name = "FILE")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    /// Training share of the split; the rest is evaluated.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split: Option<f64>,
    /// Evaluate every record instead of the test split.
    #[arg(long)]
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pub all: bool,
    #[command(flatten)]
    #[serde(flatten)]
    pub net: NetArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct RunArgs {
    #[arg(long, value_name = "FILE")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<PathBuf>,
    /// One environment, or mixed for all four.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub env: Option<EnvChoice>,
    /// Episodes per environment, seeded consecutively from --seed.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub episodes: Option<usize>,
    /// Step limit per episode.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[command(flatten)]
    #[serde(flatten)]
    pub net: NetArgs,
    /// Write every trajectory point as JSON lines.
    #[arg(long, value_name = "FILE")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct GradcamArgs {
    #[arg(long, value_name = "FILE")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    /// Record number in the dataset.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub index: Option<usize>,
    /// rgb or dmap.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub branch: Option<Branch>,
    #[command(flatten)]
    #[serde(flatten)]
    pub net: NetArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct StatsArgs {
    #[arg(long, value_name = "FILE")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct ServeArgs {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bind: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub env: Option<EnvChoice>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tick_hz: Option<f64>,
    /// Exit after this many ticks.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_ticks: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    /// Dataset file that recordings are appended to.
    #[arg(long, value_name = "FILE")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub record: Option<PathBuf>,
    /// Weights loaded at startup.
    #[arg(long, value_name = "FILE")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub net: NetArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct CheckGradArgs {}

/// Writes one tagged JSON line.
pub(crate) fn emit<T: Serialize>(out: &mut dyn Write, kind: &str, value: &T) -> Result<(), CliError> {
    let mut v = serde_json::to_value(value)?;
    match &mut v {
        Value::Object(map) => {
            map.insert("kind".into(), Value::from(kind));
        }
        other => {
            v = serde_json::json!({"kind": kind, "value": other.take()});
        }
    }
    serde_json::to_writer(&mut *out, &v)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

pub(crate) fn log(msg: impl std::fmt::Display) {
    eprintln!("[nav-cli] {msg}");
}

/// Runs an already-parsed invocation.
pub fn execute(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    let mut flags = cli.command.flags()?;
    if let (Some(seed), Value::Object(map)) = (cli.seed, &mut flags) {
        map.insert("seed".into(), seed.into());
    }
    let mut settings = Settings::resolve(cli.config.as_deref(), flags)?;
    let default_env = match cli.command {
        Command::Serve(_) => Some(EnvChoice::One(nav_core::world::EnvType::NormalCity)),
        Command::GenData(_) | Command::Run(_) => Some(EnvChoice::Mixed),
        _ => None,
    };
    settings.env = settings.env.or(default_env);
    emit(out, "config", &serde_json::json!({"command": cli.command.name(), "settings": settings}))?;
    match cli.command {
        Command::GenData(_) => commands::gen_data(&settings, out),
        Command::Train(_) => commands::train(&settings, out),
        Command::Eval(_) => commands::eval(&settings, out),
        Command::Run(_) => commands::run(&settings, out),
        Command::Gradcam(_) => commands::gradcam(&settings, out),
        Command::Stats(_) => commands::stats(&settings, out),
        Command::Serve(_) => commands::serve(&settings),
        Command::CheckGrad(_) => commands::check_grad(out),
    }
}

/// Parses `args` (program name first) and runs. Returns the exit status:
/// 0 on success, 1 on usage errors, 2 on runtime failures.
pub fn main_with<I, T>(args: I, out: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if let CliError::Usage(_) = e {
                eprintln!("\nFor more information, try '--help'.");
            }
            e.exit_code()
        }
    }
}
