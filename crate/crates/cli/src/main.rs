use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fragility::driver::{diagnose_state, run_experiment, write_outputs, DriverError, Experiment, ExperimentOutput, RunConfig};
use fragility::model::Params;
use fragility_cli::{load_config, ConfigError};

#[derive(Parser)]
#[command(name = "fragility", version, about = "Floating-point fragility experiments on a toy pre-LN Transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Override a config field, e.g. `earlywarning.z_threshold=2.0`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Maximum number of runs executed in parallel.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Precision/width sweep and predictor regressions.
    Exp1(Common),
    /// Lead-lag analysis of a scripted trajectory.
    Exp2(Common),
    /// Matched control-vs-intervention ε-bump runs.
    Exp3(Common),
    /// One-shot diagnostics of a fresh random model or a saved state.
    Diag {
        #[command(flatten)]
        common: Common,
        /// Saved model parameters (JSON).
        #[arg(long)]
        state: Option<PathBuf>,
    },
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<DriverError> for Failure {
    fn from(e: DriverError) -> Self {
        match e {
            DriverError::Invalid(_) => Failure::Config(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn resolve(experiment: Experiment, common: &Common) -> Result<RunConfig, Failure> {
    let mut overrides = Vec::new();
    if let Ok(seed) = std::env::var("FRAGILITY_SEED") {
        overrides.push(format!("root_seed={seed}"));
    }
    overrides.extend(common.set.iter().cloned());
    overrides.push(format!("experiment={}", experiment.name()));
    let mut config = load_config(&common.config, &overrides)?;
    if let Some(out) = &common.out {
        config.output_dir = out.clone();
    }
    std::fs::create_dir_all(&config.output_dir)
        .map_err(|e| Failure::Config(format!("output_dir {} is not writable: {e}", config.output_dir.display())))?;
    Ok(config)
}

fn execute(cli: Cli) -> Result<(), Failure> {
    let (experiment, common, state) = match &cli.command {
        Command::Exp1(c) => (Experiment::Exp1, c, None),
        Command::Exp2(c) => (Experiment::Exp2, c, None),
        Command::Exp3(c) => (Experiment::Exp3, c, None),
        Command::Diag { common, state } => (Experiment::Diag, common, state.as_ref()),
    };
    let config = resolve(experiment, common)?;
    let output = match state {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Failure::Runtime(format!("cannot read state {}: {e}", path.display())))?;
            let params: Params = serde_json::from_str(&text).map_err(|e| Failure::Runtime(format!("bad state {}: {e}", path.display())))?;
            ExperimentOutput::Diag(diagnose_state(&config, &params)?)
        }
        None => run_experiment(&config, common.jobs)?,
    };
    let written = write_outputs(&config.output_dir, &config, &output)?;
    for p in written {
        log::info!("wrote {}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
