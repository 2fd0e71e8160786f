use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use samattr_cli::config::ExperimentConfig;
use samattr_cli::error::{CliError, CliResult};
use samattr_cli::experiments::{run_and_emit, Command};

#[derive(Parser)]
#[command(name = "samattr", version, about = "Data attribution for models trained with sharpness-aware minimization")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,

    /// Experiment configuration file (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// if-fast, hif or gif.
    #[arg(long, global = true)]
    estimator: Option<String>,

    /// Extra `key=value` overrides, applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Train with SAM and save the trajectory.
    Train,
    /// Score every training point against the validation split.
    Attribute,
    /// Remove the most valuable points and track test accuracy.
    Valuate,
    /// Flip labels and look for them among the lowest scores.
    DetectNoise,
    /// List helpful and harmful training points for misclassified test points.
    Trace,
    /// Compare edited models against retrained ones.
    Edit,
    /// Compare predicted scores with leave-one-out retraining.
    Calibrate,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Train => Command::Train,
            Cmd::Attribute => Command::Attribute,
            Cmd::Valuate => Command::Valuate,
            Cmd::DetectNoise => Command::DetectNoise,
            Cmd::Trace => Command::Trace,
            Cmd::Edit => Command::Edit,
            Cmd::Calibrate => Command::Calibrate,
        }
    }
}

fn resolve(cli: &Cli) -> CliResult<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    for item in &cli.overrides {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("--set {item:?}: expected KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = cli.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    if let Some(est) = &cli.estimator {
        cfg.set("estimator", est)?;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = resolve(&cli).and_then(|cfg| run_and_emit(cli.command.into(), &cfg));
    match result {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("samattr: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
