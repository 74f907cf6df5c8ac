//! `vcc`: runs the VCC pipeline stages from a configuration file.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vcc_core::config::{GridConfig, PipelineConfig, Stage};
use vcc_core::stages::{write_synthetic, Run};
use vcc_core::{Result, VccError};

#[derive(Debug, Parser)]
#[command(name = "vcc", version, about = "Visual cloze completion for video anomaly detection")]
struct Cli {
    /// Pipeline configuration file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Stage to run with `run` (default: every stage in order).
    #[arg(long, global = true)]
    stage: Option<Stage>,
    /// Use a single worker thread.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Compute device; only `cpu` is available.
    #[arg(long, global = true, default_value = "cpu")]
    device: String,
    /// Override the block grid, e.g. `4x1`.
    #[arg(long, global = true, value_name = "RxC")]
    blocks: Option<GridConfig>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the built-in synthetic dataset to the configured dataset root.
    Synth,
    /// Extract RoIs and video events.
    Extract,
    /// Train the completion networks.
    Train,
    /// Score the test clips.
    Score,
    /// Compute frame- and pixel-level ROC, AUC and EER.
    Evaluate,
    /// Render the ROC curves.
    Plot,
    /// Run one stage (`--stage`) or the whole pipeline.
    Run,
}

/// Prints to stdout, ignoring a closed pipe (e.g. `vcc evaluate | head`).
fn say(msg: &str) {
    let _ = writeln!(std::io::stdout(), "{msg}");
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| VccError::Config("no configuration given; pass --config <file>".into()))?;
    let mut cfg = PipelineConfig::load(path)?;
    if let Some(grid) = cli.blocks {
        cfg.grid = grid;
        cfg.validate()?;
    }
    Ok(cfg)
}

fn check_device(device: &str) -> Result<()> {
    match device {
        "cpu" | "cpu:0" => Ok(()),
        other => Err(VccError::Config(format!(
            "device `{other}` is not available; this build only supports `cpu`"
        ))),
    }
}

fn execute(cli: &Cli) -> Result<()> {
    check_device(&cli.device)?;
    if cli.deterministic {
        rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build_global()
            .map_err(|e| VccError::Config(format!("cannot configure worker threads: {e}")))?;
    }
    if cli.stage.is_some() && !matches!(cli.command, Command::Run) {
        return Err(VccError::Config("--stage only applies to `vcc run`".into()));
    }
    let cfg = load_config(cli)?;
    let stage = match cli.command {
        Command::Synth => {
            say(&write_synthetic(&cfg)?);
            return Ok(());
        }
        Command::Extract => Stage::Extract,
        Command::Train => Stage::Train,
        Command::Score => Stage::Score,
        Command::Evaluate => Stage::Evaluate,
        Command::Plot => Stage::Plot,
        Command::Run => {
            let run = Run::new(cfg);
            let stages: Vec<Stage> = match cli.stage {
                Some(s) => vec![s],
                None => Stage::ALL.to_vec(),
            };
            for s in stages {
                say(&format!("[{}] {}", s.name(), run.run_stage(s)?));
            }
            return Ok(());
        }
    };
    say(&Run::new(cfg).run_stage(stage)?);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
