use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use shufflemixer::runconfig::{Preset, RunConfig};
use shufflemixer::{Error, Result};

mod commands;

#[derive(Parser)]
#[command(name = "shufflemixer", version, about = "Volumetric Shuffle-Mixer segmentation harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
struct Common {
    /// key=value run configuration
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = ["f32", "f64"])]
    precision: Option<String>,
    #[arg(long, value_parser = ["none", "no-shuffle", "single-view", "no-mixing", "dense-mlp", "mixer-first", "no-ape-s", "no-ape-v"])]
    ablate: Option<String>,
    #[arg(long, value_parser = ["crossmerge", "catlinear", "catskip", "crossskip", "catcrossskip"])]
    skip: Option<String>,
    #[arg(long, value_parser = ["on", "off", "spatial-only", "channel-only"])]
    ases: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train on synthetic volumes; writes a log and checkpoints
    Train(Common),
    /// Per-case and aggregate metrics of a checkpoint
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<out>/final.ckpt`
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Directory written by `synth`; synthesized from the config when absent
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Finite-difference audit of every primitive and of a whole network
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Network parameters to sample
        #[arg(long, default_value_t = 200)]
        samples: usize,
        /// Break one backward rule (negative control)
        #[arg(long, hide = true)]
        corrupt_backward: bool,
    },
    /// Analytic FLOP/parameter report and parameter audit
    Analyze(Common),
    /// Write a synthetic dataset as volume files
    Synth(Common),
}

fn load(common: &Common, default_preset: Preset) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            RunConfig::parse(&text)?
        }
        None => {
            let mut cfg = RunConfig::default();
            cfg.set("preset", default_preset.name())?;
            cfg
        }
    };
    let flags = [
        ("seed", common.seed.map(|s| s.to_string())),
        ("out", common.out.as_ref().map(|p| p.display().to_string())),
        ("precision", common.precision.clone()),
        ("ablate", common.ablate.clone()),
        ("skip", common.skip.clone()),
        ("ases", common.ases.clone()),
    ];
    for (key, value) in flags {
        if let Some(v) = value {
            cfg.set(key, &v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(c) => commands::train(&load(&c, Preset::Desk)?),
        Command::Eval { common, checkpoint, data } => {
            let cfg = load(&common, Preset::Desk)?;
            let ckpt = checkpoint.unwrap_or_else(|| cfg.out.join("final.ckpt"));
            commands::eval(&cfg, &ckpt, data.as_deref())
        }
        Command::Gradcheck { common, tolerance, samples, corrupt_backward } => {
            commands::gradcheck(&load(&common, Preset::Tiny)?, tolerance, samples, corrupt_backward)
        }
        Command::Analyze(c) => commands::analyze(&load(&c, Preset::Desk)?),
        Command::Synth(c) => commands::synth(&load(&c, Preset::Desk)?),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
