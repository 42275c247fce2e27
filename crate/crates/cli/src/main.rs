use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cast_core::model::EvalLogitMode;
use cast_core::runner::{self, EvalSplit, ExperimentConfig};
use cast_core::{CastError, Result};
use clap::{Parser, Subcommand};

/// Spatio-temporal cross-attention video forgery detector.
#[derive(Parser, Debug)]
#[command(name = "cast", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset described by a config.
    Gen {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `[synth] seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Dataset directory (default `<output>/data`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model, keeping the checkpoint with the lowest validation loss.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `[eval] manifest`.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Overrides `[training] seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Run directory (default `<output>/train`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a manifest with a checkpoint and print ACC and AUC.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// `clip` or `frame_mean`.
        #[arg(long)]
        mode: Option<EvalLogitMode>,
        /// `auto`, `all`, `train`, `val` or `test`.
        #[arg(long)]
        split: Option<EvalSplit>,
        /// Report directory (default `<output>/eval`, or `eval` without a config).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and score every model variant on in-distribution and shifted data.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Runs this single seed instead of `[ablate] seeds`.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default `<output>/ablate`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write one frame's cross-attention map as a PGM image.
    Heatmap {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        clip: PathBuf,
        #[arg(long)]
        frame: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path)
}

fn required(value: Option<PathBuf>, what: &str) -> Result<PathBuf> {
    value.ok_or_else(|| CastError::ConfigError(format!("--{what} is required without --config")))
}

fn run(cli: Cli) -> Result<u8> {
    let stdout = &mut std::io::stdout().lock();
    let stderr = &mut std::io::stderr();
    match cli.command {
        Command::Gen { config, seed, out } => {
            let mut cfg = load(&config)?;
            if let Some(s) = seed {
                cfg.synth.base_seed = s;
            }
            let dir = out.unwrap_or_else(|| cfg.data_dir());
            runner::cmd_gen(&cfg.synth, &dir, stdout)?;
        }
        Command::Train { config, manifest, seed, out } => {
            let mut cfg = load(&config)?;
            if let Some(s) = seed {
                cfg.training.seed = s;
            }
            let manifest = manifest.unwrap_or_else(|| cfg.manifest_path());
            let dir = out.unwrap_or_else(|| cfg.train_dir());
            runner::cmd_train(&cfg, &manifest, &dir, stdout, stderr)?;
        }
        Command::Eval { config, checkpoint, manifest, mode, split, out } => {
            let cfg = config.as_deref().map(load).transpose()?;
            let (checkpoint, manifest, mode, split, out) = match &cfg {
                Some(c) => (
                    checkpoint.unwrap_or_else(|| c.checkpoint_path()),
                    manifest.unwrap_or_else(|| c.manifest_path()),
                    mode.unwrap_or(c.eval.mode),
                    split.unwrap_or(c.eval.split),
                    out.unwrap_or_else(|| c.eval_dir()),
                ),
                None => (
                    required(checkpoint, "checkpoint")?,
                    required(manifest, "manifest")?,
                    mode.unwrap_or_default(),
                    split.unwrap_or_default(),
                    out.unwrap_or_else(|| PathBuf::from("eval")),
                ),
            };
            runner::cmd_eval(&checkpoint, &manifest, mode, split, &out, stdout)?;
        }
        Command::Ablate { config, seed, out } => {
            let mut cfg = load(&config)?;
            if let Some(s) = seed {
                cfg.ablate.seeds = vec![s];
            }
            let dir = out.unwrap_or_else(|| cfg.ablate_dir());
            let outcome = runner::cmd_ablate(&cfg, &dir, stdout, stderr)?;
            if let Some(first) = outcome.failures.first() {
                writeln!(stderr, "{} ablation run(s) failed; partial table at {}", outcome.failures.len(), outcome.table.display())?;
                return Ok(runner::exit_code(&first.error));
            }
        }
        Command::Heatmap { checkpoint, clip, frame, out } => {
            runner::cmd_heatmap(&checkpoint, &clip, frame, &out)?;
            writeln!(stdout, "{}", out.display())?;
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            if let CastError::UnsupportedVariant(_) = e {
                eprintln!("heatmaps need a variant whose fusion attends from frames to spatial tokens");
            }
            ExitCode::from(runner::exit_code(&e))
        }
    }
}
