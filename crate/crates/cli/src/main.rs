mod commands;
mod output;
mod settings;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use pivotgsl::data::SynthSpec;
use pivotgsl::train::TrainConfig;

use commands::{Outcome, SynthArgs};
use settings::{RunArgs, Settings};

/// Transferable graph structure learning through pivot nodes.
#[derive(Parser)]
#[command(name = "pivotgsl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
struct OutArgs {
    /// run name under $PIVOTGSL_OUT (default: the command name)
    #[arg(long)]
    name: Option<String>,
    /// write here instead of $PIVOTGSL_OUT/<name>
    #[arg(long = "out-dir")]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the structure learner on one or more source graphs.
    Train {
        #[arg(long = "source", required = true)]
        sources: Vec<PathBuf>,
        #[command(flatten)]
        out: OutArgs,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train a GNN on the target with a frozen learner.
    Transfer {
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        out: OutArgs,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train a plain GCN on the target's observed graph.
    Baseline {
        #[arg(long)]
        target: PathBuf,
        #[command(flatten)]
        out: OutArgs,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Delete random edge fractions and compare transfer against GCN.
    Attack {
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// comma-separated deletion fractions
        #[arg(long)]
        fractions: Option<String>,
        #[command(flatten)]
        out: OutArgs,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Track latent homophily and neighbourhood variance during transfer.
    Diagnose {
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// record every this many epochs
        #[arg(long)]
        every: Option<usize>,
        #[command(flatten)]
        out: OutArgs,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Retrain on sources with one ingredient removed, then transfer.
    Ablate {
        #[arg(long = "source", required = true)]
        sources: Vec<PathBuf>,
        #[arg(long)]
        target: PathBuf,
        /// no-iter or no-reg
        #[arg(long)]
        which: String,
        #[command(flatten)]
        out: OutArgs,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Generate a stochastic block model dataset.
    Synth {
        #[arg(long = "n-nodes")]
        n_nodes: usize,
        #[arg(long = "n-classes")]
        n_classes: usize,
        #[arg(long = "p-in")]
        p_in: f64,
        #[arg(long = "p-out")]
        p_out: f64,
        #[arg(long = "feature-dim")]
        feature_dim: usize,
        #[arg(long, default_value_t = 1.0)]
        snr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// add this fraction of extra uniformly random edges
        #[arg(long = "noise-edges", default_value_t = 0.0)]
        noise_edges: f64,
        /// store masks drawn with this split
        #[arg(long)]
        split: Option<String>,
        #[arg(long = "split-seed", default_value_t = 0)]
        split_seed: u64,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Check analytic gradients of every differentiable op.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        fixtures: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        out: OutArgs,
    },
}

fn resolve(base: TrainConfig, run: &RunArgs, extra: &[(&'static str, String)]) -> Result<Settings> {
    let mut flags = run.pairs();
    flags.extend_from_slice(extra);
    Settings::new(base).layered(run.config.as_deref(), &flags)
}

fn dir(out: &OutArgs, default: &str) -> Result<PathBuf> {
    output::run_dir(out.out_dir.as_deref(), out.name.as_deref().unwrap_or(default))
}

fn checkpoint_config(path: &Path) -> Result<TrainConfig> {
    Ok(commands::read_checkpoint(path)?.config)
}

fn run(cmd: Command) -> Result<Outcome> {
    match cmd {
        Command::Train { sources, out, run } => {
            let s = resolve(TrainConfig::default(), &run, &[])?;
            commands::cmd_train(&sources, &s, &dir(&out, "train")?)
        }
        Command::Transfer {
            target,
            checkpoint,
            out,
            run,
        } => {
            let s = resolve(checkpoint_config(&checkpoint)?, &run, &[])?;
            commands::cmd_transfer(&target, &checkpoint, &s, &dir(&out, "transfer")?)
        }
        Command::Baseline { target, out, run } => {
            let s = resolve(TrainConfig::default(), &run, &[])?;
            commands::cmd_baseline(&target, &s, &dir(&out, "baseline")?)
        }
        Command::Attack {
            target,
            checkpoint,
            fractions,
            out,
            run,
        } => {
            let extra: Vec<_> = fractions.into_iter().map(|f| ("fractions", f)).collect();
            let s = resolve(checkpoint_config(&checkpoint)?, &run, &extra)?;
            commands::cmd_attack(&target, &checkpoint, &s, &dir(&out, "attack")?)
        }
        Command::Diagnose {
            target,
            checkpoint,
            every,
            out,
            run,
        } => {
            let extra: Vec<_> = every.into_iter().map(|e| ("every", e.to_string())).collect();
            let s = resolve(checkpoint_config(&checkpoint)?, &run, &extra)?;
            commands::cmd_diagnose(&target, &checkpoint, &s, &dir(&out, "diagnose")?)
        }
        Command::Ablate {
            sources,
            target,
            which,
            out,
            run,
        } => {
            let s = resolve(TrainConfig::default(), &run, &[("which", which)])?;
            commands::cmd_ablate(&target, &sources, &s, &dir(&out, "ablate")?)
        }
        Command::Synth {
            n_nodes,
            n_classes,
            p_in,
            p_out,
            feature_dim,
            snr,
            seed,
            noise_edges,
            split,
            split_seed,
            out,
        } => {
            let args = SynthArgs {
                spec: SynthSpec {
                    n_nodes,
                    n_classes,
                    p_in,
                    p_out,
                    feature_dim,
                    snr,
                    seed,
                },
                noise_edges,
                split: split.map(|s| s.parse()).transpose()?,
                split_seed,
            };
            commands::cmd_synth(&args, &dir(&out, "synth")?)
        }
        Command::Gradcheck { fixtures, seed, out } => commands::cmd_gradcheck(fixtures, seed, &dir(&out, "gradcheck")?),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(outcome) => {
            println!("{}", outcome.message);
            if outcome.failed.is_empty() {
                ExitCode::SUCCESS
            } else {
                eprintln!("failed runs:");
                for f in &outcome.failed {
                    eprintln!("  {} seed {}: {}", f.command, f.seed, f.error);
                }
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
