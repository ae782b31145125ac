use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tempflow::harness::{cmd_analyze, cmd_pretrain, cmd_train, expand_presets, AnalysisKind, ExperimentConfig};
use tempflow::{Error, Result};

#[derive(Parser)]
#[command(
    name = "tempflow",
    version,
    about = "GRPO fine-tuning experiments on toy flow-matching models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (flat TOML with dotted keys).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to `run.output_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Applies a GRPO preset on top of the config.
    #[arg(long, value_parser = ["flow-grpo", "flow-grpo-fixed", "branch", "tempflow"])]
    preset: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Flow-matching pretraining: checkpoint and loss curve.
    Pretrain(Common),
    /// GRPO fine-tuning from a checkpoint: metrics, checkpoints and summary.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// One analysis against a checkpoint: CSV plus pass/fail summary.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// variance_profile, scale_terms, direction_check or std_vs_noise
        which: String,
    },
    /// Prints the config expanded under every preset.
    Presets(Common),
}

fn load(common: &Common) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(p) = &common.preset {
        cfg = cfg.with_preset(p)?;
    }
    let out = common.out.clone().unwrap_or_else(|| cfg.run.output_dir.clone());
    Ok((cfg, out))
}

fn print_files(files: &[&Path]) {
    for f in files {
        println!("wrote {}", f.display());
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain(common) => {
            let (cfg, out) = load(&common)?;
            let o = cmd_pretrain(&cfg, &out)?;
            print_files(&[&o.checkpoint, &o.loss_csv, &o.manifest]);
        }
        Command::Train { common, checkpoint } => {
            let (cfg, out) = load(&common)?;
            let o = cmd_train(&cfg, &checkpoint, &out)?;
            print_files(&[&o.metrics_csv, &o.final_checkpoint, &o.summary, &o.manifest]);
            println!("mean reward {:.6} -> {:.6}", o.initial_reward, o.final_reward);
        }
        Command::Analyze {
            common,
            checkpoint,
            which,
        } => {
            let kind: AnalysisKind = which.parse()?;
            let (cfg, out) = load(&common)?;
            let o = cmd_analyze(&cfg, &checkpoint, kind, &out)?;
            for f in &o.files {
                println!("wrote {}", f.display());
            }
            println!("wrote {}", o.manifest.display());
            for c in &o.checks {
                println!("{} {} {} ({})", c.status(), c.metric, c.value, c.threshold);
            }
        }
        Command::Presets(common) => {
            let (cfg, _) = load(&common)?;
            for (name, c) in expand_presets(&cfg)? {
                println!("# preset {name}  config hash {}", c.hash());
                println!("{}", c.to_flat_toml());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &Error) -> ExitCode {
    ExitCode::from(e.exit_code() as u8)
}
