//! `sard` CLI: generate synthetic data, train the windowed teacher and the
//! deep models, evaluate, introspect, verify the construction, and sweep.

mod commands;
mod config;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};

use commands::{SweepParam, TrainFlags};
use config::ExperimentConfig;
use sard_core::model::{EncoderVariant, HeadVariant};

#[derive(Parser)]
#[command(name = "sard", about = "claims-risk models with distillation pre-training", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured cohort and/or cluster dataset.
    Gen {
        #[arg(long)]
        config: PathBuf,
        /// Override the output directory from the config file.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the data seed from the config file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Select windows, fit the teacher, pre-train, and fine-tune.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Skip distillation pre-training and fine-tune from scratch.
        #[arg(long)]
        no_rd: bool,
        /// Encoder override: sa | gru | identity.
        #[arg(long)]
        variant: Option<String>,
        /// Prediction head override: conv | sum.
        #[arg(long)]
        head: Option<String>,
        /// Override the model/train seeds from the config file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate every trained model on the test split.
    Report {
        #[arg(long)]
        config: PathBuf,
    },
    /// Match penultimate neurons to teacher features.
    Dissect {
        #[arg(long)]
        config: PathBuf,
    },
    /// Build the replicating attention model and sweep its error.
    Lemma {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the four cluster-benchmark procedures across parameter values.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Which generator parameter to vary: gamma | beta | n.
        #[arg(long)]
        param: SweepParam,
        /// Comma-separated list of values for the swept parameter.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
    },
}

fn parse_variant(text: &str) -> Result<EncoderVariant> {
    match text {
        "sa" | "self_attention" => Ok(EncoderVariant::SelfAttention),
        "gru" => Ok(EncoderVariant::Gru),
        "identity" => Ok(EncoderVariant::Identity),
        other => anyhow::bail!("unknown encoder variant `{other}` (expected sa|gru|identity)"),
    }
}

fn parse_head(text: &str) -> Result<HeadVariant> {
    match text {
        "conv" => Ok(HeadVariant::Conv),
        "sum" | "summing" => Ok(HeadVariant::Summing),
        other => anyhow::bail!("unknown head variant `{other}` (expected conv|sum)"),
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Gen { config, out, seed } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(out) = out {
                cfg.out_dir = out;
            }
            if let Some(seed) = seed {
                cfg.seeds.data = seed;
            }
            commands::cmd_gen(&cfg)
        }
        Command::Train { config, no_rd, variant, head, seed } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(seed) = seed {
                cfg.seeds.model = seed;
                cfg.seeds.train = seed.wrapping_mul(0x9e37_79b9).wrapping_add(1);
            }
            let flags = TrainFlags {
                no_rd,
                variant: variant.as_deref().map(parse_variant).transpose()?,
                head: head.as_deref().map(parse_head).transpose()?,
            };
            commands::cmd_train(&cfg, &flags)
        }
        Command::Report { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            commands::cmd_report(&cfg)
        }
        Command::Dissect { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            commands::cmd_dissect(&cfg)
        }
        Command::Lemma { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            commands::cmd_lemma(&cfg)
        }
        Command::Sweep { config, param, values } => {
            let cfg = ExperimentConfig::load(&config)?;
            commands::cmd_sweep(&cfg, param, &values)
        }
    }
}
