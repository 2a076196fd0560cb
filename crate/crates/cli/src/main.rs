//! Experiment driver: synthetic data generation, source-domain pre-training,
//! offline embedding inference, target-domain fine-tuning, zero-shot scoring,
//! and ranking evaluation, all wired through a key=value config with CLI
//! overrides.
//!
//! Exit codes: 0 success, 1 validation/config error, 2 runtime error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{parse_override, Ablation, ExperimentConfig};
use protorec::error::Result;

#[derive(Parser)]
#[command(
    name = "protorec",
    about = "Prototype-enhanced cross-domain recommendation experiments",
    version
)]
struct Cli {
    /// key=value config file; flags win over file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Experiment seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Component ablation: gl (graph learning), cpl (contrastive prototype
    /// learning) or pea (prototype-enhanced attention).
    #[arg(long, global = true)]
    ablate: Option<String>,

    /// Generic config override, repeatable: --set key=value.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic planted-topic bundle.
    GenData {
        /// Entity count override (gen_entities).
        #[arg(long)]
        entities: Option<usize>,
        /// Topic count override (gen_topics).
        #[arg(long)]
        topics: Option<usize>,
    },
    /// Pre-train on the source domains.
    Pretrain,
    /// Infer and persist user/entity embeddings.
    Infer,
    /// Fine-tune the scoring heads on the target domain.
    Finetune,
    /// Score all target (user, item) pairs with the inner product.
    Zeroshot,
    /// Rank the target domain and report Hit/NDCG at 5 and 10.
    Eval,
}

fn build_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut overrides: Vec<(String, String)> = Vec::new();
    if let Command::GenData { entities, topics } = &cli.command {
        if let Some(e) = entities {
            overrides.push(("gen_entities".into(), e.to_string()));
        }
        if let Some(t) = topics {
            overrides.push(("gen_topics".into(), t.to_string()));
        }
    }
    for raw in &cli.overrides {
        overrides.push(parse_override(raw)?);
    }
    if let Some(seed) = cli.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    if let Some(ablate) = &cli.ablate {
        Ablation::parse(ablate)?;
        overrides.push(("ablate".into(), ablate.clone()));
    }
    ExperimentConfig::load(cli.config.as_deref(), &overrides)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = build_config(cli)?;
    match &cli.command {
        Command::GenData { .. } => commands::cmd_gen_data(&cfg),
        Command::Pretrain => commands::cmd_pretrain(&cfg),
        Command::Infer => commands::cmd_infer(&cfg),
        Command::Finetune => commands::cmd_finetune(&cfg),
        Command::Zeroshot => commands::cmd_zeroshot(&cfg),
        Command::Eval => commands::cmd_eval(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version requests are success; usage mistakes are
            // validation failures.
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
