use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

mod commands;
mod config;
mod manifest;

use config::RunConfig;

/// Transfer fine-tuning pipeline: synthetic data, pre-training, paraphrase
/// injection, fine-tuning and experiments.
#[derive(Debug, Parser)]
#[command(name = "tft", version)]
struct Cli {
    /// key=value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random choice of the run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, created if absent.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Learning rate of the command's main optimizer.
    #[arg(long, global = true)]
    lr: Option<f64>,
    /// Extra key=value setting; repeatable, wins over the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Maximum parallel experiment cells.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Recipe {
    Subsample,
    Ablation,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthetic aligned corpus, pre-training documents and downstream tasks.
    GenData,
    /// WordPiece vocabulary from corpus and documents.
    BuildVocab,
    /// Masked-LM + next-sentence pre-training.
    Pretrain,
    /// Phrasal/sentential paraphrase injection.
    Inject,
    /// Fine-tune a checkpoint on one task and report dev/test metrics.
    Finetune,
    /// Experiment grids.
    Experiment {
        #[arg(long, value_enum)]
        recipe: Recipe,
    },
    /// Finite-difference check of the joint injection loss.
    Gradcheck,
    /// Sentence and phrase pair counts of aligned corpora.
    Stats,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::BuildVocab => "build-vocab",
            Command::Pretrain => "pretrain",
            Command::Inject => "inject",
            Command::Finetune => "finetune",
            Command::Experiment {
                recipe: Recipe::Subsample,
            } => "experiment-subsample",
            Command::Experiment {
                recipe: Recipe::Ablation,
            } => "experiment-ablation",
            Command::Gradcheck => "gradcheck",
            Command::Stats => "stats",
        }
    }
}

fn resolve(cli: &Cli) -> tft_core::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &cli.overrides {
        cfg.apply_override(kv)?;
    }
    if let Some(seed) = cli.seed {
        cfg.set("seed", &seed.to_string());
    }
    if let Some(lr) = cli.lr {
        cfg.set("lr", &lr.to_string());
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> tft_core::Result<bool> {
    let cfg = resolve(cli)?;
    std::fs::create_dir_all(&cli.out).map_err(|e| tft_core::Error::Io {
        path: cli.out.clone(),
        err: e,
    })?;
    let ctx = commands::Context {
        cfg,
        out: cli.out.clone(),
        jobs: cli.jobs.max(1),
        command: cli.command.name(),
    };
    match cli.command {
        Command::GenData => commands::gen_data(&ctx),
        Command::BuildVocab => commands::build_vocab(&ctx),
        Command::Pretrain => commands::pretrain(&ctx),
        Command::Inject => commands::inject(&ctx),
        Command::Finetune => commands::finetune(&ctx),
        Command::Experiment {
            recipe: Recipe::Subsample,
        } => commands::subsample(&ctx),
        Command::Experiment {
            recipe: Recipe::Ablation,
        } => commands::ablation(&ctx),
        Command::Gradcheck => commands::gradcheck(&ctx),
        Command::Stats => commands::stats(&ctx),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::new()
        .filter_level(log::LevelFilter::Info)
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
