//! `beagle`: train, run and analyse cross-attention draft heads.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;

/// A configuration or invocation problem; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser)]
#[command(name = "beagle", version, about = "Cross-attention draft heads for speculative decoding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct ConfigArgs {
    /// `key = value` configuration file.
    #[arg(long, short = 'c')]
    config: Option<PathBuf>,
    /// Override one setting; repeatable.
    #[arg(long = "set", short = 's', value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, UsageError> {
        RunConfig::load(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the target language model.
    TrainTarget {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train the draft head against a frozen target.
    TrainDraft {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// early, late or both.
        #[arg(long, default_value = "both")]
        stage: String,
        /// Start from a fresh draft head even for the late stage.
        #[arg(long)]
        from_scratch: bool,
        /// Start from the parameters of this draft checkpoint.
        #[arg(long, value_name = "CKPT", conflicts_with = "resume")]
        init: Option<PathBuf>,
        /// Continue the run saved at the `draft` path.
        #[arg(long)]
        resume: bool,
        /// Stop after this epoch.
        #[arg(long)]
        until_epoch: Option<usize>,
    },
    /// Decode one prompt.
    Generate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        prompt: String,
        /// Speculative decoding with the draft head.
        #[arg(long, conflicts_with = "baseline", required_unless_present = "baseline")]
        spec: bool,
        /// Target-only decoding.
        #[arg(long)]
        baseline: bool,
    },
    /// Speculative and baseline decoding over a prompt file.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// One prompt per line.
        #[arg(long)]
        prompts: PathBuf,
        /// Per-iteration CSV; a per-prompt summary goes next to it.
        #[arg(long, default_value = "eval.csv")]
        out: PathBuf,
    },
    /// Print a training mask as a `.`/`x` grid.
    MaskDump {
        #[arg(long = "t")]
        t: usize,
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        eps: usize,
        /// Simulation step; 1 is the early-stage mask.
        #[arg(long, default_value_t = 1)]
        step: usize,
    },
    /// Write a synthetic text corpus and matching prompts.
    ToyCorpus {
        /// Corpus size in bytes.
        #[arg(long, default_value_t = 1 << 20)]
        bytes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "corpus.txt")]
        out: PathBuf,
        /// Also write this many prompts, one per line.
        #[arg(long, value_name = "FILE", requires = "count")]
        prompts: Option<PathBuf>,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Acceptance-length analysis of an eval CSV.
    Analyze {
        csv: PathBuf,
        /// Write the report as CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::TrainTarget { cfg } => commands::train_target(&cfg.load()?),
        Command::TrainDraft { cfg, stage, from_scratch, init, resume, until_epoch } => {
            let stage = stage.parse().map_err(|e: beagle::Error| UsageError(e.to_string()))?;
            let opts = commands::DraftOpts { stage, from_scratch, init, resume, until_epoch };
            commands::train_draft(&cfg.load()?, &opts)
        }
        Command::Generate { cfg, prompt, spec, baseline: _ } => commands::generate(&cfg.load()?, &prompt, spec),
        Command::Eval { cfg, prompts, out } => commands::eval(&cfg.load()?, &prompts, &out),
        Command::MaskDump { t, k, eps, step } => commands::mask_dump(t, k, eps, step),
        Command::ToyCorpus { bytes, seed, out, prompts, count } => {
            commands::toy_corpus(bytes, seed, &out, prompts.as_deref().zip(count))
        }
        Command::Analyze { csv, out } => commands::analyze(&csv, out.as_deref()),
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    match e.downcast_ref::<beagle::Error>() {
        Some(beagle::Error::Usage(_) | beagle::Error::Validation(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
