//! `claimrisk`: runs the readmission-risk pipeline one stage at a time.
//!
//! Every stage writes into `<out>/<stage>/` together with a `manifest.json`
//! listing the SHA-256 of each input and output. Downstream stages re-hash
//! their inputs against the upstream manifest before reading them.

mod manifest;
mod settings;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use claimrisk::kv::read_kv;

use settings::{parse_sizes, Settings};
use stages::StageRun;

#[derive(Parser)]
#[command(name = "claimrisk", version, about = "Readmission risk from claims sequences")]
struct Cli {
    /// `key=value` settings file with `synth.`, `prep.`, `encoder.`,
    /// `pretrain.`, `finetune.`, `scale.` and `drift.` prefixed keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory holding one subdirectory per stage.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic claims cohort.
    Synth,
    /// Label, tokenize and split the cohort.
    Prep,
    /// Masked-token pretraining.
    Pretrain,
    /// Classifier fine-tuning.
    Finetune,
    /// Test metrics at the validation-chosen threshold.
    Eval,
    /// Train and score at several training-set sizes.
    Scale {
        /// Comma-separated event counts, ascending.
        #[arg(long)]
        sizes: Option<String>,
    },
    /// Score a later-era synthetic cohort with the frozen model.
    Drift,
    /// Attention report for one beneficiary.
    Explain {
        #[arg(long)]
        beneficiary: String,
    },
    /// Subgroup metrics against a retrain without demographic tokens.
    Audit,
}

impl Command {
    fn stage(&self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Prep => "prep",
            Command::Pretrain => "pretrain",
            Command::Finetune => "finetune",
            Command::Eval => "eval",
            Command::Scale { .. } => "scale",
            Command::Drift => "drift",
            Command::Explain { .. } => "explain",
            Command::Audit => "audit",
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let entries = match &cli.config {
        Some(p) => read_kv(p).with_context(|| format!("reading config {}", p.display()))?,
        None => Default::default(),
    };
    let mut settings = Settings::from_entries(&entries, cli.seed)?;
    if let Command::Scale { sizes: Some(s) } = &cli.command {
        settings.sizes = parse_sizes(s)?;
    }
    let run = StageRun::new(cli.command.stage(), &cli.out, &settings, cli.config.as_deref());
    let manifest = match &cli.command {
        Command::Synth => stages::synth(run),
        Command::Prep => stages::prep(run),
        Command::Pretrain => stages::pretrain(run),
        Command::Finetune => stages::finetune(run),
        Command::Eval => stages::eval(run),
        Command::Scale { .. } => stages::scale(run),
        Command::Drift => stages::drift(run),
        Command::Explain { beneficiary } => stages::explain(run, beneficiary),
        Command::Audit => stages::audit(run),
    }?;
    eprintln!("{}: wrote {} artifacts to {}", manifest.stage, manifest.outputs.len(), manifest.output_dir);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
