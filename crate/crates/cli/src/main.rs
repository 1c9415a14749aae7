use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ehrseq_cli::{execute, failure, split_overrides, validate, Command};

const OVERRIDES: &str = "\
Config overrides:
  Any config field can be set with a flag of the same dotted name, e.g.
    --seed 7  --generator.n_patients 500  --models.2.hidden_size=32
    --experiments.tasks '[\"detection\"]'  --paths.out_dir runs/try
  Values are parsed as JSON, falling back to a plain string.
  Without a seed in the config or on the command line, EHRSEQ_SEED is
  used, then 2021.

Output:
  Logs go to stderr. Stdout carries one JSON status line.
  Exit codes: 0 ok, 2 usage, 3 config, 4 input, 5 io, 6 data,
  7 numeric, 8 model, 1 other.";

#[derive(Parser)]
#[command(name = "ehrseq", version, about = "Treatment-failure detection and prediction from coded event streams", after_help = OVERRIDES)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct Common {
    /// JSON run config; defaults apply to anything it leaves out.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// More log output (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Only warnings and errors on stderr.
    #[arg(short, long)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic cohort: data/events.jsonl, data/truth.jsonl, data/generator.json.
    Generate(Common),
    /// Label patients from the event file: data/labels.csv, data/cohort_summary.json.
    Annotate(Common),
    /// Split, build the vocabulary and encode each task: corpus/.
    BuildCorpus(Common),
    /// Masked-code pre-training of transformer encoders: models/pretrained/.
    Pretrain(Common),
    /// Train every model for every task and seed: models/<task>/.
    Train(Common),
    /// Score trained models on the test set: results/main/reports.json.
    Evaluate(Common),
    /// AUC against training-set size: results/sweep/reports.json.
    Sweep(Common),
    /// Modality ablation: results/ablation/reports.json.
    Ablate(Common),
    /// Metrics, ROC curves, plots and a run manifest: report/.
    Report(Common),
    /// Every stage in order; sweep and ablation only when configured.
    All(Common),
    /// List config violations and warnings without running anything.
    Validate(Common),
}

impl Cmd {
    fn parts(&self) -> (Option<Command>, &Common) {
        match self {
            Cmd::Generate(c) => (Some(Command::Generate), c),
            Cmd::Annotate(c) => (Some(Command::Annotate), c),
            Cmd::BuildCorpus(c) => (Some(Command::BuildCorpus), c),
            Cmd::Pretrain(c) => (Some(Command::Pretrain), c),
            Cmd::Train(c) => (Some(Command::Train), c),
            Cmd::Evaluate(c) => (Some(Command::Evaluate), c),
            Cmd::Sweep(c) => (Some(Command::Sweep), c),
            Cmd::Ablate(c) => (Some(Command::Ablate), c),
            Cmd::Report(c) => (Some(Command::Report), c),
            Cmd::All(c) => (Some(Command::All), c),
            Cmd::Validate(c) => (None, c),
        }
    }
}

fn main() -> ExitCode {
    let (own, overrides) = match split_overrides(std::env::args().collect()) {
        Ok(split) => split,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let cli = Cli::parse_from(own);
    let (cmd, common) = cli.command.parts();
    let level = match (common.quiet, common.verbose) {
        (true, _) => "warn",
        (false, 0) => "info",
        (false, 1) => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();

    let name = cmd.map_or("validate", Command::name);
    let config = common.config.as_deref();
    let result = match cmd {
        None => validate(config, &overrides),
        Some(cmd) => ehrseq_cli::load(config, &overrides).and_then(|loaded| {
            if let Some(n) = loaded.config.jobs {
                rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
            }
            execute(cmd, config, &overrides)
        }),
    };
    let (status, code) = match result {
        Ok(status) => (status, 0),
        Err(e) => {
            log::error!("{e:#}");
            failure(name, &e)
        }
    };
    println!("{status}");
    ExitCode::from(code as u8)
}
