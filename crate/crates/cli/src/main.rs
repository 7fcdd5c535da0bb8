//! `mhel`: command-line front end for the entity-linking toolkit.

mod commands;
mod link;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mhel_core::calibration::CorrectRule;
use mhel_core::llm::BackendFailurePolicy;
use mhel_core::pipeline::{PromptMode, Variant};

#[derive(Parser, Debug)]
#[command(
    name = "mhel",
    version,
    about = "Multilingual historical entity linking"
)]
struct Cli {
    /// Log level (error, warn, info, debug, trace); RUST_LOG takes precedence.
    #[arg(long, global = true, default_value = "warn")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Import KB JSONL into a single-file entity store.
    ImportKb {
        jsonl: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Load and validate an embedding matrix.
    BuildIndex {
        #[arg(long)]
        vectors: PathBuf,
        #[arg(long)]
        ids: PathBuf,
        /// Compare search against a brute-force scan on sampled queries.
        #[arg(long)]
        check: bool,
        #[arg(long, default_value_t = 64)]
        samples: usize,
        #[arg(long, default_value_t = 50)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Dump top-k retrievals for a gold-annotated corpus (input to `calibrate`).
    Retrieve(link::RetrieveArgs),
    /// Pick θ and K from dev-set retrievals.
    Calibrate {
        #[arg(long)]
        dev: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "10,20,30,40,50")]
        k_steps: Vec<usize>,
        #[arg(long, default_value_t = 0.01)]
        epsilon: f64,
        #[arg(long, value_enum, default_value_t = CorrectRuleArg::TopOne)]
        correct_rule: CorrectRuleArg,
        /// Also write the result as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Link a corpus and write predictions plus a run manifest.
    Link(Box<link::LinkArgs>),
    /// Micro F1 against gold labels.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        /// Also report NIL precision, recall and F1.
        #[arg(long)]
        nil: bool,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Point-biserial correlation between top score and correctness.
    Correlate {
        #[arg(long)]
        pred: PathBuf,
        /// Gold labels; defaults to the gold_qid stored in the predictions.
        #[arg(long)]
        gold: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Write a synthetic KB, index, corpus, chat script and config for offline runs.
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 500)]
        entities: usize,
        #[arg(long, default_value_t = 200)]
        mentions: usize,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        /// Prompt mode the chat script is written for.
        #[arg(long, value_enum, default_value_t = PromptArg::Chain)]
        prompt: PromptArg,
    },
    /// Count error annotations by relation and dataset.
    TallyErrors {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum CorrectRuleArg {
    TopOne,
    GoldInHits,
}

impl From<CorrectRuleArg> for CorrectRule {
    fn from(a: CorrectRuleArg) -> Self {
        match a {
            CorrectRuleArg::TopOne => CorrectRule::TopOne,
            CorrectRuleArg::GoldInHits => CorrectRule::GoldInHits,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum VariantArg {
    Vanilla,
    Threshold,
}

impl From<VariantArg> for Variant {
    fn from(a: VariantArg) -> Self {
        match a {
            VariantArg::Vanilla => Variant::Vanilla,
            VariantArg::Threshold => Variant::Threshold,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PromptArg {
    Chain,
    Single,
}

impl From<PromptArg> for PromptMode {
    fn from(a: PromptArg) -> Self {
        match a {
            PromptArg::Chain => PromptMode::Chain,
            PromptArg::Single => PromptMode::Single,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum FailureArg {
    #[value(name = "fallback-top1")]
    FallbackTop1,
    Fail,
}

impl From<FailureArg> for BackendFailurePolicy {
    fn from(a: FailureArg) -> Self {
        match a {
            FailureArg::FallbackTop1 => BackendFailurePolicy::FallbackTop1,
            FailureArg::Fail => BackendFailurePolicy::FailRun,
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::ImportKb { jsonl, out } => commands::import_kb(&jsonl, &out),
        Command::BuildIndex {
            vectors,
            ids,
            check,
            samples,
            k,
            seed,
        } => commands::build_index(&vectors, &ids, check.then_some((samples, k, seed))),
        Command::Retrieve(args) => link::retrieve(args),
        Command::Calibrate {
            dev,
            k_steps,
            epsilon,
            correct_rule,
            report,
        } => commands::calibrate(
            &dev,
            k_steps,
            epsilon,
            correct_rule.into(),
            report.as_deref(),
        ),
        Command::Link(args) => link::link(*args),
        Command::Evaluate {
            pred,
            gold,
            nil,
            report,
        } => commands::evaluate(&pred, &gold, nil, report.as_deref()),
        Command::Correlate { pred, gold, report } => {
            commands::correlate(&pred, gold.as_deref(), report.as_deref())
        }
        Command::Synth {
            out_dir,
            seed,
            entities,
            mentions,
            dim,
            prompt,
        } => commands::synth(&out_dir, seed, entities, mentions, dim, prompt.into()),
        Command::TallyErrors {
            annotations,
            report,
        } => commands::tally_errors(&annotations, report.as_deref()),
    }
}

/// Collapses an error chain onto one line.
fn one_line(err: &anyhow::Error) -> String {
    format!("{err:#}")
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let rendered = e.render().to_string();
            let first = rendered.lines().next().unwrap_or("invalid arguments");
            eprintln!("error: usage: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(&cli.log_level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", one_line(&e));
            ExitCode::FAILURE
        }
    }
}
