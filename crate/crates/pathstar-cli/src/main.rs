//! `pathstar` — generate path-star datasets, train small language models on
//! them under three objectives, measure what they actually learned, and
//! aggregate runs into plot-ready tables.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use pathstar::error::Error;

#[derive(Parser)]
#[command(
    name = "pathstar",
    version,
    about = "Path-star planning benchmark: data, training, metrics, reports",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a dataset and write train/test line files.
    Generate(GenerateArgs),
    /// Train a model on a generated dataset; writes checkpoints and a curve.
    Train(TrainArgs),
    /// Score a checkpoint on the test set; writes report.json.
    Eval(EvalArgs),
    /// Aggregate finished runs into summary and per-token CSV tables.
    Report(ReportArgs),
}

/// Flags shared by every config-driven subcommand. Precedence, lowest to
/// highest: recipe/file values, PATHSTAR_* environment overrides, flags.
#[derive(Args)]
struct ConfigArgs {
    /// Path to a TOML experiment config.
    #[arg(long, value_name = "PATH", conflicts_with = "recipe")]
    config: Option<PathBuf>,
    /// Name of a built-in recipe (see `--recipe help`).
    #[arg(long, value_name = "NAME")]
    recipe: Option<String>,
    /// Override every seed (dataset, training, evaluation) at once.
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Override the training objective: teacher_forced, teacherless, reversed.
    #[arg(long, value_name = "OBJECTIVE")]
    objective: Option<String>,
    /// Override the architecture: transformer or recurrent.
    #[arg(long, value_name = "ARCH")]
    arch: Option<String>,
    /// Output directory (defaults to runs/<recipe-or-config-stem>).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self) -> pathstar::error::Result<config::Resolved> {
        if self.recipe.as_deref() == Some("help") {
            let names: Vec<&str> = config::RECIPES.iter().map(|(n, _)| *n).collect();
            return Err(Error::Config(format!(
                "available recipes: {}",
                names.join(", ")
            )));
        }
        config::load(
            self.config.as_ref(),
            self.recipe.as_deref(),
            &config::Overrides {
                seed: self.seed,
                objective: self.objective.clone(),
                arch: self.arch.clone(),
                out: self.out.clone(),
            },
        )
    }
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Directory holding train.txt/test.txt (defaults to --out).
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Continue from this directory's checkpoint.ckpt.
    #[arg(long)]
    resume: bool,
    /// Print the first optimization batch as JSON and exit.
    #[arg(long, hide = true)]
    dump_first_batch: bool,
    /// Proceed even when the data does not match the config's fingerprint.
    #[arg(long)]
    allow_fingerprint_mismatch: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Directory holding test.txt (defaults to --out).
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Checkpoint to score (defaults to <out>/checkpoint.ckpt).
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    /// Proceed even when checkpoint and data fingerprints differ.
    #[arg(long)]
    allow_fingerprint_mismatch: bool,
    /// Also print a few sampled continuations at this temperature
    /// (inspection only; metrics always use greedy decoding).
    #[arg(long, value_name = "T")]
    temperature: Option<f64>,
    /// Cap the number of test instances scored.
    #[arg(long, value_name = "N")]
    n_eval: Option<usize>,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories to aggregate (each needs manifest.json + report.json).
    #[arg(value_name = "RUN_DIR", required = true)]
    runs: Vec<PathBuf>,
    /// Where to write summary.csv and per_token.csv.
    #[arg(long, value_name = "DIR", default_value = "reports")]
    out: PathBuf,
}

fn run(cli: Cli) -> pathstar::error::Result<()> {
    match cli.command {
        Command::Generate(args) => commands::cmd_generate(&args.config.resolve()?),
        Command::Train(args) => commands::cmd_train(
            &args.config.resolve()?,
            &commands::TrainFlags {
                data: args.data,
                resume: args.resume,
                dump_first_batch: args.dump_first_batch,
                allow_fingerprint_mismatch: args.allow_fingerprint_mismatch,
            },
        ),
        Command::Eval(args) => commands::cmd_eval(
            &args.config.resolve()?,
            &commands::EvalFlags {
                data: args.data,
                checkpoint: args.checkpoint,
                allow_fingerprint_mismatch: args.allow_fingerprint_mismatch,
                temperature: args.temperature,
                n_eval: args.n_eval,
            },
        ),
        Command::Report(args) => commands::cmd_report(&args.runs, &args.out),
    }
}

/// Stable machine-readable code for each failure class.
fn error_code(e: &Error) -> &'static str {
    match e {
        Error::FingerprintMismatch { .. } => "fingerprint_mismatch",
        Error::Diverged { .. } => "diverged",
        Error::Io(_) => "io",
        Error::Parse { .. } => "parse",
        Error::Config(_) => "config",
        Error::Integrity(_) => "integrity",
        Error::DedupSaturated { .. } => "dedup_saturated",
        _ => "error",
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        let line = serde_json::json!({
            "error": error_code(&e),
            "message": e.to_string(),
        });
        eprintln!("{line}");
        std::process::exit(1);
    }
}
