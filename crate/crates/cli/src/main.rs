mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use config::{Config, ConfigError, CONFIG_ENV};

/// Anchor-token context compression: train, compress, generate, evaluate.
#[derive(Debug, Parser)]
#[command(name = "sac", version)]
struct Cli {
    /// TOML configuration; every field has a default.
    #[arg(long, global = true, env = CONFIG_ENV)]
    config: Option<PathBuf>,

    /// Print the effective configuration and exit.
    #[arg(long)]
    print_config: bool,

    /// Load checkpoints whose model config differs from the current one.
    #[arg(long, global = true)]
    force: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic corpus (LM text or QA JSONL).
    GenData(GenData),
    /// Train and freeze the decoder.
    TrainBase(TrainOut),
    /// Pretrain a compressor against a frozen decoder.
    Pretrain(Pretrain),
    /// Finetune a pretrained compressor on QA.
    Finetune(Finetune),
    /// Compress a text file into a KV blob.
    Compress(Compress),
    /// Greedy answer conditioned on a KV blob.
    Generate(Generate),
    /// F1/EM (and optionally perplexity) over checkpoints and ratios.
    Eval(Eval),
    /// Attention or KV vectors for external analysis.
    Dump(Dump),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DataKind {
    Lm,
    Qa,
}

#[derive(Debug, Args)]
pub struct GenData {
    #[arg(long, value_enum)]
    kind: DataKind,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    n: usize,
    /// Facts per QA context.
    #[arg(long)]
    facts: Option<usize>,
    /// Held-out keys, values, and template.
    #[arg(long)]
    ood: bool,
    /// Defaults to a sub-seed of the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainOut {
    #[arg(long)]
    out: PathBuf,
    /// Loss trace CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Pretrain {
    /// Base checkpoint.
    #[arg(long)]
    from: PathBuf,
    #[command(flatten)]
    out: TrainOut,
    /// Permit non-default objective sets.
    #[arg(long)]
    allow_ablation: bool,
}

#[derive(Debug, Args)]
pub struct Finetune {
    /// Pretrained compressor checkpoint.
    #[arg(long)]
    from: PathBuf,
    #[command(flatten)]
    out: TrainOut,
}

#[derive(Debug, Args)]
pub struct Compress {
    #[arg(long)]
    from: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the trained ratio.
    #[arg(long)]
    ratio: Option<usize>,
    /// Per-token importance scores, one per line, for scored selection.
    #[arg(long)]
    scores: Option<PathBuf>,
    /// Store the decoder's uncompressed KV instead.
    #[arg(long)]
    full: bool,
}

#[derive(Debug, Args)]
pub struct Generate {
    #[arg(long)]
    from: PathBuf,
    #[arg(long)]
    blob: PathBuf,
    /// Empty continues from the prefix alone.
    #[arg(long, default_value = "")]
    question: String,
    #[arg(long, default_value_t = 16)]
    max_new: usize,
}

#[derive(Debug, Args)]
pub struct Eval {
    /// Compressor checkpoints; one row per checkpoint and ratio.
    #[arg(long = "from", required = true)]
    from: Vec<PathBuf>,
    /// Ratios to evaluate; defaults to each checkpoint's own.
    #[arg(long, value_delimiter = ',')]
    ratios: Vec<usize>,
    /// Add an uncompressed row.
    #[arg(long)]
    full: bool,
    /// QA JSONL; defaults to the configured eval set.
    #[arg(long)]
    records: Option<PathBuf>,
    /// Documents for perplexity, one per line.
    #[arg(long)]
    docs: Option<PathBuf>,
    /// Report CSV.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-record predictions as JSONL.
    #[arg(long)]
    predictions: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DumpKind {
    Attention,
    Keys,
    Values,
}

#[derive(Debug, Args)]
pub struct Dump {
    #[arg(value_enum)]
    kind: DumpKind,
    #[arg(long)]
    from: PathBuf,
    /// Attention: the whole file is one context. Keys/values: one per line.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = Config::load(cli.config.as_deref())?;
    if cli.print_config {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err(ConfigError("no subcommand given (see --help)".into()).into());
    };
    let ctx = commands::Ctx { cfg, force: cli.force };
    match command {
        Command::GenData(a) => commands::gen_data(&ctx, &a),
        Command::TrainBase(a) => commands::train_base(&ctx, &a),
        Command::Pretrain(a) => commands::pretrain(&ctx, &a),
        Command::Finetune(a) => commands::finetune(&ctx, &a),
        Command::Compress(a) => commands::compress(&ctx, &a),
        Command::Generate(a) => commands::generate(&ctx, &a),
        Command::Eval(a) => commands::eval(&ctx, &a),
        Command::Dump(a) => commands::dump(&ctx, &a),
    }
}

/// 0 success, 2 configuration or usage, 3 numerical abort, 1 internal.
fn exit_code(e: &anyhow::Error) -> u8 {
    use sac_core::Error as E;
    match e.downcast_ref::<E>() {
        Some(err) if err.is_numerical() => 3,
        Some(E::Contract(_) | E::Dimension(_) | E::Index(_) | E::Ordering(_) | E::EmptyLoss) => 1,
        _ => 2,
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
