use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pii_lab::corpus::Split;
use pii_lab::tagger::PiiClass;

mod commands;

/// Measure PII leakage from language models with black-box probability access.
#[derive(Debug, Parser)]
#[command(name = "pii-lab", version)]
struct Cli {
    /// Worker threads. Defaults to the available parallelism; 1 runs serially.
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus with planted PII.
    Generate(GenerateArgs),
    /// Train an n-gram model on the train split of a corpus.
    Train(TrainArgs),
    /// Mask every tagged PII span of a corpus.
    Scrub(ScrubArgs),
    /// Run a single adversary against a model.
    #[command(subcommand)]
    Attack(AttackCommand),
    /// Play a leakage game and write its report.
    Game(GameArgs),
    /// Summarise one or more game reports.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct GenerateArgs {
    /// Corpus specification (JSON). Defaults to the built-in benchmark.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Override the number of documents.
    #[arg(long)]
    documents: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// `text` (one document per line) or `jsonl`; guessed from the extension.
    #[arg(long)]
    format: Option<String>,
    /// n-gram order.
    #[arg(short, long, default_value_t = 3)]
    n: usize,
    /// Add-λ smoothing constant.
    #[arg(long, default_value_t = 0.1)]
    lambda: f64,
    /// Train on every document instead of the train split.
    #[arg(long)]
    all: bool,
    /// Seed for assigning splits to records that carry none.
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ScrubArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    format: Option<String>,
    /// Tagger configuration (JSON), e.g. the `tagger.json` written by `generate`.
    #[arg(long)]
    tagger: PathBuf,
    /// full_mask, entity_tag or pseudonym.
    #[arg(long, default_value = "full_mask")]
    style: String,
    /// Salt for pseudonym masking.
    #[arg(long)]
    salt: Option<String>,
    /// Include the masked surfaces in the output.
    #[arg(long)]
    with_ground_truth: bool,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    /// Output JSON-lines file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// Model file or `http://` endpoint of a model bridge.
    #[arg(long, env = "PII_LAB_BRIDGE_URL")]
    model: String,
    /// Truncate remote distributions to the top m tokens.
    #[arg(long)]
    top_m: Option<usize>,
    /// Tagger configuration (JSON).
    #[arg(long)]
    tagger: PathBuf,
    /// PII class under attack.
    #[arg(long, default_value = "person")]
    class: PiiClass,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 40)]
    top_k: usize,
    /// Output JSON file; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum AttackCommand {
    /// Sample from the model and rank the tagged PII.
    Extract(ExtractArgs),
    /// Reconstruct masked PII from sampled candidates (or given ones).
    Reconstruct(ReconstructArgs),
    /// Pick the masked PII among given candidates.
    Infer(ReconstructArgs),
    /// Greedy decoding from the prefix only.
    Tab(ReconstructArgs),
}

#[derive(Debug, Args)]
struct ExtractArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 2000)]
    samples: usize,
    #[arg(long, default_value_t = 256)]
    max_tokens: usize,
    /// Number of PII to report. Defaults to the number of distinct PII in
    /// the train split of `--corpus`.
    #[arg(long)]
    budget: Option<usize>,
    /// Training corpus, used for the budget and for precision/recall.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    format: Option<String>,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
}

#[derive(Debug, Args)]
struct ReconstructArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Corpus whose documents are masked into queries.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    format: Option<String>,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    /// Split to draw queries from.
    #[arg(long, default_value = "train")]
    split: Split,
    /// Maximum number of queries.
    #[arg(long, default_value_t = 200)]
    limit: usize,
    /// Candidate surfaces, one per line; switches reconstruction to inference.
    #[arg(long)]
    candidates: Option<PathBuf>,
    /// Sampled candidates per query.
    #[arg(long, default_value_t = 64)]
    samples: usize,
    #[arg(long, default_value_t = 64)]
    max_tokens: usize,
    /// Tokens decoded by the TAB baseline.
    #[arg(long, default_value_t = 10)]
    tab_tokens: usize,
    /// Mask-fill endpoint; the attacked model fills masks when absent.
    #[arg(long)]
    filler: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum GameName {
    Extraction,
    Reconstruction,
    Inference,
    Mi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PublicArg {
    Disjoint,
    Target,
}

#[derive(Debug, Args)]
struct GameArgs {
    game: GameName,
    /// Game configuration (JSON). Flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of documents drawn from the data distribution.
    #[arg(short, long)]
    n: Option<usize>,
    #[arg(long)]
    trials: Option<usize>,
    /// Decoys per inference trial.
    #[arg(short, long)]
    m: Option<usize>,
    #[arg(long)]
    shadows: Option<usize>,
    /// Memorization buckets for the mi game.
    #[arg(long)]
    buckets: Option<usize>,
    /// Filter baseline leakage using this public model.
    #[arg(long)]
    baseline: Option<PublicArg>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[arg(required = true)]
    reports: Vec<PathBuf>,
    /// Also write one CSV row of metrics per report.
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(w) = cli.workers {
        if w == 0 {
            eprintln!("error: --workers must be >= 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(w).build_global() {
            eprintln!("error: cannot start worker pool: {e}");
            return ExitCode::from(1);
        }
    }
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 1 })
        }
    }
}
