mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use usda::analysis::GateConvention;
use usda::pretrain::ThresholdDirection;
use usda::synthetic::Rule;
use usda::TrainMode;

#[derive(Debug, Parser)]
#[command(
    name = "usda",
    version,
    about = "Joint user satisfaction estimation and dialogue act recognition"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// Seed for every random choice; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (defaults to the number of CPUs).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Directory that relative data paths are resolved against.
    #[arg(long, global = true, env = "USDA_DATA_DIR")]
    data_dir: Option<PathBuf>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic labelled corpus.
    GenSynthetic(GenSyntheticArgs),
    /// Build SRS/DID pre-training samples from a corpus.
    GenPretrain(GenPretrainArgs),
    /// Pre-train the encoder on SRS/DID samples.
    Pretrain(PretrainArgs),
    /// Train a joint model.
    Train(TrainArgs),
    /// Evaluate a trained model.
    Eval(EvalArgs),
    /// Post-hoc analyses.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
}

#[derive(Debug, Args)]
struct GenSyntheticArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 500)]
    size: usize,
    #[arg(long, default_value = "repeat-da-dissatisfied", value_parser = parse_rule)]
    rule: Rule,
    /// Probability that a user word comes from the act's signature words.
    #[arg(long)]
    signal: Option<f64>,
    #[arg(long)]
    min_turns: Option<usize>,
    #[arg(long)]
    max_turns: Option<usize>,
}

#[derive(Debug, Args)]
struct SplitArgs {
    /// Which split to use: train, valid, test or all.
    #[arg(long, default_value = "test")]
    split: String,
    /// Split assignment file (defaults to split.json beside the checkpoint).
    #[arg(long)]
    split_file: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GenPretrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated subset of srs,did.
    #[arg(long, default_value = "srs,did")]
    tasks: String,
    #[arg(long, default_value_t = 1.0)]
    neg_ratio: f64,
    /// Normalised retrieval-score threshold for confounders.
    #[arg(long, default_value_t = 0.7)]
    threshold: f64,
    #[arg(long, default_value_t = 0.0)]
    sim_min: f64,
    #[arg(long, default_value = "below", value_parser = parse_direction)]
    threshold_direction: ThresholdDirection,
    /// Restrict to one split of the corpus (needs --split-file).
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    split_file: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PretrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Pre-training sample file.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Held-out sample file.
    #[arg(long)]
    valid: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long, value_parser = parse_mode)]
    mode: Option<TrainMode>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Pre-trained checkpoint whose encoder initialises the model.
    #[arg(long)]
    init_from: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    split: SplitArgs,
    /// Machine-readable metrics file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-dialogue fusion traces for `analyze`.
    #[arg(long)]
    traces: Option<PathBuf>,
    /// Group label stored in every trace.
    #[arg(long, default_value = "")]
    tag: String,
}

#[derive(Debug, Subcommand)]
enum AnalyzeCommand {
    /// Impact scores of predicted dialogue-act sub-sequences.
    Impact(ImpactArgs),
    /// Gate statistics and histograms per trace tag.
    Gates(GatesArgs),
    /// Per-class metrics from traces.
    PerClass(PerClassArgs),
    /// Satisfaction F1 against the number of dialogue turns kept.
    Turns(TurnsArgs),
    /// Most frequent words per cluster.
    Clusters(ClustersArgs),
}

#[derive(Debug, Args)]
struct ImpactArgs {
    #[arg(long)]
    traces: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Satisfaction class (0 dissatisfied, 1 neutral, 2 satisfied).
    #[arg(long)]
    class: usize,
    /// Score one comma-separated act sequence instead of ranking.
    #[arg(long)]
    query: Option<String>,
    #[arg(long, default_value_t = 3)]
    max_len: usize,
    #[arg(long, default_value_t = 5)]
    top_n: usize,
    #[arg(long, default_value_t = 5)]
    min_support: usize,
    #[arg(long, default_value = "one-minus-gate", value_parser = parse_convention)]
    gate_convention: GateConvention,
}

#[derive(Debug, Args)]
struct GatesArgs {
    #[arg(long)]
    traces: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    bins: usize,
    #[arg(long, default_value = "one-minus-gate", value_parser = parse_convention)]
    gate_convention: GateConvention,
}

#[derive(Debug, Args)]
struct PerClassArgs {
    #[arg(long)]
    traces: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Number of dialogue acts, for act-level metrics.
    #[arg(long)]
    num_da: Option<usize>,
}

#[derive(Debug, Args)]
struct TurnsArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    split: SplitArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    max_turns: usize,
}

#[derive(Debug, Args)]
struct ClustersArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    split: SplitArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    top: usize,
}

fn parse_rule(s: &str) -> Result<Rule, String> {
    s.parse().map_err(|e: usda::Error| e.to_string())
}

fn parse_mode(s: &str) -> Result<TrainMode, String> {
    s.parse().map_err(|e: usda::Error| e.to_string())
}

fn parse_direction(s: &str) -> Result<ThresholdDirection, String> {
    s.parse().map_err(|e: usda::Error| e.to_string())
}

fn parse_convention(s: &str) -> Result<GateConvention, String> {
    s.parse().map_err(|e: usda::Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.global.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = format!("{e:#}").replace('\n', " ");
            eprintln!("usda: error: {message}");
            ExitCode::from(1)
        }
    }
}
