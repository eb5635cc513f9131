use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use wac_core::eval::ReportFormat;
use wac_core::features::FeatureMask;
use wac_core::corpus::SplitRatios;
use wac_core::Split;

mod commands;
mod config;
mod inspect;

use config::NrMode;

/// Words-as-classifiers: train per-word region classifiers and resolve
/// referring expressions with them.
#[derive(Debug, Parser)]
#[command(name = "wac", version)]
pub struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed for every random choice (sub-seeds are derived from it).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads; defaults to the available parallelism.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Default)]
pub struct DataArgs {
    /// Directory with images.jsonl, regions.jsonl, expressions.jsonl,
    /// optional proposals.jsonl and features.json.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long)]
    regions: Option<PathBuf>,
    #[arg(long)]
    expressions: Option<PathBuf>,
    /// Feature manifest.
    #[arg(long)]
    features: Option<PathBuf>,
    /// Assign splits by image as "train,val,test" (e.g. 0.9,0,0.1),
    /// replacing any tags in the files.
    #[arg(long)]
    split_ratios: Option<SplitRatios>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus with feature table and gold latents.
    Synth(SynthArgs),
    /// Train one classifier per vocabulary word.
    Train(TrainArgs),
    /// Score a model on gold regions or proposals.
    Evaluate(EvalArgs),
    /// Evaluate a reduced model (same as `evaluate --ablate`).
    Ablate {
        /// pos, visual or top:K
        variant: String,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Rank the candidates of one image for an expression.
    Resolve(ResolveArgs),
    /// Show what a word's classifier has learned.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Total scenes; the last `--test-fraction` of them are test scenes.
    #[arg(long)]
    scenes: Option<usize>,
    #[arg(long)]
    test_fraction: Option<f64>,
    /// Candidates per scene.
    #[arg(long)]
    k: Option<usize>,
    /// Visual block dimension.
    #[arg(long)]
    dim: Option<usize>,
    /// Visual noise standard deviation.
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    exprs_per_scene: Option<usize>,
    /// Proposal boxes per scene; 0 disables proposals.
    #[arg(long)]
    proposals: Option<usize>,
    /// Expression template such as "color type"; repeatable.
    #[arg(long = "template")]
    templates: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Output model manifest; weights go next to it.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Training log (default: <model stem>.log.json).
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    min_count: Option<usize>,
    #[arg(long)]
    neg_per_pos: Option<usize>,
    /// L1 penalty strength.
    #[arg(long)]
    l1: Option<f64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    /// full, visual or positional.
    #[arg(long)]
    mask: Option<FeatureMask>,
    /// Drop relational expressions from training.
    #[arg(long, value_enum)]
    filter_relational: Option<Switch>,
    /// Threshold words on counts taken before relational filtering.
    #[arg(long)]
    count_before_filter: bool,
    /// Never draw negatives from an image holding a positive.
    #[arg(long)]
    exclude_same_image: bool,
    /// Z-score features with statistics from the training split.
    #[arg(long)]
    standardize: bool,
    /// Fail if any word could not be trained.
    #[arg(long)]
    strict: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    split: Option<Split>,
    /// Evaluate without relational expressions (on), with them (off) or both.
    #[arg(long, value_enum)]
    nr: Option<NrMode>,
    /// Proposal file; switches to proposal-based evaluation.
    #[arg(long)]
    proposals: Option<PathBuf>,
    #[arg(long)]
    iou_thresh: Option<f64>,
    /// Relaxed proposal success: any of the top K overlaps the gold box.
    #[arg(long)]
    topk: Option<usize>,
    /// pos, visual or top:K
    #[arg(long)]
    ablate: Option<String>,
    /// Write the reports to this file as well as stdout.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, default_value = "json")]
    format: ReportFormat,
    /// Leave abstained expressions out of the MRR denominator.
    #[arg(long)]
    mrr_exclude_abstained: bool,
    /// Add the random and largest-region baselines.
    #[arg(long)]
    baselines: bool,
    /// Add accuracy by expression length.
    #[arg(long)]
    by_length: bool,
    /// Add per-word average precision on the split.
    #[arg(long)]
    ap: bool,
}

#[derive(Debug, Args)]
pub struct ResolveArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    image: String,
    /// The referring expression.
    #[arg(long)]
    expr: String,
    /// Rank the image's proposals instead of its gold regions.
    #[arg(long)]
    use_proposals: bool,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    word: String,
    /// Weights to list on each side.
    #[arg(long, default_value_t = 5)]
    top: usize,
    /// Corpus and features for average precision on `--ap-split`.
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "val")]
    ap_split: Split,
    /// Print the card as JSON.
    #[arg(long)]
    json: bool,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = config::RunConfig::load_or_default(cli.config.as_deref())?;
    cfg.apply_seed(cli.seed);
    let jobs = cli.jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if jobs == 0 {
        anyhow::bail!("--jobs must be at least 1");
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build()?;
    pool.install(|| match cli.command {
        Command::Synth(args) => commands::synth(cfg, args),
        Command::Train(args) => commands::train(cfg, args),
        Command::Evaluate(args) => commands::evaluate(cfg, args),
        Command::Ablate { variant, mut eval } => {
            eval.ablate = Some(variant);
            commands::evaluate(cfg, eval)
        }
        Command::Resolve(args) => commands::resolve(cfg, args),
        Command::Inspect(args) => inspect::run(cfg, args),
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("WAC_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
