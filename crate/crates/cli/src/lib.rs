//! `intent`: one binary over the experiment pipeline. Every command reads the
//! same versioned TOML config; `--seed` overrides the config seed.
//!
//! Exit codes: 0 success, 1 usage error, 2 configuration error, 3 data error.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
pub mod reports;

pub use reports::{EvalMetrics, SweepReport};

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "intent", version, about = "Intent recognition experiments")]
pub struct Cli {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random choice; overrides the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write logs and checkpoints.
    Train(TrainArgs),
    /// Per-class and grouped F1 of a checkpoint.
    Eval(EvalArgs),
    /// F1 per class as object or context pixels are removed.
    StudyDisruption(StudyArgs),
    /// Content and difficulty group per class.
    GroupClasses(GroupArgs),
    /// Hashtag features for images from their nearest posts.
    HashtagBuild(HashtagArgs),
    /// Hashtag-only F1 as a function of the neighbour count.
    KnnSweep(SweepArgs),
    /// Fleiss' kappa from a ratings CSV.
    Kappa(KappaArgs),
    /// Render an SVG chart from a result file.
    Plot(PlotArgs),
    /// Print the annotated default config.
    DefaultConfig,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Validation manifest for model selection; the training set otherwise.
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Metrics JSON.
    #[arg(long)]
    pub out: PathBuf,
    /// Group table from `group-classes`, for grouped F1.
    #[arg(long)]
    pub groups: Option<PathBuf>,
    /// Also write per-class random/model scores for `group-classes`.
    #[arg(long)]
    pub class_scores: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TargetArg {
    Object,
    Context,
}

#[derive(Debug, Args)]
pub struct StudyArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, value_enum)]
    pub target: TargetArg,
    /// Fine-tune a copy of the checkpoint on this training set, disrupted
    /// at the same level, before evaluating each level.
    #[arg(long)]
    pub fine_tune_on: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GroupArgs {
    /// Object study, then context study.
    #[arg(long, num_args = 2, value_names = ["OBJECT", "CONTEXT"])]
    pub studies: Vec<PathBuf>,
    /// Class scores from `eval --class-scores`.
    #[arg(long)]
    pub f1: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct HashtagArgs {
    /// Database post features, `id v1 .. vd` per line.
    #[arg(long)]
    pub posts: PathBuf,
    /// Post hashtags, `id<TAB>tag,tag` per line.
    #[arg(long)]
    pub tags: PathBuf,
    /// Image features to build hashtag features for.
    #[arg(long)]
    pub images: PathBuf,
    /// Segmentation dictionary, `word [score]` per line.
    #[arg(long)]
    pub dict: PathBuf,
    /// Word vectors, `word v1 .. vd` per line.
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Directory receiving one `<image id>.json` per image.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("source").required(true).args(["synthetic", "corpus"])))]
pub struct SweepArgs {
    /// Use the seeded synthetic neighbour corpus.
    #[arg(long)]
    pub synthetic: bool,
    /// Corpus directory (dictionary.txt, embeddings.vec, posts.vec,
    /// posts.tags, queries.vec, queries.labels).
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Comma-separated neighbour counts.
    #[arg(long, value_delimiter = ',', default_values_t = intent_core::hashtags::SWEEP_KS.to_vec())]
    pub k: Vec<usize>,
    /// Receives sweep.json, sweep.tsv and sweep.svg.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the corpus that was swept (useful with --synthetic).
    #[arg(long)]
    pub dump_corpus: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct KappaArgs {
    /// CSV with item_id, rater_id, category and optional task_id columns.
    #[arg(long)]
    pub ratings: PathBuf,
    /// JSON report; printed only when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PlotKind {
    /// sweep.json from knn-sweep.
    Sweep,
    /// Disruption study JSON.
    Study,
    /// Class scores JSON.
    Scores,
    /// epochs.jsonl from train.
    Epochs,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[arg(long, value_enum)]
    pub kind: PlotKind,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Classes to draw next to the macro curve (study plots).
    #[arg(long, value_delimiter = ',')]
    pub classes: Vec<usize>,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => EXIT_USAGE,
            };
        }
    };
    match commands::dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &intent_core::Error) -> i32 {
    if e.is_config() {
        EXIT_CONFIG
    } else {
        EXIT_DATA
    }
}
