//! `refexp-forge`: batch pipeline for synthesizing referring-expression
//! grounding data from detection annotations, plus REC/RES scoring.
//!
//! Stages communicate via line-delimited JSON files and compose with shell
//! tooling; the `all` subcommand chains them from a single config file.

mod runcfg;
mod stages;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "refexp-forge",
    version,
    about = "Synthesize referring-expression grounding data from detection annotations",
    long_about = "Synthesize referring-expression grounding data from detection annotations.\n\
                  Annotation sources are COCO-format JSON; image inputs are decoded with the\n\
                  png and jpeg codecs. Every run logs its config hash and seed to stderr."
)]
struct Cli {
    /// Worker threads for CPU-bound stages (default: logical CPU count).
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Seed for every random choice in the stage.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a detection annotation file and run the filter chain.
    Ingest(IngestArgs),
    /// Generate regional captions for object crops via the VLM backend.
    Caption(CaptionArgs),
    /// Derive spatial-relation expressions from box geometry.
    Relate(RelateArgs),
    /// Generate attribute-rich expressions via attribute prompts.
    Attribute(AttributeArgs),
    /// Bucket, sample by mixture ratio, and write sharded output.
    Mix(MixArgs),
    /// Summarize grounding-record files.
    Stats(StatsArgs),
    /// Score REC or RES predictions against ground truth.
    Eval(EvalArgs),
    /// Export the relation phrase-template table for audit.
    ExportTemplates(ExportTemplatesArgs),
    /// Run the whole pipeline from a config file.
    All(AllArgs),
}

#[derive(Args)]
struct IngestArgs {
    /// COCO-format annotation document.
    #[arg(long)]
    annotations: PathBuf,
    /// Source tag recorded on every record (e.g. coco, o365, web).
    #[arg(long)]
    source: String,
    /// Newline-delimited image ids to exclude (# comments allowed).
    #[arg(long)]
    exclude: Option<PathBuf>,
    /// Tab-separated source-name to COCO-80 class map; objects of unmapped
    /// categories are dropped.
    #[arg(long)]
    category_map: Option<PathBuf>,
    /// Minimum box-area / image-area ratio; smaller objects are dropped.
    #[arg(long, default_value_t = 0.05)]
    min_area_ratio: f64,
    /// Detector confidence floor (strict); boxes without a score always
    /// pass.
    #[arg(long, default_value_t = 0.8)]
    min_conf: f64,
    #[arg(long)]
    out_objects: PathBuf,
    #[arg(long)]
    out_images: PathBuf,
    #[arg(long)]
    out_categories: Option<PathBuf>,
    /// Line-delimited {annotation_id, reason} report of every drop.
    #[arg(long)]
    rejects: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct VlmArgs {
    /// Backend kind.
    #[arg(long, value_enum, default_value_t = BackendKind::Mock)]
    backend: BackendKind,
    /// Fixture file for the mock backend.
    #[arg(long)]
    fixtures: Option<PathBuf>,
    /// Base URL for the http backend (env: REFEXP_VLM_URL).
    #[arg(long, env = "REFEXP_VLM_URL")]
    base_url: Option<String>,
    /// Per-request timeout for the http backend.
    #[arg(long, default_value_t = 10_000)]
    timeout_ms: u64,
    /// Retry cap for retryable failures.
    #[arg(long, default_value_t = 3)]
    max_retries: u32,
    /// Maximum concurrent VLM requests.
    #[arg(long, default_value_t = 8)]
    max_in_flight: usize,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BackendKind {
    Mock,
    Http,
}

#[derive(Args)]
struct CaptionArgs {
    /// Object rows from the ingest stage.
    #[arg(long = "in")]
    input: PathBuf,
    /// Image records from the ingest stage.
    #[arg(long)]
    images: PathBuf,
    /// Directory the image file names resolve against.
    #[arg(long)]
    image_root: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Captions kept per object.
    #[arg(long, default_value_t = 5)]
    top_k: usize,
    #[arg(long)]
    rejects: Option<PathBuf>,
    #[command(flatten)]
    vlm: VlmArgs,
}

#[derive(Args)]
struct RelateArgs {
    /// Object rows from the ingest stage.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Keep only this many phrase renderings per relation tuple,
    /// seed-sampled; default keeps all.
    #[arg(long)]
    sample: Option<usize>,
    /// Disable the far-left/far-right labels.
    #[arg(long)]
    no_far_extremes: bool,
    #[arg(long, default_value_t = 0.25)]
    horiz_left: f64,
    #[arg(long, default_value_t = 0.75)]
    horiz_right: f64,
    #[arg(long, default_value_t = 0.25)]
    vert_top: f64,
    #[arg(long, default_value_t = 0.75)]
    vert_bottom: f64,
    #[arg(long, default_value_t = 0.4)]
    depth_enable: f64,
    #[arg(long, default_value_t = 0.4)]
    depth_behind: f64,
    #[arg(long, default_value_t = 0.8)]
    depth_front: f64,
}

#[derive(Args)]
struct AttributeArgs {
    /// Object rows from the ingest stage.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    image_root: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Answers kept per attribute.
    #[arg(long, default_value_t = 3)]
    top_k: usize,
    /// Applicability map data file (attribute<TAB>class,class,...).
    #[arg(long)]
    applicability: Option<PathBuf>,
    /// Rejection lexicon data file (one token per line).
    #[arg(long)]
    lexicon: Option<PathBuf>,
    #[arg(long)]
    rejects: Option<PathBuf>,
    #[command(flatten)]
    vlm: VlmArgs,
}

#[derive(Args)]
struct MixArgs {
    /// Grounding-record files to combine (repeatable).
    #[arg(long = "in", required = true, num_args = 1..)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Weights for coco_common:coco_attr:o365_common:o365_attr.
    #[arg(long, default_value = "1:1:1:1")]
    ratio: String,
    /// Records to draw (with replacement).
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 1000)]
    shard_size: usize,
    /// Write grouped records (all expressions per object) instead of one
    /// expression per line.
    #[arg(long)]
    grouped: bool,
    /// Bucket receiving records whose source has no mixture weight.
    #[arg(long, default_value = "overflow")]
    overflow_bucket: String,
}

#[derive(Args)]
struct StatsArgs {
    /// Grounding-record files to summarize (repeatable).
    #[arg(long = "in", required = true, num_args = 1..)]
    inputs: Vec<PathBuf>,
    /// Write the JSON summary here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EvalTask {
    Rec,
    Res,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, value_enum)]
    task: EvalTask,
    /// Line-delimited predictions {query_id, bbox?, rle?}.
    #[arg(long)]
    pred: PathBuf,
    /// Ground truth: assembly schema plus a query_id column.
    #[arg(long)]
    gt: PathBuf,
    /// Count IoU exactly 0.5 as correct (default is strictly greater).
    #[arg(long)]
    iou_geq: bool,
}

#[derive(Args)]
struct ExportTemplatesArgs {
    /// Write the template table here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AllArgs {
    /// Pipeline config (TOML); paths resolve against its directory.
    #[arg(long)]
    config: PathBuf,
    /// Output directory, overriding the config file.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    init_workers(cli.workers);
    match cli.command {
        Command::Ingest(args) => stages::run_ingest(args, cli.seed),
        Command::Caption(args) => stages::run_caption(args, cli.seed),
        Command::Relate(args) => stages::run_relate(args, cli.seed),
        Command::Attribute(args) => stages::run_attribute(args, cli.seed),
        Command::Mix(args) => stages::run_mix(args, cli.seed),
        Command::Stats(args) => stages::run_stats(args),
        Command::Eval(args) => stages::run_eval(args),
        Command::ExportTemplates(args) => stages::run_export_templates(args),
        Command::All(args) => runcfg::run_all(args, cli.seed),
    }
}

#[cfg(feature = "parallel")]
fn init_workers(workers: Option<usize>) {
    if let Some(n) = workers {
        // Ignore failure: the global pool may already exist in tests.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global();
    }
}

#[cfg(not(feature = "parallel"))]
fn init_workers(_workers: Option<usize>) {}
