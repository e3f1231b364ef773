//! The `all` subcommand: one declarative config document driving the whole
//! pipeline. Flags override the config; the config overrides built-in
//! defaults. Relative paths resolve against the config file's directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use refexp_core::assembly::{bucketize, compute_stats, mix, write_shards, MixtureSpec, WriteOptions};
use refexp_core::attribute::{ApplicabilityMap, RejectionLexicon};
use refexp_core::ingest::{write_rejects, CategoryMap, ExclusionList};
use refexp_core::pipeline::{
    annotate_scenes, group_scenes, prepare_source, relation_stage, AnnotatePasses, PrepOptions,
};
use refexp_core::relation::RelationConfig;
use refexp_core::types::GroundingRecord;
use refexp_core::vlm::{BatchOptions, HttpVlm, MockVlm, RetryPolicy, VlmBackend};
use refexp_core::PipelineConfig;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::stages::{ensure_mixable, log_run};
use crate::AllArgs;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    pipeline: PipelineConfig,
    vlm: VlmConfig,
    #[serde(default)]
    sources: Vec<SourceConfig>,
    #[serde(default)]
    attributes: AttributeConfig,
    #[serde(default)]
    relations: RelationsConfig,
    mix: MixConfig,
    #[serde(default)]
    output: OutputConfig,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct VlmConfig {
    backend: String,
    #[serde(default)]
    fixtures: Option<PathBuf>,
    #[serde(default)]
    base_url: Option<String>,
    #[serde(default = "default_timeout_ms")]
    timeout_ms: u64,
    #[serde(default = "default_max_retries")]
    max_retries: u32,
    #[serde(default = "default_max_in_flight")]
    max_in_flight: usize,
}

fn default_timeout_ms() -> u64 {
    10_000
}

fn default_max_retries() -> u32 {
    3
}

fn default_max_in_flight() -> usize {
    8
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SourceConfig {
    name: String,
    annotations: PathBuf,
    image_root: PathBuf,
    #[serde(default)]
    exclusion: Option<PathBuf>,
    #[serde(default)]
    category_map: Option<PathBuf>,
    /// Per-source override of the small-object threshold.
    #[serde(default)]
    min_area_ratio: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct AttributeConfig {
    #[serde(default)]
    applicability: Option<PathBuf>,
    #[serde(default)]
    lexicon: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RelationsConfig {
    #[serde(default)]
    phrase_sample: Option<usize>,
    #[serde(default)]
    far_extremes: Option<bool>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct MixConfig {
    #[serde(default = "default_ratio")]
    ratio: String,
    n_out: usize,
    #[serde(default = "default_shard_size")]
    shard_size: usize,
    #[serde(default = "default_overflow")]
    overflow_bucket: String,
}

fn default_ratio() -> String {
    "1:1:1:1".to_string()
}

fn default_shard_size() -> usize {
    1000
}

fn default_overflow() -> String {
    "overflow".to_string()
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct OutputConfig {
    #[serde(default)]
    dir: Option<PathBuf>,
}

fn resolve(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

pub(crate) fn run_all(args: AllArgs, cli_seed: u64) -> Result<()> {
    let raw = fs::read_to_string(&args.config)
        .with_context(|| format!("read config {}", args.config.display()))?;
    let run: RunConfig = toml::from_str(&raw)
        .with_context(|| format!("parse config {}", args.config.display()))?;
    let base = args
        .config
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();

    let mut cfg = run.pipeline.clone();
    // Flag > config > default, and the config's own seed field wins over
    // the [pipeline] table for readability.
    cfg.rng_seed = if cli_seed != 0 {
        cli_seed
    } else {
        run.seed.unwrap_or(cfg.rng_seed)
    };
    cfg.validate()?;
    log_run(&cfg);

    let out_dir = match (&args.out, &run.output.dir) {
        (Some(dir), _) => dir.clone(),
        (None, Some(dir)) => resolve(&base, dir),
        (None, None) => bail!("no output directory: set [output].dir or pass --out"),
    };
    fs::create_dir_all(&out_dir)
        .with_context(|| format!("create output dir {}", out_dir.display()))?;

    if run.sources.is_empty() {
        bail!("config lists no [[sources]]");
    }

    let backend: Box<dyn VlmBackend> = match run.vlm.backend.as_str() {
        "mock" => {
            let fixtures = run
                .vlm
                .fixtures
                .as_ref()
                .context("[vlm] backend = \"mock\" requires fixtures")?;
            Box::new(MockVlm::from_path(&resolve(&base, fixtures))?)
        }
        "http" => {
            let url = run
                .vlm
                .base_url
                .as_ref()
                .context("[vlm] backend = \"http\" requires base_url")?;
            Box::new(HttpVlm::new(
                url.clone(),
                Duration::from_millis(run.vlm.timeout_ms),
            ))
        }
        other => bail!("unknown [vlm] backend {other:?} (expected \"mock\" or \"http\")"),
    };
    let batch = BatchOptions {
        max_in_flight: run.vlm.max_in_flight.max(1),
        retry: RetryPolicy {
            max_retries: run.vlm.max_retries,
            ..RetryPolicy::default()
        },
    };

    let applicability = run
        .attributes
        .applicability
        .as_ref()
        .map(|p| ApplicabilityMap::from_path(&resolve(&base, p)))
        .transpose()?
        .unwrap_or_default();
    let lexicon = run
        .attributes
        .lexicon
        .as_ref()
        .map(|p| RejectionLexicon::from_path(&resolve(&base, p)))
        .transpose()?
        .unwrap_or_default();

    let mut rel_cfg = RelationConfig::from(&cfg);
    if let Some(far) = run.relations.far_extremes {
        rel_cfg.far_extreme_enabled = far;
    }

    let mut all_records: Vec<GroundingRecord> = Vec::new();
    let mut all_rejects = Vec::new();
    for source in &run.sources {
        let exclusion = source
            .exclusion
            .as_ref()
            .map(|p| ExclusionList::from_path(&resolve(&base, p)))
            .transpose()?;
        let category_map = source
            .category_map
            .as_ref()
            .map(|p| CategoryMap::from_path(&resolve(&base, p)))
            .transpose()?;
        let prep = prepare_source(
            &resolve(&base, &source.annotations),
            &source.name,
            &cfg,
            &PrepOptions {
                exclusion: exclusion.as_ref(),
                category_map: category_map.as_ref(),
                area_threshold_k: source.min_area_ratio,
            },
        )?;
        all_rejects.extend(prep.rejects);
        let scenes = group_scenes(&prep.images, &prep.objects)?;

        let annotated = annotate_scenes(
            &scenes,
            &resolve(&base, &source.image_root),
            backend.as_ref(),
            &cfg,
            &applicability,
            &lexicon,
            &batch,
            AnnotatePasses::all(),
        )?;
        all_rejects.extend(annotated.rejects);
        for (object_id, err) in &annotated.backend_failures {
            eprintln!("refexp-forge: backend failure for {object_id}: {err}");
        }

        let relations = relation_stage(&scenes, &cfg, &rel_cfg, run.relations.phrase_sample)?;

        eprintln!(
            "refexp-forge: source {}: {} caption / {} relation / {} attribute records",
            source.name,
            annotated.caption_records.len(),
            relations.len(),
            annotated.attribute_records.len()
        );
        all_records.extend(annotated.caption_records);
        all_records.extend(relations);
        all_records.extend(annotated.attribute_records);
    }

    let spec = MixtureSpec::parse_ratio(&run.mix.ratio)?;
    let outcome = bucketize(&all_records, &spec, &run.mix.overflow_bucket);
    for line in &outcome.overflow_log {
        eprintln!("refexp-forge: {line}");
    }
    ensure_mixable(&outcome.buckets, &spec)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mixed = mix(&outcome.buckets, &spec, run.mix.n_out, &mut rng)?;
    let manifest = write_shards(
        &mixed,
        &out_dir,
        &WriteOptions {
            shard_size: run.mix.shard_size,
            grouped: false,
            seed: cfg.rng_seed,
            config_hash: cfg.config_hash(),
        },
    )?;

    let stats = compute_stats(&mixed);
    fs::write(
        out_dir.join("stats.json"),
        serde_json::to_string_pretty(&stats)?.as_bytes(),
    )?;
    let rejects_file = fs::File::create(out_dir.join("rejects.jsonl"))?;
    write_rejects(std::io::BufWriter::new(rejects_file), &all_rejects)?;

    eprintln!(
        "refexp-forge: wrote {} lines across {} shards to {}",
        manifest.total,
        manifest.shards.len(),
        out_dir.display()
    );
    Ok(())
}
