//! Individual stage implementations behind the subcommands.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;
use std::time::Duration;

use anyhow::{bail, Context, Result};

use refexp_core::assembly::{
    bucketize, compute_stats, mix, write_shards, MixtureSpec, WriteOptions,
};
use refexp_core::attribute::{ApplicabilityMap, RejectionLexicon};
use refexp_core::ingest::{write_rejects, CategoryMap, ExclusionList, Reject};
use refexp_core::metrics::{
    load_predictions, load_rec_gt, load_res_gt, rec_accuracy_with, res_scores, IouRule,
    ScoreReport,
};
use refexp_core::pipeline::{
    annotate_scenes, group_scenes, prepare_source, relation_stage, AnnotatePasses, ObjectRow,
    PrepOptions, Scene,
};
use refexp_core::relation::{template_table, RelationConfig};
use refexp_core::types::{GroundingRecord, ImageRecord};
use refexp_core::util::{read_jsonl, write_jsonl};
use refexp_core::vlm::{BatchOptions, HttpVlm, MockVlm, RetryPolicy, VlmBackend};
use refexp_core::PipelineConfig;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{
    AttributeArgs, BackendKind, CaptionArgs, EvalArgs, EvalTask, ExportTemplatesArgs, IngestArgs,
    MixArgs, RelateArgs, StatsArgs, VlmArgs,
};

/// Every run logs its effective config hash and seed for reproducibility.
pub(crate) fn log_run(cfg: &PipelineConfig) {
    eprintln!(
        "refexp-forge: config_hash={} seed={}",
        cfg.config_hash(),
        cfg.rng_seed
    );
}

pub(crate) fn build_backend(args: &VlmArgs) -> Result<Box<dyn VlmBackend>> {
    match args.backend {
        BackendKind::Mock => {
            let path = args
                .fixtures
                .as_ref()
                .context("--backend mock requires --fixtures")?;
            Ok(Box::new(MockVlm::from_path(path)?))
        }
        BackendKind::Http => {
            let url = args
                .base_url
                .as_ref()
                .context("--backend http requires --base-url or REFEXP_VLM_URL")?;
            Ok(Box::new(HttpVlm::new(
                url.clone(),
                Duration::from_millis(args.timeout_ms),
            )))
        }
    }
}

pub(crate) fn batch_options(args: &VlmArgs) -> BatchOptions {
    BatchOptions {
        max_in_flight: args.max_in_flight.max(1),
        retry: RetryPolicy {
            max_retries: args.max_retries,
            ..RetryPolicy::default()
        },
    }
}

fn write_rejects_file(path: Option<&Path>, rejects: &[Reject]) -> Result<()> {
    let Some(path) = path else {
        if !rejects.is_empty() {
            eprintln!("refexp-forge: {} annotations dropped (no --rejects file)", rejects.len());
        }
        return Ok(());
    };
    let file = File::create(path).with_context(|| format!("create {}", path.display()))?;
    write_rejects(BufWriter::new(file), rejects)?;
    Ok(())
}

fn load_scenes(objects: &Path, images: &Path) -> Result<Vec<Scene>> {
    let rows: Vec<ObjectRow> = read_jsonl(objects)?;
    let imgs: Vec<ImageRecord> = read_jsonl(images)?;
    Ok(group_scenes(&imgs, &rows)?)
}

pub(crate) fn run_ingest(args: IngestArgs, seed: u64) -> Result<()> {
    let cfg = PipelineConfig {
        area_threshold_k: args.min_area_ratio,
        det_confidence_min: Some(args.min_conf),
        rng_seed: seed,
        ..Default::default()
    };
    cfg.validate()?;
    log_run(&cfg);

    let exclusion = args
        .exclude
        .as_deref()
        .map(ExclusionList::from_path)
        .transpose()?;
    let category_map = args
        .category_map
        .as_deref()
        .map(CategoryMap::from_path)
        .transpose()?;
    let out = prepare_source(
        &args.annotations,
        &args.source,
        &cfg,
        &PrepOptions {
            exclusion: exclusion.as_ref(),
            category_map: category_map.as_ref(),
            area_threshold_k: None,
        },
    )?;

    write_jsonl(&args.out_objects, &out.objects)?;
    write_jsonl(&args.out_images, &out.images)?;
    if let Some(path) = &args.out_categories {
        write_jsonl(path, &out.categories)?;
    }
    write_rejects_file(args.rejects.as_deref(), &out.rejects)?;
    eprintln!(
        "refexp-forge: ingest kept {} objects across {} images ({} rejects)",
        out.objects.len(),
        out.images.len(),
        out.rejects.len()
    );
    Ok(())
}

pub(crate) fn run_caption(args: CaptionArgs, seed: u64) -> Result<()> {
    let cfg = PipelineConfig {
        caption_top_k: args.top_k,
        rng_seed: seed,
        ..Default::default()
    };
    cfg.validate()?;
    log_run(&cfg);

    let scenes = load_scenes(&args.input, &args.images)?;
    let backend = build_backend(&args.vlm)?;
    let outcome = annotate_scenes(
        &scenes,
        &args.image_root,
        backend.as_ref(),
        &cfg,
        &ApplicabilityMap::default(),
        &RejectionLexicon::default(),
        &batch_options(&args.vlm),
        AnnotatePasses::captions_only(),
    )?;
    write_jsonl(&args.out, &outcome.caption_records)?;
    write_rejects_file(args.rejects.as_deref(), &outcome.rejects)?;
    for (object_id, err) in &outcome.backend_failures {
        eprintln!("refexp-forge: caption backend failure for {object_id}: {err}");
    }
    eprintln!(
        "refexp-forge: captioned {} objects",
        outcome.caption_records.len()
    );
    Ok(())
}

pub(crate) fn run_relate(args: RelateArgs, seed: u64) -> Result<()> {
    let cfg = PipelineConfig {
        horiz_left_bound: args.horiz_left,
        horiz_right_bound: args.horiz_right,
        vert_top_bound: args.vert_top,
        vert_bottom_bound: args.vert_bottom,
        depth_enable_ratio: args.depth_enable,
        depth_behind_bound: args.depth_behind,
        depth_front_bound: args.depth_front,
        rng_seed: seed,
        ..Default::default()
    };
    cfg.validate()?;
    log_run(&cfg);

    let mut rel_cfg = RelationConfig::from(&cfg);
    rel_cfg.far_extreme_enabled = !args.no_far_extremes;

    let scenes = load_scenes(&args.input, &args.images)?;
    let records = relation_stage(&scenes, &cfg, &rel_cfg, args.sample)?;
    write_jsonl(&args.out, &records)?;
    eprintln!("refexp-forge: related {} objects", records.len());
    Ok(())
}

pub(crate) fn run_attribute(args: AttributeArgs, seed: u64) -> Result<()> {
    let cfg = PipelineConfig {
        attribute_top_k: args.top_k,
        rng_seed: seed,
        ..Default::default()
    };
    cfg.validate()?;
    log_run(&cfg);

    let map = args
        .applicability
        .as_deref()
        .map(ApplicabilityMap::from_path)
        .transpose()?
        .unwrap_or_default();
    let lexicon = args
        .lexicon
        .as_deref()
        .map(RejectionLexicon::from_path)
        .transpose()?
        .unwrap_or_default();

    let scenes = load_scenes(&args.input, &args.images)?;
    let backend = build_backend(&args.vlm)?;
    let outcome = annotate_scenes(
        &scenes,
        &args.image_root,
        backend.as_ref(),
        &cfg,
        &map,
        &lexicon,
        &batch_options(&args.vlm),
        AnnotatePasses::attributes_only(),
    )?;
    write_jsonl(&args.out, &outcome.attribute_records)?;
    write_rejects_file(args.rejects.as_deref(), &outcome.rejects)?;
    for (object_id, err) in &outcome.backend_failures {
        eprintln!("refexp-forge: attribute backend failure for {object_id}: {err}");
    }
    eprintln!(
        "refexp-forge: attributed {} objects",
        outcome.attribute_records.len()
    );
    Ok(())
}

pub(crate) fn run_mix(args: MixArgs, seed: u64) -> Result<()> {
    let cfg = PipelineConfig {
        rng_seed: seed,
        ..Default::default()
    };
    log_run(&cfg);

    let mut records: Vec<GroundingRecord> = Vec::new();
    for path in &args.inputs {
        records.extend(read_jsonl::<GroundingRecord>(path)?);
    }
    let spec = MixtureSpec::parse_ratio(&args.ratio)?;
    let outcome = bucketize(&records, &spec, &args.overflow_bucket);
    for line in &outcome.overflow_log {
        eprintln!("refexp-forge: {line}");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mixed = mix(&outcome.buckets, &spec, args.n, &mut rng)?;
    let manifest = write_shards(
        &mixed,
        &args.out,
        &WriteOptions {
            shard_size: args.shard_size,
            grouped: args.grouped,
            seed,
            config_hash: cfg.config_hash(),
        },
    )?;
    eprintln!(
        "refexp-forge: wrote {} lines across {} shards to {}",
        manifest.total,
        manifest.shards.len(),
        args.out.display()
    );
    Ok(())
}

pub(crate) fn run_stats(args: StatsArgs) -> Result<()> {
    let mut records: Vec<GroundingRecord> = Vec::new();
    for path in &args.inputs {
        records.extend(read_jsonl::<GroundingRecord>(path)?);
    }
    let stats = compute_stats(&records);
    let json = serde_json::to_string_pretty(&stats)?;
    match &args.out {
        Some(path) => {
            std::fs::write(path, json.as_bytes())
                .with_context(|| format!("write {}", path.display()))?;
        }
        None => println!("{json}"),
    }
    Ok(())
}

pub(crate) fn run_eval(args: EvalArgs) -> Result<()> {
    let rule = if args.iou_geq {
        IouRule::Geq
    } else {
        IouRule::Strict
    };
    let preds = load_predictions(&args.pred)?;
    let report = match args.task {
        EvalTask::Rec => {
            let gts = load_rec_gt(&args.gt)?;
            let rec_acc = rec_accuracy_with(&preds, &gts, rule)?;
            ScoreReport {
                rec_acc: Some(rec_acc),
                oiou: None,
                miou: None,
                n_queries: gts.len(),
                iou_rule: rule,
            }
        }
        EvalTask::Res => {
            let gts = load_res_gt(&args.gt)?;
            let scores = res_scores(&preds, &gts)?;
            ScoreReport {
                rec_acc: None,
                oiou: Some(scores.oiou),
                miou: Some(scores.miou),
                n_queries: gts.len(),
                iou_rule: rule,
            }
        }
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

pub(crate) fn run_export_templates(args: ExportTemplatesArgs) -> Result<()> {
    let table = template_table();
    let json = serde_json::to_string_pretty(&table)?;
    match &args.out {
        Some(path) => std::fs::write(path, json.as_bytes())
            .with_context(|| format!("write {}", path.display()))?,
        None => println!("{json}"),
    }
    Ok(())
}

/// Shared by `mix` and `all`: fails fast when the ratio references buckets
/// the inputs cannot fill.
pub(crate) fn ensure_mixable(
    buckets: &std::collections::BTreeMap<String, Vec<GroundingRecord>>,
    spec: &MixtureSpec,
) -> Result<()> {
    for (id, _) in spec.weights() {
        if buckets.get(id).is_none_or(|b| b.is_empty()) {
            bail!("bucket {id} is empty; adjust --ratio or provide matching inputs");
        }
    }
    Ok(())
}
