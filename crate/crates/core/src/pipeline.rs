//! Stage orchestration: the ingest filter chain, per-image scene grouping,
//! and the batched caption/attribute annotation passes.
//!
//! Stages communicate through line-delimited files of [`ObjectRow`] /
//! [`ImageRecord`] / [`GroundingRecord`] values so partial pipelines compose
//! with shell tooling. CPU-bound work (cropping, relation math) fans out
//! over rayon under the `parallel` feature; VLM traffic is throttled solely
//! by the batch executor's in-flight bound.

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attribute::{
    attribute_requests, compose_attribute_expressions, tags_from_answers, ApplicabilityMap,
    RejectionLexicon,
};
use crate::caption::{caption_request, expressions_from_answers, crop_region, load_image, CaptionError};
use crate::config::PipelineConfig;
use crate::ingest::{
    apply_exclusion, filter_by_confidence, filter_small_objects, parse_detection_file,
    restrict_categories, CategoryMap, ExclusionList, IngestError, Reject, RejectReason,
};
use crate::relation::{RelationConfig, RelationError, RelationScene};
use crate::types::{
    image_index, Attribute, AttributeTag, Category, GroundingRecord, ImageRecord, ObjectInstance,
    TypeError,
};
use crate::util::derive_seed;
use crate::vlm::{query_batch, BatchOptions, VlmBackend, VlmRequest};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Relation(#[from] RelationError),
    #[error(transparent)]
    Type(#[from] TypeError),
    #[error(transparent)]
    Jsonl(#[from] crate::util::JsonlError),
    #[error(transparent)]
    Vlm(#[from] crate::vlm::VlmError),
    #[error("object {object_id} references unknown category {category_id}")]
    UnknownCategory { object_id: String, category_id: u64 },
    #[error("object {object_id} references image {image_id} missing from the stage input")]
    MissingImage {
        object_id: String,
        image_id: String,
    },
}

/// Stage-file form of an object: the instance plus its source tag and
/// denormalized category names, so downstream stages need no side lookups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectRow {
    #[serde(flatten)]
    pub object: ObjectInstance,
    pub source: String,
    pub category_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coco80_name: Option<String>,
}

impl ObjectRow {
    /// The noun used in generated phrases: the COCO-80 name when mapped,
    /// otherwise the raw category name.
    pub fn noun(&self) -> &str {
        self.coco80_name.as_deref().unwrap_or(&self.category_name)
    }

    pub fn category(&self) -> Category {
        Category {
            category_id: self.object.category_id,
            name: self.category_name.clone(),
            coco80_name: self.coco80_name.clone(),
        }
    }
}

/// One image and its retained objects, in input order.
#[derive(Debug, Clone)]
pub struct Scene {
    pub image: ImageRecord,
    pub objects: Vec<ObjectRow>,
}

/// Groups object rows under their images, preserving image order and
/// per-image object order. Objects whose image is absent are an error.
pub fn group_scenes(
    images: &[ImageRecord],
    objects: &[ObjectRow],
) -> Result<Vec<Scene>, PipelineError> {
    let mut index: HashMap<(String, String), usize> = HashMap::new();
    let mut scenes: Vec<Scene> = Vec::new();
    for image in images {
        index.insert(
            (image.source.clone(), image.image_id.clone()),
            scenes.len(),
        );
        scenes.push(Scene {
            image: image.clone(),
            objects: Vec::new(),
        });
    }
    for row in objects {
        let key = (row.source.clone(), row.object.image_id.clone());
        let Some(&idx) = index.get(&key) else {
            return Err(PipelineError::MissingImage {
                object_id: row.object.object_id.clone(),
                image_id: row.object.image_id.clone(),
            });
        };
        scenes[idx].objects.push(row.clone());
    }
    Ok(scenes)
}

/// Everything the ingest stage emits for one source.
#[derive(Debug, Default)]
pub struct PrepOutcome {
    pub images: Vec<ImageRecord>,
    pub categories: Vec<Category>,
    pub objects: Vec<ObjectRow>,
    pub rejects: Vec<Reject>,
}

/// Ingest options for one annotation source.
#[derive(Debug, Default)]
pub struct PrepOptions<'a> {
    pub exclusion: Option<&'a ExclusionList>,
    pub category_map: Option<&'a CategoryMap>,
    /// Overrides `PipelineConfig::area_threshold_k` for this source.
    pub area_threshold_k: Option<f64>,
}

/// Runs the full ingest chain for one annotation file: parse (crowd drop,
/// clamping), eval-split exclusion, category restriction, small-object
/// filter, confidence filter. Every dropped annotation lands in the rejects
/// list exactly once.
pub fn prepare_source(
    path: &Path,
    source: &str,
    cfg: &PipelineConfig,
    opts: &PrepOptions<'_>,
) -> Result<PrepOutcome, PipelineError> {
    let parsed = parse_detection_file(path, source)?;
    let mut rejects = parsed.rejects;
    let mut categories = parsed.categories;

    let images = match opts.exclusion {
        Some(excl) => apply_exclusion(&parsed.images, excl),
        None => parsed.images,
    };
    let surviving = image_index(&images);
    let mut objects = Vec::with_capacity(parsed.objects.len());
    for obj in parsed.objects {
        if surviving.contains_key(&obj.image_id) {
            objects.push(obj);
        } else {
            rejects.push(Reject::new(obj.object_id.clone(), RejectReason::ExcludedImage));
        }
    }

    if let Some(map) = opts.category_map {
        let (kept, cats, mut dropped) = restrict_categories(&objects, &categories, map);
        objects = kept;
        categories = cats;
        rejects.append(&mut dropped);
    }

    let k = opts.area_threshold_k.unwrap_or(cfg.area_threshold_k);
    let (kept, mut dropped) = filter_small_objects(&objects, &surviving, k)?;
    objects = kept;
    rejects.append(&mut dropped);

    if let Some(min_conf) = cfg.det_confidence_min {
        let (kept, mut dropped) = filter_by_confidence(&objects, min_conf);
        objects = kept;
        rejects.append(&mut dropped);
    }

    let by_id: HashMap<u64, &Category> =
        categories.iter().map(|c| (c.category_id, c)).collect();
    let mut rows = Vec::with_capacity(objects.len());
    for object in objects {
        let category =
            by_id
                .get(&object.category_id)
                .ok_or_else(|| PipelineError::UnknownCategory {
                    object_id: object.object_id.clone(),
                    category_id: object.category_id,
                })?;
        rows.push(ObjectRow {
            source: source.to_string(),
            category_name: category.name.clone(),
            coco80_name: category.coco80_name.clone(),
            object,
        });
    }

    Ok(PrepOutcome {
        images,
        categories,
        objects: rows,
        rejects,
    })
}

/// Relation stage over grouped scenes: one grounding record per object that
/// produced at least one expression (every object does, since the absolute
/// horizontal label always fires).
pub fn relation_stage(
    scenes: &[Scene],
    cfg: &PipelineConfig,
    rel_cfg: &RelationConfig,
    phrase_sample: Option<usize>,
) -> Result<Vec<GroundingRecord>, PipelineError> {
    let mut categories = HashMap::new();
    for scene in scenes {
        for row in &scene.objects {
            categories.insert(row.object.category_id, row.category());
        }
    }
    let rel_scenes: Vec<RelationScene> = scenes
        .iter()
        .map(|s| RelationScene {
            image: s.image.clone(),
            objects: s.objects.iter().map(|r| r.object.clone()).collect(),
        })
        .collect();
    let per_scene = crate::relation::generate_for_scenes(
        &rel_scenes,
        &categories,
        rel_cfg,
        cfg.rng_seed,
        phrase_sample,
    )?;

    let mut records = Vec::new();
    for (scene, expressions) in scenes.iter().zip(per_scene) {
        for row in &scene.objects {
            let exprs = expressions
                .get(&row.object.object_id)
                .cloned()
                .unwrap_or_default();
            if exprs.is_empty() {
                continue;
            }
            records.push(GroundingRecord::new(
                scene.image.clone(),
                row.object.clone(),
                exprs,
            )?);
        }
    }
    Ok(records)
}

/// Which annotation passes [`annotate_scenes`] runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AnnotatePasses {
    pub captions: bool,
    pub attributes: bool,
}

impl AnnotatePasses {
    pub fn captions_only() -> Self {
        Self {
            captions: true,
            attributes: false,
        }
    }

    pub fn attributes_only() -> Self {
        Self {
            captions: false,
            attributes: true,
        }
    }

    pub fn all() -> Self {
        Self {
            captions: true,
            attributes: true,
        }
    }
}

/// Output of the VLM annotation passes.
#[derive(Debug, Default)]
pub struct AnnotateOutcome {
    pub caption_records: Vec<GroundingRecord>,
    pub attribute_records: Vec<GroundingRecord>,
    /// Objects dropped before querying (image decode / crop failures).
    pub rejects: Vec<Reject>,
    /// Per-request backend failures, by object id; the object keeps its
    /// other annotations.
    pub backend_failures: Vec<(String, String)>,
}

struct CroppedObject<'a> {
    scene_idx: usize,
    row: &'a ObjectRow,
    region: Vec<u8>,
}

fn crop_scene<'a>(
    scene_idx: usize,
    scene: &'a Scene,
    image_root: &Path,
) -> (Vec<CroppedObject<'a>>, Vec<Reject>) {
    let mut crops = Vec::new();
    let mut rejects = Vec::new();
    if scene.objects.is_empty() {
        return (crops, rejects);
    }
    let path = image_root.join(&scene.image.uri);
    let image = match load_image(&path) {
        Ok(img) => img,
        Err(CaptionError::Decode { .. }) => {
            // The whole image is unreadable: every object on it drops.
            for row in &scene.objects {
                rejects.push(Reject::new(
                    row.object.object_id.clone(),
                    RejectReason::DecodeFailure,
                ));
            }
            return (crops, rejects);
        }
        Err(_) => unreachable!("load_image only fails with Decode"),
    };
    for row in &scene.objects {
        match crop_region(&image, &row.object.bbox) {
            Ok(region) => crops.push(CroppedObject {
                scene_idx,
                row,
                region,
            }),
            Err(_) => rejects.push(Reject::new(
                row.object.object_id.clone(),
                RejectReason::DecodeFailure,
            )),
        }
    }
    (crops, rejects)
}

#[cfg(feature = "parallel")]
fn crop_all<'a>(
    scenes: &'a [Scene],
    image_root: &Path,
) -> (Vec<CroppedObject<'a>>, Vec<Reject>) {
    let per_scene: Vec<_> = scenes
        .par_iter()
        .enumerate()
        .map(|(idx, scene)| crop_scene(idx, scene, image_root))
        .collect();
    let mut crops = Vec::new();
    let mut rejects = Vec::new();
    for (c, r) in per_scene {
        crops.extend(c);
        rejects.extend(r);
    }
    (crops, rejects)
}

#[cfg(not(feature = "parallel"))]
fn crop_all<'a>(
    scenes: &'a [Scene],
    image_root: &Path,
) -> (Vec<CroppedObject<'a>>, Vec<Reject>) {
    let mut crops = Vec::new();
    let mut rejects = Vec::new();
    for (idx, scene) in scenes.iter().enumerate() {
        let (c, r) = crop_scene(idx, scene, image_root);
        crops.extend(c);
        rejects.extend(r);
    }
    (crops, rejects)
}

/// Runs the caption and/or attribute passes over grouped scenes.
///
/// Each object region is cropped once and reused across both passes. All
/// requests go through one bounded batch per pass, so backend concurrency
/// never exceeds `batch.max_in_flight` regardless of worker count.
pub fn annotate_scenes(
    scenes: &[Scene],
    image_root: &Path,
    client: &dyn VlmBackend,
    cfg: &PipelineConfig,
    map: &ApplicabilityMap,
    lexicon: &RejectionLexicon,
    batch: &BatchOptions,
    passes: AnnotatePasses,
) -> Result<AnnotateOutcome, PipelineError> {
    let mut outcome = AnnotateOutcome::default();
    let (crops, rejects) = crop_all(scenes, image_root);
    outcome.rejects = rejects;

    if passes.captions {
        let requests: Vec<VlmRequest> = crops
            .iter()
            .map(|c| caption_request(&c.region, cfg.caption_top_k))
            .collect::<Result<_, _>>()?;
        let results = query_batch(client, &requests, batch);
        for (idx, result) in results {
            let crop = &crops[idx];
            match result {
                Ok(answers) => {
                    let exprs = expressions_from_answers(
                        &crop.row.object,
                        &answers,
                        client.backend_id(),
                        cfg.caption_top_k,
                    );
                    if !exprs.is_empty() {
                        outcome.caption_records.push(GroundingRecord::new(
                            scenes[crop.scene_idx].image.clone(),
                            crop.row.object.clone(),
                            exprs,
                        )?);
                    }
                }
                Err(err) => outcome
                    .backend_failures
                    .push((crop.row.object.object_id.clone(), err.to_string())),
            }
        }
    }

    if passes.attributes {
        // Flatten (object, attribute) pairs into one bounded batch.
        let mut owners: Vec<(usize, Attribute)> = Vec::new();
        let mut requests: Vec<VlmRequest> = Vec::new();
        for (crop_idx, crop) in crops.iter().enumerate() {
            let per_attr =
                attribute_requests(&crop.region, crop.row.noun(), map, cfg.attribute_top_k)?;
            for (attribute, request) in per_attr {
                owners.push((crop_idx, attribute));
                requests.push(request);
            }
        }
        let results = query_batch(client, &requests, batch);
        let mut tags_per_crop: Vec<Vec<AttributeTag>> = vec![Vec::new(); crops.len()];
        for (idx, result) in results {
            let (crop_idx, attribute) = owners[idx];
            match result {
                Ok(answers) => {
                    tags_per_crop[crop_idx].extend(tags_from_answers(
                        attribute,
                        &answers,
                        lexicon,
                        cfg.attribute_top_k,
                    ));
                }
                Err(err) => outcome.backend_failures.push((
                    crops[crop_idx].row.object.object_id.clone(),
                    format!("{}: {err}", attribute.name()),
                )),
            }
        }
        for (crop, tags) in crops.iter().zip(tags_per_crop) {
            if tags.is_empty() {
                continue;
            }
            let seed = derive_seed(
                cfg.rng_seed,
                &["attribute", &crop.row.source, &crop.row.object.object_id],
            );
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let exprs = compose_attribute_expressions(
                &tags,
                crop.row.noun(),
                &crop.row.object.object_id,
                Some(client.backend_id()),
                &mut rng,
            );
            if !exprs.is_empty() {
                outcome.attribute_records.push(GroundingRecord::new(
                    scenes[crop.scene_idx].image.clone(),
                    crop.row.object.clone(),
                    exprs,
                )?);
            }
        }
    }

    Ok(outcome)
}
