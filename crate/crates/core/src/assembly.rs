//! Output assembly: bucket records by (source x annotation-group), sample
//! per the mixture ratio, write sharded line-delimited output, and compute
//! dataset statistics.
//!
//! Buckets pair a source tag with an annotation group: "common" holds the
//! regional-caption and relation expressions, "attr" the attribute-rich
//! ones. Mixing samples with replacement, one bucket draw then one uniform
//! record draw, so the ratios describe training-stream composition rather
//! than subset extraction.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{ExprType, GroundingRecord, Provenance, ReferringExpression, Segmentation};
use crate::util::read_jsonl;

#[derive(Debug, Error)]
pub enum AssemblyError {
    #[error("bucket {0} is referenced by the mixture but empty")]
    EmptyBucket(String),
    #[error("bad mixture ratio {0:?}: {1}")]
    BadRatio(String, String),
    #[error("duplicate bucket id {0}")]
    DuplicateBucket(String),
    #[error("weight for bucket {0} must be positive")]
    NonPositiveWeight(String),
    #[error("mixture needs at least one bucket")]
    EmptyMixture,
    #[error("i/o failure under {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Jsonl(#[from] crate::util::JsonlError),
}

/// The four default bucket ids, in ratio order.
pub const DEFAULT_BUCKETS: [&str; 4] = ["coco_common", "coco_attr", "o365_common", "o365_attr"];

/// Annotation group of an expression type.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExprGroup {
    /// Regional captions and relations together.
    Common,
    /// Attribute-rich expressions.
    Attr,
}

impl ExprGroup {
    pub fn of(expr_type: ExprType) -> ExprGroup {
        match expr_type {
            ExprType::RegionalCaption | ExprType::Relation => ExprGroup::Common,
            ExprType::Attribute => ExprGroup::Attr,
        }
    }

    pub fn suffix(self) -> &'static str {
        match self {
            ExprGroup::Common => "common",
            ExprGroup::Attr => "attr",
        }
    }
}

/// Bucket id for a source tag and annotation group, e.g. `coco_common`.
pub fn bucket_id(source: &str, group: ExprGroup) -> String {
    format!("{source}_{}", group.suffix())
}

/// Splits a record into at most one sub-record per annotation group,
/// preserving expression order. Records entering bucketization must be
/// single-group; this is the canonical splitter.
pub fn split_by_group(record: &GroundingRecord) -> Vec<GroundingRecord> {
    let mut split = Vec::new();
    for group in [ExprGroup::Common, ExprGroup::Attr] {
        let expressions: Vec<ReferringExpression> = record
            .expressions
            .iter()
            .filter(|e| ExprGroup::of(e.expr_type) == group)
            .cloned()
            .collect();
        if !expressions.is_empty() {
            split.push(GroundingRecord {
                image: record.image.clone(),
                object: record.object.clone(),
                expressions,
            });
        }
    }
    split
}

/// Ordered bucket weights. Weights are normalized at sampling time.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSpec {
    weights: Vec<(String, f64)>,
}

impl MixtureSpec {
    pub fn new(weights: Vec<(String, f64)>) -> Result<Self, AssemblyError> {
        if weights.is_empty() {
            return Err(AssemblyError::EmptyMixture);
        }
        let mut seen = HashSet::new();
        for (id, weight) in &weights {
            if !seen.insert(id.clone()) {
                return Err(AssemblyError::DuplicateBucket(id.clone()));
            }
            if !(weight.is_finite() && *weight > 0.0) {
                return Err(AssemblyError::NonPositiveWeight(id.clone()));
            }
        }
        Ok(Self { weights })
    }

    /// Parses `w:w:w:w` against the default bucket order.
    pub fn parse_ratio(ratio: &str) -> Result<Self, AssemblyError> {
        let parts: Vec<&str> = ratio.split(':').collect();
        if parts.len() != DEFAULT_BUCKETS.len() {
            return Err(AssemblyError::BadRatio(
                ratio.to_string(),
                format!("expected {} colon-separated weights", DEFAULT_BUCKETS.len()),
            ));
        }
        let mut weights = Vec::with_capacity(parts.len());
        for (id, part) in DEFAULT_BUCKETS.iter().zip(parts) {
            let weight: f64 = part.trim().parse().map_err(|e| {
                AssemblyError::BadRatio(ratio.to_string(), format!("{part:?}: {e}"))
            })?;
            weights.push((id.to_string(), weight));
        }
        Self::new(weights)
    }

    /// The 1:1:1:1 default over the four standard buckets.
    pub fn uniform_default() -> Self {
        Self::new(DEFAULT_BUCKETS.iter().map(|id| (id.to_string(), 1.0)).collect())
            .expect("default mixture is valid")
    }

    pub fn weights(&self) -> &[(String, f64)] {
        &self.weights
    }

    pub fn bucket_ids(&self) -> impl Iterator<Item = &str> {
        self.weights.iter().map(|(id, _)| id.as_str())
    }
}

/// Outcome of bucketization: the partition plus a log line per record that
/// landed in the overflow bucket.
#[derive(Debug, Default)]
pub struct Buckets {
    pub buckets: BTreeMap<String, Vec<GroundingRecord>>,
    pub overflow_log: Vec<String>,
}

/// Partitions records into (source x group) buckets. Multi-group records
/// are split first, so the partition is exhaustive and disjoint at the
/// expression level. Records whose bucket id is not referenced by the
/// mixture go to `overflow_id` and are logged.
pub fn bucketize(
    records: &[GroundingRecord],
    spec: &MixtureSpec,
    overflow_id: &str,
) -> Buckets {
    let known: HashSet<&str> = spec.bucket_ids().collect();
    let mut out = Buckets::default();
    for record in records {
        for part in split_by_group(record) {
            let group = ExprGroup::of(part.expressions[0].expr_type);
            let id = bucket_id(&part.image.source, group);
            let id = if known.contains(id.as_str()) {
                id
            } else {
                out.overflow_log.push(format!(
                    "object {} from source {} routed to {overflow_id} (no bucket {id})",
                    part.object.object_id, part.image.source
                ));
                overflow_id.to_string()
            };
            out.buckets.entry(id).or_default().push(part);
        }
    }
    out
}

/// Draws `n_out` records: each draw picks a bucket with probability
/// proportional to its weight, then a record uniformly (with replacement)
/// from that bucket. Every referenced bucket must be nonempty before any
/// output is produced.
pub fn mix(
    buckets: &BTreeMap<String, Vec<GroundingRecord>>,
    spec: &MixtureSpec,
    n_out: usize,
    rng: &mut impl Rng,
) -> Result<Vec<GroundingRecord>, AssemblyError> {
    let mut pools: Vec<&[GroundingRecord]> = Vec::with_capacity(spec.weights().len());
    for (id, _) in spec.weights() {
        let pool = buckets
            .get(id)
            .filter(|b| !b.is_empty())
            .ok_or_else(|| AssemblyError::EmptyBucket(id.clone()))?;
        pools.push(pool);
    }
    let weights: Vec<f64> = spec.weights().iter().map(|(_, w)| *w).collect();
    let dist = WeightedIndex::new(&weights)
        .expect("mixture weights validated at construction");
    let mut out = Vec::with_capacity(n_out);
    for _ in 0..n_out {
        let pool = pools[dist.sample(rng)];
        let idx = rng.random_range(0..pool.len());
        out.push(pool[idx].clone());
    }
    Ok(out)
}

/// One line of the sharded output: a single expression with its object
/// geometry and provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputRecord {
    pub image_id: String,
    pub source: String,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
    pub object_id: String,
    pub bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segmentation: Option<Segmentation>,
    pub expression: String,
    pub expr_type: ExprType,
    pub provenance: Provenance,
}

impl OutputRecord {
    pub fn from_expression(record: &GroundingRecord, expr: &ReferringExpression) -> Self {
        Self {
            image_id: record.image.image_id.clone(),
            source: record.image.source.clone(),
            file_name: record.image.uri.clone(),
            width: record.image.width,
            height: record.image.height,
            object_id: record.object.object_id.clone(),
            bbox: record.object.bbox.into(),
            segmentation: record.object.mask.clone(),
            expression: expr.text.clone(),
            expr_type: expr.expr_type,
            provenance: expr.provenance.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardEntry {
    pub path: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardManifest {
    pub shards: Vec<ShardEntry>,
    pub total: usize,
    pub seed: u64,
    pub config_hash: String,
    pub created_at: u64,
}

/// Name of the marker file left behind when shard writing aborts midway.
pub const PARTIAL_MARKER: &str = "_PARTIAL";

#[derive(Debug, Clone)]
pub struct WriteOptions {
    pub shard_size: usize,
    /// When set, writes grouped `GroundingRecord` lines (all expressions
    /// per object) for human audit instead of exploded per-expression
    /// lines.
    pub grouped: bool,
    pub seed: u64,
    pub config_hash: String,
}

/// Writes records as line-delimited shards of at most `shard_size` lines
/// plus a `manifest.json`. Exploded mode (the default) writes one
/// expression per line; grouped mode writes one object per line. On any
/// I/O failure a `_PARTIAL` marker file is left in the output directory.
pub fn write_shards(
    records: &[GroundingRecord],
    out_dir: &Path,
    opts: &WriteOptions,
) -> Result<ShardManifest, AssemblyError> {
    match write_shards_inner(records, out_dir, opts) {
        Ok(manifest) => Ok(manifest),
        Err(err) => {
            let _ = fs::write(out_dir.join(PARTIAL_MARKER), b"shard write aborted\n");
            Err(err)
        }
    }
}

fn write_shards_inner(
    records: &[GroundingRecord],
    out_dir: &Path,
    opts: &WriteOptions,
) -> Result<ShardManifest, AssemblyError> {
    let io_err = |path: &Path| {
        let path = path.display().to_string();
        move |source: std::io::Error| AssemblyError::Io { path, source }
    };
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;

    let lines: Vec<String> = if opts.grouped {
        records
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes"))
            .collect()
    } else {
        records
            .iter()
            .flat_map(|r| {
                r.expressions
                    .iter()
                    .map(|e| {
                        serde_json::to_string(&OutputRecord::from_expression(r, e))
                            .expect("record serializes")
                    })
                    .collect::<Vec<_>>()
            })
            .collect()
    };

    let mut manifest = ShardManifest {
        shards: Vec::new(),
        total: lines.len(),
        seed: opts.seed,
        config_hash: opts.config_hash.clone(),
        created_at: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    };

    for (idx, chunk) in lines.chunks(opts.shard_size.max(1)).enumerate() {
        let name = format!("shard-{idx:05}.jsonl");
        let path = out_dir.join(&name);
        let file = File::create(&path).map_err(io_err(&path))?;
        let mut writer = BufWriter::new(file);
        for line in chunk {
            writer
                .write_all(line.as_bytes())
                .and_then(|_| writer.write_all(b"\n"))
                .map_err(io_err(&path))?;
        }
        writer.flush().map_err(io_err(&path))?;
        manifest.shards.push(ShardEntry {
            path: name,
            count: chunk.len(),
        });
    }

    let manifest_path = out_dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&manifest_path, json.as_bytes()).map_err(io_err(&manifest_path))?;
    Ok(manifest)
}

/// Reads every shard listed by a manifest back into exploded output
/// records, for audits and round-trip checks.
pub fn read_shards(out_dir: &Path) -> Result<Vec<OutputRecord>, AssemblyError> {
    let manifest_path = out_dir.join("manifest.json");
    let raw = fs::read_to_string(&manifest_path).map_err(|source| AssemblyError::Io {
        path: manifest_path.display().to_string(),
        source,
    })?;
    let manifest: ShardManifest =
        serde_json::from_str(&raw).map_err(|e| AssemblyError::Io {
            path: manifest_path.display().to_string(),
            source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
        })?;
    let mut records = Vec::with_capacity(manifest.total);
    for shard in &manifest.shards {
        let shard_path: PathBuf = out_dir.join(&shard.path);
        records.extend(read_jsonl::<OutputRecord>(&shard_path)?);
    }
    Ok(records)
}

/// Corpus-level bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub images: usize,
    pub objects: usize,
    pub expressions: usize,
    pub expressions_per_object: f64,
    pub per_type: BTreeMap<String, usize>,
}

/// Counts distinct images, distinct objects, and total expressions with a
/// per-type breakdown. Identity keys are (source, id) pairs since ids are
/// only unique within a source.
pub fn compute_stats<'a>(records: impl IntoIterator<Item = &'a GroundingRecord>) -> DatasetStats {
    let mut images = HashSet::new();
    let mut objects = HashSet::new();
    let mut expressions = 0usize;
    let mut per_type: BTreeMap<String, usize> = BTreeMap::new();
    for record in records {
        images.insert((record.image.source.clone(), record.image.image_id.clone()));
        objects.insert((record.image.source.clone(), record.object.object_id.clone()));
        for expr in &record.expressions {
            expressions += 1;
            *per_type.entry(expr.expr_type.name().to_string()).or_default() += 1;
        }
    }
    let expressions_per_object = if objects.is_empty() {
        0.0
    } else {
        expressions as f64 / objects.len() as f64
    };
    DatasetStats {
        images: images.len(),
        objects: objects.len(),
        expressions,
        expressions_per_object,
        per_type,
    }
}
