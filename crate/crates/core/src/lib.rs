//! Synthesizes referring-expression grounding data from object-detection
//! annotations and scores grounding predictions.
//!
//! The pipeline has three annotation generators over detection boxes:
//! regional captions from a generative VLM backend ([`caption`]), rule-based
//! spatial relations from box geometry ([`relation`]), and attribute-rich
//! phrases from attribute-specific VLM prompts ([`attribute`]). Upstream,
//! [`ingest`] parses COCO-style annotation files and applies the filter
//! chain; downstream, [`assembly`] buckets, mixes, and shards the generated
//! records, and [`metrics`] scores REC/RES predictions.
//!
//! All types are immutable after construction and safe to share across
//! workers. With the default `parallel` feature, batch entry points fan out
//! over rayon; without it they fall back to equivalent sequential loops.

pub mod assembly;
pub mod attribute;
pub mod caption;
pub mod config;
pub mod ingest;
pub mod metrics;
pub mod pipeline;
pub mod relation;
pub mod types;
pub mod util;
pub mod vlm;

pub use config::PipelineConfig;
pub use types::{
    normalized_center, Attribute, AttributeTag, BBox, Category, ExprType, GroundingRecord,
    ImageRecord, NormalizedCenter, ObjectInstance, Provenance, ReferringExpression, Relation,
    RelationTuple,
};
