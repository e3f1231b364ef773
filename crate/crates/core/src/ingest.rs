//! Detection-annotation ingest: COCO-style parsing, eval-split exclusion,
//! category restriction, and the small-object / detector-confidence filters.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

use crate::types::{
    is_coco80_class, BBox, Category, ImageRecord, ImageIndex, ObjectInstance, Segmentation,
};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed annotation document {path} at byte {offset} (line {line}, column {column}): {msg}")]
    Parse {
        path: String,
        offset: usize,
        line: usize,
        column: usize,
        msg: String,
    },
    #[error("{path}:{line}: category map target {target:?} is not a COCO-80 class")]
    BadMapTarget {
        path: String,
        line: usize,
        target: String,
    },
    #[error("{path}:{line}: expected `source<TAB>coco80_name`")]
    BadMapLine { path: String, line: usize },
    #[error("object {object_id} references image {image_id} missing from the index")]
    MissingImage {
        object_id: String,
        image_id: String,
    },
    #[error("area threshold k={0} outside (0, 1)")]
    BadAreaThreshold(f64),
}

/// Why an annotation was dropped. Serialized into the rejects report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    Crowd,
    DanglingImage,
    DanglingCategory,
    InvalidBbox,
    EmptyAfterClamp,
    ExcludedImage,
    UnmappedCategory,
    SmallObject,
    LowConfidence,
    DecodeFailure,
    BackendError,
}

/// One line of the rejects report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reject {
    pub annotation_id: String,
    pub reason: RejectReason,
}

impl Reject {
    pub fn new(annotation_id: impl Into<String>, reason: RejectReason) -> Self {
        Self {
            annotation_id: annotation_id.into(),
            reason,
        }
    }
}

/// Writes rejects as line-delimited `{annotation_id, reason}` records.
pub fn write_rejects<W: Write>(mut writer: W, rejects: &[Reject]) -> std::io::Result<()> {
    for reject in rejects {
        let line = serde_json::to_string(reject).expect("reject serializes");
        writer.write_all(line.as_bytes())?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// COCO-style document
// ---------------------------------------------------------------------------

fn deserialize_iscrowd<'de, D>(deserializer: D) -> Result<bool, D::Error>
where
    D: Deserializer<'de>,
{
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum IsCrowd {
        Bool(bool),
        Int(u8),
    }
    Ok(match IsCrowd::deserialize(deserializer)? {
        IsCrowd::Bool(b) => b,
        IsCrowd::Int(i) => i != 0,
    })
}

#[derive(Debug, Deserialize)]
struct CocoDoc {
    #[serde(default)]
    images: Vec<CocoImage>,
    #[serde(default)]
    annotations: Vec<CocoAnnotation>,
    #[serde(default)]
    categories: Vec<CocoCategory>,
}

#[derive(Debug, Deserialize)]
struct CocoImage {
    id: u64,
    #[serde(default)]
    file_name: String,
    width: u32,
    height: u32,
}

#[derive(Debug, Deserialize)]
struct CocoAnnotation {
    id: u64,
    image_id: u64,
    category_id: u64,
    bbox: [f64; 4],
    #[serde(default, deserialize_with = "deserialize_iscrowd")]
    iscrowd: bool,
    #[serde(default)]
    segmentation: Option<Segmentation>,
    /// Detector confidence; present only for model-generated boxes.
    #[serde(default)]
    score: Option<f64>,
}

#[derive(Debug, Deserialize)]
struct CocoCategory {
    id: u64,
    name: String,
}

/// Everything a parse produces: the surviving records plus one reject per
/// dropped annotation.
#[derive(Debug, Default)]
pub struct ParseOutput {
    pub images: Vec<ImageRecord>,
    pub objects: Vec<ObjectInstance>,
    pub categories: Vec<Category>,
    pub rejects: Vec<Reject>,
}

/// Parses a COCO-style annotation document.
///
/// Crowd regions are dropped first (a crowd cannot be a single referent),
/// dangling image/category references are logged as rejects rather than
/// failing the parse, and boxes are clamped to their image bounds; a box
/// that clamps to nothing is dropped. Polygon masks are clamped to image
/// bounds; RLE masks pass through untouched.
pub fn parse_detection_file(path: &Path, source: &str) -> Result<ParseOutput, IngestError> {
    let display = path.display().to_string();
    let raw = fs::read_to_string(path).map_err(|source| IngestError::Io {
        path: display.clone(),
        source,
    })?;
    let doc: CocoDoc = serde_json::from_str(&raw).map_err(|e| {
        let (line, column) = (e.line(), e.column());
        IngestError::Parse {
            path: display.clone(),
            offset: byte_offset(&raw, line, column),
            line,
            column,
            msg: e.to_string(),
        }
    })?;
    Ok(convert_doc(doc, source))
}

/// Same as [`parse_detection_file`] but over an in-memory document.
pub fn parse_detection_str(raw: &str, source: &str) -> Result<ParseOutput, IngestError> {
    let doc: CocoDoc = serde_json::from_str(raw).map_err(|e| {
        let (line, column) = (e.line(), e.column());
        IngestError::Parse {
            path: "<memory>".into(),
            offset: byte_offset(raw, line, column),
            line,
            column,
            msg: e.to_string(),
        }
    })?;
    Ok(convert_doc(doc, source))
}

fn byte_offset(raw: &str, line: usize, column: usize) -> usize {
    // serde_json reports 1-based line and column.
    let preceding: usize = raw
        .split_inclusive('\n')
        .take(line.saturating_sub(1))
        .map(str::len)
        .sum();
    preceding + column.saturating_sub(1)
}

fn convert_doc(doc: CocoDoc, source: &str) -> ParseOutput {
    let mut out = ParseOutput::default();

    let mut image_dims: HashMap<u64, (u32, u32)> = HashMap::new();
    for img in &doc.images {
        image_dims.insert(img.id, (img.width, img.height));
        out.images.push(ImageRecord {
            image_id: img.id.to_string(),
            width: img.width,
            height: img.height,
            uri: img.file_name.clone(),
            source: source.to_string(),
        });
    }

    let mut category_ids: HashSet<u64> = HashSet::new();
    for cat in &doc.categories {
        category_ids.insert(cat.id);
        out.categories.push(Category {
            category_id: cat.id,
            name: cat.name.to_lowercase(),
            coco80_name: None,
        });
    }

    for ann in doc.annotations {
        let ann_id = ann.id.to_string();
        if ann.iscrowd {
            out.rejects.push(Reject::new(ann_id, RejectReason::Crowd));
            continue;
        }
        let Some(&(width, height)) = image_dims.get(&ann.image_id) else {
            out.rejects
                .push(Reject::new(ann_id, RejectReason::DanglingImage));
            continue;
        };
        if !category_ids.contains(&ann.category_id) {
            out.rejects
                .push(Reject::new(ann_id, RejectReason::DanglingCategory));
            continue;
        }
        let [x, y, w, h] = ann.bbox;
        if !(x.is_finite() && y.is_finite() && w.is_finite() && h.is_finite()) || w <= 0.0 || h <= 0.0
        {
            out.rejects
                .push(Reject::new(ann_id, RejectReason::InvalidBbox));
            continue;
        }
        // Clamp to image bounds; web-sourced boxes are noisy.
        let x0 = x.max(0.0);
        let y0 = y.max(0.0);
        let x1 = (x + w).min(f64::from(width));
        let y1 = (y + h).min(f64::from(height));
        if x1 <= x0 || y1 <= y0 {
            out.rejects
                .push(Reject::new(ann_id, RejectReason::EmptyAfterClamp));
            continue;
        }
        let bbox = BBox::new(x0, y0, x1 - x0, y1 - y0).expect("clamped box is valid");
        let mask = ann.segmentation.map(|seg| clamp_mask(seg, width, height));
        out.objects.push(ObjectInstance {
            object_id: ann_id,
            image_id: ann.image_id.to_string(),
            category_id: ann.category_id,
            bbox,
            mask,
            det_confidence: ann.score,
        });
    }
    out
}

fn clamp_mask(seg: Segmentation, width: u32, height: u32) -> Segmentation {
    match seg {
        Segmentation::Polygons(polys) => Segmentation::Polygons(
            polys
                .into_iter()
                .map(|poly| {
                    poly.iter()
                        .enumerate()
                        .map(|(i, &v)| {
                            let limit = if i % 2 == 0 { width } else { height };
                            v.clamp(0.0, f64::from(limit))
                        })
                        .collect()
                })
                .collect(),
        ),
        other => other,
    }
}

// ---------------------------------------------------------------------------
// Exclusion list
// ---------------------------------------------------------------------------

/// Image ids held out of the training corpus (evaluation splits).
#[derive(Debug, Clone, Default)]
pub struct ExclusionList {
    ids: HashSet<String>,
}

impl ExclusionList {
    pub fn new(ids: impl IntoIterator<Item = String>) -> Self {
        Self {
            ids: ids.into_iter().collect(),
        }
    }

    /// Parses a newline-delimited id list. Blank lines and lines starting
    /// with `#` are ignored.
    pub fn from_path(path: &Path) -> Result<Self, IngestError> {
        let raw = fs::read_to_string(path).map_err(|source| IngestError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(Self::from_str_contents(&raw))
    }

    pub fn from_str_contents(raw: &str) -> Self {
        let ids = raw
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_string)
            .collect();
        Self { ids }
    }

    pub fn contains(&self, image_id: &str) -> bool {
        self.ids.contains(image_id)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Keeps exactly the images whose id is not excluded, preserving order.
pub fn apply_exclusion(images: &[ImageRecord], excl: &ExclusionList) -> Vec<ImageRecord> {
    images
        .iter()
        .filter(|img| !excl.contains(&img.image_id))
        .cloned()
        .collect()
}

// ---------------------------------------------------------------------------
// Category restriction
// ---------------------------------------------------------------------------

/// Source category name → COCO-80 class name.
#[derive(Debug, Clone, Default)]
pub struct CategoryMap {
    entries: HashMap<String, String>,
}

impl CategoryMap {
    pub fn new(entries: HashMap<String, String>) -> Self {
        Self { entries }
    }

    /// Parses the two-column tab-separated map file, validating every target
    /// against the 80 COCO class names. `#` comment lines are allowed.
    pub fn from_path(path: &Path) -> Result<Self, IngestError> {
        let display = path.display().to_string();
        let raw = fs::read_to_string(path).map_err(|source| IngestError::Io {
            path: display.clone(),
            source,
        })?;
        let mut entries = HashMap::new();
        for (idx, line) in raw.lines().enumerate() {
            let line_no = idx + 1;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let Some((src, dst)) = line.split_once('\t') else {
                return Err(IngestError::BadMapLine {
                    path: display,
                    line: line_no,
                });
            };
            let dst = dst.trim();
            if !is_coco80_class(dst) {
                return Err(IngestError::BadMapTarget {
                    path: display,
                    line: line_no,
                    target: dst.to_string(),
                });
            }
            entries.insert(src.trim().to_lowercase(), dst.to_string());
        }
        Ok(Self { entries })
    }

    /// Identity map over the 80 COCO class names.
    pub fn coco80_identity() -> Self {
        let entries = crate::types::COCO80_CLASSES
            .iter()
            .map(|&c| (c.to_string(), c.to_string()))
            .collect();
        Self { entries }
    }

    pub fn lookup(&self, source_name: &str) -> Option<&str> {
        self.entries.get(&source_name.to_lowercase()).map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Keeps objects whose category maps to a COCO-80 class and returns the
/// category list with `coco80_name` attached to the mapped entries.
pub fn restrict_categories(
    objects: &[ObjectInstance],
    categories: &[Category],
    map: &CategoryMap,
) -> (Vec<ObjectInstance>, Vec<Category>, Vec<Reject>) {
    let mapped: HashMap<u64, Category> = categories
        .iter()
        .filter_map(|c| {
            map.lookup(&c.name).map(|coco80| {
                (
                    c.category_id,
                    Category {
                        category_id: c.category_id,
                        name: c.name.clone(),
                        coco80_name: Some(coco80.to_string()),
                    },
                )
            })
        })
        .collect();

    let mut kept = Vec::new();
    let mut rejects = Vec::new();
    for obj in objects {
        if mapped.contains_key(&obj.category_id) {
            kept.push(obj.clone());
        } else {
            rejects.push(Reject::new(
                obj.object_id.clone(),
                RejectReason::UnmappedCategory,
            ));
        }
    }
    let categories_out = categories
        .iter()
        .map(|c| mapped.get(&c.category_id).cloned().unwrap_or_else(|| c.clone()))
        .collect();
    (kept, categories_out, rejects)
}

// ---------------------------------------------------------------------------
// Area and confidence filters
// ---------------------------------------------------------------------------

/// Keeps objects whose box-area / image-area ratio is at least `k`.
/// A ratio exactly equal to `k` is kept; only strictly smaller objects drop.
pub fn filter_small_objects(
    objects: &[ObjectInstance],
    images: &ImageIndex,
    k: f64,
) -> Result<(Vec<ObjectInstance>, Vec<Reject>), IngestError> {
    if !(k > 0.0 && k < 1.0) {
        return Err(IngestError::BadAreaThreshold(k));
    }
    let mut kept = Vec::new();
    let mut rejects = Vec::new();
    for obj in objects {
        let image = images
            .get(&obj.image_id)
            .ok_or_else(|| IngestError::MissingImage {
                object_id: obj.object_id.clone(),
                image_id: obj.image_id.clone(),
            })?;
        let image_area = f64::from(image.width) * f64::from(image.height);
        let ratio = obj.bbox.area() / image_area;
        if ratio >= k {
            kept.push(obj.clone());
        } else {
            rejects.push(Reject::new(obj.object_id.clone(), RejectReason::SmallObject));
        }
    }
    Ok((kept, rejects))
}

/// Keeps human-annotated objects (no detector score) unconditionally and
/// model-generated objects iff their score strictly exceeds `min_conf`.
pub fn filter_by_confidence(
    objects: &[ObjectInstance],
    min_conf: f64,
) -> (Vec<ObjectInstance>, Vec<Reject>) {
    let mut kept = Vec::new();
    let mut rejects = Vec::new();
    for obj in objects {
        match obj.det_confidence {
            Some(conf) if conf <= min_conf => {
                rejects.push(Reject::new(obj.object_id.clone(), RejectReason::LowConfidence));
            }
            _ => kept.push(obj.clone()),
        }
    }
    (kept, rejects)
}
