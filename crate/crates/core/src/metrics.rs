//! REC/RES scoring: top-1 box accuracy at an IoU threshold, overall IoU,
//! and mean IoU.
//!
//! Box IoU is computed on continuous areas; the pixel-enumeration oracle in
//! the test suite is a verification device for integer boxes, not the
//! implementation. The REC threshold is strict (`> 0.5`) by default, with a
//! flag for the `>=` convention; the choice is recorded in the score
//! report.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{BBox, Segmentation};
use crate::util::read_jsonl;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("predictions reference unknown query ids: {0:?}")]
    UnknownQueries(Vec<String>),
    #[error("multiple predictions for query ids: {0:?}")]
    DuplicatePredictions(Vec<String>),
    #[error("mask grids differ: {a:?} vs {b:?}")]
    DimensionMismatch { a: (u32, u32), b: (u32, u32) },
    #[error("invalid mask: {0}")]
    BadMask(String),
    #[error("no ground-truth queries to score")]
    EmptyGroundTruth,
    #[error("prediction {query_id} is missing both bbox and rle")]
    EmptyPrediction { query_id: String },
    #[error("ground-truth line for {query_id} has no usable mask")]
    MissingGtMask { query_id: String },
    #[error(transparent)]
    Jsonl(#[from] crate::util::JsonlError),
}

/// Intersection-over-union of two boxes on continuous areas; 0 when
/// disjoint.
pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let ix0 = a.x.max(b.x);
    let iy0 = a.y.max(b.y);
    let ix1 = (a.x + a.w).min(b.x + b.w);
    let iy1 = (a.y + a.h).min(b.y + b.h);
    let iw = (ix1 - ix0).max(0.0);
    let ih = (iy1 - iy0).max(0.0);
    let intersection = iw * ih;
    if intersection == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - intersection;
    intersection / union
}

/// How a prediction's IoU is compared against the 0.5 threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IouRule {
    /// Correct iff IoU > 0.5 (strict).
    Strict,
    /// Correct iff IoU >= 0.5, the other common community convention.
    Geq,
}

impl IouRule {
    pub fn accepts(self, iou: f64) -> bool {
        match self {
            IouRule::Strict => iou > 0.5,
            IouRule::Geq => iou >= 0.5,
        }
    }
}

/// One model prediction; at least one of box or mask must be present.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub query_id: String,
    pub bbox: Option<BBox>,
    pub mask: Option<RleMask>,
}

fn validate_prediction_ids<'a, T>(
    preds: &'a [Prediction],
    gts: &BTreeMap<String, T>,
) -> Result<HashMap<&'a str, &'a Prediction>, MetricsError> {
    let mut by_id: HashMap<&str, &Prediction> = HashMap::with_capacity(preds.len());
    let mut duplicates = Vec::new();
    let mut unknown = Vec::new();
    for pred in preds {
        if !gts.contains_key(&pred.query_id) {
            unknown.push(pred.query_id.clone());
            continue;
        }
        if by_id.insert(pred.query_id.as_str(), pred).is_some() {
            duplicates.push(pred.query_id.clone());
        }
    }
    if !unknown.is_empty() {
        unknown.sort();
        return Err(MetricsError::UnknownQueries(unknown));
    }
    if !duplicates.is_empty() {
        duplicates.sort();
        return Err(MetricsError::DuplicatePredictions(duplicates));
    }
    Ok(by_id)
}

/// Fraction of ground-truth queries whose prediction exists and whose box
/// IoU passes `rule`. A missing prediction counts as incorrect; a
/// prediction for an unknown query id is a scoring error.
pub fn rec_accuracy_with(
    preds: &[Prediction],
    gts: &BTreeMap<String, BBox>,
    rule: IouRule,
) -> Result<f64, MetricsError> {
    if gts.is_empty() {
        return Err(MetricsError::EmptyGroundTruth);
    }
    let by_id = validate_prediction_ids(preds, gts)?;
    let verdicts = map_queries(gts, |(query_id, gt_box)| {
        by_id
            .get(query_id.as_str())
            .and_then(|p| p.bbox.as_ref())
            .is_some_and(|pred_box| rule.accepts(box_iou(pred_box, gt_box)))
    });
    let correct = verdicts.into_iter().filter(|&ok| ok).count();
    Ok(correct as f64 / gts.len() as f64)
}

/// [`rec_accuracy_with`] under the strict `> 0.5` rule.
pub fn rec_accuracy(preds: &[Prediction], gts: &BTreeMap<String, BBox>) -> Result<f64, MetricsError> {
    rec_accuracy_with(preds, gts, IouRule::Strict)
}

#[cfg(feature = "parallel")]
fn map_queries<'a, T: Sync, R: Send>(
    gts: &'a BTreeMap<String, T>,
    f: impl Fn((&'a String, &'a T)) -> R + Sync + Send,
) -> Vec<R> {
    gts.iter().collect::<Vec<_>>().into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_queries<'a, T, R>(
    gts: &'a BTreeMap<String, T>,
    f: impl Fn((&'a String, &'a T)) -> R,
) -> Vec<R> {
    gts.iter().map(f).collect()
}

// ---------------------------------------------------------------------------
// Masks
// ---------------------------------------------------------------------------

/// Binary mask in uncompressed run-length form: column-major runs
/// alternating background/foreground, starting with a background run
/// (COCO convention).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    pub height: u32,
    pub width: u32,
    pub counts: Vec<u32>,
}

impl RleMask {
    pub fn empty(height: u32, width: u32) -> Self {
        Self {
            height,
            width,
            counts: vec![height * width],
        }
    }

    pub fn validate(&self) -> Result<(), MetricsError> {
        let total: u64 = self.counts.iter().map(|&c| u64::from(c)).sum();
        let expected = u64::from(self.height) * u64::from(self.width);
        if total != expected {
            return Err(MetricsError::BadMask(format!(
                "run lengths sum to {total}, grid has {expected} pixels"
            )));
        }
        Ok(())
    }

    /// Column-major pixel vector of length `height * width`.
    pub fn to_bits(&self) -> Vec<bool> {
        let mut bits = Vec::with_capacity((self.height * self.width) as usize);
        let mut value = false;
        for &count in &self.counts {
            bits.extend(std::iter::repeat_n(value, count as usize));
            value = !value;
        }
        bits
    }

    /// Builds a mask from a column-major pixel vector.
    pub fn from_bits(height: u32, width: u32, bits: &[bool]) -> Result<Self, MetricsError> {
        if bits.len() != (height as usize) * (width as usize) {
            return Err(MetricsError::BadMask(format!(
                "{} bits for a {height}x{width} grid",
                bits.len()
            )));
        }
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u32;
        for &bit in bits {
            if bit == current {
                run += 1;
            } else {
                counts.push(run);
                current = bit;
                run = 1;
            }
        }
        counts.push(run);
        Ok(Self {
            height,
            width,
            counts,
        })
    }

    /// Convenience constructor from `(x, y)` foreground pixels.
    pub fn from_pixels(
        height: u32,
        width: u32,
        pixels: &[(u32, u32)],
    ) -> Result<Self, MetricsError> {
        let mut bits = vec![false; (height as usize) * (width as usize)];
        for &(x, y) in pixels {
            if x >= width || y >= height {
                return Err(MetricsError::BadMask(format!(
                    "pixel ({x}, {y}) outside {width}x{height} grid"
                )));
            }
            bits[(x as usize) * (height as usize) + (y as usize)] = true;
        }
        Self::from_bits(height, width, &bits)
    }

    pub fn count_foreground(&self) -> u64 {
        self.counts
            .iter()
            .enumerate()
            .filter(|(i, _)| i % 2 == 1)
            .map(|(_, &c)| u64::from(c))
            .sum()
    }
}

fn intersection_union(a: &RleMask, b: &RleMask) -> Result<(u64, u64), MetricsError> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(MetricsError::DimensionMismatch {
            a: (a.height, a.width),
            b: (b.height, b.width),
        });
    }
    a.validate()?;
    b.validate()?;
    let (abits, bbits) = (a.to_bits(), b.to_bits());
    let mut intersection = 0u64;
    let mut union = 0u64;
    for (&x, &y) in abits.iter().zip(&bbits) {
        if x && y {
            intersection += 1;
        }
        if x || y {
            union += 1;
        }
    }
    Ok((intersection, union))
}

/// Pixel-count IoU of two masks on the same grid. Two empty masks are
/// defined as IoU 1.0.
pub fn mask_iou(a: &RleMask, b: &RleMask) -> Result<f64, MetricsError> {
    let (intersection, union) = intersection_union(a, b)?;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(intersection as f64 / union as f64)
}

/// RES scores over a query set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResScores {
    /// Summed intersections over summed unions; large objects weigh more.
    pub oiou: f64,
    /// Unweighted mean of per-query IoU values.
    pub miou: f64,
}

/// Computes oIoU and mIoU. A missing prediction contributes an empty mask.
/// Per-query IoU of two empty masks is 1.0; a corpus whose unions are all
/// empty scores oIoU 1.0 for the same reason.
pub fn res_scores(
    preds: &[Prediction],
    gts: &BTreeMap<String, RleMask>,
) -> Result<ResScores, MetricsError> {
    if gts.is_empty() {
        return Err(MetricsError::EmptyGroundTruth);
    }
    let by_id = validate_prediction_ids(preds, gts)?;
    let per_query = map_queries(gts, |(query_id, gt_mask)| {
        let empty = RleMask::empty(gt_mask.height, gt_mask.width);
        let pred_mask = by_id
            .get(query_id.as_str())
            .and_then(|p| p.mask.as_ref())
            .unwrap_or(&empty);
        intersection_union(pred_mask, gt_mask)
    });

    let mut total_intersection = 0u64;
    let mut total_union = 0u64;
    let mut iou_sum = 0.0f64;
    let n = per_query.len();
    for result in per_query {
        let (intersection, union) = result?;
        total_intersection += intersection;
        total_union += union;
        iou_sum += if union == 0 {
            1.0
        } else {
            intersection as f64 / union as f64
        };
    }
    let oiou = if total_union == 0 {
        1.0
    } else {
        total_intersection as f64 / total_union as f64
    };
    Ok(ResScores {
        oiou,
        miou: iou_sum / n as f64,
    })
}

/// Sequential twin of [`res_scores`] for the comparison benchmarks.
pub fn res_scores_sequential(
    preds: &[Prediction],
    gts: &BTreeMap<String, RleMask>,
) -> Result<ResScores, MetricsError> {
    if gts.is_empty() {
        return Err(MetricsError::EmptyGroundTruth);
    }
    let by_id = validate_prediction_ids(preds, gts)?;
    let mut total_intersection = 0u64;
    let mut total_union = 0u64;
    let mut iou_sum = 0.0f64;
    for (query_id, gt_mask) in gts {
        let empty = RleMask::empty(gt_mask.height, gt_mask.width);
        let pred_mask = by_id
            .get(query_id.as_str())
            .and_then(|p| p.mask.as_ref())
            .unwrap_or(&empty);
        let (intersection, union) = intersection_union(pred_mask, gt_mask)?;
        total_intersection += intersection;
        total_union += union;
        iou_sum += if union == 0 {
            1.0
        } else {
            intersection as f64 / union as f64
        };
    }
    let oiou = if total_union == 0 {
        1.0
    } else {
        total_intersection as f64 / total_union as f64
    };
    Ok(ResScores {
        oiou,
        miou: iou_sum / gts.len() as f64,
    })
}

/// Rasterizes polygon rings to a mask with even-odd fill, sampling at pixel
/// centers. Rings are flat `[x, y, x, y, ...]` lists in pixel coordinates.
pub fn rasterize_polygons(polygons: &[Vec<f64>], width: u32, height: u32) -> RleMask {
    let mut bits = vec![false; (height as usize) * (width as usize)];
    for py in 0..height {
        let sample_y = f64::from(py) + 0.5;
        // Even-odd rule: collect every edge crossing of the scanline, then
        // fill between alternate pairs.
        let mut crossings: Vec<f64> = Vec::new();
        for ring in polygons {
            let n = ring.len() / 2;
            if n < 3 {
                continue;
            }
            for i in 0..n {
                let (x0, y0) = (ring[2 * i], ring[2 * i + 1]);
                let j = (i + 1) % n;
                let (x1, y1) = (ring[2 * j], ring[2 * j + 1]);
                if (y0 <= sample_y && y1 > sample_y) || (y1 <= sample_y && y0 > sample_y) {
                    let t = (sample_y - y0) / (y1 - y0);
                    crossings.push(x0 + t * (x1 - x0));
                }
            }
        }
        crossings.sort_by(|a, b| a.partial_cmp(b).expect("finite crossings"));
        for pair in crossings.chunks_exact(2) {
            let (start, end) = (pair[0], pair[1]);
            for px in 0..width {
                let sample_x = f64::from(px) + 0.5;
                if sample_x >= start && sample_x < end {
                    bits[(px as usize) * (height as usize) + (py as usize)] = true;
                }
            }
        }
    }
    RleMask::from_bits(height, width, &bits).expect("bit count matches grid")
}

// ---------------------------------------------------------------------------
// Score report and file formats
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rec_acc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oiou: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub miou: Option<f64>,
    pub n_queries: usize,
    pub iou_rule: IouRule,
}

/// Wire form of an RLE mask: `{size: [h, w], counts: [...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RleWire {
    pub size: [u32; 2],
    pub counts: Vec<u32>,
}

impl From<RleWire> for RleMask {
    fn from(wire: RleWire) -> Self {
        RleMask {
            height: wire.size[0],
            width: wire.size[1],
            counts: wire.counts,
        }
    }
}

#[derive(Debug, Deserialize)]
struct PredictionLine {
    query_id: String,
    #[serde(default)]
    bbox: Option<[f64; 4]>,
    #[serde(default)]
    rle: Option<RleWire>,
}

/// Loads line-delimited predictions `{query_id, bbox?, rle?}`.
pub fn load_predictions(path: &Path) -> Result<Vec<Prediction>, MetricsError> {
    let lines: Vec<PredictionLine> = read_jsonl(path)?;
    let mut preds = Vec::with_capacity(lines.len());
    for line in lines {
        let bbox = match line.bbox {
            Some(raw) => Some(BBox::try_from(raw).map_err(|e| {
                MetricsError::BadMask(format!("prediction {}: {e}", line.query_id))
            })?),
            None => None,
        };
        let mask: Option<RleMask> = line.rle.map(RleMask::from);
        if bbox.is_none() && mask.is_none() {
            return Err(MetricsError::EmptyPrediction {
                query_id: line.query_id,
            });
        }
        preds.push(Prediction {
            query_id: line.query_id,
            bbox,
            mask,
        });
    }
    Ok(preds)
}

/// Ground-truth line: the assembly output schema plus a `query_id` column.
#[derive(Debug, Deserialize)]
struct GroundTruthLine {
    query_id: String,
    #[serde(default)]
    bbox: Option<[f64; 4]>,
    #[serde(default)]
    width: Option<u32>,
    #[serde(default)]
    height: Option<u32>,
    #[serde(default)]
    segmentation: Option<Segmentation>,
    #[serde(default)]
    rle: Option<RleWire>,
}

/// Loads REC ground truth: `query_id -> box`.
pub fn load_rec_gt(path: &Path) -> Result<BTreeMap<String, BBox>, MetricsError> {
    let lines: Vec<GroundTruthLine> = read_jsonl(path)?;
    let mut gts = BTreeMap::new();
    let mut duplicates = HashSet::new();
    for line in lines {
        let Some(raw) = line.bbox else {
            return Err(MetricsError::BadMask(format!(
                "ground truth {} has no bbox",
                line.query_id
            )));
        };
        let bbox = BBox::try_from(raw)
            .map_err(|e| MetricsError::BadMask(format!("gt {}: {e}", line.query_id)))?;
        if gts.insert(line.query_id.clone(), bbox).is_some() {
            duplicates.insert(line.query_id);
        }
    }
    if !duplicates.is_empty() {
        let mut ids: Vec<String> = duplicates.into_iter().collect();
        ids.sort();
        return Err(MetricsError::DuplicatePredictions(ids));
    }
    Ok(gts)
}

/// Loads RES ground truth: `query_id -> mask`. Polygon segmentations are
/// rasterized with even-odd fill at the image resolution; RLE masks pass
/// through.
pub fn load_res_gt(path: &Path) -> Result<BTreeMap<String, RleMask>, MetricsError> {
    let lines: Vec<GroundTruthLine> = read_jsonl(path)?;
    let mut gts = BTreeMap::new();
    for line in lines {
        let mask = if let Some(rle) = line.rle {
            RleMask::from(rle)
        } else {
            match (&line.segmentation, line.width, line.height) {
                (Some(Segmentation::Polygons(polys)), Some(w), Some(h)) => {
                    rasterize_polygons(polys, w, h)
                }
                (Some(Segmentation::Rle { size, counts }), _, _) => RleMask {
                    height: size[0],
                    width: size[1],
                    counts: counts.clone(),
                },
                _ => {
                    return Err(MetricsError::MissingGtMask {
                        query_id: line.query_id,
                    })
                }
            }
        };
        gts.insert(line.query_id, mask);
    }
    Ok(gts)
}
