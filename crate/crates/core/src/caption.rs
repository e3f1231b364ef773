//! Regional caption generation: crop the object region, prompt the backend
//! with the caption instruction, keep the top answers verbatim.

use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, ImageFormat};
use thiserror::Error;

use crate::types::{BBox, ExprType, ObjectInstance, Provenance, ReferringExpression};
use crate::vlm::{VlmBackend, VlmError, VlmRequest, MAX_ANSWERS};

/// The caption instruction sent with every regional-caption query.
pub const CAPTION_PROMPT: &str = "Describe the major object in the image, ignore the background.";

pub fn caption_prompt() -> &'static str {
    CAPTION_PROMPT
}

#[derive(Debug, Error)]
pub enum CaptionError {
    #[error("failed to decode image {path}: {msg}")]
    Decode { path: String, msg: String },
    #[error("crop of bbox [{x}, {y}, {w}, {h}] is empty within a {width}x{height} image")]
    EmptyCrop {
        x: f64,
        y: f64,
        w: f64,
        h: f64,
        width: u32,
        height: u32,
    },
    #[error("failed to encode region: {0}")]
    Encode(String),
}

/// Decodes an image file for cropping.
pub fn load_image(path: &Path) -> Result<DynamicImage, CaptionError> {
    image::open(path).map_err(|e| CaptionError::Decode {
        path: path.display().to_string(),
        msg: e.to_string(),
    })
}

/// Extracts exactly the pixels inside `bbox` (no context padding) and
/// encodes them as PNG. The lossless encoding keeps mock-fixture hashing
/// stable across runs.
///
/// Fractional boxes are snapped to the enclosing integer pixel rectangle;
/// integer boxes crop exactly.
pub fn crop_region(image: &DynamicImage, bbox: &BBox) -> Result<Vec<u8>, CaptionError> {
    let (width, height) = (image.width(), image.height());
    let x0 = bbox.x.floor().max(0.0) as u32;
    let y0 = bbox.y.floor().max(0.0) as u32;
    let x1 = ((bbox.x + bbox.w).ceil().max(0.0) as u32).min(width);
    let y1 = ((bbox.y + bbox.h).ceil().max(0.0) as u32).min(height);
    if x1 <= x0 || y1 <= y0 {
        return Err(CaptionError::EmptyCrop {
            x: bbox.x,
            y: bbox.y,
            w: bbox.w,
            h: bbox.h,
            width,
            height,
        });
    }
    let region = image.crop_imm(x0, y0, x1 - x0, y1 - y0);
    encode_png(&region)
}

fn encode_png(image: &DynamicImage) -> Result<Vec<u8>, CaptionError> {
    let mut bytes = Vec::new();
    image
        .write_to(&mut Cursor::new(&mut bytes), ImageFormat::Png)
        .map_err(|e| CaptionError::Encode(e.to_string()))?;
    Ok(bytes)
}

/// Builds the caption request for a region.
pub fn caption_request(region: &[u8], top_k: usize) -> Result<VlmRequest, VlmError> {
    VlmRequest::new(region.to_vec(), CAPTION_PROMPT, top_k.min(MAX_ANSWERS))
}

/// Turns backend answers into caption expressions: texts verbatim (no
/// post-processing), score order, at most `top_k`, provenance carrying the
/// prompt and the backend's score. Answers whose text trims to nothing
/// cannot form a valid expression and are skipped.
pub fn expressions_from_answers(
    object: &ObjectInstance,
    answers: &[crate::vlm::VlmAnswer],
    backend_id: &str,
    top_k: usize,
) -> Vec<ReferringExpression> {
    answers
        .iter()
        .take(top_k)
        .filter_map(|answer| {
            ReferringExpression::new(
                answer.text.clone(),
                ExprType::RegionalCaption,
                object.object_id.clone(),
                Provenance {
                    prompt: Some(CAPTION_PROMPT.to_string()),
                    backend_id: Some(backend_id.to_string()),
                    score: Some(answer.score),
                },
            )
            .ok()
        })
        .collect()
}

/// Queries the backend for one object region and returns its caption
/// expressions. Callers that batch many objects should build requests with
/// [`caption_request`] and run them through [`crate::vlm::query_batch`]
/// instead, then assemble with [`expressions_from_answers`].
pub fn generate_regional_captions(
    object: &ObjectInstance,
    region: &[u8],
    client: &dyn VlmBackend,
    top_k: usize,
) -> Result<Vec<ReferringExpression>, VlmError> {
    let request = caption_request(region, top_k)?;
    let answers = client.query(&request)?;
    Ok(expressions_from_answers(
        object,
        &answers,
        client.backend_id(),
        top_k,
    ))
}
