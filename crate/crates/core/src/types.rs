//! Domain model shared by every pipeline stage.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TypeError {
    #[error("invalid bbox [{x}, {y}, {w}, {h}]: {reason}")]
    InvalidBBox {
        x: f64,
        y: f64,
        w: f64,
        h: f64,
        reason: &'static str,
    },
    #[error("image {image_id} has a zero dimension ({width}x{height})")]
    ZeroImageDimension {
        image_id: String,
        width: u32,
        height: u32,
    },
    #[error("referring expression text is empty after trimming")]
    EmptyExpressionText,
    #[error("expression type {0:?} requires a provenance prompt")]
    MissingPrompt(ExprType),
    #[error("relation {rel:?} {problem}")]
    RelationArity { rel: Relation, problem: &'static str },
    #[error("attribute value must be nonempty")]
    EmptyAttributeValue,
    #[error("attribute rank {0} outside 1..=3")]
    BadAttributeRank(u8),
    #[error("grounding record needs at least one expression")]
    NoExpressions,
    #[error("expression references object {expr_object}, record holds {record_object}")]
    ObjectMismatch {
        expr_object: String,
        record_object: String,
    },
}

/// Axis-aligned box in pixel units, `(x, y)` at the top-left corner,
/// y increasing downward (COCO convention).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self, TypeError> {
        let reason = if !(x.is_finite() && y.is_finite() && w.is_finite() && h.is_finite()) {
            Some("coordinates must be finite")
        } else if w <= 0.0 || h <= 0.0 {
            Some("width and height must be positive")
        } else if x < 0.0 || y < 0.0 {
            Some("origin must be non-negative")
        } else {
            None
        };
        match reason {
            Some(reason) => Err(TypeError::InvalidBBox { x, y, w, h, reason }),
            None => Ok(Self { x, y, w, h }),
        }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Intersects the box with `[0, width] x [0, height]`; `None` if nothing
    /// is left.
    pub fn clamp_to(&self, width: u32, height: u32) -> Option<BBox> {
        let x0 = self.x.max(0.0);
        let y0 = self.y.max(0.0);
        let x1 = (self.x + self.w).min(f64::from(width));
        let y1 = (self.y + self.h).min(f64::from(height));
        if x1 > x0 && y1 > y0 {
            Some(BBox {
                x: x0,
                y: y0,
                w: x1 - x0,
                h: y1 - y0,
            })
        } else {
            None
        }
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = TypeError;

    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

/// One source image; `image_id` is unique within a `source`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    /// Locator for the pixel data, usually the annotation file's `file_name`.
    pub uri: String,
    /// Dataset tag, e.g. `coco`, `o365`, `web`.
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub category_id: u64,
    pub name: String,
    /// Present iff the category maps onto one of the 80 COCO classes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coco80_name: Option<String>,
}

/// Object mask, passed through from the annotation file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Segmentation {
    /// Polygon list; each polygon is a flat `[x, y, x, y, ...]` ring.
    Polygons(Vec<Vec<f64>>),
    /// Uncompressed run-length encoding, column-major, starting with a
    /// zero run (COCO convention).
    Rle { size: [u32; 2], counts: Vec<u32> },
    /// Compressed RLE as stored in COCO result files; carried verbatim.
    CompressedRle { size: [u32; 2], counts: String },
}

/// One detected or annotated object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectInstance {
    pub object_id: String,
    pub image_id: String,
    pub category_id: u64,
    pub bbox: BBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<Segmentation>,
    /// Detector score for model-generated boxes; absent for human boxes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub det_confidence: Option<f64>,
}

/// Box center normalized by the image dimensions, both in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizedCenter {
    pub cx: f64,
    pub cy: f64,
}

/// Spatial relation labels over the horizontal, vertical, and depth
/// dimensions. `LeftOf`/`RightOf` are the two-object relative relations;
/// the rest are absolute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    LeftOf,
    RightOf,
    Left,
    Right,
    FarLeft,
    FarRight,
    Middle,
    Top,
    Bottom,
    Behind,
    Front,
}

impl Relation {
    pub const ALL: [Relation; 11] = [
        Relation::LeftOf,
        Relation::RightOf,
        Relation::Left,
        Relation::Right,
        Relation::FarLeft,
        Relation::FarRight,
        Relation::Middle,
        Relation::Top,
        Relation::Bottom,
        Relation::Behind,
        Relation::Front,
    ];

    pub fn kind_name(self) -> &'static str {
        match self {
            Relation::LeftOf => "left_of",
            Relation::RightOf => "right_of",
            Relation::Left => "left",
            Relation::Right => "right",
            Relation::FarLeft => "far_left",
            Relation::FarRight => "far_right",
            Relation::Middle => "middle",
            Relation::Top => "top",
            Relation::Bottom => "bottom",
            Relation::Behind => "behind",
            Relation::Front => "front",
        }
    }

    /// Relative relations take a second object noun; absolute ones do not.
    pub fn is_relative(self) -> bool {
        matches!(self, Relation::LeftOf | Relation::RightOf)
    }
}

/// Structured spatial fact before templating: `(noun, rel[, noun])`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RelationTuple {
    pub subject_noun: String,
    pub rel: Relation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_noun: Option<String>,
}

impl RelationTuple {
    pub fn absolute(subject_noun: impl Into<String>, rel: Relation) -> Result<Self, TypeError> {
        if rel.is_relative() {
            return Err(TypeError::RelationArity {
                rel,
                problem: "requires an object noun",
            });
        }
        Ok(Self {
            subject_noun: subject_noun.into(),
            rel,
            object_noun: None,
        })
    }

    pub fn relative(
        subject_noun: impl Into<String>,
        rel: Relation,
        object_noun: impl Into<String>,
    ) -> Result<Self, TypeError> {
        if !rel.is_relative() {
            return Err(TypeError::RelationArity {
                rel,
                problem: "does not take an object noun",
            });
        }
        Ok(Self {
            subject_noun: subject_noun.into(),
            rel,
            object_noun: Some(object_noun.into()),
        })
    }
}

/// The seven attribute kinds queried from the VLM.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    Cloth,
    Action,
    Gender,
    Identity,
    Color,
    Material,
    Shape,
}

impl Attribute {
    pub const ALL: [Attribute; 7] = [
        Attribute::Cloth,
        Attribute::Action,
        Attribute::Gender,
        Attribute::Identity,
        Attribute::Color,
        Attribute::Material,
        Attribute::Shape,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Attribute::Cloth => "cloth",
            Attribute::Action => "action",
            Attribute::Gender => "gender",
            Attribute::Identity => "identity",
            Attribute::Color => "color",
            Attribute::Material => "material",
            Attribute::Shape => "shape",
        }
    }

    pub fn from_name(name: &str) -> Option<Attribute> {
        Attribute::ALL.into_iter().find(|a| a.name() == name)
    }

    /// Gender and identity answers act as nouns when composing expressions;
    /// cloth, action, color, material, and shape act as adjectives.
    pub fn is_noun_role(self) -> bool {
        matches!(self, Attribute::Gender | Attribute::Identity)
    }
}

/// One accepted attribute answer for an object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeTag {
    pub attribute: Attribute,
    pub value: String,
    /// 1-based position among the kept answers for this attribute.
    pub rank: u8,
}

impl AttributeTag {
    pub fn new(attribute: Attribute, value: impl Into<String>, rank: u8) -> Result<Self, TypeError> {
        let value = value.into();
        if value.trim().is_empty() {
            return Err(TypeError::EmptyAttributeValue);
        }
        if rank == 0 || rank > 3 {
            return Err(TypeError::BadAttributeRank(rank));
        }
        Ok(Self {
            attribute,
            value,
            rank,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExprType {
    RegionalCaption,
    Relation,
    Attribute,
}

impl ExprType {
    pub fn name(self) -> &'static str {
        match self {
            ExprType::RegionalCaption => "regional_caption",
            ExprType::Relation => "relation",
            ExprType::Attribute => "attribute",
        }
    }
}

/// Where an expression came from: the prompt that elicited it, the backend
/// that answered, and the backend's confidence score, where applicable.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

/// One text query tied to one object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferringExpression {
    pub text: String,
    pub expr_type: ExprType,
    pub object_id: String,
    #[serde(default)]
    pub provenance: Provenance,
}

impl ReferringExpression {
    /// Builds an expression, keeping `text` verbatim. Fails on text that is
    /// empty after trimming, and on caption/attribute expressions missing a
    /// provenance prompt.
    pub fn new(
        text: impl Into<String>,
        expr_type: ExprType,
        object_id: impl Into<String>,
        provenance: Provenance,
    ) -> Result<Self, TypeError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(TypeError::EmptyExpressionText);
        }
        if matches!(expr_type, ExprType::RegionalCaption | ExprType::Attribute)
            && provenance.prompt.is_none()
        {
            return Err(TypeError::MissingPrompt(expr_type));
        }
        Ok(Self {
            text,
            expr_type,
            object_id: object_id.into(),
            provenance,
        })
    }
}

/// Output unit: one object plus the expressions that refer to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingRecord {
    pub image: ImageRecord,
    pub object: ObjectInstance,
    pub expressions: Vec<ReferringExpression>,
}

impl GroundingRecord {
    pub fn new(
        image: ImageRecord,
        object: ObjectInstance,
        expressions: Vec<ReferringExpression>,
    ) -> Result<Self, TypeError> {
        if expressions.is_empty() {
            return Err(TypeError::NoExpressions);
        }
        if let Some(bad) = expressions.iter().find(|e| e.object_id != object.object_id) {
            return Err(TypeError::ObjectMismatch {
                expr_object: bad.object_id.clone(),
                record_object: object.object_id.clone(),
            });
        }
        Ok(Self {
            image,
            object,
            expressions,
        })
    }
}

pub type ImageIndex = HashMap<String, ImageRecord>;
pub type CategoryIndex = HashMap<u64, Category>;

pub fn image_index(images: &[ImageRecord]) -> ImageIndex {
    images
        .iter()
        .map(|i| (i.image_id.clone(), i.clone()))
        .collect()
}

pub fn category_index(categories: &[Category]) -> CategoryIndex {
    categories
        .iter()
        .map(|c| (c.category_id, c.clone()))
        .collect()
}

/// Center of `bbox` normalized against the image dimensions, clamped to
/// `[0, 1]`.
pub fn normalized_center(
    bbox: &BBox,
    image: &ImageRecord,
) -> Result<NormalizedCenter, TypeError> {
    if image.width == 0 || image.height == 0 {
        return Err(TypeError::ZeroImageDimension {
            image_id: image.image_id.clone(),
            width: image.width,
            height: image.height,
        });
    }
    let cx = (bbox.x + bbox.w / 2.0) / f64::from(image.width);
    let cy = (bbox.y + bbox.h / 2.0) / f64::from(image.height);
    Ok(NormalizedCenter {
        cx: cx.clamp(0.0, 1.0),
        cy: cy.clamp(0.0, 1.0),
    })
}

/// The 80 COCO class names (2017 naming).
pub const COCO80_CLASSES: [&str; 80] = [
    "person",
    "bicycle",
    "car",
    "motorcycle",
    "airplane",
    "bus",
    "train",
    "truck",
    "boat",
    "traffic light",
    "fire hydrant",
    "stop sign",
    "parking meter",
    "bench",
    "bird",
    "cat",
    "dog",
    "horse",
    "sheep",
    "cow",
    "elephant",
    "bear",
    "zebra",
    "giraffe",
    "backpack",
    "umbrella",
    "handbag",
    "tie",
    "suitcase",
    "frisbee",
    "skis",
    "snowboard",
    "sports ball",
    "kite",
    "baseball bat",
    "baseball glove",
    "skateboard",
    "surfboard",
    "tennis racket",
    "bottle",
    "wine glass",
    "cup",
    "fork",
    "knife",
    "spoon",
    "bowl",
    "banana",
    "apple",
    "sandwich",
    "orange",
    "broccoli",
    "carrot",
    "hot dog",
    "pizza",
    "donut",
    "cake",
    "chair",
    "couch",
    "potted plant",
    "bed",
    "dining table",
    "toilet",
    "tv",
    "laptop",
    "mouse",
    "remote",
    "keyboard",
    "cell phone",
    "microwave",
    "oven",
    "toaster",
    "sink",
    "refrigerator",
    "book",
    "clock",
    "vase",
    "scissors",
    "teddy bear",
    "hair drier",
    "toothbrush",
];

pub fn is_coco80_class(name: &str) -> bool {
    COCO80_CLASSES.contains(&name)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(width: u32, height: u32) -> ImageRecord {
        ImageRecord {
            image_id: "img".into(),
            width,
            height,
            uri: "img.png".into(),
            source: "coco".into(),
        }
    }

    #[test]
    fn full_frame_box_centers_at_midpoint() {
        let b = BBox::new(0.0, 0.0, 100.0, 100.0).unwrap();
        let c = normalized_center(&b, &image(100, 100)).unwrap();
        assert_eq!((c.cx, c.cy), (0.5, 0.5));
    }

    #[test]
    fn normalized_center_hand_arithmetic() {
        // (0 + 50/2)/400 = 0.0625, (0 + 200/2)/200 = 0.5
        let b = BBox::new(0.0, 0.0, 50.0, 200.0).unwrap();
        let c = normalized_center(&b, &image(400, 200)).unwrap();
        assert_eq!((c.cx, c.cy), (0.0625, 0.5));

        // (350 + 25)/400 = 0.9375, (150 + 25)/200 = 0.875
        let b = BBox::new(350.0, 150.0, 50.0, 50.0).unwrap();
        let c = normalized_center(&b, &image(400, 200)).unwrap();
        assert_eq!((c.cx, c.cy), (0.9375, 0.875));
    }

    #[test]
    fn zero_image_dimension_is_an_error() {
        let b = BBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        assert!(matches!(
            normalized_center(&b, &image(0, 100)),
            Err(TypeError::ZeroImageDimension { .. })
        ));
    }

    #[test]
    fn bbox_rejects_degenerate_shapes() {
        assert!(BBox::new(0.0, 0.0, 0.0, 10.0).is_err());
        assert!(BBox::new(0.0, 0.0, 10.0, -1.0).is_err());
        assert!(BBox::new(-1.0, 0.0, 10.0, 10.0).is_err());
        assert!(BBox::new(0.0, 0.0, f64::NAN, 10.0).is_err());
    }

    #[test]
    fn bbox_clamp_trims_overhang_and_drops_empties() {
        let b = BBox::new(95.0, 10.0, 10.0, 10.0).unwrap();
        let clamped = b.clamp_to(100, 100).unwrap();
        assert_eq!(clamped.w, 5.0);
        let outside = BBox::new(200.0, 200.0, 10.0, 10.0).unwrap();
        assert!(outside.clamp_to(100, 100).is_none());
    }

    #[test]
    fn bbox_serializes_as_array() {
        let b = BBox::new(1.0, 2.0, 3.0, 4.0).unwrap();
        assert_eq!(serde_json::to_string(&b).unwrap(), "[1.0,2.0,3.0,4.0]");
        let back: BBox = serde_json::from_str("[1.0,2.0,3.0,4.0]").unwrap();
        assert_eq!(b, back);
        assert!(serde_json::from_str::<BBox>("[1.0,2.0,0.0,4.0]").is_err());
    }

    #[test]
    fn relation_tuple_arity_is_enforced() {
        assert!(RelationTuple::absolute("cup", Relation::LeftOf).is_err());
        assert!(RelationTuple::relative("cup", Relation::Middle, "dog").is_err());
        let t = RelationTuple::relative("cup", Relation::LeftOf, "dog").unwrap();
        assert_eq!(t.object_noun.as_deref(), Some("dog"));
    }

    #[test]
    fn expression_invariants() {
        assert!(ReferringExpression::new(
            "  ",
            ExprType::Relation,
            "o1",
            Provenance::default()
        )
        .is_err());
        // Caption without a prompt violates the provenance invariant.
        assert!(ReferringExpression::new(
            "a cup",
            ExprType::RegionalCaption,
            "o1",
            Provenance::default()
        )
        .is_err());
        // Verbatim whitespace is preserved.
        let e = ReferringExpression::new(
            " a cup ",
            ExprType::RegionalCaption,
            "o1",
            Provenance {
                prompt: Some("p".into()),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(e.text, " a cup ");
    }

    #[test]
    fn grounding_record_checks_expression_ownership() {
        let img = image(10, 10);
        let obj = ObjectInstance {
            object_id: "o1".into(),
            image_id: "img".into(),
            category_id: 1,
            bbox: BBox::new(0.0, 0.0, 5.0, 5.0).unwrap(),
            mask: None,
            det_confidence: None,
        };
        let expr = ReferringExpression::new(
            "cup left",
            ExprType::Relation,
            "o2",
            Provenance::default(),
        )
        .unwrap();
        assert!(GroundingRecord::new(img.clone(), obj.clone(), vec![expr]).is_err());
        assert!(GroundingRecord::new(img, obj, vec![]).is_err());
    }

    #[test]
    fn coco80_list_is_exactly_eighty_distinct_names() {
        let set: std::collections::BTreeSet<_> = COCO80_CLASSES.iter().collect();
        assert_eq!(set.len(), 80);
        assert!(is_coco80_class("dining table"));
        assert!(!is_coco80_class("dinning table"));
    }
}
