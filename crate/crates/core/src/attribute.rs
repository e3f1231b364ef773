//! Attribute-rich annotation: per-attribute prompts, answer rejection, and
//! noun/adjective composition.
//!
//! The seven-attribute taxonomy and the per-class applicability lists are
//! frozen into shipped defaults; both are also loadable from editable data
//! files. Gender and identity answers join the class label as nouns; cloth,
//! action, color, material, and shape answers act as adjectives.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use thiserror::Error;

use crate::types::{
    Attribute, AttributeTag, ExprType, ObjectInstance, Provenance, ReferringExpression,
    COCO80_CLASSES,
};
use crate::vlm::{VlmAnswer, VlmBackend, VlmError, VlmRequest, MAX_ANSWERS};

#[derive(Debug, Error)]
pub enum AttributeError {
    #[error("attribute {attribute:?} is not applicable to class {class:?}")]
    Inapplicable { attribute: Attribute, class: String },
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: expected `attribute<TAB>class,class,...`")]
    BadMapLine { path: String, line: usize },
    #[error("{path}:{line}: unknown attribute {name:?}")]
    UnknownAttribute {
        path: String,
        line: usize,
        name: String,
    },
}

/// Prompt template for one attribute; `{class}` is the category-name slot.
/// The person-specific prompts have no slot.
pub fn prompt_template(attribute: Attribute) -> &'static str {
    match attribute {
        Attribute::Cloth => "What is the person wearing?",
        Attribute::Gender => "What is the person's gender?",
        Attribute::Identity => "What is the identity of the person?",
        Attribute::Action => "What is the {class} doing?",
        Attribute::Color => "What is the color of the {class}?",
        Attribute::Material => "What is the material of the {class}?",
        Attribute::Shape => "What is the shape of the {class}?",
    }
}

fn render_prompt(attribute: Attribute, class_name: &str) -> String {
    prompt_template(attribute).replace("{class}", class_name)
}

/// Classes the action attribute applies to.
pub const ACTION_CLASSES: [&str; 11] = [
    "person", "bird", "cat", "dog", "horse", "sheep", "cow", "elephant", "bear", "zebra",
    "giraffe",
];

/// Classes the material attribute applies to.
pub const MATERIAL_CLASSES: [&str; 23] = [
    "bench",
    "backpack",
    "umbrella",
    "handbag",
    "tie",
    "suitcase",
    "sports ball",
    "bottle",
    "wine glass",
    "cup",
    "fork",
    "knife",
    "spoon",
    "bowl",
    "chair",
    "couch",
    "bed",
    "dining table",
    "toilet",
    "sink",
    "clock",
    "boat",
    "vase",
];

/// Classes the shape attribute applies to.
pub const SHAPE_CLASSES: [&str; 15] = [
    "stop sign",
    "parking meter",
    "bench",
    "handbag",
    "suitcase",
    "kite",
    "bottle",
    "cup",
    "bowl",
    "dining table",
    "couch",
    "bed",
    "toilet",
    "clock",
    "vase",
];

/// Which attribute kinds may be queried for which object classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ApplicabilityMap {
    entries: BTreeMap<Attribute, BTreeSet<String>>,
}

impl Default for ApplicabilityMap {
    fn default() -> Self {
        let person: BTreeSet<String> = ["person".to_string()].into();
        let mut entries = BTreeMap::new();
        entries.insert(Attribute::Cloth, person.clone());
        entries.insert(Attribute::Gender, person.clone());
        entries.insert(Attribute::Identity, person);
        entries.insert(
            Attribute::Action,
            ACTION_CLASSES.iter().map(|s| s.to_string()).collect(),
        );
        entries.insert(
            Attribute::Material,
            MATERIAL_CLASSES.iter().map(|s| s.to_string()).collect(),
        );
        entries.insert(
            Attribute::Shape,
            SHAPE_CLASSES.iter().map(|s| s.to_string()).collect(),
        );
        entries.insert(
            Attribute::Color,
            COCO80_CLASSES.iter().map(|s| s.to_string()).collect(),
        );
        Self { entries }
    }
}

impl ApplicabilityMap {
    /// Parses the data-file form: one line per attribute,
    /// `attribute<TAB>class,class,...`. `#` comment lines are allowed;
    /// attributes absent from the file apply to nothing.
    pub fn from_path(path: &Path) -> Result<Self, AttributeError> {
        let display = path.display().to_string();
        let raw = fs::read_to_string(path).map_err(|source| AttributeError::Io {
            path: display.clone(),
            source,
        })?;
        let mut entries = BTreeMap::new();
        for (idx, line) in raw.lines().enumerate() {
            let line_no = idx + 1;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let Some((name, classes)) = line.split_once('\t') else {
                return Err(AttributeError::BadMapLine {
                    path: display,
                    line: line_no,
                });
            };
            let Some(attribute) = Attribute::from_name(name.trim()) else {
                return Err(AttributeError::UnknownAttribute {
                    path: display,
                    line: line_no,
                    name: name.trim().to_string(),
                });
            };
            let set: BTreeSet<String> = classes
                .split(',')
                .map(|c| c.trim().to_lowercase())
                .filter(|c| !c.is_empty())
                .collect();
            entries.insert(attribute, set);
        }
        Ok(Self { entries })
    }

    /// Writes the data-file form, attributes in canonical order.
    pub fn write_to<W: Write>(&self, mut writer: W) -> std::io::Result<()> {
        for attribute in Attribute::ALL {
            let classes = self.classes_for(attribute);
            let joined: Vec<&str> = classes.iter().map(String::as_str).collect();
            writeln!(writer, "{}\t{}", attribute.name(), joined.join(","))?;
        }
        Ok(())
    }

    pub fn classes_for(&self, attribute: Attribute) -> &BTreeSet<String> {
        static EMPTY: std::sync::OnceLock<BTreeSet<String>> = std::sync::OnceLock::new();
        self.entries
            .get(&attribute)
            .unwrap_or_else(|| EMPTY.get_or_init(BTreeSet::new))
    }

    pub fn is_applicable(&self, attribute: Attribute, class_name: &str) -> bool {
        self.classes_for(attribute).contains(class_name)
    }

    /// Attributes applicable to a class, in canonical attribute order.
    pub fn applicable(&self, class_name: &str) -> Vec<Attribute> {
        Attribute::ALL
            .into_iter()
            .filter(|&a| self.is_applicable(a, class_name))
            .collect()
    }
}

/// The prompt for an (attribute, class) pair, erroring on inapplicable
/// pairs.
pub fn attribute_prompt(
    attribute: Attribute,
    class_name: &str,
    map: &ApplicabilityMap,
) -> Result<String, AttributeError> {
    if !map.is_applicable(attribute, class_name) {
        return Err(AttributeError::Inapplicable {
            attribute,
            class: class_name.to_string(),
        });
    }
    Ok(render_prompt(attribute, class_name))
}

/// Tokens treated as non-answers. Backends emit these when an attribute
/// does not suit the object.
pub const REJECTION_TOKENS: [&str; 5] = ["unknown", "unkown", "unsuitable", "n/a", "none"];

/// Case-insensitive, trim-normalized rejection table, loadable from a
/// one-token-per-line data file.
#[derive(Debug, Clone, PartialEq)]
pub struct RejectionLexicon {
    tokens: BTreeSet<String>,
}

impl Default for RejectionLexicon {
    fn default() -> Self {
        Self {
            tokens: REJECTION_TOKENS.iter().map(|t| t.to_string()).collect(),
        }
    }
}

impl RejectionLexicon {
    pub fn from_path(path: &Path) -> Result<Self, AttributeError> {
        let raw = fs::read_to_string(path).map_err(|source| AttributeError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(Self::from_str_contents(&raw))
    }

    pub fn from_str_contents(raw: &str) -> Self {
        let tokens = raw
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_lowercase)
            .collect();
        Self { tokens }
    }

    pub fn is_rejected(&self, answer: &str) -> bool {
        self.tokens.contains(&answer.trim().to_lowercase())
    }

    pub fn tokens(&self) -> &BTreeSet<String> {
        &self.tokens
    }
}

/// Keeps at most `top_k` answers for one attribute, drops rejection tokens,
/// trims values, and ranks the survivors 1-based. An attribute whose
/// answers all reject simply yields no tags.
pub fn tags_from_answers(
    attribute: Attribute,
    answers: &[VlmAnswer],
    lexicon: &RejectionLexicon,
    top_k: usize,
) -> Vec<AttributeTag> {
    answers
        .iter()
        .take(top_k)
        .filter(|a| !lexicon.is_rejected(&a.text))
        .map(|a| a.text.trim().to_string())
        .filter(|v| !v.is_empty())
        .enumerate()
        .map(|(idx, value)| {
            AttributeTag::new(attribute, value, (idx + 1) as u8).expect("validated tag")
        })
        .collect()
}

/// The per-attribute requests for one object region, in canonical attribute
/// order. Shared by the single-object path and the batched pipeline path.
pub fn attribute_requests(
    region: &[u8],
    class_name: &str,
    map: &ApplicabilityMap,
    top_k: usize,
) -> Result<Vec<(Attribute, VlmRequest)>, VlmError> {
    let mut requests = Vec::new();
    for attribute in map.applicable(class_name) {
        let prompt = render_prompt(attribute, class_name);
        requests.push((
            attribute,
            VlmRequest::new(region.to_vec(), prompt, top_k.min(MAX_ANSWERS))?,
        ));
    }
    Ok(requests)
}

/// Collected tags for one object plus any per-attribute backend failures;
/// a failing attribute is skipped without affecting the others.
#[derive(Debug, Default)]
pub struct CollectedTags {
    pub tags: Vec<AttributeTag>,
    pub failures: Vec<(Attribute, VlmError)>,
}

/// Queries the backend once per applicable attribute and gathers the
/// accepted tags.
pub fn collect_attribute_tags(
    object: &ObjectInstance,
    region: &[u8],
    client: &dyn VlmBackend,
    map: &ApplicabilityMap,
    lexicon: &RejectionLexicon,
    class_name: &str,
    top_k: usize,
) -> CollectedTags {
    let _ = object;
    let mut collected = CollectedTags::default();
    let requests = match attribute_requests(region, class_name, map, top_k) {
        Ok(reqs) => reqs,
        Err(err) => {
            collected.failures.push((Attribute::Color, err));
            return collected;
        }
    };
    for (attribute, request) in requests {
        match client.query(&request) {
            Ok(answers) => {
                collected
                    .tags
                    .extend(tags_from_answers(attribute, &answers, lexicon, top_k));
            }
            Err(err) => collected.failures.push((attribute, err)),
        }
    }
    collected
}

/// Composes attribute expressions: the noun pool is the class label plus
/// gender/identity values, the adjective pool is every other value; each
/// (noun, adjective) pair yields one expression with "adj noun" or
/// "noun adj" order chosen by the seeded rng (noun-major pair order).
/// An empty adjective pool yields nothing: a bare noun would duplicate the
/// category label.
pub fn compose_attribute_expressions(
    tags: &[AttributeTag],
    class_name: &str,
    object_id: &str,
    backend_id: Option<&str>,
    rng: &mut impl Rng,
) -> Vec<ReferringExpression> {
    let mut nouns: Vec<String> = vec![class_name.to_string()];
    for tag in tags {
        if tag.attribute.is_noun_role() && !nouns.contains(&tag.value) {
            nouns.push(tag.value.clone());
        }
    }
    let adjectives: Vec<&AttributeTag> = tags
        .iter()
        .filter(|t| !t.attribute.is_noun_role())
        .collect();
    if adjectives.is_empty() {
        return Vec::new();
    }

    let mut expressions = Vec::with_capacity(nouns.len() * adjectives.len());
    for noun in &nouns {
        for tag in &adjectives {
            let adjective = &tag.value;
            let text = if rng.random_bool(0.5) {
                format!("{adjective} {noun}")
            } else {
                format!("{noun} {adjective}")
            };
            let expr = ReferringExpression::new(
                text,
                ExprType::Attribute,
                object_id,
                Provenance {
                    prompt: Some(render_prompt(tag.attribute, class_name)),
                    backend_id: backend_id.map(str::to_string),
                    score: None,
                },
            )
            .expect("nonempty composition");
            expressions.push(expr);
        }
    }
    expressions
}
