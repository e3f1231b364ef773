//! Rule-based spatial-relation modeling over box geometry.
//!
//! Relations come from three dimensions. Horizontally, each object gets an
//! absolute zone label from its normalized center (left `[0, 0.25)`, middle
//! `[0.25, 0.75]`, right `(0.75, 1]` at the default bounds) plus pairwise
//! left-of/right-of tuples against every other object in the image.
//! Vertically there are only absolute top/bottom labels, no middle.
//! Depth is approximated by box area: when the smallest-to-largest area
//! ratio in a scene is below the enable threshold, each object is labeled
//! behind/front by its area ratio against the largest object.
//!
//! Zone boundaries are interval endpoints, so comparisons are exact, never
//! epsilon-padded.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::PipelineConfig;
use crate::types::{
    normalized_center, CategoryIndex, ExprType, ImageIndex, ImageRecord, NormalizedCenter,
    ObjectInstance, Provenance, ReferringExpression, Relation, RelationTuple, TypeError,
};
use crate::util::derive_seed;

#[derive(Debug, Error)]
pub enum RelationError {
    #[error("object {object_id} references image {image_id} missing from the index")]
    MissingImage {
        object_id: String,
        image_id: String,
    },
    #[error("object {object_id} references unknown category {category_id}")]
    UnknownCategory { object_id: String, category_id: u64 },
    #[error(transparent)]
    Type(#[from] TypeError),
}

/// Zone bounds for the three dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RelationConfig {
    pub horiz_left_bound: f64,
    pub horiz_right_bound: f64,
    pub vert_top_bound: f64,
    pub vert_bottom_bound: f64,
    pub depth_enable_ratio: f64,
    pub depth_behind_bound: f64,
    pub depth_front_bound: f64,
    /// Gates the far-left/far-right labels for strict horizontal extremes.
    pub far_extreme_enabled: bool,
}

impl Default for RelationConfig {
    fn default() -> Self {
        Self::from(&PipelineConfig::default())
    }
}

impl From<&PipelineConfig> for RelationConfig {
    fn from(cfg: &PipelineConfig) -> Self {
        Self {
            horiz_left_bound: cfg.horiz_left_bound,
            horiz_right_bound: cfg.horiz_right_bound,
            vert_top_bound: cfg.vert_top_bound,
            vert_bottom_bound: cfg.vert_bottom_bound,
            depth_enable_ratio: cfg.depth_enable_ratio,
            depth_behind_bound: cfg.depth_behind_bound,
            depth_front_bound: cfg.depth_front_bound,
            far_extreme_enabled: true,
        }
    }
}

/// Horizontal zone of a normalized center. Exactly one of left/middle/right
/// holds for every `cx`; both middle bounds are inclusive.
pub fn horizontal_absolute(c: NormalizedCenter, cfg: &RelationConfig) -> Relation {
    if c.cx < cfg.horiz_left_bound {
        Relation::Left
    } else if c.cx > cfg.horiz_right_bound {
        Relation::Right
    } else {
        Relation::Middle
    }
}

/// Vertical zone: top strictly below the top bound, bottom strictly above
/// the bottom bound, nothing in between (there is no vertical middle label).
pub fn vertical_absolute(c: NormalizedCenter, cfg: &RelationConfig) -> Option<Relation> {
    if c.cy < cfg.vert_top_bound {
        Some(Relation::Top)
    } else if c.cy > cfg.vert_bottom_bound {
        Some(Relation::Bottom)
    } else {
        None
    }
}

fn noun<'a>(
    object: &ObjectInstance,
    categories: &'a CategoryIndex,
) -> Result<&'a str, RelationError> {
    let cat = categories
        .get(&object.category_id)
        .ok_or(RelationError::UnknownCategory {
            object_id: object.object_id.clone(),
            category_id: object.category_id,
        })?;
    Ok(cat.coco80_name.as_deref().unwrap_or(&cat.name))
}

fn center(
    object: &ObjectInstance,
    images: &ImageIndex,
) -> Result<NormalizedCenter, RelationError> {
    let image = images
        .get(&object.image_id)
        .ok_or_else(|| RelationError::MissingImage {
            object_id: object.object_id.clone(),
            image_id: object.image_id.clone(),
        })?;
    normalized_center(&object.bbox, image).map_err(RelationError::from)
}

/// Pairwise horizontal comparisons of the target against every other
/// object: left-of when the target's center is strictly left, right-of when
/// strictly right, nothing on an exact tie (neither phrasing would be
/// truthful).
pub fn relative_horizontal(
    target: &ObjectInstance,
    others: &[ObjectInstance],
    images: &ImageIndex,
    categories: &CategoryIndex,
) -> Result<Vec<RelationTuple>, RelationError> {
    let target_noun = noun(target, categories)?.to_string();
    let target_cx = center(target, images)?.cx;
    let mut tuples = Vec::new();
    for other in others {
        if other.object_id == target.object_id {
            continue;
        }
        let other_cx = center(other, images)?.cx;
        let rel = if target_cx < other_cx {
            Relation::LeftOf
        } else if target_cx > other_cx {
            Relation::RightOf
        } else {
            continue;
        };
        tuples.push(RelationTuple::relative(
            target_noun.clone(),
            rel,
            noun(other, categories)?,
        )?);
    }
    Ok(tuples)
}

/// Far-left/far-right: the target must hold the strict horizontal extreme
/// among all retained objects in the image *and* sit in the matching
/// absolute zone. Ties at the extreme disable the label for everyone.
pub fn far_extremes(
    target: &ObjectInstance,
    peers: &[ObjectInstance],
    images: &ImageIndex,
    cfg: &RelationConfig,
) -> Result<Option<Relation>, RelationError> {
    if !cfg.far_extreme_enabled {
        return Ok(None);
    }
    let target_cx = center(target, images)?.cx;
    let mut strictly_min = true;
    let mut strictly_max = true;
    for peer in peers {
        if peer.object_id == target.object_id {
            continue;
        }
        let peer_cx = center(peer, images)?.cx;
        if peer_cx <= target_cx {
            strictly_min = false;
        }
        if peer_cx >= target_cx {
            strictly_max = false;
        }
    }
    let zone = horizontal_absolute(center(target, images)?, cfg);
    Ok(if strictly_min && zone == Relation::Left {
        Some(Relation::FarLeft)
    } else if strictly_max && zone == Relation::Right {
        Some(Relation::FarRight)
    } else {
        None
    })
}

/// Depth labels for one scene, keyed by object id.
///
/// The scene-level gate requires significant scale contrast: with a single
/// object, or when min-area/max-area is at or above the enable ratio, every
/// label is `None`. Otherwise each object is labeled by its area ratio
/// against the largest object: behind strictly below the behind bound,
/// front strictly above the front bound.
pub fn depth_relations(
    objects: &[ObjectInstance],
    cfg: &RelationConfig,
) -> HashMap<String, Option<Relation>> {
    let mut labels: HashMap<String, Option<Relation>> = objects
        .iter()
        .map(|o| (o.object_id.clone(), None))
        .collect();
    if objects.len() < 2 {
        return labels;
    }
    let areas: Vec<f64> = objects.iter().map(|o| o.bbox.area()).collect();
    let a_max = areas.iter().cloned().fold(f64::MIN, f64::max);
    let a_min = areas.iter().cloned().fold(f64::MAX, f64::min);
    if a_min / a_max >= cfg.depth_enable_ratio {
        return labels;
    }
    for (object, area) in objects.iter().zip(&areas) {
        let ratio = area / a_max;
        let label = if ratio < cfg.depth_behind_bound {
            Some(Relation::Behind)
        } else if ratio > cfg.depth_front_bound {
            Some(Relation::Front)
        } else {
            None
        };
        labels.insert(object.object_id.clone(), label);
    }
    labels
}

// ---------------------------------------------------------------------------
// Phrase templates
// ---------------------------------------------------------------------------

const LEFT_OF_TEMPLATES: &[&str] = &["A to the left of B"];
const RIGHT_OF_TEMPLATES: &[&str] = &["A to the right of B"];
const LEFT_TEMPLATES: &[&str] = &["A left", "left A"];
const RIGHT_TEMPLATES: &[&str] = &["A right", "right A"];
const FAR_LEFT_TEMPLATES: &[&str] = &["A on the far left", "A far left", "far left A"];
const FAR_RIGHT_TEMPLATES: &[&str] = &["A on the far right", "A far right", "far right A"];
const MIDDLE_TEMPLATES: &[&str] = &["A middle", "middle A", "center A", "A center"];
const TOP_TEMPLATES: &[&str] = &["A top", "top A"];
const BOTTOM_TEMPLATES: &[&str] = &["A bottom", "bottom A"];
const BEHIND_TEMPLATES: &[&str] = &["A behind", "behind A"];
const FRONT_TEMPLATES: &[&str] = &["A front", "front A"];

/// Phrase templates for one relation kind. `A` is the subject noun slot,
/// `B` the object noun slot.
pub fn templates_for(rel: Relation) -> &'static [&'static str] {
    match rel {
        Relation::LeftOf => LEFT_OF_TEMPLATES,
        Relation::RightOf => RIGHT_OF_TEMPLATES,
        Relation::Left => LEFT_TEMPLATES,
        Relation::Right => RIGHT_TEMPLATES,
        Relation::FarLeft => FAR_LEFT_TEMPLATES,
        Relation::FarRight => FAR_RIGHT_TEMPLATES,
        Relation::Middle => MIDDLE_TEMPLATES,
        Relation::Top => TOP_TEMPLATES,
        Relation::Bottom => BOTTOM_TEMPLATES,
        Relation::Behind => BEHIND_TEMPLATES,
        Relation::Front => FRONT_TEMPLATES,
    }
}

/// The full template table, exportable to a data file for audit.
pub fn template_table() -> BTreeMap<&'static str, Vec<&'static str>> {
    Relation::ALL
        .into_iter()
        .map(|rel| (rel.kind_name(), templates_for(rel).to_vec()))
        .collect()
}

/// Renders every template for the tuple's relation kind, in table order,
/// with the noun slots substituted.
pub fn render_phrases(tuple: &RelationTuple) -> Vec<String> {
    templates_for(tuple.rel)
        .iter()
        .map(|template| {
            template
                .split(' ')
                .map(|token| match token {
                    "A" => tuple.subject_noun.as_str(),
                    "B" => tuple
                        .object_noun
                        .as_deref()
                        .expect("relative tuple carries an object noun"),
                    other => other,
                })
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Scene-level generation
// ---------------------------------------------------------------------------

/// All relation tuples for the retained objects of one image, in a pinned
/// order per object: absolute horizontal, far extreme, vertical, depth,
/// then pairwise relations against the other objects in input order.
pub fn scene_tuples(
    objects: &[ObjectInstance],
    images: &ImageIndex,
    categories: &CategoryIndex,
    cfg: &RelationConfig,
) -> Result<Vec<(String, Vec<RelationTuple>)>, RelationError> {
    let depth = depth_relations(objects, cfg);
    let mut out = Vec::with_capacity(objects.len());
    for object in objects {
        let object_noun = noun(object, categories)?.to_string();
        let c = center(object, images)?;
        let mut tuples = Vec::new();
        tuples.push(RelationTuple::absolute(
            object_noun.clone(),
            horizontal_absolute(c, cfg),
        )?);
        if let Some(rel) = far_extremes(object, objects, images, cfg)? {
            tuples.push(RelationTuple::absolute(object_noun.clone(), rel)?);
        }
        if let Some(rel) = vertical_absolute(c, cfg) {
            tuples.push(RelationTuple::absolute(object_noun.clone(), rel)?);
        }
        if let Some(rel) = depth.get(&object.object_id).copied().flatten() {
            tuples.push(RelationTuple::absolute(object_noun.clone(), rel)?);
        }
        tuples.extend(relative_horizontal(object, objects, images, categories)?);
        out.push((object.object_id.clone(), tuples));
    }
    Ok(out)
}

/// Relation expressions for one image's retained objects, keyed by object
/// id. When `phrase_sample` is set, that many renderings are drawn per
/// tuple (template order preserved); otherwise every rendering is kept.
pub fn generate_relation_expressions(
    objects: &[ObjectInstance],
    images: &ImageIndex,
    categories: &CategoryIndex,
    cfg: &RelationConfig,
    rng: &mut impl Rng,
    phrase_sample: Option<usize>,
) -> Result<HashMap<String, Vec<ReferringExpression>>, RelationError> {
    let tuples = scene_tuples(objects, images, categories, cfg)?;
    let mut out = HashMap::with_capacity(tuples.len());
    for (object_id, object_tuples) in tuples {
        let mut expressions = Vec::new();
        for tuple in &object_tuples {
            let phrases = render_phrases(tuple);
            let chosen: Vec<String> = match phrase_sample {
                Some(k) if k < phrases.len() => {
                    let mut picks = rand::seq::index::sample(rng, phrases.len(), k).into_vec();
                    picks.sort_unstable();
                    picks.into_iter().map(|i| phrases[i].clone()).collect()
                }
                _ => phrases,
            };
            for text in chosen {
                expressions.push(ReferringExpression::new(
                    text,
                    ExprType::Relation,
                    object_id.clone(),
                    Provenance::default(),
                )?);
            }
        }
        out.insert(object_id, expressions);
    }
    Ok(out)
}

/// One image plus its retained objects, the unit of batch processing.
#[derive(Debug, Clone)]
pub struct RelationScene {
    pub image: ImageRecord,
    pub objects: Vec<ObjectInstance>,
}

type SceneExpressions = HashMap<String, Vec<ReferringExpression>>;

fn scene_seed(base_seed: u64, scene: &RelationScene) -> u64 {
    derive_seed(
        base_seed,
        &["relation", &scene.image.source, &scene.image.image_id],
    )
}

fn generate_one_scene(
    scene: &RelationScene,
    categories: &CategoryIndex,
    cfg: &RelationConfig,
    base_seed: u64,
    phrase_sample: Option<usize>,
) -> Result<SceneExpressions, RelationError> {
    let images: ImageIndex =
        std::iter::once((scene.image.image_id.clone(), scene.image.clone())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(scene_seed(base_seed, scene));
    generate_relation_expressions(
        &scene.objects,
        &images,
        categories,
        cfg,
        &mut rng,
        phrase_sample,
    )
}

/// Batch relation generation over independent scenes. Each scene draws its
/// rng stream from the base seed and its image identity, so the output is
/// identical whichever schedule runs it.
#[cfg(feature = "parallel")]
pub fn generate_for_scenes(
    scenes: &[RelationScene],
    categories: &CategoryIndex,
    cfg: &RelationConfig,
    base_seed: u64,
    phrase_sample: Option<usize>,
) -> Result<Vec<SceneExpressions>, RelationError> {
    scenes
        .par_iter()
        .map(|scene| generate_one_scene(scene, categories, cfg, base_seed, phrase_sample))
        .collect()
}

#[cfg(not(feature = "parallel"))]
pub fn generate_for_scenes(
    scenes: &[RelationScene],
    categories: &CategoryIndex,
    cfg: &RelationConfig,
    base_seed: u64,
    phrase_sample: Option<usize>,
) -> Result<Vec<SceneExpressions>, RelationError> {
    generate_for_scenes_sequential(scenes, categories, cfg, base_seed, phrase_sample)
}

/// Sequential twin of [`generate_for_scenes`], always available for
/// comparison benchmarks.
pub fn generate_for_scenes_sequential(
    scenes: &[RelationScene],
    categories: &CategoryIndex,
    cfg: &RelationConfig,
    base_seed: u64,
    phrase_sample: Option<usize>,
) -> Result<Vec<SceneExpressions>, RelationError> {
    scenes
        .iter()
        .map(|scene| generate_one_scene(scene, categories, cfg, base_seed, phrase_sample))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{image_index, BBox, Category};

    fn cfg() -> RelationConfig {
        RelationConfig::default()
    }

    fn c(cx: f64, cy: f64) -> NormalizedCenter {
        NormalizedCenter { cx, cy }
    }

    #[test]
    fn horizontal_zones_and_boundaries() {
        assert_eq!(horizontal_absolute(c(0.10, 0.5), &cfg()), Relation::Left);
        assert_eq!(horizontal_absolute(c(0.25, 0.5), &cfg()), Relation::Middle);
        assert_eq!(horizontal_absolute(c(0.75, 0.5), &cfg()), Relation::Middle);
        assert_eq!(
            horizontal_absolute(c(0.7500001, 0.5), &cfg()),
            Relation::Right
        );
        assert_eq!(horizontal_absolute(c(0.0, 0.5), &cfg()), Relation::Left);
        assert_eq!(horizontal_absolute(c(1.0, 0.5), &cfg()), Relation::Right);
    }

    #[test]
    fn vertical_zones_and_boundaries() {
        assert_eq!(vertical_absolute(c(0.5, 0.1), &cfg()), Some(Relation::Top));
        assert_eq!(vertical_absolute(c(0.5, 0.5), &cfg()), None);
        assert_eq!(vertical_absolute(c(0.5, 0.25), &cfg()), None);
        assert_eq!(vertical_absolute(c(0.5, 0.75), &cfg()), None);
        assert_eq!(
            vertical_absolute(c(0.5, 0.76), &cfg()),
            Some(Relation::Bottom)
        );
    }

    fn scene_fixture(boxes: &[(&str, u64, f64, f64, f64, f64)]) -> (Vec<ObjectInstance>, ImageIndex, CategoryIndex) {
        let image = ImageRecord {
            image_id: "img".into(),
            width: 100,
            height: 100,
            uri: "img.png".into(),
            source: "coco".into(),
        };
        let objects = boxes
            .iter()
            .map(|&(id, cat, x, y, w, h)| ObjectInstance {
                object_id: id.into(),
                image_id: "img".into(),
                category_id: cat,
                bbox: BBox::new(x, y, w, h).unwrap(),
                mask: None,
                det_confidence: None,
            })
            .collect();
        let categories = [
            Category {
                category_id: 1,
                name: "person".into(),
                coco80_name: None,
            },
            Category {
                category_id: 2,
                name: "dog".into(),
                coco80_name: Some("dog".into()),
            },
        ]
        .iter()
        .map(|c| (c.category_id, c.clone()))
        .collect();
        (objects, image_index(&[image]), categories)
    }

    #[test]
    fn relative_ordering_and_ties() {
        // person centered at cx=0.2, dog at cx=0.8.
        let (objects, images, cats) = scene_fixture(&[
            ("p", 1, 10.0, 40.0, 20.0, 20.0),
            ("d", 2, 70.0, 40.0, 20.0, 20.0),
        ]);
        let tuples = relative_horizontal(&objects[0], &objects, &images, &cats).unwrap();
        assert_eq!(
            tuples,
            vec![RelationTuple::relative("person", Relation::LeftOf, "dog").unwrap()]
        );
        let tuples = relative_horizontal(&objects[1], &objects, &images, &cats).unwrap();
        assert_eq!(
            tuples,
            vec![RelationTuple::relative("dog", Relation::RightOf, "person").unwrap()]
        );

        // Exact center tie produces no tuple in either direction.
        let (objects, images, cats) = scene_fixture(&[
            ("a", 1, 10.0, 10.0, 20.0, 20.0),
            ("b", 2, 10.0, 60.0, 20.0, 20.0),
        ]);
        assert!(relative_horizontal(&objects[0], &objects, &images, &cats)
            .unwrap()
            .is_empty());
        assert!(relative_horizontal(&objects[1], &objects, &images, &cats)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn relative_emits_one_tuple_per_other_object() {
        let (objects, images, cats) = scene_fixture(&[
            ("mid", 1, 40.0, 40.0, 20.0, 20.0),
            ("left", 2, 0.0, 40.0, 20.0, 20.0),
            ("right", 2, 80.0, 40.0, 20.0, 20.0),
        ]);
        let tuples = relative_horizontal(&objects[0], &objects, &images, &cats).unwrap();
        assert_eq!(
            tuples,
            vec![
                RelationTuple::relative("person", Relation::RightOf, "dog").unwrap(),
                RelationTuple::relative("person", Relation::LeftOf, "dog").unwrap(),
            ]
        );
    }

    #[test]
    fn far_extremes_requires_strict_extreme_and_zone() {
        // Centers at cx 0.1 / 0.5 / 0.9.
        let (objects, images, cats) = scene_fixture(&[
            ("a", 1, 0.0, 40.0, 20.0, 20.0),
            ("b", 1, 40.0, 40.0, 20.0, 20.0),
            ("c", 1, 80.0, 40.0, 20.0, 20.0),
        ]);
        let _ = cats;
        assert_eq!(
            far_extremes(&objects[0], &objects, &images, &cfg()).unwrap(),
            Some(Relation::FarLeft)
        );
        assert_eq!(
            far_extremes(&objects[1], &objects, &images, &cfg()).unwrap(),
            None
        );
        assert_eq!(
            far_extremes(&objects[2], &objects, &images, &cfg()).unwrap(),
            Some(Relation::FarRight)
        );

        // Tied minimum disables the label for both.
        let (objects, images, _) = scene_fixture(&[
            ("a", 1, 0.0, 10.0, 20.0, 20.0),
            ("b", 1, 0.0, 60.0, 20.0, 20.0),
            ("c", 1, 80.0, 40.0, 20.0, 20.0),
        ]);
        assert_eq!(
            far_extremes(&objects[0], &objects, &images, &cfg()).unwrap(),
            None
        );
        assert_eq!(
            far_extremes(&objects[1], &objects, &images, &cfg()).unwrap(),
            None
        );

        // Strict extreme but outside the left zone: no label.
        let (objects, images, _) = scene_fixture(&[
            ("a", 1, 30.0, 40.0, 20.0, 20.0),
            ("b", 1, 60.0, 40.0, 20.0, 20.0),
        ]);
        assert_eq!(
            far_extremes(&objects[0], &objects, &images, &cfg()).unwrap(),
            None
        );

        // Disabled by config.
        let (objects, images, _) = scene_fixture(&[
            ("a", 1, 0.0, 40.0, 20.0, 20.0),
            ("b", 1, 80.0, 40.0, 20.0, 20.0),
        ]);
        let mut disabled = cfg();
        disabled.far_extreme_enabled = false;
        assert_eq!(
            far_extremes(&objects[0], &objects, &images, &disabled).unwrap(),
            None
        );
    }

    #[test]
    fn depth_gate_and_zones() {
        // Areas 100 and 1000: gate ratio 0.1 < 0.4 opens labeling.
        let (objects, ..) = scene_fixture(&[
            ("small", 1, 0.0, 0.0, 10.0, 10.0),
            ("large", 1, 0.0, 0.0, 40.0, 25.0),
        ]);
        let labels = depth_relations(&objects, &cfg());
        assert_eq!(labels["small"], Some(Relation::Behind));
        assert_eq!(labels["large"], Some(Relation::Front));

        // Areas 500 and 1000: gate ratio 0.5 >= 0.4 closes labeling.
        let (objects, ..) = scene_fixture(&[
            ("a", 1, 0.0, 0.0, 25.0, 20.0),
            ("b", 1, 0.0, 0.0, 40.0, 25.0),
        ]);
        assert!(depth_relations(&objects, &cfg()).values().all(Option::is_none));

        // Gate ratio exactly 0.4 stays closed.
        let (objects, ..) = scene_fixture(&[
            ("a", 1, 0.0, 0.0, 20.0, 20.0),
            ("b", 1, 0.0, 0.0, 40.0, 25.0),
        ]);
        assert!(depth_relations(&objects, &cfg()).values().all(Option::is_none));

        // Single object: no scale contrast, no label.
        let (objects, ..) = scene_fixture(&[("only", 1, 0.0, 0.0, 10.0, 10.0)]);
        assert!(depth_relations(&objects, &cfg()).values().all(Option::is_none));
    }

    #[test]
    fn depth_middle_band_has_no_label() {
        // Areas 100 / 600 / 1000: ratios 0.1, 0.6, 1.0.
        let (objects, ..) = scene_fixture(&[
            ("behind", 1, 0.0, 0.0, 10.0, 10.0),
            ("neither", 1, 0.0, 0.0, 30.0, 20.0),
            ("front", 1, 0.0, 0.0, 40.0, 25.0),
        ]);
        let labels = depth_relations(&objects, &cfg());
        assert_eq!(labels["behind"], Some(Relation::Behind));
        assert_eq!(labels["neither"], None);
        assert_eq!(labels["front"], Some(Relation::Front));
    }

    #[test]
    fn render_matches_template_table() {
        let t = RelationTuple::relative("person", Relation::LeftOf, "dog").unwrap();
        assert_eq!(render_phrases(&t), vec!["person to the left of dog"]);

        let t = RelationTuple::absolute("cup", Relation::Middle).unwrap();
        assert_eq!(
            render_phrases(&t),
            vec!["cup middle", "middle cup", "center cup", "cup center"]
        );

        let t = RelationTuple::absolute("car", Relation::Front).unwrap();
        assert_eq!(render_phrases(&t), vec!["car front", "front car"]);

        let t = RelationTuple::absolute("dog", Relation::FarLeft).unwrap();
        assert_eq!(
            render_phrases(&t),
            vec!["dog on the far left", "dog far left", "far left dog"]
        );
    }

    #[test]
    fn generate_single_centered_object_is_middle_only() {
        let (objects, images, cats) = scene_fixture(&[("only", 1, 40.0, 40.0, 20.0, 20.0)]);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let out =
            generate_relation_expressions(&objects, &images, &cats, &cfg(), &mut rng, None)
                .unwrap();
        let texts: Vec<_> = out["only"].iter().map(|e| e.text.as_str()).collect();
        assert_eq!(
            texts,
            vec!["person middle", "middle person", "center person", "person center"]
        );
        assert!(out["only"].iter().all(|e| e.expr_type == ExprType::Relation));
    }

    #[test]
    fn generate_two_extreme_objects() {
        // Equal areas at cx 0.1 and 0.9: absolute zone + far extreme + one
        // relative each; the depth gate fails at ratio 1.0.
        let (objects, images, cats) = scene_fixture(&[
            ("a", 1, 0.0, 40.0, 20.0, 20.0),
            ("b", 2, 80.0, 40.0, 20.0, 20.0),
        ]);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let out =
            generate_relation_expressions(&objects, &images, &cats, &cfg(), &mut rng, None)
                .unwrap();
        let a: Vec<_> = out["a"].iter().map(|e| e.text.as_str()).collect();
        assert_eq!(
            a,
            vec![
                "person left",
                "left person",
                "person on the far left",
                "person far left",
                "far left person",
                "person to the left of dog",
            ]
        );
        let b: Vec<_> = out["b"].iter().map(|e| e.text.as_str()).collect();
        assert_eq!(
            b,
            vec![
                "dog right",
                "right dog",
                "dog on the far right",
                "dog far right",
                "far right dog",
                "dog to the right of person",
            ]
        );
    }

    #[test]
    fn generate_empty_scene_is_empty() {
        let (_, images, cats) = scene_fixture(&[]);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let out = generate_relation_expressions(&[], &images, &cats, &cfg(), &mut rng, None)
            .unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn phrase_sampling_is_seeded_and_bounded() {
        let (objects, images, cats) = scene_fixture(&[("only", 1, 40.0, 40.0, 20.0, 20.0)]);
        let run = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = generate_relation_expressions(
                &objects,
                &images,
                &cats,
                &cfg(),
                &mut rng,
                Some(2),
            )
            .unwrap();
            out["only"]
                .iter()
                .map(|e| e.text.clone())
                .collect::<Vec<_>>()
        };
        let a = run(7);
        assert_eq!(a.len(), 2);
        assert_eq!(a, run(7));
        // Sampled phrases are a subset of the full renderings.
        let full = render_phrases(&RelationTuple::absolute("person", Relation::Middle).unwrap());
        assert!(a.iter().all(|t| full.contains(t)));
    }

    #[test]
    fn batch_parallel_matches_sequential() {
        let scenes: Vec<RelationScene> = (0..16)
            .map(|i| {
                let image = ImageRecord {
                    image_id: format!("img{i}"),
                    width: 100,
                    height: 100,
                    uri: format!("img{i}.png"),
                    source: "coco".into(),
                };
                let objects = (0..3)
                    .map(|j| ObjectInstance {
                        object_id: format!("img{i}-o{j}"),
                        image_id: image.image_id.clone(),
                        category_id: 1 + (j % 2),
                        bbox: BBox::new(5.0 + 25.0 * j as f64, 10.0 + 7.0 * j as f64, 20.0, 20.0 + 5.0 * j as f64)
                            .unwrap(),
                        mask: None,
                        det_confidence: None,
                    })
                    .collect();
                RelationScene { image, objects }
            })
            .collect();
        let categories: CategoryIndex = [
            Category {
                category_id: 1,
                name: "person".into(),
                coco80_name: None,
            },
            Category {
                category_id: 2,
                name: "dog".into(),
                coco80_name: None,
            },
        ]
        .iter()
        .map(|c| (c.category_id, c.clone()))
        .collect();

        let par = generate_for_scenes(&scenes, &categories, &cfg(), 7, Some(2)).unwrap();
        let seq =
            generate_for_scenes_sequential(&scenes, &categories, &cfg(), 7, Some(2)).unwrap();
        assert_eq!(par.len(), seq.len());
        for (p, s) in par.iter().zip(&seq) {
            assert_eq!(p, s);
        }
    }
}
