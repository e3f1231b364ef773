//! Filter-chain properties: idempotence, commutation, and exactly-once
//! reject accounting.

use std::collections::{BTreeSet, HashMap};

use proptest::prelude::*;

use refexp_core::ingest::{
    apply_exclusion, filter_by_confidence, filter_small_objects, restrict_categories,
    CategoryMap, ExclusionList,
};
use refexp_core::pipeline::{prepare_source, PrepOptions};
use refexp_core::types::{image_index, BBox, Category, ImageRecord, ObjectInstance};
use refexp_core::PipelineConfig;

#[derive(Debug, Clone)]
struct MiniDataset {
    images: Vec<ImageRecord>,
    objects: Vec<ObjectInstance>,
    categories: Vec<Category>,
    excluded: Vec<String>,
}

fn dataset_strategy() -> impl Strategy<Value = MiniDataset> {
    let image_count = 1usize..5;
    image_count.prop_flat_map(|n_images| {
        let objects = proptest::collection::vec(
            (
                0..n_images,
                0u64..4,
                (0u32..80, 0u32..80),
                (1u32..=40, 1u32..=40),
                proptest::option::of(0u32..=100),
            ),
            0..12,
        );
        let excluded = proptest::collection::vec(0..n_images, 0..3);
        (Just(n_images), objects, excluded).prop_map(|(n_images, raw, excl)| {
            let images: Vec<ImageRecord> = (0..n_images)
                .map(|i| ImageRecord {
                    image_id: format!("img{i}"),
                    width: 100,
                    height: 100,
                    uri: format!("img{i}.png"),
                    source: "coco".into(),
                })
                .collect();
            let categories = vec![
                Category {
                    category_id: 0,
                    name: "person".into(),
                    coco80_name: None,
                },
                Category {
                    category_id: 1,
                    name: "dog".into(),
                    coco80_name: None,
                },
                Category {
                    category_id: 2,
                    name: "sneakers".into(),
                    coco80_name: None,
                },
                Category {
                    category_id: 3,
                    name: "cup".into(),
                    coco80_name: None,
                },
            ];
            let objects = raw
                .into_iter()
                .enumerate()
                .map(|(i, (img, cat, (x, y), (w, h), conf))| ObjectInstance {
                    object_id: format!("o{i}"),
                    image_id: format!("img{img}"),
                    category_id: cat,
                    bbox: BBox::new(
                        f64::from(x.min(99)),
                        f64::from(y.min(99)),
                        f64::from(w.min(100 - x.min(99)).max(1)),
                        f64::from(h.min(100 - y.min(99)).max(1)),
                    )
                    .unwrap(),
                    mask: None,
                    det_confidence: conf.map(|c| f64::from(c) / 100.0),
                })
                .collect();
            let excluded = excl.into_iter().map(|i| format!("img{i}")).collect();
            MiniDataset {
                images,
                objects,
                categories,
                excluded,
            }
        })
    })
}

fn person_dog_map() -> CategoryMap {
    CategoryMap::new(HashMap::from([
        ("person".to_string(), "person".to_string()),
        ("dog".to_string(), "dog".to_string()),
        ("cup".to_string(), "cup".to_string()),
    ]))
}

/// The full filter chain on in-memory inputs, returning kept object ids.
fn run_chain(data: &MiniDataset) -> Vec<String> {
    let excl = ExclusionList::new(data.excluded.iter().cloned());
    let images = apply_exclusion(&data.images, &excl);
    let surviving = image_index(&images);
    let objects: Vec<ObjectInstance> = data
        .objects
        .iter()
        .filter(|o| surviving.contains_key(&o.image_id))
        .cloned()
        .collect();
    let (objects, _, _) = restrict_categories(&objects, &data.categories, &person_dog_map());
    let (objects, _) = filter_small_objects(&objects, &image_index(&data.images), 0.05).unwrap();
    let (objects, _) = filter_by_confidence(&objects, 0.8);
    objects.into_iter().map(|o| o.object_id).collect()
}

proptest! {
    #[test]
    fn filter_chain_is_idempotent(data in dataset_strategy()) {
        let first = run_chain(&data);
        // Re-running over the already-filtered survivors changes nothing.
        let survivors: Vec<ObjectInstance> = data
            .objects
            .iter()
            .filter(|o| first.contains(&o.object_id))
            .cloned()
            .collect();
        let second = run_chain(&MiniDataset {
            objects: survivors,
            ..data.clone()
        });
        prop_assert_eq!(first, second);
    }

    #[test]
    fn exclusion_and_restriction_commute(data in dataset_strategy()) {
        let excl = ExclusionList::new(data.excluded.iter().cloned());
        let map = person_dog_map();

        // Path A: exclusion first.
        let images_a = apply_exclusion(&data.images, &excl);
        let surviving_a = image_index(&images_a);
        let objs_a: Vec<ObjectInstance> = data
            .objects
            .iter()
            .filter(|o| surviving_a.contains_key(&o.image_id))
            .cloned()
            .collect();
        let (objs_a, _, _) = restrict_categories(&objs_a, &data.categories, &map);

        // Path B: restriction first.
        let (objs_b, _, _) = restrict_categories(&data.objects, &data.categories, &map);
        let images_b = apply_exclusion(&data.images, &excl);
        let surviving_b = image_index(&images_b);
        let objs_b: Vec<ObjectInstance> = objs_b
            .into_iter()
            .filter(|o| surviving_b.contains_key(&o.image_id))
            .collect();

        let ids_a: Vec<&str> = objs_a.iter().map(|o| o.object_id.as_str()).collect();
        let ids_b: Vec<&str> = objs_b.iter().map(|o| o.object_id.as_str()).collect();
        prop_assert_eq!(ids_a, ids_b);
    }
}

#[test]
fn every_dropped_annotation_is_rejected_exactly_once() {
    // A document exercising every drop reason at once.
    let doc = serde_json::json!({
        "images": [
            {"id": 1, "file_name": "a.png", "width": 100, "height": 100},
            {"id": 2, "file_name": "b.png", "width": 100, "height": 100},
            {"id": 3, "file_name": "c.png", "width": 100, "height": 100}
        ],
        "annotations": [
            {"id": 1, "image_id": 1, "category_id": 1, "bbox": [0.0, 0.0, 50.0, 50.0], "iscrowd": 0},
            {"id": 2, "image_id": 1, "category_id": 1, "bbox": [0.0, 0.0, 50.0, 50.0], "iscrowd": 1},
            {"id": 3, "image_id": 9, "category_id": 1, "bbox": [0.0, 0.0, 50.0, 50.0], "iscrowd": 0},
            {"id": 4, "image_id": 1, "category_id": 9, "bbox": [0.0, 0.0, 50.0, 50.0], "iscrowd": 0},
            {"id": 5, "image_id": 2, "category_id": 1, "bbox": [0.0, 0.0, 50.0, 50.0], "iscrowd": 0},
            {"id": 6, "image_id": 3, "category_id": 2, "bbox": [0.0, 0.0, 50.0, 50.0], "iscrowd": 0},
            {"id": 7, "image_id": 3, "category_id": 1, "bbox": [0.0, 0.0, 10.0, 10.0], "iscrowd": 0},
            {"id": 8, "image_id": 3, "category_id": 1, "bbox": [0.0, 0.0, 50.0, 50.0], "iscrowd": 0, "score": 0.5},
            {"id": 9, "image_id": 3, "category_id": 1, "bbox": [0.0, 0.0, 50.0, 50.0], "iscrowd": 0, "score": 0.9}
        ],
        "categories": [
            {"id": 1, "name": "person"},
            {"id": 2, "name": "sneakers"}
        ]
    });
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("annotations.json");
    std::fs::write(&path, serde_json::to_vec(&doc).unwrap()).unwrap();

    let excl = ExclusionList::new(["2".to_string()]);
    let map = person_dog_map();
    let cfg = PipelineConfig::default();
    let out = prepare_source(
        &path,
        "coco",
        &cfg,
        &PrepOptions {
            exclusion: Some(&excl),
            category_map: Some(&map),
            area_threshold_k: None,
        },
    )
    .unwrap();

    let kept: BTreeSet<String> = out
        .objects
        .iter()
        .map(|r| r.object.object_id.clone())
        .collect();
    assert_eq!(kept, BTreeSet::from(["1".to_string(), "9".into()]));

    let rejected: Vec<String> = out.rejects.iter().map(|r| r.annotation_id.clone()).collect();
    let mut sorted = rejected.clone();
    sorted.sort();
    sorted.dedup();
    assert_eq!(sorted.len(), rejected.len(), "duplicate rejects: {rejected:?}");

    let all: BTreeSet<String> = kept.union(&rejected.iter().cloned().collect()).cloned().collect();
    let expected: BTreeSet<String> = (1..=9).map(|i| i.to_string()).collect();
    assert_eq!(all, expected, "every annotation is kept or rejected");
}
