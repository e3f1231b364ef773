//! Regenerates the bundled end-to-end fixture: two small synthetic
//! detection datasets (COCO-style and O365-style), their images, the
//! eval-split exclusion list, the category map, a mock-VLM fixture file
//! answering every caption/attribute query the pipeline will issue, and a
//! ready-to-run pipeline config.
//!
//! Everything is seeded, so reruns rewrite byte-identical files (PNG
//! encoding included). Usage:
//!
//! ```text
//! cargo run -p refexp-core --example gen_fixture -- fixtures
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use refexp_core::attribute::{attribute_prompt, ApplicabilityMap};
use refexp_core::caption::{caption_prompt, crop_region, load_image};
use refexp_core::ingest::{CategoryMap, ExclusionList};
use refexp_core::pipeline::{prepare_source, PrepOptions};
use refexp_core::vlm::{fixture_key, FixtureRecord, MockVlm, VlmAnswer};
use refexp_core::PipelineConfig;

const IMG: u32 = 64;

/// One synthetic annotation: (annotation id, image id, category id,
/// [x, y, w, h], iscrowd, score).
struct Ann(u64, u64, u64, [f64; 4], bool, Option<f64>);

fn coco_annotations() -> (Vec<(u64, &'static str)>, Vec<(u64, &'static str)>, Vec<Ann>) {
    // Image ids 101..=114; 103 and 107 go on the exclusion list, leaving 12.
    let images: Vec<(u64, &str)> = (101..=114).map(|id| (id, "coco")).collect();
    let categories: Vec<(u64, &str)> = vec![
        (1, "person"),
        (2, "dog"),
        (3, "cup"),
        (4, "car"),
        (5, "chair"),
        (6, "cat"),
        (7, "bottle"),
        (8, "dining table"),
    ];

    let mut anns = Vec::new();
    let mut next_id = 1000u64;
    // Three standard slots per image; every box clears the 5% area floor
    // (64*64*0.05 = 204.8 px^2).
    let slots = [
        (2.0, 8.0, 20.0, 20.0),
        (36.0, 8.0, 22.0, 20.0),
        (8.0, 38.0, 24.0, 22.0),
    ];
    for (idx, &(image_id, _)) in images.iter().enumerate() {
        let n_slots = 2 + (idx % 2);
        for slot in 0..n_slots {
            let (x, y, w, h) = slots[slot];
            let category = 1 + ((idx + slot * 3) % 8) as u64;
            next_id += 1;
            anns.push(Ann(next_id, image_id, category, [x, y, w, h], false, None));
        }
    }
    // Depth-contrast pair on image 102: 36x36 vs 16x16 (ratio 0.198 < 0.4).
    anns.push(Ann(2001, 102, 2, [14.0, 14.0, 36.0, 36.0], false, None));
    anns.push(Ann(2002, 102, 3, [4.0, 44.0, 16.0, 16.0], false, None));
    // Designed rejects.
    anns.push(Ann(9001, 101, 1, [10.0, 10.0, 30.0, 30.0], true, None)); // crowd
    anns.push(Ann(9002, 999, 1, [10.0, 10.0, 30.0, 30.0], false, None)); // dangling image
    anns.push(Ann(9003, 101, 99, [10.0, 10.0, 30.0, 30.0], false, None)); // dangling category
    anns.push(Ann(9004, 104, 1, [58.0, 58.0, 20.0, 20.0], false, None)); // clamps to 6x6: small
    anns.push(Ann(9005, 105, 2, [0.0, 0.0, 14.0, 14.0], false, None)); // 196 px^2: small
    // Overhanging but still large after clamping: kept with w = 14.
    anns.push(Ann(2003, 106, 4, [50.0, 30.0, 20.0, 22.0], false, None));
    (images, categories, anns)
}

fn o365_annotations() -> (Vec<(u64, &'static str)>, Vec<(u64, &'static str)>, Vec<Ann>) {
    let images: Vec<(u64, &str)> = (201..=208).map(|id| (id, "o365")).collect();
    let categories: Vec<(u64, &str)> = vec![
        (1, "Person"),
        (2, "Dog"),
        (3, "Cup"),
        (4, "Sneakers"),
        (5, "Monitor"),
    ];
    let mut anns = Vec::new();
    let mut next_id = 5000u64;
    let slots = [
        (4.0, 6.0, 22.0, 22.0),
        (34.0, 20.0, 24.0, 24.0),
        (6.0, 38.0, 20.0, 20.0),
    ];
    for (idx, &(image_id, _)) in images.iter().enumerate() {
        let n_slots = 2 + (idx % 2);
        for slot in 0..n_slots {
            let (x, y, w, h) = slots[slot];
            let category = 1 + ((idx + slot) % 3) as u64; // Person/Dog/Cup
            next_id += 1;
            anns.push(Ann(next_id, image_id, category, [x, y, w, h], false, None));
        }
    }
    // Unmapped categories are dropped by the O365 -> COCO-80 restriction.
    anns.push(Ann(8001, 201, 4, [30.0, 30.0, 20.0, 20.0], false, None));
    anns.push(Ann(8002, 202, 5, [30.0, 4.0, 22.0, 20.0], false, None));
    // Detector-scored boxes: strict > 0.8 keeps only the last.
    anns.push(Ann(8003, 203, 1, [36.0, 36.0, 22.0, 22.0], false, Some(0.79)));
    anns.push(Ann(8004, 204, 2, [36.0, 36.0, 22.0, 22.0], false, Some(0.8)));
    anns.push(Ann(8005, 205, 3, [36.0, 36.0, 22.0, 22.0], false, Some(0.9)));
    (images, categories, anns)
}

fn file_name(source: &str, image_id: u64) -> String {
    format!("{source}_{image_id:04}.png")
}

fn write_dataset(
    dir: &Path,
    source: &str,
    images: &[(u64, &str)],
    categories: &[(u64, &str)],
    anns: &[Ann],
) {
    let images_json: Vec<_> = images
        .iter()
        .map(|&(id, _)| {
            json!({
                "id": id,
                "file_name": file_name(source, id),
                "width": IMG,
                "height": IMG,
            })
        })
        .collect();
    let categories_json: Vec<_> = categories
        .iter()
        .map(|&(id, name)| json!({"id": id, "name": name}))
        .collect();
    let annotations_json: Vec<_> = anns
        .iter()
        .map(|Ann(id, image_id, category_id, bbox, crowd, score)| {
            let mut obj = json!({
                "id": id,
                "image_id": image_id,
                "category_id": category_id,
                "bbox": bbox,
                "area": bbox[2] * bbox[3],
                "iscrowd": if *crowd { 1 } else { 0 },
            });
            if let Some(score) = score {
                obj["score"] = json!(score);
            }
            obj
        })
        .collect();
    let doc = json!({
        "images": images_json,
        "annotations": annotations_json,
        "categories": categories_json,
    });
    fs::write(
        dir.join("annotations.json"),
        serde_json::to_string_pretty(&doc).unwrap(),
    )
    .unwrap();

    // Paint every image: seeded noise background plus a solid patch per
    // annotation box, so each crop has distinct bytes.
    let image_dir = dir.join("images");
    fs::create_dir_all(&image_dir).unwrap();
    for &(image_id, _) in images {
        let mut rng = ChaCha8Rng::seed_from_u64(image_id * 7919);
        let mut img = RgbImage::new(IMG, IMG);
        for pixel in img.pixels_mut() {
            let v = rng.random_range(40..80u32) as u8;
            *pixel = Rgb([v, v, v]);
        }
        for Ann(ann_id, ann_image, category_id, bbox, ..) in anns {
            if *ann_image != image_id {
                continue;
            }
            let color = Rgb([
                ((40 + category_id * 25) % 256) as u8,
                ((90 + ann_id) % 230) as u8,
                ((200 + category_id * 91) % 256) as u8,
            ]);
            let x0 = bbox[0].max(0.0) as u32;
            let y0 = bbox[1].max(0.0) as u32;
            let x1 = ((bbox[0] + bbox[2]) as u32).min(IMG);
            let y1 = ((bbox[1] + bbox[3]) as u32).min(IMG);
            for y in y0..y1 {
                for x in x0..x1 {
                    img.put_pixel(x, y, color);
                }
            }
        }
        img.save(image_dir.join(file_name(source, image_id))).unwrap();
    }
}

const CAPTION_FORMS: [&str; 7] = [
    "a {color} {noun}",
    "the {noun} in the photo",
    "a small {noun}",
    "a large {color} {noun}",
    "one {noun} near the edge",
    "a {noun}",
    " a {color} {noun} with a plain background ",
];
const COLORS: [&str; 6] = ["red", "blue", "green", "black", "white", "yellow"];

fn attribute_values(attr: &str) -> &'static [&'static str] {
    match attr {
        "cloth" => &["a red jacket", "a suit", "a t-shirt", "jeans"],
        "action" => &["running", "standing", "sitting", "walking"],
        "gender" => &["woman", "man"],
        "identity" => &["police officer", "chef", "student", "tourist"],
        "color" => &["red", "blue", "green", "black", "white"],
        "material" => &["ceramic", "wood", "plastic", "metal", "glass"],
        "shape" => &["round", "square", "rectangular", "oval"],
        _ => unreachable!("unknown attribute"),
    }
}

fn main() {
    let out: PathBuf = std::env::args().nth(1).unwrap_or_else(|| "fixtures".into()).into();
    let coco_dir = out.join("coco");
    let o365_dir = out.join("o365");
    fs::create_dir_all(&coco_dir).unwrap();
    fs::create_dir_all(&o365_dir).unwrap();

    let (coco_images, coco_categories, coco_anns) = coco_annotations();
    write_dataset(&coco_dir, "coco", &coco_images, &coco_categories, &coco_anns);
    let (o365_images, o365_categories, o365_anns) = o365_annotations();
    write_dataset(&o365_dir, "o365", &o365_images, &o365_categories, &o365_anns);

    fs::write(
        out.join("refcoco_excluded_ids.txt"),
        "# images shared with the evaluation splits\n103\n107\n",
    )
    .unwrap();
    fs::write(
        out.join("o365_to_coco80.tsv"),
        "# o365 name -> coco-80 class\nPerson\tperson\nDog\tdog\nCup\tcup\n",
    )
    .unwrap();

    // Replay the exact ingest the pipeline will run, then synthesize a
    // fixture answer set for every (region, prompt) the generators will ask.
    let cfg = PipelineConfig::default();
    let applicability = ApplicabilityMap::default();
    let mut records: Vec<FixtureRecord> = Vec::new();

    let mut synthesize = |dir: &Path, source: &str, prep_opts: &PrepOptions<'_>| {
        let prep = prepare_source(&dir.join("annotations.json"), source, &cfg, prep_opts)
            .expect("fixture dataset parses");
        for row in &prep.objects {
            let image = load_image(&dir.join("images").join(&row.object.image_id_file(source)))
                .expect("fixture image decodes");
            let region = crop_region(&image, &row.object.bbox).expect("fixture crop");
            let noun = row.noun();
            let mut rng =
                ChaCha8Rng::seed_from_u64(fixture_seed(source, &row.object.object_id));

            let captions: Vec<VlmAnswer> = CAPTION_FORMS
                .iter()
                .enumerate()
                .map(|(i, form)| {
                    let color = COLORS[rng.random_range(0..COLORS.len())];
                    let text = form.replace("{color}", color).replace("{noun}", noun);
                    VlmAnswer::new(text, 0.97 - 0.06 * i as f64).unwrap()
                })
                .collect();
            records.push(FixtureRecord {
                key: fixture_key(&region, caption_prompt()),
                answers: captions,
            });

            for (pair_idx, attr) in applicability.applicable(noun).into_iter().enumerate() {
                let prompt = attribute_prompt(attr, noun, &applicability).unwrap();
                let values = attribute_values(attr.name());
                let mut answers = Vec::new();
                for rank in 0..4usize {
                    // Sprinkle rejection tokens inside the top-3 window so
                    // the rejection path runs end to end.
                    let token = if rank == 1 && pair_idx % 3 == 0 {
                        "unknown".to_string()
                    } else if rank == 0 && pair_idx % 7 == 6 {
                        "unsuitable".to_string()
                    } else {
                        values[rng.random_range(0..values.len())].to_string()
                    };
                    answers.push(VlmAnswer::new(token, 0.95 - 0.07 * rank as f64).unwrap());
                }
                records.push(FixtureRecord {
                    key: fixture_key(&region, &prompt),
                    answers,
                });
            }
        }
        prep
    };

    let exclusion = ExclusionList::from_path(&out.join("refcoco_excluded_ids.txt")).unwrap();
    let coco_prep = synthesize(
        &coco_dir,
        "coco",
        &PrepOptions {
            exclusion: Some(&exclusion),
            category_map: None,
            area_threshold_k: None,
        },
    );
    let category_map = CategoryMap::from_path(&out.join("o365_to_coco80.tsv")).unwrap();
    let o365_prep = synthesize(
        &o365_dir,
        "o365",
        &PrepOptions {
            exclusion: None,
            category_map: Some(&category_map),
            area_threshold_k: None,
        },
    );

    let mut fixture_bytes = Vec::new();
    MockVlm::write_fixture(&mut fixture_bytes, &records).unwrap();
    fs::write(out.join("vlm_fixtures.jsonl"), fixture_bytes).unwrap();

    fs::write(
        out.join("run.toml"),
        concat!(
            "seed = 7\n\n",
            "[vlm]\n",
            "backend = \"mock\"\n",
            "fixtures = \"vlm_fixtures.jsonl\"\n\n",
            "[[sources]]\n",
            "name = \"coco\"\n",
            "annotations = \"coco/annotations.json\"\n",
            "image_root = \"coco/images\"\n",
            "exclusion = \"refcoco_excluded_ids.txt\"\n\n",
            "[[sources]]\n",
            "name = \"o365\"\n",
            "annotations = \"o365/annotations.json\"\n",
            "image_root = \"o365/images\"\n",
            "category_map = \"o365_to_coco80.tsv\"\n\n",
            "[mix]\n",
            "ratio = \"1:1:1:1\"\n",
            "n_out = 2000\n",
            "shard_size = 512\n",
        ),
    )
    .unwrap();

    println!(
        "fixture written to {}: {} coco objects, {} o365 objects, {} vlm fixture records",
        out.display(),
        coco_prep.objects.len(),
        o365_prep.objects.len(),
        records.len()
    );
}

fn fixture_seed(source: &str, object_id: &str) -> u64 {
    refexp_core::util::derive_seed(0xF1C7, &["fixture", source, object_id])
}

/// Maps an object back to its image file name.
trait ImageFileName {
    fn image_id_file(&self, source: &str) -> String;
}

impl ImageFileName for refexp_core::types::ObjectInstance {
    fn image_id_file(&self, source: &str) -> String {
        format!("{source}_{:0>4}.png", self.image_id)
    }
}
