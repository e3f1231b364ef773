//! Metric implementations checked against pixel-enumeration oracles.

use proptest::prelude::*;

use refexp_core::metrics::{box_iou, mask_iou, rasterize_polygons, RleMask};
use refexp_core::types::{normalized_center, BBox, ImageRecord};

/// Counts unit pixels inside an integer box: pixel (i, j) is inside iff
/// x <= i < x + w and y <= j < y + h.
fn pixel_iou(grid: u32, a: (u32, u32, u32, u32), b: (u32, u32, u32, u32)) -> f64 {
    let inside = |bx: (u32, u32, u32, u32), i: u32, j: u32| {
        i >= bx.0 && i < bx.0 + bx.2 && j >= bx.1 && j < bx.1 + bx.3
    };
    let mut intersection = 0u64;
    let mut union = 0u64;
    for i in 0..grid {
        for j in 0..grid {
            let in_a = inside(a, i, j);
            let in_b = inside(b, i, j);
            if in_a && in_b {
                intersection += 1;
            }
            if in_a || in_b {
                union += 1;
            }
        }
    }
    if intersection == 0 {
        return 0.0;
    }
    intersection as f64 / union as f64
}

fn to_bbox(b: (u32, u32, u32, u32)) -> BBox {
    BBox::new(
        f64::from(b.0),
        f64::from(b.1),
        f64::from(b.2),
        f64::from(b.3),
    )
    .unwrap()
}

fn int_box(grid: u32) -> impl Strategy<Value = (u32, u32, u32, u32)> {
    (0..grid - 1, 0..grid - 1).prop_flat_map(move |(x, y)| {
        (1..=grid - x, 1..=grid - y).prop_map(move |(w, h)| (x, y, w, h))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn box_iou_matches_pixel_enumeration(a in int_box(64), b in int_box(64)) {
        let analytic = box_iou(&to_bbox(a), &to_bbox(b));
        let counted = pixel_iou(64, a, b);
        // Both compute integer-valued intersections and unions, so the
        // division operands are identical and the results bit-equal.
        prop_assert_eq!(analytic, counted);
    }

    #[test]
    fn box_iou_is_symmetric_and_translation_invariant(
        a in int_box(64),
        b in int_box(64),
        dx in 0u32..10_000,
        dy in 0u32..10_000,
    ) {
        let (ba, bb) = (to_bbox(a), to_bbox(b));
        prop_assert_eq!(box_iou(&ba, &bb), box_iou(&bb, &ba));

        let shift = |bx: &BBox| {
            BBox::new(bx.x + f64::from(dx), bx.y + f64::from(dy), bx.w, bx.h).unwrap()
        };
        // Integer shifts keep every coordinate exactly representable.
        prop_assert_eq!(box_iou(&shift(&ba), &shift(&bb)), box_iou(&ba, &bb));
    }

    #[test]
    fn normalized_center_is_scale_invariant(
        bx in int_box(512),
        scale in 1u32..=64,
    ) {
        let image = ImageRecord {
            image_id: "i".into(),
            width: 512,
            height: 512,
            uri: "i.png".into(),
            source: "coco".into(),
        };
        let scaled_image = ImageRecord {
            width: 512 * scale,
            height: 512 * scale,
            ..image.clone()
        };
        let base = to_bbox(bx);
        let s = f64::from(scale);
        let scaled = BBox::new(base.x * s, base.y * s, base.w * s, base.h * s).unwrap();
        let c0 = normalized_center(&base, &image).unwrap();
        let c1 = normalized_center(&scaled, &scaled_image).unwrap();
        prop_assert!((c0.cx - c1.cx).abs() <= 1e-12);
        prop_assert!((c0.cy - c1.cy).abs() <= 1e-12);
    }

    #[test]
    fn mask_iou_matches_bit_counting(
        apix in proptest::collection::btree_set((0u32..8, 0u32..8), 0..20),
        bpix in proptest::collection::btree_set((0u32..8, 0u32..8), 0..20),
    ) {
        let a_pixels: Vec<(u32, u32)> = apix.iter().copied().collect();
        let b_pixels: Vec<(u32, u32)> = bpix.iter().copied().collect();
        let a = RleMask::from_pixels(8, 8, &a_pixels).unwrap();
        let b = RleMask::from_pixels(8, 8, &b_pixels).unwrap();
        let intersection = apix.intersection(&bpix).count() as f64;
        let union = apix.union(&bpix).count() as f64;
        let expected = if union == 0.0 { 1.0 } else { intersection / union };
        prop_assert_eq!(mask_iou(&a, &b).unwrap(), expected);
    }

    #[test]
    fn rasterized_rectangles_match_analytic_pixel_rects(
        rect in int_box(16),
    ) {
        let (x, y, w, h) = rect;
        let ring = vec![
            f64::from(x),
            f64::from(y),
            f64::from(x + w),
            f64::from(y),
            f64::from(x + w),
            f64::from(y + h),
            f64::from(x),
            f64::from(y + h),
        ];
        let mask = rasterize_polygons(&[ring], 16, 16);
        let pixels: Vec<(u32, u32)> = (x..x + w)
            .flat_map(|px| (y..y + h).map(move |py| (px, py)))
            .collect();
        let expected = RleMask::from_pixels(16, 16, &pixels).unwrap();
        prop_assert_eq!(mask, expected);
    }
}

#[test]
fn pixel_oracle_spotcheck() {
    // The derived example: inter 25, union 175.
    let analytic = box_iou(
        &BBox::new(0.0, 0.0, 10.0, 10.0).unwrap(),
        &BBox::new(5.0, 5.0, 10.0, 10.0).unwrap(),
    );
    assert_eq!(analytic, pixel_iou(32, (0, 0, 10, 10), (5, 5, 10, 10)));
    assert!((analytic - 25.0 / 175.0).abs() < 1e-9);
}
