//! Pair spatial features against a pixel-count oracle on a 1000×1000 image.

use mbbr_core::data::BoundingBox;
use mbbr_core::fewshot::compute_spatial;
use proptest::prelude::*;

const SIDE: f64 = 1000.0;

/// Pixels whose centre falls inside the box.
fn covers(b: &BoundingBox, x: usize, y: usize) -> bool {
    let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
    b.x_lt <= cx && cx < b.x_rb && b.y_lt <= cy && cy < b.y_rb
}

fn pixel_counts(a: &BoundingBox, b: &BoundingBox) -> (usize, usize) {
    let x0 = a.x_lt.min(b.x_lt).floor() as usize;
    let x1 = (a.x_rb.max(b.x_rb).ceil() as usize).min(SIDE as usize);
    let y0 = a.y_lt.min(b.y_lt).floor() as usize;
    let y1 = (a.y_rb.max(b.y_rb).ceil() as usize).min(SIDE as usize);
    let (mut inter, mut union) = (0, 0);
    for y in y0..y1 {
        for x in x0..x1 {
            let (ia, ib) = (covers(a, x, y), covers(b, x, y));
            inter += usize::from(ia && ib);
            union += usize::from(ia || ib);
        }
    }
    (inter, union)
}

fn boxes() -> impl Strategy<Value = BoundingBox> {
    (0.0..SIDE - 100.0, 0.0..SIDE - 100.0, 100.0..SIDE, 100.0..SIDE).prop_map(|(x, y, w, h)| {
        BoundingBox::new(x, y, (x + w).min(SIDE), (y + h).min(SIDE))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn iou_and_union_match_pixel_counts(s in boxes(), o in boxes()) {
        let v = compute_spatial(&s, &o, SIDE, SIDE).unwrap();
        let (inter, union) = pixel_counts(&s, &o);
        prop_assert!((v[12] - inter as f64 / union as f64).abs() < 0.02);
        prop_assert!((v[13] - union as f64 / (SIDE * SIDE)).abs() < 0.02);
        prop_assert!((0.0..=1.0).contains(&v[12]) && v[13] > 0.0 && v[13] <= 1.0);
    }

    #[test]
    fn swapping_the_pair_flips_only_directed_terms(s in boxes(), o in boxes()) {
        let a = compute_spatial(&s, &o, SIDE, SIDE).unwrap();
        let b = compute_spatial(&o, &s, SIDE, SIDE).unwrap();
        prop_assert_eq!(&a[..4], &b[4..8]);
        prop_assert_eq!(a[12], b[12]);
        prop_assert_eq!(a[13], b[13]);
        prop_assert!((a[10] + b[10]).abs() < 1e-12 && (a[11] + b[11]).abs() < 1e-12);
    }
}
