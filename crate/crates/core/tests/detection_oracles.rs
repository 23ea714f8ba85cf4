mod common;

use coperception::eval::compute_ap;
use coperception::geometry::Rect;
use coperception::perception::{nms, Detection};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_rect(rng: &mut ChaCha8Rng) -> Rect {
    Rect::new(
        rng.gen_range(-4.0..4.0),
        rng.gen_range(-4.0..4.0),
        rng.gen_range(1.0..3.0),
        rng.gen_range(2.0..5.0),
    )
}

fn jitter(rng: &mut ChaCha8Rng, r: &Rect) -> Rect {
    Rect::new(
        r.cx + rng.gen_range(-0.6..0.6),
        r.cy + rng.gen_range(-0.6..0.6),
        r.width * rng.gen_range(0.8..1.2),
        r.length * rng.gen_range(0.8..1.2),
    )
}

fn det(rect: Rect, score: f64) -> Detection {
    Detection { rect, score, cell: (0, 0) }
}

/// Frames with up to 5 ground-truth boxes in total and up to 10 detections,
/// half of them near a ground-truth box.
fn instance(seed: u64) -> (Vec<Vec<Detection>>, Vec<Vec<Rect>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = rng.gen_range(1..=3);
    let mut gts: Vec<Vec<Rect>> = vec![Vec::new(); frames];
    for _ in 0..rng.gen_range(0..=5) {
        let f = rng.gen_range(0..frames);
        gts[f].push(random_rect(&mut rng));
    }
    let mut dets: Vec<Vec<Detection>> = vec![Vec::new(); frames];
    for _ in 0..rng.gen_range(0..=10) {
        let f = rng.gen_range(0..frames);
        let rect = match gts[f].len() {
            0 => random_rect(&mut rng),
            n if rng.gen_bool(0.6) => {
                let g = gts[f][rng.gen_range(0..n)];
                jitter(&mut rng, &g)
            }
            _ => random_rect(&mut rng),
        };
        dets[f].push(det(rect, rng.gen_range(0.0..1.0)));
    }
    (dets, gts)
}

#[test]
fn nms_matches_greedy_characterization() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..200 {
        let n = rng.gen_range(0..15);
        let boxes: Vec<Detection> = (0..n)
            .map(|_| {
                // Coarse scores force ties that the ordering must break.
                let score = (rng.gen_range(0..6) as f64) / 5.0;
                det(random_rect(&mut rng), score)
            })
            .collect();
        for thr in [0.1, 0.3, 0.5] {
            let kept = nms(&boxes, thr);
            assert!(common::nms_is_consistent(&boxes, &kept, thr), "trial {trial} thr {thr}");
        }
    }
}

#[test]
fn nms_is_order_independent() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..50 {
        let mut boxes: Vec<Detection> = (0..10).map(|_| det(random_rect(&mut rng), rng.gen_range(0.0..1.0))).collect();
        let a = nms(&boxes, 0.2);
        boxes.reverse();
        assert_eq!(a, nms(&boxes, 0.2));
    }
}

#[test]
fn ap_matches_exhaustive_enumeration() {
    for seed in 0..300 {
        let (dets, gts) = instance(seed);
        for thr in [0.5, 0.7] {
            let fast = compute_ap(&dets, &gts, thr).unwrap();
            let oracle = common::exhaustive_ap(&dets, &gts, thr);
            assert!((fast - oracle).abs() <= 1e-10, "seed {seed} thr {thr}: {fast} vs {oracle}");
        }
    }
}

#[test]
fn ap_trivial_cases() {
    let g = Rect::new(0.0, 0.0, 2.0, 4.0);
    assert_eq!(compute_ap(&[vec![det(g, 0.9)]], &[vec![g]], 0.5).unwrap(), 1.0);
    assert_eq!(compute_ap(&[vec![]], &[vec![g]], 0.5).unwrap(), 0.0);
    assert!(compute_ap(&[vec![]], &[vec![g]], 1.0).is_err());
    assert!(compute_ap(&[vec![], vec![]], &[vec![g]], 0.5).is_err());
}

proptest! {
    #[test]
    fn ap_is_invariant_under_frame_reordering(seed in 0u64..100_000) {
        let (mut dets, mut gts) = instance(seed);
        let a = compute_ap(&dets, &gts, 0.5).unwrap();
        dets.reverse();
        gts.reverse();
        for ds in &mut dets {
            ds.reverse();
        }
        let b = compute_ap(&dets, &gts, 0.5).unwrap();
        prop_assert!((a - b).abs() <= 1e-12, "{} vs {}", a, b);
    }

    #[test]
    fn stricter_iou_never_raises_ap(seed in 0u64..100_000) {
        let (dets, gts) = instance(seed);
        let ap50 = compute_ap(&dets, &gts, 0.5).unwrap();
        let ap70 = compute_ap(&dets, &gts, 0.7).unwrap();
        prop_assert!(ap70 <= ap50 + 1e-12);
        prop_assert!((0.0..=1.0).contains(&ap50));
    }
}
