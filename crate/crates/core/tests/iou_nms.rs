mod common;

use common::*;
use partgrid::anchorgen::{assign_anchors, AnchorClassSpec, AnchorLabel};
use partgrid::geom::{BoxParams, Vec3};
use partgrid::postproc::*;
use rand::Rng;

#[test]
fn iou_symmetry_and_rigid_invariance() {
    let mut r = rng(10);
    for _ in 0..300 {
        let a = random_box(&mut r, 2.0);
        let b = random_box(&mut r, 2.0);
        for m in [IouMetric::Bev, IouMetric::ThreeD] {
            let ab = m.iou(&a, &b);
            assert!((ab - m.iou(&b, &a)).abs() < 1e-9);
            assert!((0.0..=1.0).contains(&ab));
            assert!((m.iou(&a, &a) - 1.0).abs() < 1e-12);
            let angle = r.random_range(-3.0..3.0);
            let shift = Vec3::new(r.random_range(-50.0..50.0), r.random_range(-50.0..50.0), r.random_range(-2.0..2.0));
            let ta = a.rotated_about_z(angle).translated(shift);
            let tb = b.rotated_about_z(angle).translated(shift);
            assert!((m.iou(&ta, &tb) - ab).abs() < 1e-6);
        }
    }
}

#[test]
fn iou_matches_monte_carlo() {
    let mut r = rng(11);
    for _ in 0..40 {
        let a = random_box(&mut r, 1.0);
        let b = random_box(&mut r, 1.0);
        for m in [IouMetric::Bev, IouMetric::ThreeD] {
            let mc = monte_carlo_iou(&a, &b, m, 200_000, &mut r);
            assert!((m.iou(&a, &b) - mc).abs() < 0.01, "{m:?}: {} vs {mc}", m.iou(&a, &b));
        }
    }
}

#[test]
fn touching_and_stacked_boxes() {
    let a = BoxParams::new(Vec3::ZERO, 1.0, 1.0, 1.0, 0.0).unwrap();
    let side = a.translated(Vec3::new(1.0, 0.0, 0.0));
    assert_eq!(bev_iou(&a, &side), 0.0);
    let above = a.translated(Vec3::new(0.0, 0.0, 1.0));
    assert_eq!(bev_iou(&a, &above), 1.0);
    assert_eq!(iou3d(&a, &above), 0.0);
}

#[test]
fn nms_matches_reference() {
    for seed in 0..20 {
        let mut r = rng(100 + seed);
        let boxes: Vec<ScoredBox> = (0..200)
            .map(|_| ScoredBox {
                bbox: random_box(&mut r, 6.0),
                // coarse scores force ties
                score: (r.random_range(0.0..1.0f64) * 20.0).floor() / 20.0,
            })
            .collect();
        for (thresh, m) in [(0.1, IouMetric::Bev), (0.5, IouMetric::ThreeD), (0.01, IouMetric::Bev)] {
            let got = rotated_nms(&boxes, thresh, m);
            assert_eq!(got, reference_nms(&boxes, thresh, m));
            for w in got.windows(2) {
                assert!(boxes[w[0]].score >= boxes[w[1]].score);
            }
            for (i, &p) in got.iter().enumerate() {
                for &q in &got[i + 1..] {
                    assert!(m.iou(&boxes[p].bbox, &boxes[q].bbox) <= thresh);
                }
            }
        }
    }
}

#[test]
fn select_is_nms_then_truncate() {
    let mut r = rng(12);
    let boxes: Vec<ScoredBox> = (0..150).map(|_| ScoredBox { bbox: random_box(&mut r, 5.0), score: r.random_range(0.0..1.0) }).collect();
    let all = reference_nms(&boxes, 0.3, IouMetric::Bev);
    for k in [1, 5, 1000] {
        let got = select_proposals(&boxes, k, 0.3, IouMetric::Bev);
        assert_eq!(got, all[..k.min(all.len())].to_vec());
    }
}

#[test]
fn anchor_assignment_partitions_and_is_monotone() {
    let mut r = rng(13);
    let spec = AnchorClassSpec::car();
    let gts: Vec<BoxParams> = (0..4)
        .map(|i| BoxParams::new(Vec3::new(8.0 * i as f64, 0.0, -1.0), 1.5, 1.6, 3.9, r.random_range(-3.0..3.0)).unwrap())
        .collect();
    let anchors: Vec<BoxParams> = (0..400)
        .map(|_| {
            let g = gts[r.random_range(0..4)];
            g.translated(Vec3::new(r.random_range(-3.0..3.0), r.random_range(-3.0..3.0), 0.0))
                .with_theta(r.random_range(-3.0..3.0))
        })
        .collect();
    let mut last = usize::MAX;
    for pos in [0.5, 0.6, 0.7, 0.8] {
        let s = AnchorClassSpec { pos_iou_thresh: pos, ..spec.clone() };
        let a = assign_anchors(&anchors, &gts, &s).unwrap();
        let p = a.count(|l| matches!(l, AnchorLabel::Positive(_)));
        let n = a.count(|l| *l == AnchorLabel::Negative);
        let i = a.count(|l| *l == AnchorLabel::Ignore);
        assert_eq!(p + n + i, anchors.len());
        assert!(p <= last);
        last = p;
        for (k, g) in a.positives() {
            assert!(g < gts.len());
            assert!(a.max_iou[k] > 0.0);
        }
    }
}

#[test]
fn anchor_iou_agrees_with_monte_carlo() {
    let mut r = rng(14);
    let gt = BoxParams::new(Vec3::new(10.0, 2.0, -1.0), 1.56, 1.6, 3.9, 0.5).unwrap();
    let anchor = BoxParams::new(Vec3::new(10.6, 2.3, -1.0), 1.56, 1.6, 3.9, 0.0).unwrap();
    let iou = bev_iou(&anchor, &gt);
    let mc = monte_carlo_iou(&anchor, &gt, IouMetric::Bev, 1_000_000, &mut r);
    assert!((iou - mc).abs() < 0.01);
    let a = assign_anchors(&[anchor], &[gt], &AnchorClassSpec::car()).unwrap();
    // sole anchor is force-matched whatever the threshold says
    assert_eq!(a.labels[0], AnchorLabel::Positive(0));
}
