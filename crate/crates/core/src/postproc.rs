//! Rotated bird's-eye-view and 3D IoU, rotated NMS and proposal selection.

use serde::{Deserialize, Serialize};

use crate::geom::BoxParams;

/// Intersections smaller than this (m^2) are treated as empty.
const MIN_AREA: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    #[serde(rename = "box")]
    pub bbox: BoxParams,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum IouMetric {
    #[default]
    Bev,
    #[serde(rename = "3d")]
    ThreeD,
}

impl IouMetric {
    pub fn iou(self, a: &BoxParams, b: &BoxParams) -> f64 {
        match self {
            IouMetric::Bev => bev_iou(a, b),
            IouMetric::ThreeD => iou3d(a, b),
        }
    }
}

impl std::str::FromStr for IouMetric {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "bev" => Ok(IouMetric::Bev),
            "3d" => Ok(IouMetric::ThreeD),
            other => Err(format!("unknown IoU metric {other:?}, expected bev or 3d")),
        }
    }
}

type Pt = [f64; 2];

fn cross(o: Pt, a: Pt, b: Pt) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Shoelace area of a simple polygon (positive for counter-clockwise).
pub fn polygon_area(poly: &[Pt]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..n {
        let p = poly[i];
        let q = poly[(i + 1) % n];
        s += p[0] * q[1] - q[0] * p[1];
    }
    0.5 * s
}

/// Sutherland-Hodgman clip of `subject` against the convex counter-clockwise
/// polygon `clip`.
pub fn clip_polygon(subject: &[Pt], clip: &[Pt]) -> Vec<Pt> {
    let mut output: Vec<Pt> = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let cur_in = cross(a, b, cur) >= 0.0;
            let prev_in = cross(a, b, prev) >= 0.0;
            if cur_in {
                if !prev_in {
                    output.push(segment_intersection(prev, cur, a, b));
                }
                output.push(cur);
            } else if prev_in {
                output.push(segment_intersection(prev, cur, a, b));
            }
        }
    }
    output
}

/// Intersection of segment `p->q` with the infinite line through `a->b`.
fn segment_intersection(p: Pt, q: Pt, a: Pt, b: Pt) -> Pt {
    let dp = cross(a, b, p);
    let dq = cross(a, b, q);
    let denom = dp - dq;
    if denom.abs() < f64::MIN_POSITIVE {
        return q;
    }
    let t = dp / denom;
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

/// Area of the intersection of the two boxes' footprints.
pub fn bev_intersection_area(a: &BoxParams, b: &BoxParams) -> f64 {
    let dx = a.center.x - b.center.x;
    let dy = a.center.y - b.center.y;
    let reach = 0.5 * (a.bev_diagonal() + b.bev_diagonal());
    if dx * dx + dy * dy > reach * reach {
        return 0.0;
    }
    let pa = a.bev_corners();
    let pb = b.bev_corners();
    let area = polygon_area(&clip_polygon(&pa, &pb)).abs();
    if area < MIN_AREA {
        0.0
    } else {
        area
    }
}

/// Rotated-rectangle IoU in the ground plane.
pub fn bev_iou(a: &BoxParams, b: &BoxParams) -> f64 {
    let inter = bev_intersection_area(a, b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.l * a.w + b.l * b.w - inter;
    (inter / union).clamp(0.0, 1.0)
}

fn z_overlap(a: &BoxParams, b: &BoxParams) -> f64 {
    let (a0, a1) = a.z_range();
    let (b0, b1) = b.z_range();
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

/// Rotated 3D IoU: footprint intersection times vertical overlap.
pub fn iou3d(a: &BoxParams, b: &BoxParams) -> f64 {
    let dz = z_overlap(a, b);
    if dz <= 0.0 {
        return 0.0;
    }
    let inter = bev_intersection_area(a, b) * dz;
    if inter == 0.0 {
        return 0.0;
    }
    (inter / (a.volume() + b.volume() - inter)).clamp(0.0, 1.0)
}

/// Indices of `boxes` ordered by descending score, ties by lower index.
pub fn score_order(boxes: &[ScoredBox]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&i, &j| boxes[j].score.total_cmp(&boxes[i].score).then(i.cmp(&j)));
    order
}

/// Greedy rotated NMS. Returns kept indices in descending score order; a
/// candidate is suppressed when its IoU with a kept box exceeds `iou_thresh`.
pub fn rotated_nms(boxes: &[ScoredBox], iou_thresh: f64, metric: IouMetric) -> Vec<usize> {
    let order = score_order(boxes);
    let mut suppressed = vec![false; boxes.len()];
    let mut keep = Vec::new();
    for (rank, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[rank + 1..] {
            if !suppressed[j] && metric.iou(&boxes[i].bbox, &boxes[j].bbox) > iou_thresh {
                suppressed[j] = true;
            }
        }
    }
    keep
}

/// NMS followed by truncation to the `k` best survivors.
pub fn select_proposals(
    boxes: &[ScoredBox],
    k: usize,
    nms_thresh: f64,
    metric: IouMetric,
) -> Vec<usize> {
    let mut keep = rotated_nms(boxes, nms_thresh, metric);
    keep.truncate(k);
    keep
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{point_in_box, Vec3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bx(c: [f64; 3], h: f64, w: f64, l: f64, t: f64) -> BoxParams {
        BoxParams::new(c.into(), h, w, l, t).unwrap()
    }

    #[test]
    fn identical_and_disjoint() {
        let a = bx([1.0, 2.0, 0.0], 1.5, 1.6, 3.9, 0.3);
        assert!((bev_iou(&a, &a) - 1.0).abs() < 1e-12);
        assert!((iou3d(&a, &a) - 1.0).abs() < 1e-12);
        let far = a.translated(Vec3::new(50.0, 0.0, 0.0));
        assert_eq!(bev_iou(&a, &far), 0.0);
        let stacked = a.translated(Vec3::new(0.0, 0.0, 1.5));
        assert_eq!(iou3d(&a, &stacked), 0.0);
        assert!((bev_iou(&a, &stacked) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn offset_unit_squares_third() {
        let a = bx([0.0; 3], 1.0, 1.0, 1.0, 0.0);
        let b = bx([0.5, 0.0, 0.0], 1.0, 1.0, 1.0, 0.0);
        // overlap 0.5, union 1.5
        assert!((bev_iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
        assert!((iou3d(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn rotated_square_in_square() {
        // a unit square rotated 45 degrees inside a large square
        let a = bx([0.0; 3], 1.0, 1.0, 1.0, std::f64::consts::FRAC_PI_4);
        let b = bx([0.0; 3], 1.0, 10.0, 10.0, 0.0);
        assert!((bev_iou(&a, &b) - 0.01).abs() < 1e-12);
        // 45-degree square over axis-aligned one: octagon area 2(sqrt2-1)
        let c = bx([0.0; 3], 1.0, 1.0, 1.0, 0.0);
        let oct = 2.0 * (2f64.sqrt() - 1.0);
        assert!((bev_intersection_area(&a, &c) - oct).abs() < 1e-12);
    }

    #[test]
    fn touching_edges_are_empty() {
        let a = bx([0.0; 3], 1.0, 1.0, 1.0, 0.0);
        let b = bx([1.0, 0.0, 0.0], 1.0, 1.0, 1.0, 0.0);
        assert_eq!(bev_iou(&a, &b), 0.0);
    }

    fn monte_carlo_bev(a: &BoxParams, b: &BoxParams, n: usize, rng: &mut ChaCha8Rng) -> f64 {
        let r = 0.5 * a.bev_diagonal().max(b.bev_diagonal()) + (a.center - b.center).norm();
        let (cx, cy) = (a.center.x, a.center.y);
        let (mut inter, mut uni) = (0usize, 0usize);
        for _ in 0..n {
            let p = Vec3::new(cx + rng.random_range(-r..r), cy + rng.random_range(-r..r), 0.0);
            let ia = point_in_box(Vec3::new(p.x, p.y, a.center.z), a);
            let ib = point_in_box(Vec3::new(p.x, p.y, b.center.z), b);
            inter += (ia && ib) as usize;
            uni += (ia || ib) as usize;
        }
        inter as f64 / uni as f64
    }

    #[test]
    fn bev_iou_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let a = bx([0.0, 0.0, 0.0], 1.5, rng.random_range(0.5..2.0), rng.random_range(1.0..4.0), rng.random_range(-3.0..3.0));
            let b = bx(
                [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.0],
                1.5,
                rng.random_range(0.5..2.0),
                rng.random_range(1.0..4.0),
                rng.random_range(-3.0..3.0),
            );
            let mc = monte_carlo_bev(&a, &b, 200_000, &mut rng);
            assert!((mc - bev_iou(&a, &b)).abs() < 0.01, "mc {mc} vs {}", bev_iou(&a, &b));
        }
    }

    #[test]
    fn nms_basics() {
        let a = bx([0.0; 3], 1.5, 1.6, 3.9, 0.0);
        assert_eq!(rotated_nms(&[ScoredBox { bbox: a, score: 0.3 }], 0.5, IouMetric::Bev), vec![0]);
        let two = [ScoredBox { bbox: a, score: 0.8 }, ScoredBox { bbox: a, score: 0.9 }];
        assert_eq!(rotated_nms(&two, 0.5, IouMetric::Bev), vec![1]);
        let tie = [ScoredBox { bbox: a, score: 0.9 }, ScoredBox { bbox: a, score: 0.9 }];
        assert_eq!(rotated_nms(&tie, 0.5, IouMetric::ThreeD), vec![0]);
        assert!(rotated_nms(&[], 0.5, IouMetric::Bev).is_empty());
    }

    #[test]
    fn proposals_truncate() {
        let boxes: Vec<ScoredBox> = (0..5)
            .map(|i| ScoredBox { bbox: bx([i as f64 * 10.0, 0.0, 0.0], 1.0, 1.0, 1.0, 0.0), score: i as f64 / 10.0 })
            .collect();
        assert_eq!(select_proposals(&boxes, 10, 0.1, IouMetric::Bev), vec![4, 3, 2, 1, 0]);
        assert_eq!(select_proposals(&boxes, 1, 0.1, IouMetric::Bev), vec![4]);
    }

    #[test]
    fn metric_parsing() {
        assert_eq!("3d".parse::<IouMetric>().unwrap(), IouMetric::ThreeD);
        assert!("xy".parse::<IouMetric>().is_err());
    }
}
