//! Detection metrics: proposal recall, 11-point interpolated AP,
//! part-location error, Pearson correlation and a breakdown of high-scored
//! false positives.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::BoxParams;
use crate::postproc::IouMetric;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Moderate,
    Hard,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Difficulty::Easy, Difficulty::Moderate, Difficulty::Hard];
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Difficulty::Easy => "easy",
            Difficulty::Moderate => "moderate",
            Difficulty::Hard => "hard",
        })
    }
}

impl FromStr for Difficulty {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "easy" => Ok(Difficulty::Easy),
            "moderate" => Ok(Difficulty::Moderate),
            "hard" => Ok(Difficulty::Hard),
            _ => Err(Error::InvalidConfig(format!("unknown difficulty {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BoxParams,
    pub score: f64,
    pub class: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    #[serde(rename = "box")]
    pub bbox: BoxParams,
    pub class: String,
    /// `None` for objects that fall outside every difficulty level; they are
    /// ignored rather than counted as misses.
    #[serde(default)]
    pub difficulty: Option<Difficulty>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalFrame {
    #[serde(default)]
    pub detections: Vec<Detection>,
    #[serde(default)]
    pub ground_truths: Vec<GroundTruth>,
    /// Predicted part locations of the frame's foreground points.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pred_parts: Vec<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub gt_parts: Vec<[f64; 3]>,
}

fn by_score_desc(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| dets[j].score.total_cmp(&dets[i].score).then(i.cmp(&j)));
    order
}

/// Fraction of ground truths covered (IoU `>= iou_thresh`) by at least one
/// of the `k` highest-scored detections of their frame. Classes are
/// ignored. Returns 0 when there are no ground truths.
pub fn proposal_recall(frames: &[EvalFrame], k: usize, iou_thresh: f64, metric: IouMetric) -> f64 {
    let (hit, total) = frames
        .par_iter()
        .map(|f| {
            let top: Vec<usize> = by_score_desc(&f.detections).into_iter().take(k).collect();
            let hit = f
                .ground_truths
                .iter()
                .filter(|g| top.iter().any(|&i| metric.iou(&f.detections[i].bbox, &g.bbox) >= iou_thresh))
                .count();
            (hit, f.ground_truths.len())
        })
        .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Outcome {
    TruePositive,
    FalsePositive,
    Ignored,
}

/// Greedy matching of one frame for one class and difficulty. Detections are
/// visited by descending score; each takes the highest-IoU unclaimed valid
/// ground truth. A detection that only overlaps ignored ground truths is
/// dropped from the ranking.
fn match_frame(
    frame: &EvalFrame,
    class: &str,
    level: Difficulty,
    iou_thresh: f64,
    metric: IouMetric,
) -> (Vec<(f64, Outcome)>, usize) {
    let gts: Vec<(&GroundTruth, bool)> = frame
        .ground_truths
        .iter()
        .filter(|g| g.class == class)
        .map(|g| (g, g.difficulty.is_some_and(|d| d <= level)))
        .collect();
    let num_valid = gts.iter().filter(|g| g.1).count();
    let mut claimed = vec![false; gts.len()];
    let mut out = Vec::new();
    for i in by_score_desc(&frame.detections) {
        let d = &frame.detections[i];
        if d.class != class {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        let mut overlaps_ignored = false;
        for (g, (gt, valid)) in gts.iter().enumerate() {
            let iou = metric.iou(&d.bbox, &gt.bbox);
            if iou < iou_thresh {
                continue;
            }
            if !valid {
                overlaps_ignored = true;
            } else if !claimed[g] && best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        let outcome = match best {
            Some((g, _)) => {
                claimed[g] = true;
                Outcome::TruePositive
            }
            None if overlaps_ignored => Outcome::Ignored,
            None => Outcome::FalsePositive,
        };
        if outcome != Outcome::Ignored {
            out.push((d.score, outcome));
        }
    }
    (out, num_valid)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub score: f64,
    pub recall: f64,
    pub precision: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApResult {
    pub difficulty: Difficulty,
    pub ap: f64,
    pub num_gt: usize,
    pub curve: Vec<PrPoint>,
}

/// Precision-recall curve from scored outcomes, ranked by descending score.
fn pr_curve(mut ranked: Vec<(f64, Outcome)>, num_gt: usize) -> Vec<PrPoint> {
    // stable sort keeps frame order for equal scores
    ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal));
    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(ranked.len());
    for (n, (score, o)) in ranked.iter().enumerate() {
        if *o == Outcome::TruePositive {
            tp += 1;
        }
        curve.push(PrPoint {
            score: *score,
            recall: if num_gt == 0 { 0.0 } else { tp as f64 / num_gt as f64 },
            precision: tp as f64 / (n + 1) as f64,
        });
    }
    curve
}

/// Mean of the interpolated precision `max{p(r') : r' >= r}` at recall
/// `r = 0, 0.1, ..., 1`.
pub fn interpolated_ap_11(curve: &[PrPoint]) -> f64 {
    (0..=10)
        .map(|i| {
            let r = i as f64 / 10.0;
            curve
                .iter()
                .filter(|p| p.recall >= r - 1e-12)
                .map(|p| p.precision)
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 11.0
}

/// 11-point AP for `class` at each difficulty. A level includes every
/// ground truth of that level or easier; harder ones are ignored. AP is 0
/// when a level has no ground truths.
pub fn average_precision_11(
    frames: &[EvalFrame],
    class: &str,
    iou_thresh: f64,
    metric: IouMetric,
) -> Vec<ApResult> {
    Difficulty::ALL
        .iter()
        .map(|&level| {
            let per_frame: Vec<_> = frames
                .par_iter()
                .map(|f| match_frame(f, class, level, iou_thresh, metric))
                .collect();
            let num_gt = per_frame.iter().map(|f| f.1).sum();
            let ranked: Vec<_> = per_frame.into_iter().flat_map(|f| f.0).collect();
            let curve = pr_curve(ranked, num_gt);
            let ap = if num_gt == 0 { 0.0 } else { interpolated_ap_11(&curve) };
            ApResult { difficulty: level, ap, num_gt, curve }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PartError {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub mean: f64,
}

/// Per-axis mean absolute part-location error over one sample's foreground
/// points.
pub fn part_abs_error(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<PartError> {
    if pred.len() != gt.len() {
        return Err(Error::DimensionMismatch(format!("{} predicted vs {} target parts", pred.len(), gt.len())));
    }
    if pred.is_empty() {
        return Ok(PartError::default());
    }
    let mut s = [0.0; 3];
    for (p, g) in pred.iter().zip(gt) {
        for u in 0..3 {
            s[u] += (p[u] - g[u]).abs();
        }
    }
    let n = pred.len() as f64;
    let [x, y, z] = s.map(|v| v / n);
    Ok(PartError { x, y, z, mean: (x + y + z) / 3.0 })
}

/// Per-sample errors averaged over the frames that have foreground points.
pub fn mean_part_abs_error(frames: &[EvalFrame]) -> Result<PartError> {
    let mut acc = PartError::default();
    let mut n = 0usize;
    for f in frames {
        if f.gt_parts.is_empty() && f.pred_parts.is_empty() {
            continue;
        }
        let e = part_abs_error(&f.pred_parts, &f.gt_parts)?;
        acc.x += e.x;
        acc.y += e.y;
        acc.z += e.z;
        n += 1;
    }
    if n == 0 {
        return Ok(acc);
    }
    let n = n as f64;
    let (x, y, z) = (acc.x / n, acc.y / n, acc.z / n);
    Ok(PartError { x, y, z, mean: (x + y + z) / 3.0 })
}

/// Pearson correlation coefficient, single pass.
pub fn pearson_correlation(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch(format!("{} vs {} samples", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::InvalidConfig("correlation needs at least two samples".into()));
    }
    let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (n, (&a, &b)) in x.iter().zip(y).enumerate() {
        let k = (n + 1) as f64;
        let dx = a - mx;
        let dy = b - my;
        mx += dx / k;
        my += dy / k;
        sxx += dx * (a - mx);
        syy += dy * (b - my);
        sxy += dx * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(Error::InvalidConfig("correlation undefined for constant input".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FpBreakdown {
    pub num_false_positives: usize,
    pub background: f64,
    pub localization: f64,
    pub other_class: f64,
}

/// Lower IoU bound for counting a false positive as a localization error.
pub const LOCALIZATION_MIN_IOU: f64 = 0.1;

/// Classifies the unmatched detections scoring at least `score_threshold`.
/// Detections are matched greedily per class against all ground truths
/// regardless of difficulty. An unmatched detection is a localization error
/// when its best same-class IoU exceeds 0.1 (this includes duplicates of an
/// already matched object), an other-class error when it overlaps a
/// ground truth of another class with IoU `>= iou_thresh`, and background
/// otherwise.
pub fn fp_breakdown(frames: &[EvalFrame], score_threshold: f64, iou_thresh: f64, metric: IouMetric) -> FpBreakdown {
    let (mut bg, mut loc, mut other) = (0usize, 0usize, 0usize);
    for f in frames {
        let mut claimed = vec![false; f.ground_truths.len()];
        for i in by_score_desc(&f.detections) {
            let d = &f.detections[i];
            let ious: Vec<f64> = f.ground_truths.iter().map(|g| metric.iou(&d.bbox, &g.bbox)).collect();
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in f.ground_truths.iter().enumerate() {
                if gt.class == d.class && !claimed[g] && ious[g] >= iou_thresh && best.is_none_or(|(_, b)| ious[g] > b) {
                    best = Some((g, ious[g]));
                }
            }
            if let Some((g, _)) = best {
                claimed[g] = true;
                continue;
            }
            if d.score < score_threshold {
                continue;
            }
            let same = f.ground_truths.iter().zip(&ious).filter(|(g, _)| g.class == d.class).map(|(_, v)| *v).fold(0.0, f64::max);
            let diff = f.ground_truths.iter().zip(&ious).filter(|(g, _)| g.class != d.class).map(|(_, v)| *v).fold(0.0, f64::max);
            if same > LOCALIZATION_MIN_IOU {
                loc += 1;
            } else if diff >= iou_thresh {
                other += 1;
            } else {
                bg += 1;
            }
        }
    }
    let n = bg + loc + other;
    if n == 0 {
        return FpBreakdown::default();
    }
    let t = n as f64;
    FpBreakdown { num_false_positives: n, background: bg as f64 / t, localization: loc as f64 / t, other_class: other as f64 / t }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Vec3;

    fn car(x: f64, y: f64) -> BoxParams {
        BoxParams::new(Vec3::new(x, y, -1.0), 1.5, 1.6, 3.9, 0.0).unwrap()
    }

    fn gt(b: BoxParams, d: Option<Difficulty>) -> GroundTruth {
        GroundTruth { bbox: b, class: "Car".into(), difficulty: d }
    }

    fn det(b: BoxParams, score: f64) -> Detection {
        Detection { bbox: b, score, class: "Car".into() }
    }

    #[test]
    fn perfect_and_empty() {
        let gts: Vec<_> = (0..4).map(|i| gt(car(10.0 * i as f64, 0.0), Some(Difficulty::Easy))).collect();
        let dets: Vec<_> = gts.iter().map(|g| det(g.bbox, 0.9)).collect();
        let frame = EvalFrame { detections: dets, ground_truths: gts.clone(), ..Default::default() };
        for r in average_precision_11(&[frame.clone()], "Car", 0.7, IouMetric::ThreeD) {
            assert_eq!(r.ap, 1.0);
        }
        assert_eq!(proposal_recall(&[frame], 100, 0.7, IouMetric::ThreeD), 1.0);
        let empty = EvalFrame { ground_truths: gts, ..Default::default() };
        assert_eq!(proposal_recall(&[empty.clone()], 100, 0.7, IouMetric::ThreeD), 0.0);
        assert_eq!(average_precision_11(&[empty], "Car", 0.7, IouMetric::ThreeD)[0].ap, 0.0);
    }

    #[test]
    fn harder_objects_are_ignored_at_easy() {
        let frame = EvalFrame {
            detections: vec![det(car(0.0, 0.0), 0.9), det(car(20.0, 0.0), 0.8)],
            ground_truths: vec![gt(car(0.0, 0.0), Some(Difficulty::Easy)), gt(car(20.0, 0.0), Some(Difficulty::Hard))],
            ..Default::default()
        };
        let r = average_precision_11(&[frame], "Car", 0.7, IouMetric::ThreeD);
        assert_eq!(r[0].num_gt, 1);
        assert_eq!(r[0].ap, 1.0);
        assert_eq!(r[0].curve.len(), 1);
        assert_eq!(r[2].num_gt, 2);
        assert_eq!(r[2].ap, 1.0);
    }

    #[test]
    fn part_error_offset() {
        let g = vec![[0.2, 0.3, 0.4], [0.5, 0.5, 0.5]];
        let p: Vec<_> = g.iter().map(|v| [v[0] + 0.1, v[1], v[2]]).collect();
        let e = part_abs_error(&p, &g).unwrap();
        assert!((e.x - 0.1).abs() < 1e-12 && e.y == 0.0 && e.z == 0.0);
        assert!((e.mean - 0.1 / 3.0).abs() < 1e-12);
        assert!(part_abs_error(&p[..1], &g).is_err());
    }

    #[test]
    fn pearson_lines() {
        let x: Vec<f64> = (0..10).map(|v| v as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        assert!((pearson_correlation(&x, &y).unwrap() - 1.0).abs() < 1e-12);
        let y: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson_correlation(&x, &y).unwrap() + 1.0).abs() < 1e-12);
        assert!(pearson_correlation(&x, &[1.0; 10]).is_err());
    }

    #[test]
    fn fp_categories() {
        let g = car(0.0, 0.0);
        // x-shift s gives IoU (l - s) / (l + s); s = 1.67 -> ~0.4
        let loose = g.translated(Vec3::new(1.67, 0.0, 0.0));
        let frame = EvalFrame { detections: vec![det(loose, 0.9)], ground_truths: vec![gt(g, Some(Difficulty::Easy))], ..Default::default() };
        let b = fp_breakdown(&[frame], 0.5, 0.7, IouMetric::ThreeD);
        assert_eq!(b.num_false_positives, 1);
        assert_eq!(b.localization, 1.0);

        let matched = EvalFrame { detections: vec![det(g, 0.9)], ground_truths: vec![gt(g, Some(Difficulty::Easy))], ..Default::default() };
        assert_eq!(fp_breakdown(&[matched], 0.5, 0.7, IouMetric::ThreeD), FpBreakdown::default());

        let ped = GroundTruth { bbox: g, class: "Pedestrian".into(), difficulty: Some(Difficulty::Easy) };
        let frame = EvalFrame { detections: vec![det(g, 0.9), det(car(50.0, 0.0), 0.8)], ground_truths: vec![ped], ..Default::default() };
        let b = fp_breakdown(&[frame], 0.5, 0.7, IouMetric::ThreeD);
        assert_eq!((b.other_class, b.background), (0.5, 0.5));
    }
}
