//! `eval`: predictions and ground truth are parallel JSON lists of frames.
//!
//! A prediction frame is `{detections, pred_parts?, part_errors?}` where
//! `part_errors[i]` is the mean part-location error of the foreground points
//! inside detection `i`. A ground-truth frame is `{ground_truths, gt_parts?}`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use partgrid::evalkit::{
    average_precision_11, fp_breakdown, mean_part_abs_error, pearson_correlation, proposal_recall, ApResult, Detection,
    EvalFrame, FpBreakdown, GroundTruth, PartError,
};
use partgrid::postproc::IouMetric;
use serde::{Deserialize, Serialize};

use crate::io::{read_json, write_bytes, write_json};
use crate::Failure;

pub const RECALL_KS: [usize; 8] = [10, 20, 30, 40, 50, 100, 200, 300];

pub struct EvalOptions {
    pub metric: IouMetric,
    pub recall_iou: f64,
    pub fp_score: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredFrame {
    #[serde(default)]
    pub detections: Vec<Detection>,
    #[serde(default)]
    pub pred_parts: Vec<[f64; 3]>,
    #[serde(default)]
    pub part_errors: Vec<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GtFrame {
    #[serde(default)]
    pub ground_truths: Vec<GroundTruth>,
    #[serde(default)]
    pub gt_parts: Vec<[f64; 3]>,
}

#[derive(Debug, Serialize)]
pub struct ClassAp {
    pub iou: f64,
    pub easy: f64,
    pub moderate: f64,
    pub hard: f64,
    pub num_gt: [usize; 3],
}

#[derive(Debug, Serialize)]
pub struct EvalReport {
    pub num_frames: usize,
    /// Keyed `recall@k`, classes ignored.
    pub recall: BTreeMap<String, f64>,
    pub ap: BTreeMap<String, ClassAp>,
    #[serde(rename = "mAbsError")]
    pub abs_error: PartError,
    /// Correlation of per-detection part error with box error (1 - IoU);
    /// null when fewer than two detections carry a part error or either side
    /// is constant.
    pub pearson: Option<f64>,
    pub num_pearson_samples: usize,
    pub fp_ratios: FpBreakdown,
}

fn class_iou(class: &str) -> f64 {
    if class == "Car" {
        0.7
    } else {
        0.5
    }
}

pub fn merge(preds: Vec<PredFrame>, gts: Vec<GtFrame>) -> Result<(Vec<EvalFrame>, Vec<Vec<f64>>), Failure> {
    if preds.len() != gts.len() {
        return Err(Failure::input(format!("{} prediction frames but {} ground-truth frames", preds.len(), gts.len())));
    }
    let mut frames = Vec::with_capacity(preds.len());
    let mut part_errors = Vec::with_capacity(preds.len());
    for (i, (p, g)) in preds.into_iter().zip(gts).enumerate() {
        if !p.part_errors.is_empty() && p.part_errors.len() != p.detections.len() {
            return Err(Failure::input(format!(
                "frame {i}: {} part errors for {} detections",
                p.part_errors.len(),
                p.detections.len()
            )));
        }
        if p.pred_parts.len() != g.gt_parts.len() {
            return Err(Failure::input(format!(
                "frame {i}: {} predicted parts but {} target parts",
                p.pred_parts.len(),
                g.gt_parts.len()
            )));
        }
        frames.push(EvalFrame {
            detections: p.detections,
            ground_truths: g.ground_truths,
            pred_parts: p.pred_parts,
            gt_parts: g.gt_parts,
        });
        part_errors.push(p.part_errors);
    }
    Ok((frames, part_errors))
}

/// Pairs of (part error, 1 - best same-class IoU) over detections that carry
/// a part error.
fn error_pairs(frames: &[EvalFrame], part_errors: &[Vec<f64>], metric: IouMetric) -> (Vec<f64>, Vec<f64>) {
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for (f, errs) in frames.iter().zip(part_errors) {
        for (d, e) in f.detections.iter().zip(errs) {
            let best = f
                .ground_truths
                .iter()
                .filter(|g| g.class == d.class)
                .map(|g| metric.iou(&d.bbox, &g.bbox))
                .fold(0.0, f64::max);
            xs.push(*e);
            ys.push(1.0 - best);
        }
    }
    (xs, ys)
}

pub fn evaluate(frames: &[EvalFrame], part_errors: &[Vec<f64>], opts: &EvalOptions) -> Result<(EvalReport, Vec<(String, ApResult)>), Failure> {
    let mut recall = BTreeMap::new();
    for k in RECALL_KS {
        recall.insert(format!("recall@{k}"), proposal_recall(frames, k, opts.recall_iou, opts.metric));
    }
    let mut classes: Vec<&str> = frames
        .iter()
        .flat_map(|f| f.ground_truths.iter().map(|g| g.class.as_str()).chain(f.detections.iter().map(|d| d.class.as_str())))
        .collect();
    classes.sort_unstable();
    classes.dedup();
    let mut ap = BTreeMap::new();
    let mut curves = Vec::new();
    for class in classes {
        let iou = class_iou(class);
        let levels = average_precision_11(frames, class, iou, opts.metric);
        ap.insert(
            class.to_string(),
            ClassAp {
                iou,
                easy: levels[0].ap,
                moderate: levels[1].ap,
                hard: levels[2].ap,
                num_gt: [levels[0].num_gt, levels[1].num_gt, levels[2].num_gt],
            },
        );
        curves.extend(levels.into_iter().map(|l| (class.to_string(), l)));
    }
    let (xs, ys) = error_pairs(frames, part_errors, opts.metric);
    let pearson = pearson_correlation(&xs, &ys).ok();
    let report = EvalReport {
        num_frames: frames.len(),
        recall,
        ap,
        abs_error: mean_part_abs_error(frames)?,
        pearson,
        num_pearson_samples: xs.len(),
        fp_ratios: fp_breakdown(frames, opts.fp_score, opts.recall_iou, opts.metric),
    };
    Ok((report, curves))
}

pub fn pr_csv(curves: &[(String, ApResult)]) -> String {
    let mut s = String::from("class,difficulty,rank,score,recall,precision\n");
    for (class, r) in curves {
        for (i, p) in r.curve.iter().enumerate() {
            let _ = writeln!(s, "{class},{},{},{},{},{}", r.difficulty, i + 1, p.score, p.recall, p.precision);
        }
    }
    s
}

pub fn run(pred: &Path, gt: &Path, opts: &EvalOptions, out: Option<&Path>, csv: Option<&Path>) -> Result<(), Failure> {
    let (frames, part_errors) = merge(read_json(pred)?, read_json(gt)?)?;
    let (report, curves) = evaluate(&frames, &part_errors, opts)?;
    write_json(out, &report)?;
    let csv_path = csv.map(Path::to_path_buf).or_else(|| out.filter(|p| p.as_os_str() != "-").map(|p| p.with_extension("csv")));
    if let Some(p) = csv_path {
        write_bytes(Some(&p), pr_csv(&curves).as_bytes())?;
    }
    Ok(())
}
