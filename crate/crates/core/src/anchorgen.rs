//! Per-class BEV anchor grids and IoU-based anchor-to-ground-truth
//! assignment.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{BoxParams, Vec3};
use crate::postproc::bev_iou;
use crate::voxel::VoxelGridSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorClassSpec {
    pub name: String,
    pub h: f64,
    pub w: f64,
    pub l: f64,
    pub z_center: f64,
    pub yaws: Vec<f64>,
    pub pos_iou_thresh: f64,
    pub neg_iou_thresh: f64,
}

impl AnchorClassSpec {
    fn kitti(name: &str, (l, w, h): (f64, f64, f64), pos: f64, neg: f64) -> Self {
        Self {
            name: name.into(),
            h,
            w,
            l,
            z_center: -1.0,
            yaws: vec![0.0, FRAC_PI_2],
            pos_iou_thresh: pos,
            neg_iou_thresh: neg,
        }
    }

    pub fn car() -> Self {
        Self::kitti("Car", (3.9, 1.6, 1.56), 0.6, 0.45)
    }

    pub fn pedestrian() -> Self {
        Self::kitti("Pedestrian", (0.8, 0.6, 1.7), 0.5, 0.35)
    }

    pub fn cyclist() -> Self {
        Self::kitti("Cyclist", (1.7, 0.6, 1.7), 0.5, 0.35)
    }

    pub fn kitti_classes() -> Vec<Self> {
        vec![Self::car(), Self::pedestrian(), Self::cyclist()]
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.neg_iou_thresh
            && self.neg_iou_thresh < self.pos_iou_thresh
            && self.pos_iou_thresh <= 1.0)
        {
            return Err(Error::InvalidConfig(format!(
                "{}: need 0 <= neg ({}) < pos ({}) <= 1",
                self.name, self.neg_iou_thresh, self.pos_iou_thresh
            )));
        }
        if !(self.h > 0.0 && self.w > 0.0 && self.l > 0.0) || self.yaws.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "{}: anchor size must be positive and at least one yaw given",
                self.name
            )));
        }
        Ok(())
    }
}

/// BEV feature map size after `downsample`-fold striding of `grid`.
pub fn bev_dims(grid: &VoxelGridSpec, downsample: usize) -> [usize; 2] {
    let d = grid.dims();
    [d[0].div_ceil(downsample), d[1].div_ceil(downsample)]
}

/// One anchor per (cell, yaw), centered on each cell of the `bev_dims` map
/// laid over `grid`'s x/y range. Order: x-major, then y, then yaw.
pub fn generate_anchors(
    bev_dims: [usize; 2],
    spec: &AnchorClassSpec,
    grid: &VoxelGridSpec,
) -> Result<Vec<BoxParams>> {
    spec.validate()?;
    if bev_dims[0] == 0 || bev_dims[1] == 0 {
        return Err(Error::InvalidConfig("BEV dims must be >= 1".into()));
    }
    let cell_x = (grid.range_max.x - grid.range_min.x) / bev_dims[0] as f64;
    let cell_y = (grid.range_max.y - grid.range_min.y) / bev_dims[1] as f64;
    let mut anchors = Vec::with_capacity(bev_dims[0] * bev_dims[1] * spec.yaws.len());
    for i in 0..bev_dims[0] {
        let x = grid.range_min.x + (i as f64 + 0.5) * cell_x;
        for j in 0..bev_dims[1] {
            let y = grid.range_min.y + (j as f64 + 0.5) * cell_y;
            for &yaw in &spec.yaws {
                anchors.push(BoxParams::new(
                    Vec3::new(x, y, spec.z_center),
                    spec.h,
                    spec.w,
                    spec.l,
                    yaw,
                )?);
            }
        }
    }
    Ok(anchors)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "label", content = "gt")]
pub enum AnchorLabel {
    Positive(usize),
    Negative,
    Ignore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorAssignment {
    pub labels: Vec<AnchorLabel>,
    /// Best BEV IoU of each anchor over all ground truths.
    pub max_iou: Vec<f64>,
}

impl AnchorAssignment {
    pub fn positives(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.labels.iter().enumerate().filter_map(|(i, l)| match l {
            AnchorLabel::Positive(g) => Some((i, *g)),
            _ => None,
        })
    }

    pub fn count(&self, pred: impl Fn(&AnchorLabel) -> bool) -> usize {
        self.labels.iter().filter(|l| pred(l)).count()
    }
}

/// Labels anchors by their best BEV IoU: positive at `>= pos`, negative below
/// `neg`, ignored in between. Each ground truth also claims its single
/// highest-IoU anchor (lowest index on ties) as positive, provided the IoU is
/// non-zero.
pub fn assign_anchors(
    anchors: &[BoxParams],
    gt_boxes: &[BoxParams],
    spec: &AnchorClassSpec,
) -> Result<AnchorAssignment> {
    spec.validate()?;
    let mut labels = vec![AnchorLabel::Negative; anchors.len()];
    let mut max_iou = vec![0.0; anchors.len()];
    let mut gt_best: Vec<(usize, f64)> = vec![(usize::MAX, 0.0); gt_boxes.len()];

    for (i, a) in anchors.iter().enumerate() {
        let mut best = (usize::MAX, 0.0);
        for (g, gt) in gt_boxes.iter().enumerate() {
            let iou = bev_iou(a, gt);
            if iou > best.1 {
                best = (g, iou);
            }
            if iou > gt_best[g].1 {
                gt_best[g] = (i, iou);
            }
        }
        max_iou[i] = best.1;
        labels[i] = if best.0 != usize::MAX && best.1 >= spec.pos_iou_thresh {
            AnchorLabel::Positive(best.0)
        } else if best.1 < spec.neg_iou_thresh {
            AnchorLabel::Negative
        } else {
            AnchorLabel::Ignore
        };
    }

    // Force-match; when one anchor is best for several ground truths the
    // higher IoU wins.
    let mut forced: Vec<Option<(usize, f64)>> = vec![None; anchors.len()];
    for (g, &(i, iou)) in gt_best.iter().enumerate() {
        if i == usize::MAX {
            continue;
        }
        if forced[i].is_none_or(|(_, prev)| iou > prev) {
            forced[i] = Some((g, iou));
        }
    }
    for (i, f) in forced.into_iter().enumerate() {
        if let Some((g, _)) = f {
            labels[i] = AnchorLabel::Positive(g);
        }
    }
    Ok(AnchorAssignment { labels, max_iou })
}
