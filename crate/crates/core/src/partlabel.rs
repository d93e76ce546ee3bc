//! Foreground masks and intra-object part locations derived from
//! ground-truth boxes.
//!
//! A foreground point's part location is its position inside the owning box,
//! normalized so each component lies in `[0, 1]` and the box center maps to
//! `(0.5, 0.5, 0.5)`. The planar offset is rotated into the box frame, the
//! first rotated component is divided by the width `w` and the second by the
//! length `l`; the vertical offset is divided by `h`.

use std::f64::consts::FRAC_PI_2;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{point_in_box, BoxParams, Vec3};
use crate::postproc::iou3d;

/// Ground-truth boxes overlapping by more than this 3D IoU are rejected as
/// corrupt annotations.
pub const MAX_GT_OVERLAP_IOU: f64 = 0.05;

/// Floating-point slack absorbed by clamping part components into `[0, 1]`.
const CLAMP_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartLabel {
    pub foreground: bool,
    /// Meaningful only when `foreground` is set; zeros otherwise.
    pub part: [f64; 3],
    pub box_index: Option<usize>,
}

impl PartLabel {
    pub const BACKGROUND: PartLabel = PartLabel {
        foreground: false,
        part: [0.0; 3],
        box_index: None,
    };
}

/// Yaw used by the part-location rotation. That rotation measures orientation
/// clockwise from the +y axis, so it is `pi/2 - theta` in LiDAR yaw.
fn part_frame_yaw(b: &BoxParams) -> f64 {
    FRAC_PI_2 - b.theta
}

/// Part location of `p` relative to `b`, without clamping.
pub fn part_location(p: Vec3, b: &BoxParams) -> [f64; 3] {
    let (s, c) = part_frame_yaw(b).sin_cos();
    let dx = p.x - b.center.x;
    let dy = p.y - b.center.y;
    // row vector [dx dy] times [[c, s], [-s, c]]
    let xt = dx * c - dy * s;
    let yt = dx * s + dy * c;
    [
        xt / b.w + 0.5,
        yt / b.l + 0.5,
        (p.z - b.center.z) / b.h + 0.5,
    ]
}

/// Inverse of [`part_location`]: the point whose part location in `b` is
/// `part`.
pub fn point_from_part(part: [f64; 3], b: &BoxParams) -> Vec3 {
    let (s, c) = part_frame_yaw(b).sin_cos();
    let xt = (part[0] - 0.5) * b.w;
    let yt = (part[1] - 0.5) * b.l;
    // the rotation matrix is orthogonal, its inverse is the transpose
    let dx = xt * c + yt * s;
    let dy = -xt * s + yt * c;
    Vec3::new(
        b.center.x + dx,
        b.center.y + dy,
        b.center.z + (part[2] - 0.5) * b.h,
    )
}

fn check_overlaps(gt_boxes: &[BoxParams]) -> Result<()> {
    for i in 0..gt_boxes.len() {
        for j in i + 1..gt_boxes.len() {
            let iou = iou3d(&gt_boxes[i], &gt_boxes[j]);
            if iou > MAX_GT_OVERLAP_IOU {
                return Err(Error::OverlappingBoxes {
                    first: i,
                    second: j,
                    iou,
                });
            }
        }
    }
    Ok(())
}

/// Labels every point: foreground iff it lies inside some box (closed),
/// with its part location in that box. A point inside several boxes goes to
/// the box with the nearest center.
pub fn compute_part_labels(points: &[Vec3], gt_boxes: &[BoxParams]) -> Result<Vec<PartLabel>> {
    check_overlaps(gt_boxes)?;
    let radii: Vec<f64> = gt_boxes
        .iter()
        .map(|b| 0.5 * (b.l * b.l + b.w * b.w + b.h * b.h).sqrt() + 1e-9)
        .collect();

    let labels = points
        .iter()
        .map(|&p| {
            let mut best: Option<(usize, f64)> = None;
            for (i, b) in gt_boxes.iter().enumerate() {
                let d = (p - b.center).norm();
                if d > radii[i] || !point_in_box(p, b) {
                    continue;
                }
                if best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((i, d));
                }
            }
            match best {
                None => PartLabel::BACKGROUND,
                Some((i, _)) => {
                    let part = part_location(p, &gt_boxes[i]).map(|u| {
                        debug_assert!(
                            (-1e-6..=1.0 + 1e-6).contains(&u),
                            "part component {u} far outside [0, 1]"
                        );
                        if (-CLAMP_EPS..0.0).contains(&u) {
                            0.0
                        } else if u > 1.0 && u <= 1.0 + CLAMP_EPS {
                            1.0
                        } else {
                            u
                        }
                    });
                    PartLabel {
                        foreground: true,
                        part,
                        box_index: Some(i),
                    }
                }
            }
        })
        .collect();
    Ok(labels)
}

/// Size in bytes of one record written by [`write_label_records`].
pub const LABEL_RECORD_SIZE: usize = 3 * 4 + 1 + 3 * 4 + 4;

/// Writes one little-endian record per point: xyz (3 x f32), foreground
/// (u8), part (3 x f32, zero for background), box index (i32, -1 for none).
pub fn write_label_records<W: Write>(
    mut out: W,
    points: &[Vec3],
    labels: &[PartLabel],
) -> Result<()> {
    if points.len() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} points but {} labels",
            points.len(),
            labels.len()
        )));
    }
    let mut buf = Vec::with_capacity(points.len() * LABEL_RECORD_SIZE);
    for (p, l) in points.iter().zip(labels) {
        for v in p.to_array() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        buf.push(l.foreground as u8);
        let part = if l.foreground { l.part } else { [0.0; 3] };
        for v in part {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        let idx = l.box_index.map_or(-1, |i| i as i32);
        buf.extend_from_slice(&idx.to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

/// Decoded form of one binary label record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelRecord {
    pub xyz: [f32; 3],
    pub foreground: bool,
    pub part: [f32; 3],
    pub box_index: i32,
}

pub fn read_label_records(bytes: &[u8]) -> Result<Vec<LabelRecord>> {
    if bytes.len() % LABEL_RECORD_SIZE != 0 {
        return Err(Error::Format(format!(
            "label stream length {} is not a multiple of {LABEL_RECORD_SIZE}",
            bytes.len()
        )));
    }
    let f32_at = |b: &[u8], o: usize| f32::from_le_bytes(b[o..o + 4].try_into().unwrap());
    Ok(bytes
        .chunks_exact(LABEL_RECORD_SIZE)
        .map(|r| LabelRecord {
            xyz: [f32_at(r, 0), f32_at(r, 4), f32_at(r, 8)],
            foreground: r[12] != 0,
            part: [f32_at(r, 13), f32_at(r, 17), f32_at(r, 21)],
            box_index: i32::from_le_bytes(r[25..29].try_into().unwrap()),
        })
        .collect())
}

/// Counts written next to a label stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSummary {
    pub num_points: usize,
    pub num_foreground: usize,
    pub num_boxes: usize,
    pub points_per_box: Vec<usize>,
    pub record_size: usize,
}

pub fn summarize(labels: &[PartLabel], num_boxes: usize) -> LabelSummary {
    let mut points_per_box = vec![0; num_boxes];
    for l in labels {
        if let Some(i) = l.box_index {
            points_per_box[i] += 1;
        }
    }
    LabelSummary {
        num_points: labels.len(),
        num_foreground: labels.iter().filter(|l| l.foreground).count(),
        num_boxes,
        points_per_box,
        record_size: LABEL_RECORD_SIZE,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    use proptest::prelude::*;

    fn bx(c: [f64; 3], h: f64, w: f64, l: f64, t: f64) -> BoxParams {
        BoxParams::new(c.into(), h, w, l, t).unwrap()
    }

    #[test]
    fn center_is_half() {
        let b = bx([4.0, -2.0, -0.8], 1.56, 1.6, 3.9, 0.4);
        let labels = compute_part_labels(&[b.center], &[b]).unwrap();
        assert_eq!(labels[0].part, [0.5, 0.5, 0.5]);
        assert!(labels[0].foreground);
        assert_eq!(labels[0].box_index, Some(0));
    }

    #[test]
    fn corner_maps_to_ones() {
        let b = bx([0.0, 0.0, 0.0], 1.5, 1.6, 3.9, 0.0);
        // at zero yaw rotated-x runs along -y and rotated-y along +x
        let p = Vec3::new(b.l / 2.0, -b.w / 2.0, b.h / 2.0);
        assert!((point_from_part([1.0, 1.0, 1.0], &b) - p).norm() < 1e-12);
        let labels = compute_part_labels(&[p], &[b]).unwrap();
        assert!(labels[0].foreground);
        for u in labels[0].part {
            assert!((u - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn matrix_oracle_at_sixty_degrees() {
        let b = bx([10.0, 5.0, -1.0], 1.7, 0.6, 1.7, PI / 3.0);
        let t = FRAC_PI_2 - b.theta;
        let m = [[t.cos(), t.sin()], [-t.sin(), t.cos()]];
        let local = b.frame().to_world(Vec3::new(0.3, -0.2, 0.5));
        let d = [local.x - b.center.x, local.y - b.center.y];
        let xt = d[0] * m[0][0] + d[1] * m[1][0];
        let yt = d[0] * m[0][1] + d[1] * m[1][1];
        let want = [xt / b.w + 0.5, yt / b.l + 0.5, (local.z - b.center.z) / b.h + 0.5];
        let got = compute_part_labels(&[local], &[b]).unwrap()[0].part;
        for a in 0..3 {
            assert!((got[a] - want[a]).abs() < 1e-9);
        }
    }

    #[test]
    fn outside_is_background() {
        let b = bx([0.0; 3], 1.0, 1.0, 1.0, 0.0);
        let l = compute_part_labels(&[Vec3::new(3.0, 0.0, 0.0)], &[b]).unwrap();
        assert_eq!(l[0], PartLabel::BACKGROUND);
    }

    #[test]
    fn overlapping_boxes_error() {
        let a = bx([0.0; 3], 1.5, 1.6, 3.9, 0.0);
        let b = bx([0.5, 0.0, 0.0], 1.5, 1.6, 3.9, 0.0);
        assert!(matches!(
            compute_part_labels(&[Vec3::ZERO], &[a, b]),
            Err(Error::OverlappingBoxes { first: 0, second: 1, .. })
        ));
    }

    #[test]
    fn touching_boxes_nearest_center() {
        let a = bx([0.0; 3], 1.0, 1.0, 1.0, 0.0);
        let b = bx([1.0, 0.0, 0.0], 1.0, 1.0, 1.0, 0.0);
        let l = compute_part_labels(&[Vec3::new(0.5, 0.0, 0.0), Vec3::new(0.45, 0.0, 0.0)], &[a, b]).unwrap();
        // shared face: equidistant, first box wins
        assert_eq!(l[0].box_index, Some(0));
        assert_eq!(l[1].box_index, Some(0));
        let l = compute_part_labels(&[Vec3::new(0.5, 0.0, 0.0)], &[b, a]).unwrap();
        assert_eq!(l[0].box_index, Some(0));
    }

    #[test]
    fn records_layout() {
        let b = bx([0.0; 3], 2.0, 2.0, 2.0, 0.0);
        let pts = [Vec3::ZERO, Vec3::new(5.0, 0.0, 0.0)];
        let labels = compute_part_labels(&pts, &[b]).unwrap();
        let mut buf = Vec::new();
        write_label_records(&mut buf, &pts, &labels).unwrap();
        assert_eq!(buf.len(), 2 * LABEL_RECORD_SIZE);
        let recs = read_label_records(&buf).unwrap();
        assert_eq!(recs[0].part, [0.5, 0.5, 0.5]);
        assert_eq!(recs[0].box_index, 0);
        assert!(!recs[1].foreground);
        assert_eq!(recs[1].box_index, -1);
        assert_eq!(recs[1].xyz, [5.0, 0.0, 0.0]);
        let s = summarize(&labels, 1);
        assert_eq!((s.num_points, s.num_foreground, s.points_per_box.clone()), (2, 1, vec![1]));
        assert!(read_label_records(&buf[..30]).is_err());
    }

    proptest! {
        #[test]
        fn inverse_recovers_point(
            x in -50.0..50.0f64, y in -50.0..50.0f64, t in -PI..PI,
            h in 0.5..3.0f64, w in 0.5..3.0f64, l in 0.5..6.0f64,
            u in 0.0..1.0f64, v in 0.0..1.0f64, s in 0.0..1.0f64,
        ) {
            let b = bx([x, y, -1.0], h, w, l, t);
            let p = point_from_part([u, v, s], &b);
            let label = compute_part_labels(&[p], &[b]).unwrap()[0];
            prop_assume!(label.foreground);
            let back = point_from_part(label.part, &b);
            prop_assert!((back - p).norm() < 1e-9);
        }

        #[test]
        fn rigid_invariance(
            t in -PI..PI, alpha in -PI..PI, tx in -20.0..20.0f64, ty in -20.0..20.0f64,
            u in 0.01..0.99f64, v in 0.01..0.99f64, s in 0.01..0.99f64,
        ) {
            let b = bx([12.0, -3.0, -0.9], 1.5, 1.6, 3.9, t);
            let p = point_from_part([u, v, s], &b);
            let offset = Vec3::new(tx, ty, 0.4);
            let b2 = b.rotated_about_z(alpha).translated(offset);
            let p2 = p.rotate_z(alpha) + offset;
            let a = compute_part_labels(&[p], &[b]).unwrap()[0];
            let c = compute_part_labels(&[p2], &[b2]).unwrap()[0];
            prop_assert!(a.foreground && c.foreground);
            for k in 0..3 {
                prop_assert!((a.part[k] - c.part[k]).abs() < 1e-9);
            }
        }
    }
}
