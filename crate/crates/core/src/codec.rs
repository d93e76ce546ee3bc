//! Regression target codecs.
//!
//! * Anchor-free: bin classification plus in-bin residual for the x/y center
//!   offset and the yaw, direct offset for z, size relative to a class mean.
//! * Anchor residual: center offsets normalized by the anchor's BEV diagonal
//!   (height for z), log size ratios, sine-encoded yaw plus a direction bit.
//! * Refinement: the anchor-residual form computed in the proposal's
//!   canonical frame, with the raw yaw difference.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{normalize_angle, BoxParams, Vec3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMeanSize {
    pub name: String,
    pub h: f64,
    pub w: f64,
    pub l: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    /// Half-width `S` of the search window along x and y, meters.
    pub search_range: f64,
    /// Bin length `delta`, meters.
    pub bin_size: f64,
    pub num_theta_bins: usize,
    pub mean_sizes: Vec<ClassMeanSize>,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            search_range: 3.0,
            bin_size: 0.5,
            num_theta_bins: 12,
            mean_sizes: vec![
                ClassMeanSize { name: "Car".into(), h: 1.56, w: 1.6, l: 3.9 },
                ClassMeanSize { name: "Pedestrian".into(), h: 1.7, w: 0.6, l: 0.8 },
                ClassMeanSize { name: "Cyclist".into(), h: 1.7, w: 0.6, l: 1.7 },
            ],
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.search_range > 0.0 && self.bin_size > 0.0) {
            return Err(Error::InvalidConfig(
                "search range and bin size must be positive".into(),
            ));
        }
        let bins = 2.0 * self.search_range / self.bin_size;
        if (bins - bins.round()).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "2S/delta = {bins} is not integral"
            )));
        }
        if self.num_theta_bins < 2 {
            return Err(Error::InvalidConfig("need at least 2 orientation bins".into()));
        }
        Ok(())
    }

    /// Number of center bins per axis, `2S / delta`.
    pub fn num_center_bins(&self) -> usize {
        (2.0 * self.search_range / self.bin_size).round() as usize
    }

    /// Orientation bin width `omega = 2 pi / num_theta_bins`.
    pub fn theta_bin_size(&self) -> f64 {
        2.0 * PI / self.num_theta_bins as f64
    }

    pub fn mean_size(&self, class: &str) -> Result<&ClassMeanSize> {
        self.mean_sizes
            .iter()
            .find(|m| m.name == class)
            .ok_or_else(|| Error::UnknownClass(class.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorFreeTarget {
    pub bin_x: usize,
    pub bin_y: usize,
    pub res_x: f64,
    pub res_y: f64,
    pub res_z: f64,
    pub bin_theta: usize,
    pub res_theta: f64,
    pub res_h: f64,
    pub res_w: f64,
    pub res_l: f64,
}

fn center_bin(offset: f64, cfg: &CodecConfig) -> Option<(usize, f64)> {
    let s = cfg.search_range;
    let d = cfg.bin_size;
    let shifted = offset + s;
    let bin = (shifted / d).floor();
    if !(bin >= 0.0 && (bin as usize) < cfg.num_center_bins()) {
        return None;
    }
    let res = (shifted - (bin * d + d / 2.0)) / d;
    Some((bin as usize, res))
}

/// Orientation bin and residual in `[-1, 1)` for yaw `theta`.
pub fn encode_theta_bin(theta: f64, num_bins: usize) -> (usize, f64) {
    let omega = 2.0 * PI / num_bins as f64;
    let shifted = (theta + omega / 2.0).rem_euclid(2.0 * PI);
    let bin = ((shifted / omega).floor() as usize).min(num_bins - 1);
    let res = (2.0 / omega) * (shifted - (bin as f64 * omega + omega / 2.0));
    (bin, res)
}

pub fn decode_theta_bin(bin: usize, res: f64, num_bins: usize) -> f64 {
    let omega = 2.0 * PI / num_bins as f64;
    let shifted = bin as f64 * omega + omega / 2.0 + res * omega / 2.0;
    normalize_angle(shifted - omega / 2.0)
}

pub fn encode_anchor_free(
    p: Vec3,
    gt: &BoxParams,
    class: &str,
    cfg: &CodecConfig,
) -> Result<AnchorFreeTarget> {
    let mean = cfg.mean_size(class)?;
    let dx = gt.center.x - p.x;
    let dy = gt.center.y - p.y;
    let out_of_range = || Error::OutOfSearchRange {
        dx,
        dy,
        search_range: cfg.search_range,
    };
    let (bin_x, res_x) = center_bin(dx, cfg).ok_or_else(out_of_range)?;
    let (bin_y, res_y) = center_bin(dy, cfg).ok_or_else(out_of_range)?;
    let (bin_theta, res_theta) = encode_theta_bin(gt.theta, cfg.num_theta_bins);
    Ok(AnchorFreeTarget {
        bin_x,
        bin_y,
        res_x,
        res_y,
        res_z: gt.center.z - p.z,
        bin_theta,
        res_theta,
        res_h: (gt.h - mean.h) / mean.h,
        res_w: (gt.w - mean.w) / mean.w,
        res_l: (gt.l - mean.l) / mean.l,
    })
}

pub fn decode_anchor_free(
    p: Vec3,
    t: &AnchorFreeTarget,
    class: &str,
    cfg: &CodecConfig,
) -> Result<BoxParams> {
    let mean = cfg.mean_size(class)?;
    let s = cfg.search_range;
    let d = cfg.bin_size;
    let x = p.x + t.bin_x as f64 * d + d / 2.0 + t.res_x * d - s;
    let y = p.y + t.bin_y as f64 * d + d / 2.0 + t.res_y * d - s;
    let theta = decode_theta_bin(t.bin_theta, t.res_theta, cfg.num_theta_bins);
    BoxParams::new(
        Vec3::new(x, y, p.z + t.res_z),
        mean.h * (1.0 + t.res_h),
        mean.w * (1.0 + t.res_w),
        mean.l * (1.0 + t.res_l),
        theta,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorResidualTarget {
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
    pub dl: f64,
    pub dh: f64,
    pub dw: f64,
    pub dtheta: f64,
    /// 1 when the yaw lies in `[0, pi)`, 0 for `[-pi, 0)`.
    pub dir: u8,
}

impl AnchorResidualTarget {
    /// The seven regression values in `(x, y, z, l, h, w, theta)` order.
    pub fn residuals(&self) -> [f64; 7] {
        [self.dx, self.dy, self.dz, self.dl, self.dh, self.dw, self.dtheta]
    }
}

pub fn direction_bit(theta: f64) -> u8 {
    (normalize_angle(theta) >= 0.0) as u8
}

fn encode_residual_common(anchor: &BoxParams, gt: &BoxParams, dtheta: f64, dir: u8) -> AnchorResidualTarget {
    let d = anchor.bev_diagonal();
    AnchorResidualTarget {
        dx: (gt.center.x - anchor.center.x) / d,
        dy: (gt.center.y - anchor.center.y) / d,
        dz: (gt.center.z - anchor.center.z) / anchor.h,
        dl: (gt.l / anchor.l).ln(),
        dh: (gt.h / anchor.h).ln(),
        dw: (gt.w / anchor.w).ln(),
        dtheta,
        dir,
    }
}

fn decode_residual_common(anchor: &BoxParams, t: &AnchorResidualTarget, theta: f64) -> Result<BoxParams> {
    let d = anchor.bev_diagonal();
    BoxParams::new(
        Vec3::new(
            anchor.center.x + t.dx * d,
            anchor.center.y + t.dy * d,
            anchor.center.z + t.dz * anchor.h,
        ),
        anchor.h * t.dh.exp(),
        anchor.w * t.dw.exp(),
        anchor.l * t.dl.exp(),
        theta,
    )
}

pub fn encode_anchor_residual(anchor: &BoxParams, gt: &BoxParams) -> AnchorResidualTarget {
    encode_residual_common(
        anchor,
        gt,
        (gt.theta - anchor.theta).sin(),
        direction_bit(gt.theta),
    )
}

/// Angular slack around a half-circle boundary within which the direction
/// bit is not allowed to flip the decoded yaw.
const DIR_FLIP_EPS: f64 = 1e-9;

/// Inverts [`encode_anchor_residual`]. The yaw is `theta_a + asin(dtheta)`,
/// flipped by pi when it falls in the half-circle opposite to `dir`. Exact
/// for yaw differences in `(-pi/2, pi/2)`.
pub fn decode_anchor_residual(anchor: &BoxParams, t: &AnchorResidualTarget) -> Result<BoxParams> {
    let mut theta = normalize_angle(anchor.theta + t.dtheta.clamp(-1.0, 1.0).asin());
    let near_boundary = theta.abs() < DIR_FLIP_EPS || (theta + PI).abs() < DIR_FLIP_EPS;
    if !near_boundary && direction_bit(theta) != t.dir {
        theta = normalize_angle(theta + PI);
    }
    decode_residual_common(anchor, t, theta)
}

/// Refinement target of `gt` relative to `proposal`, computed after moving
/// both into the proposal's canonical frame. `dtheta` is the raw yaw
/// difference wrapped to `[-pi, pi)`; `dir` is always 0.
pub fn encode_refine(proposal: &BoxParams, gt: &BoxParams) -> AnchorResidualTarget {
    let frame = proposal.frame();
    let local_gt = frame.box_to_local(gt);
    let local_prop = frame.box_to_local(proposal);
    encode_residual_common(
        &local_prop,
        &local_gt,
        normalize_angle(gt.theta - proposal.theta),
        0,
    )
}

pub fn decode_refine(proposal: &BoxParams, t: &AnchorResidualTarget) -> Result<BoxParams> {
    let frame = proposal.frame();
    let local_prop = frame.box_to_local(proposal);
    let local = decode_residual_common(&local_prop, t, t.dtheta)?;
    Ok(frame.box_to_world(&local))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn bx(c: [f64; 3], h: f64, w: f64, l: f64, t: f64) -> BoxParams {
        BoxParams::new(c.into(), h, w, l, t).unwrap()
    }

    #[test]
    fn center_bin_hand_value() {
        let cfg = CodecConfig::default();
        let p = Vec3::new(10.0, 2.0, -1.0);
        let gt = bx([10.0, 2.0, -1.0], 1.56, 1.6, 3.9, 0.0);
        let t = encode_anchor_free(p, &gt, "Car", &cfg).unwrap();
        // (1/0.5) * (0 + 3 - (6 * 0.5 + 0.25)) = -0.5
        assert_eq!((t.bin_x, t.bin_y), (6, 6));
        assert_eq!(t.res_x, -0.5);
        assert_eq!(t.res_y, -0.5);
        assert_eq!((t.res_h, t.res_w, t.res_l), (0.0, 0.0, 0.0));
        assert_eq!(t.res_z, 0.0);
    }

    #[test]
    fn out_of_search_range() {
        let cfg = CodecConfig::default();
        let gt = bx([13.5, 0.0, 0.0], 1.56, 1.6, 3.9, 0.0);
        assert!(matches!(
            encode_anchor_free(Vec3::new(10.0, 0.0, 0.0), &gt, "Car", &cfg),
            Err(Error::OutOfSearchRange { .. })
        ));
        // exactly +S falls outside the half-open window
        let gt = bx([13.0, 0.0, 0.0], 1.56, 1.6, 3.9, 0.0);
        assert!(encode_anchor_free(Vec3::new(10.0, 0.0, 0.0), &gt, "Car", &cfg).is_err());
        let gt = bx([7.0, 0.0, 0.0], 1.56, 1.6, 3.9, 0.0);
        assert_eq!(encode_anchor_free(Vec3::new(10.0, 0.0, 0.0), &gt, "Car", &cfg).unwrap().bin_x, 0);
        assert!(matches!(
            encode_anchor_free(Vec3::ZERO, &gt, "Truck", &cfg),
            Err(Error::UnknownClass(_))
        ));
    }

    #[test]
    fn theta_bin_center_residual_zero() {
        let n = 12;
        let omega = 2.0 * PI / n as f64;
        for k in 0..n {
            let theta = normalize_angle(k as f64 * omega);
            let (bin, res) = encode_theta_bin(theta, n);
            assert_eq!(bin, k);
            assert!(res.abs() < 1e-12, "k={k} res={res}");
        }
    }

    #[test]
    fn theta_residual_extremes_are_bin_edges() {
        let n = 12;
        let omega = 2.0 * PI / n as f64;
        for k in 0..n {
            let hi = decode_theta_bin(k, 1.0, n);
            let lo = decode_theta_bin(k, -1.0, n);
            let want_hi = normalize_angle(k as f64 * omega + omega / 2.0);
            let want_lo = normalize_angle(k as f64 * omega - omega / 2.0);
            assert!(normalize_angle(hi - want_hi).abs() < 1e-12);
            assert!(normalize_angle(lo - want_lo).abs() < 1e-12);
            // the upper edge of bin k is the lower edge of bin k + 1
            let next_lo = decode_theta_bin((k + 1) % n, -1.0, n);
            assert!(normalize_angle(hi - next_lo).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_residual_decode() {
        let cfg = CodecConfig::default();
        let p = Vec3::new(5.0, -3.0, -0.7);
        let mid = cfg.num_center_bins() / 2;
        let t = AnchorFreeTarget {
            bin_x: mid,
            bin_y: mid,
            res_x: -0.5,
            res_y: -0.5,
            res_z: 0.0,
            bin_theta: 0,
            res_theta: 0.0,
            res_h: 0.0,
            res_w: 0.0,
            res_l: 0.0,
        };
        let b = decode_anchor_free(p, &t, "Car", &cfg).unwrap();
        assert!((b.center - p).norm() < 1e-12);
        assert_eq!((b.h, b.w, b.l, b.theta), (1.56, 1.6, 3.9, 0.0));
        // centered residuals put the object at the middle of the bin
        let t = AnchorFreeTarget { res_x: 0.0, res_y: 0.0, ..t };
        let b = decode_anchor_free(p, &t, "Car", &cfg).unwrap();
        assert!((b.center - (p + Vec3::new(0.25, 0.25, 0.0))).norm() < 1e-12);
    }

    #[test]
    fn anchor_residual_examples() {
        let anchor = bx([10.0, 1.0, -1.0], 1.56, 1.6, 3.9, 0.0);
        let t = encode_anchor_residual(&anchor, &anchor);
        assert_eq!(t.residuals(), [0.0; 7]);
        assert_eq!(t.dir, 1);
        let neg = anchor.with_theta(-0.3);
        assert_eq!(encode_anchor_residual(&neg, &neg).dir, 0);

        let longer = BoxParams { l: anchor.l * std::f64::consts::E, ..anchor };
        assert!((encode_anchor_residual(&anchor, &longer).dl - 1.0).abs() < 1e-12);

        let turned = anchor.with_theta(FRAC_PI_2);
        assert!((encode_anchor_residual(&anchor, &turned).dtheta - 1.0).abs() < 1e-12);
    }

    #[test]
    fn direction_bit_resolves_half_turn() {
        // same sine, opposite half-circles: decode must pick the right one
        let anchor = bx([0.0; 3], 1.56, 1.6, 3.9, FRAC_PI_2);
        let gt = bx([0.5, 0.2, 0.0], 1.5, 1.7, 4.1, FRAC_PI_2 + 0.4);
        let t = encode_anchor_residual(&anchor, &gt);
        let back = decode_anchor_residual(&anchor, &t).unwrap();
        assert!(normalize_angle(back.theta - gt.theta).abs() < 1e-9);
        let flipped = AnchorResidualTarget { dir: 1 - t.dir, ..t };
        let back = decode_anchor_residual(&anchor, &flipped).unwrap();
        assert!(normalize_angle(back.theta - gt.theta - PI).abs() < 1e-9);
    }

    #[test]
    fn refine_examples() {
        let prop = bx([20.0, -4.0, -0.9], 1.5, 1.6, 3.9, 2.0);
        assert_eq!(encode_refine(&prop, &prop).residuals(), [0.0; 7]);
        let gt = prop.with_theta(2.1);
        let t = encode_refine(&prop, &gt);
        assert!((t.dtheta - 0.1).abs() < 1e-12);
        assert_eq!(t.dir, 0);
        // a shift along the heading is a pure dx in the canonical frame
        let ahead = prop.translated(prop.heading() * 0.5);
        let t = encode_refine(&prop, &ahead);
        assert!((t.dx - 0.5 / prop.bev_diagonal()).abs() < 1e-12);
        assert!(t.dy.abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        let mut cfg = CodecConfig::default();
        assert!(cfg.validate().is_ok());
        assert_eq!(cfg.num_center_bins(), 12);
        cfg.bin_size = 0.7;
        assert!(cfg.validate().is_err());
        cfg.bin_size = 0.5;
        cfg.num_theta_bins = 1;
        assert!(cfg.validate().is_err());
    }
}
