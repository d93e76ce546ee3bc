//! Detection losses with analytic gradients.
//!
//! Everything here is a pure function of scalars or small fixed-size
//! arrays. Gradients are returned alongside values so they can be checked
//! by finite differences.

use serde::{Deserialize, Serialize};

use crate::codec::{AnchorFreeTarget, AnchorResidualTarget};
use crate::error::{Error, Result};
use crate::geom::{box_corners, BoxParams, Vec3, CORNER_SIGNS};

/// Probabilities are clamped to `[P_EPS, 1 - P_EPS]` before taking logs.
pub const P_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Focal weight of the foreground class; background uses `1 - alpha`.
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    /// Weight of the stage-one box loss.
    pub box_weight: f64,
    /// Weight of the direction classification term.
    pub dir_weight: f64,
    /// Transition point of smooth-L1.
    pub smooth_l1_beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { focal_alpha: 0.25, focal_gamma: 2.0, box_weight: 2.0, dir_weight: 0.1, smooth_l1_beta: 1.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [self.focal_alpha, self.focal_gamma, self.box_weight, self.dir_weight];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || self.focal_alpha > 1.0 {
            return Err(Error::InvalidConfig("loss weights must be finite and non-negative".into()));
        }
        if !(self.smooth_l1_beta > 0.0) {
            return Err(Error::InvalidConfig("smooth-L1 beta must be positive".into()));
        }
        Ok(())
    }
}

fn check_prob(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::ProbabilityOutOfRange(p));
    }
    Ok(p.clamp(P_EPS, 1.0 - P_EPS))
}

/// Focal loss `-a_t (1 - p_t)^g ln p_t` and its derivative with respect to `p`.
pub fn focal_loss(p: f64, is_fg: bool, cfg: &LossConfig) -> Result<(f64, f64)> {
    let p = check_prob(p)?;
    let (pt, at, sign) = if is_fg { (p, cfg.focal_alpha, 1.0) } else { (1.0 - p, 1.0 - cfg.focal_alpha, -1.0) };
    let g = cfg.focal_gamma;
    let q = 1.0 - pt;
    let loss = -at * q.powf(g) * pt.ln();
    let dpt = if g == 0.0 {
        -at / pt
    } else {
        at * (g * q.powf(g - 1.0) * pt.ln() - q.powf(g) / pt)
    };
    Ok((loss, sign * dpt))
}

/// Binary cross entropy of probability `p` against soft target `t`, with
/// derivative in `p`.
pub fn bce(p: f64, t: f64) -> Result<(f64, f64)> {
    let p = check_prob(p)?;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::ProbabilityOutOfRange(t));
    }
    let loss = -(t * p.ln() + (1.0 - t) * (1.0 - p).ln());
    Ok((loss, (p - t) / (p * (1.0 - p))))
}

/// Binary cross entropy on a logit, computed stably.
pub fn bce_with_logit(z: f64, t: f64) -> (f64, f64) {
    let softplus = z.max(0.0) + (-z.abs()).exp().ln_1p();
    let sig = 1.0 / (1.0 + (-z).exp());
    (softplus - t * z, sig - t)
}

/// Sum of the three per-axis BCE terms of the part-location loss.
pub fn part_bce_loss(pred: [f64; 3], target: [f64; 3]) -> Result<(f64, [f64; 3])> {
    let mut loss = 0.0;
    let mut grad = [0.0; 3];
    for u in 0..3 {
        let (l, g) = bce(pred[u], target[u])?;
        loss += l;
        grad[u] = g;
    }
    Ok((loss, grad))
}

pub fn smooth_l1(x: f64, beta: f64) -> f64 {
    let a = x.abs();
    if a < beta {
        0.5 * x * x / beta
    } else {
        a - 0.5 * beta
    }
}

pub fn smooth_l1_grad(x: f64, beta: f64) -> f64 {
    if x.abs() < beta {
        x / beta
    } else {
        x.signum()
    }
}

/// Softmax cross entropy and its gradient with respect to the logits.
pub fn cross_entropy(logits: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    if target >= logits.len() {
        return Err(Error::DimensionMismatch(format!(
            "class {target} out of range for {} logits",
            logits.len()
        )));
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|z| (z - m).exp()).sum();
    let lse = m + sum.ln();
    let mut grad: Vec<f64> = logits.iter().map(|z| (z - lse).exp()).collect();
    grad[target] -= 1.0;
    Ok((lse - logits[target], grad))
}

/// Network output of the bin-based head at one foreground point: bin
/// logits per binned quantity and the residual regressed for the target
/// bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorFreePrediction {
    pub x_logits: Vec<f64>,
    pub y_logits: Vec<f64>,
    pub theta_logits: Vec<f64>,
    pub res_x: f64,
    pub res_y: f64,
    pub res_z: f64,
    pub res_theta: f64,
    pub res_h: f64,
    pub res_w: f64,
    pub res_l: f64,
}

impl AnchorFreePrediction {
    fn residuals(&self) -> [f64; 7] {
        [self.res_x, self.res_y, self.res_theta, self.res_z, self.res_h, self.res_w, self.res_l]
    }

    fn set_residuals(&mut self, r: [f64; 7]) {
        [self.res_x, self.res_y, self.res_theta, self.res_z, self.res_h, self.res_w, self.res_l] = r;
    }
}

fn target_residuals(t: &AnchorFreeTarget) -> [f64; 7] {
    [t.res_x, t.res_y, t.res_theta, t.res_z, t.res_h, t.res_w, t.res_l]
}

/// Bin classification plus residual regression: cross entropy over the x,
/// y and orientation bins and smooth-L1 over all residuals. The gradient
/// has the same shape as the prediction.
pub fn anchor_free_box_loss(
    pred: &AnchorFreePrediction,
    gt: &AnchorFreeTarget,
    cfg: &LossConfig,
) -> Result<(f64, AnchorFreePrediction)> {
    let (lx, gx) = cross_entropy(&pred.x_logits, gt.bin_x)?;
    let (ly, gy) = cross_entropy(&pred.y_logits, gt.bin_y)?;
    let (lt, gt_logits) = cross_entropy(&pred.theta_logits, gt.bin_theta)?;
    let mut loss = lx + ly + lt;
    let mut rgrad = [0.0; 7];
    for (i, (p, t)) in pred.residuals().iter().zip(target_residuals(gt)).enumerate() {
        loss += smooth_l1(p - t, cfg.smooth_l1_beta);
        rgrad[i] = smooth_l1_grad(p - t, cfg.smooth_l1_beta);
    }
    let mut grad = AnchorFreePrediction {
        x_logits: gx,
        y_logits: gy,
        theta_logits: gt_logits,
        res_x: 0.0,
        res_y: 0.0,
        res_z: 0.0,
        res_theta: 0.0,
        res_h: 0.0,
        res_w: 0.0,
        res_l: 0.0,
    };
    grad.set_residuals(rgrad);
    Ok((loss, grad))
}

/// Residual-head output at one anchor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorPrediction {
    /// `(dx, dy, dz, dl, dh, dw, dtheta)`
    pub residuals: [f64; 7],
    pub dir_logit: f64,
}

/// Smooth-L1 over the seven residuals plus `dir_weight` times the
/// direction BCE.
pub fn anchor_box_loss(pred: &AnchorPrediction, gt: &AnchorResidualTarget, cfg: &LossConfig) -> (f64, AnchorPrediction) {
    let mut loss = 0.0;
    let mut grad = AnchorPrediction { residuals: [0.0; 7], dir_logit: 0.0 };
    for (i, (p, t)) in pred.residuals.iter().zip(gt.residuals()).enumerate() {
        loss += smooth_l1(p - t, cfg.smooth_l1_beta);
        grad.residuals[i] = smooth_l1_grad(p - t, cfg.smooth_l1_beta);
    }
    let (ld, gd) = bce_with_logit(pred.dir_logit, gt.dir as f64);
    loss += cfg.dir_weight * ld;
    grad.dir_logit = cfg.dir_weight * gd;
    (loss, grad)
}

fn corner_term(pred: &BoxParams, gt_corners: &[Vec3; 8], beta: f64) -> (f64, [f64; 7]) {
    let pc = box_corners(pred);
    let (s, c) = pred.theta.sin_cos();
    let mut loss = 0.0;
    let mut grad = [0.0; 7];
    for (i, sign) in CORNER_SIGNS.iter().enumerate() {
        let diff = pc[i] - gt_corners[i];
        let d = diff.norm();
        loss += smooth_l1(d, beta);
        if d == 0.0 {
            continue;
        }
        let u = diff * (smooth_l1_grad(d, beta) / d);
        let (ax, ay) = (sign[0] * pred.l / 2.0, sign[1] * pred.w / 2.0);
        // corner = center + R(theta) (ax, ay) + (0, 0, sz h / 2)
        grad[0] += u.x;
        grad[1] += u.y;
        grad[2] += u.z;
        grad[3] += u.z * sign[2] / 2.0;
        grad[4] += (u.x * -s + u.y * c) * sign[1] / 2.0;
        grad[5] += (u.x * c + u.y * s) * sign[0] / 2.0;
        grad[6] += u.x * (-s * ax - c * ay) + u.y * (c * ax - s * ay);
    }
    let scale = 1.0 / 8.0;
    (loss * scale, grad.map(|g| g * scale))
}

/// Mean smooth-L1 corner distance, minimised over the ground truth and the
/// ground truth turned by π. The gradient is with respect to
/// `(x, y, z, h, w, l, theta)` of `pred`.
pub fn corner_loss(pred: &BoxParams, gt: &BoxParams, cfg: &LossConfig) -> (f64, [f64; 7]) {
    let a = corner_term(pred, &box_corners(gt), cfg.smooth_l1_beta);
    let flipped = gt.with_theta(gt.theta + std::f64::consts::PI);
    let b = corner_term(pred, &box_corners(&flipped), cfg.smooth_l1_beta);
    if b.0 < a.0 {
        b
    } else {
        a
    }
}

/// Raw (un-normalized) loss sums and positive counts of both stages.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageComponents {
    pub seg: f64,
    pub part: f64,
    pub boxes: f64,
    /// Foreground points.
    pub n_pos: usize,
    /// Positive anchors or foreground points used for box regression.
    pub m_pos: usize,
    pub score: f64,
    pub refine: f64,
    /// Positive proposals.
    pub t_pos: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageLosses {
    pub aware: f64,
    pub aggregation: f64,
    pub total: f64,
}

/// Combines the components with equal stage weights. Positive counts of
/// zero are treated as one.
pub fn stage_losses(c: &StageComponents, cfg: &LossConfig) -> StageLosses {
    let norm = |n: usize| n.max(1) as f64;
    let aware = c.seg + c.part / norm(c.n_pos) + cfg.box_weight * c.boxes / norm(c.m_pos);
    let aggregation = c.score + c.refine / norm(c.t_pos);
    StageLosses { aware, aggregation, total: aware + aggregation }
}

/// Soft proposal-quality label from 3D IoU.
pub fn quality_target(iou3d: f64) -> f64 {
    if iou3d > 0.75 {
        1.0
    } else if iou3d < 0.25 {
        0.0
    } else {
        2.0 * iou3d - 0.5
    }
}
