//! Oriented 3D boxes, points and the rigid transforms between the LiDAR frame
//! and a box's canonical frame.

use std::f64::consts::PI;
use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point or displacement in meters, LiDAR frame (x forward, y left, z up).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 {
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn dot(self, other: Vec3) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    /// Rotation about the vertical axis by `yaw` radians (counter-clockwise
    /// seen from above).
    pub fn rotate_z(self, yaw: f64) -> Vec3 {
        let (s, c) = yaw.sin_cos();
        Vec3::new(c * self.x - s * self.y, s * self.x + c * self.y, self.z)
    }
}

impl From<[f64; 3]> for Vec3 {
    fn from([x, y, z]: [f64; 3]) -> Self {
        Self { x, y, z }
    }
}

impl From<Vec3> for [f64; 3] {
    fn from(v: Vec3) -> Self {
        v.to_array()
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Vec3 {
    fn add_assign(&mut self, o: Vec3) {
        self.x += o.x;
        self.y += o.y;
        self.z += o.z;
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, k: f64) -> Vec3 {
        Vec3::new(self.x * k, self.y * k, self.z * k)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

/// Wraps an angle into `[-pi, pi)`.
pub fn normalize_angle(theta: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let mut t = theta - two_pi * ((theta + PI) / two_pi).floor();
    if t >= PI {
        t -= two_pi;
    }
    if t < -PI {
        t += two_pi;
    }
    t
}

/// Oriented 3D box: volumetric center, size and bird's-eye-view yaw.
///
/// At `theta = 0` the length `l` spans the x axis, the width `w` the y axis
/// and the height `h` the z axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBox")]
pub struct BoxParams {
    pub center: Vec3,
    pub h: f64,
    pub w: f64,
    pub l: f64,
    pub theta: f64,
}

#[derive(Deserialize)]
struct RawBox {
    center: Vec3,
    h: f64,
    w: f64,
    l: f64,
    theta: f64,
}

impl TryFrom<RawBox> for BoxParams {
    type Error = Error;
    fn try_from(r: RawBox) -> Result<Self> {
        BoxParams::new(r.center, r.h, r.w, r.l, r.theta)
    }
}

impl BoxParams {
    /// Validates the size and normalizes `theta` into `[-pi, pi)`.
    pub fn new(center: Vec3, h: f64, w: f64, l: f64, theta: f64) -> Result<Self> {
        if !center.is_finite() || !theta.is_finite() {
            return Err(Error::InvalidBox(format!(
                "non-finite center {center:?} or yaw {theta}"
            )));
        }
        if !(h > 0.0 && w > 0.0 && l > 0.0) || !(h.is_finite() && w.is_finite() && l.is_finite())
        {
            return Err(Error::InvalidBox(format!(
                "dimensions must be positive, got h={h} w={w} l={l}"
            )));
        }
        Ok(Self {
            center,
            h,
            w,
            l,
            theta: normalize_angle(theta),
        })
    }

    pub fn volume(&self) -> f64 {
        self.h * self.w * self.l
    }

    /// Unit vector along the box heading (the length axis).
    pub fn heading(&self) -> Vec3 {
        let (s, c) = self.theta.sin_cos();
        Vec3::new(c, s, 0.0)
    }

    /// Length of the bird's-eye-view diagonal, `sqrt(l^2 + w^2)`.
    pub fn bev_diagonal(&self) -> f64 {
        self.l.hypot(self.w)
    }

    pub fn frame(&self) -> CanonicalFrame {
        CanonicalFrame {
            origin: self.center,
            yaw: self.theta,
        }
    }

    pub fn with_theta(mut self, theta: f64) -> Self {
        self.theta = normalize_angle(theta);
        self
    }

    /// Rotates the whole box about the global z axis through the origin.
    pub fn rotated_about_z(&self, angle: f64) -> Self {
        Self {
            center: self.center.rotate_z(angle),
            theta: normalize_angle(self.theta + angle),
            ..*self
        }
    }

    pub fn translated(&self, offset: Vec3) -> Self {
        Self {
            center: self.center + offset,
            ..*self
        }
    }

    /// Bird's-eye-view corners, counter-clockwise, starting at front-left.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.theta.sin_cos();
        let (hl, hw) = (self.l / 2.0, self.w / 2.0);
        let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
        local.map(|[lx, ly]| {
            [
                self.center.x + c * lx - s * ly,
                self.center.y + s * lx + c * ly,
            ]
        })
    }

    pub fn z_range(&self) -> (f64, f64) {
        (self.center.z - self.h / 2.0, self.center.z + self.h / 2.0)
    }
}

/// Sign pattern of each box corner in local `(length, width, height)` axes.
///
/// Corners 0..4 are the bottom face, 4..8 the top face; within each face the
/// order is front-left, rear-left, rear-right, front-right.
pub const CORNER_SIGNS: [[f64; 3]; 8] = [
    [1.0, 1.0, -1.0],
    [-1.0, 1.0, -1.0],
    [-1.0, -1.0, -1.0],
    [1.0, -1.0, -1.0],
    [1.0, 1.0, 1.0],
    [-1.0, 1.0, 1.0],
    [-1.0, -1.0, 1.0],
    [1.0, -1.0, 1.0],
];

/// The 8 corners of `b` in the order given by [`CORNER_SIGNS`].
pub fn box_corners(b: &BoxParams) -> [Vec3; 8] {
    let frame = b.frame();
    CORNER_SIGNS.map(|[sl, sw, sh]| {
        frame.to_world(Vec3::new(sl * b.l / 2.0, sw * b.w / 2.0, sh * b.h / 2.0))
    })
}

/// Closed containment test in the box's canonical frame.
pub fn point_in_box(p: Vec3, b: &BoxParams) -> bool {
    let q = b.frame().to_local(p);
    q.x.abs() <= b.l / 2.0 && q.y.abs() <= b.w / 2.0 && q.z.abs() <= b.h / 2.0
}

/// Rigid transform made of a yaw rotation and a translation.
///
/// Local coordinates have their origin at `origin`, +x along the yaw heading
/// and z unchanged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CanonicalFrame {
    pub origin: Vec3,
    pub yaw: f64,
}

impl CanonicalFrame {
    pub fn identity() -> Self {
        Self {
            origin: Vec3::ZERO,
            yaw: 0.0,
        }
    }

    pub fn to_local(&self, p: Vec3) -> Vec3 {
        (p - self.origin).rotate_z(-self.yaw)
    }

    pub fn to_world(&self, q: Vec3) -> Vec3 {
        q.rotate_z(self.yaw) + self.origin
    }

    /// Expresses a world-frame box in this frame.
    pub fn box_to_local(&self, b: &BoxParams) -> BoxParams {
        BoxParams {
            center: self.to_local(b.center),
            theta: normalize_angle(b.theta - self.yaw),
            ..*b
        }
    }

    pub fn box_to_world(&self, b: &BoxParams) -> BoxParams {
        BoxParams {
            center: self.to_world(b.center),
            theta: normalize_angle(b.theta + self.yaw),
            ..*b
        }
    }
}

/// Maps points into the canonical frame of `b`: origin at the box center,
/// X' along the heading, Z' vertical.
pub fn to_canonical(points: &[Vec3], b: &BoxParams) -> Vec<Vec3> {
    let frame = b.frame();
    points.iter().map(|&p| frame.to_local(p)).collect()
}

/// Exact inverse of [`to_canonical`].
pub fn from_canonical(points: &[Vec3], b: &BoxParams) -> Vec<Vec3> {
    let frame = b.frame();
    points.iter().map(|&q| frame.to_world(q)).collect()
}
