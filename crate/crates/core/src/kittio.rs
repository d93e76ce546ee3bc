//! KITTI-format I/O (velodyne scans, object labels, calibration), camera to
//! LiDAR box conversion, global data augmentation with ground-truth
//! sampling, and a seeded synthetic scene generator.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Matrix4, Vector4};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalkit::{Difficulty, GroundTruth};
use crate::geom::{normalize_angle, point_in_box, BoxParams, Vec3};
use crate::postproc::bev_iou;

// ---------------------------------------------------------------------------
// Velodyne

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LidarPoint {
    pub pos: Vec3,
    pub intensity: f32,
}

pub const VELODYNE_RECORD_SIZE: usize = 16;

pub fn parse_velodyne(bytes: &[u8]) -> Result<Vec<LidarPoint>> {
    if bytes.len() % VELODYNE_RECORD_SIZE != 0 {
        return Err(Error::Format(format!(
            "velodyne data is {} bytes, not a multiple of {VELODYNE_RECORD_SIZE}",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(VELODYNE_RECORD_SIZE)
        .map(|r| {
            let f = |i: usize| f32::from_le_bytes(r[4 * i..4 * i + 4].try_into().unwrap());
            LidarPoint { pos: Vec3::new(f(0) as f64, f(1) as f64, f(2) as f64), intensity: f(3) }
        })
        .collect())
}

pub fn encode_velodyne(points: &[LidarPoint]) -> Vec<u8> {
    let mut out = Vec::with_capacity(points.len() * VELODYNE_RECORD_SIZE);
    for p in points {
        for v in [p.pos.x as f32, p.pos.y as f32, p.pos.z as f32, p.intensity] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn read_velodyne(path: &Path) -> Result<Vec<LidarPoint>> {
    parse_velodyne(&fs::read(path)?)
}

pub fn write_velodyne(path: &Path, points: &[LidarPoint]) -> Result<()> {
    fs::write(path, encode_velodyne(points))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Labels

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KittiLabel {
    pub class: String,
    pub truncation: f64,
    pub occlusion: u8,
    pub alpha: f64,
    /// Image-plane box `(left, top, right, bottom)` in pixels.
    pub bbox2d: [f64; 4],
    pub h: f64,
    pub w: f64,
    pub l: f64,
    /// Bottom-center of the box in rectified camera coordinates.
    pub location: [f64; 3],
    pub ry: f64,
    pub score: Option<f64>,
}

impl KittiLabel {
    pub fn is_dont_care(&self) -> bool {
        self.class == "DontCare"
    }

    pub fn height_px(&self) -> f64 {
        self.bbox2d[3] - self.bbox2d[1]
    }

    /// Easiest KITTI level whose height, occlusion and truncation limits the
    /// object satisfies.
    pub fn difficulty(&self) -> Option<Difficulty> {
        const LEVELS: [(Difficulty, f64, u8, f64); 3] = [
            (Difficulty::Easy, 40.0, 0, 0.15),
            (Difficulty::Moderate, 25.0, 1, 0.3),
            (Difficulty::Hard, 25.0, 2, 0.5),
        ];
        if self.is_dont_care() {
            return None;
        }
        LEVELS
            .iter()
            .find(|(_, min_h, max_occ, max_trunc)| {
                self.height_px() >= *min_h && self.occlusion <= *max_occ && self.truncation <= *max_trunc
            })
            .map(|l| l.0)
    }

    pub fn to_line(&self) -> String {
        let mut s = format!(
            "{} {:.2} {} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2}",
            self.class,
            self.truncation,
            self.occlusion,
            self.alpha,
            self.bbox2d[0],
            self.bbox2d[1],
            self.bbox2d[2],
            self.bbox2d[3],
            self.h,
            self.w,
            self.l,
            self.location[0],
            self.location[1],
            self.location[2],
            self.ry
        );
        if let Some(score) = self.score {
            s.push_str(&format!(" {score:.4}"));
        }
        s
    }
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse { path: path.to_path_buf(), line, message: message.into() }
}

/// Parses one label line (1-based `line` for error reporting).
pub fn parse_label_line(text: &str, path: &Path, line: usize) -> Result<KittiLabel> {
    let fields: Vec<&str> = text.split_whitespace().collect();
    if fields.len() != 15 && fields.len() != 16 {
        return Err(parse_err(path, line, format!("expected 15 or 16 fields, found {}", fields.len())));
    }
    let num = |i: usize| -> Result<f64> {
        fields[i]
            .parse::<f64>()
            .map_err(|_| parse_err(path, line, format!("field {} ({:?}) is not a number", i + 1, fields[i])))
    };
    let occlusion = fields[2]
        .parse::<i32>()
        .map_err(|_| parse_err(path, line, format!("occlusion {:?} is not an integer", fields[2])))?;
    let label = KittiLabel {
        class: fields[0].to_string(),
        truncation: num(1)?,
        // DontCare rows carry -1
        occlusion: occlusion.clamp(0, 3) as u8,
        alpha: num(3)?,
        bbox2d: [num(4)?, num(5)?, num(6)?, num(7)?],
        h: num(8)?,
        w: num(9)?,
        l: num(10)?,
        location: [num(11)?, num(12)?, num(13)?],
        ry: num(14)?,
        score: if fields.len() == 16 { Some(num(15)?) } else { None },
    };
    if !label.is_dont_care() && !(label.h > 0.0 && label.w > 0.0 && label.l > 0.0) {
        return Err(parse_err(path, line, "object dimensions must be positive"));
    }
    Ok(label)
}

pub fn parse_labels(text: &str, path: &Path) -> Result<Vec<KittiLabel>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_label_line(l, path, i + 1))
        .collect()
}

pub fn read_label(path: &Path) -> Result<Vec<KittiLabel>> {
    parse_labels(&fs::read_to_string(path)?, path)
}

// ---------------------------------------------------------------------------
// Calibration

#[derive(Debug, Clone, PartialEq)]
pub struct Calib {
    pub p2: [f64; 12],
    pub r0_rect: Matrix3<f64>,
    /// Rigid LiDAR-to-camera transform as a homogeneous matrix.
    pub velo_to_cam: Matrix4<f64>,
}

impl Calib {
    pub fn identity() -> Self {
        let mut p2 = [0.0; 12];
        p2[0] = 1.0;
        p2[5] = 1.0;
        p2[10] = 1.0;
        Self { p2, r0_rect: Matrix3::identity(), velo_to_cam: Matrix4::identity() }
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut p2 = None;
        let mut r0 = None;
        let mut tr = None;
        for (i, line) in text.lines().enumerate() {
            let Some((key, rest)) = line.split_once(':') else {
                if line.trim().is_empty() {
                    continue;
                }
                return Err(parse_err(path, i + 1, "expected `name: values`"));
            };
            let vals: Vec<f64> = rest
                .split_whitespace()
                .map(|v| v.parse::<f64>().map_err(|_| parse_err(path, i + 1, format!("bad number {v:?}"))))
                .collect::<Result<_>>()?;
            let want = |n: usize| -> Result<()> {
                if vals.len() != n {
                    return Err(parse_err(path, i + 1, format!("{key} needs {n} values, found {}", vals.len())));
                }
                Ok(())
            };
            match key.trim() {
                "P2" => {
                    want(12)?;
                    p2 = Some(<[f64; 12]>::try_from(vals.as_slice()).unwrap());
                }
                "R0_rect" | "R_rect" => {
                    want(9)?;
                    r0 = Some(Matrix3::from_row_slice(&vals));
                }
                "Tr_velo_to_cam" | "Tr_velo_cam" => {
                    want(12)?;
                    let mut m = Matrix4::identity();
                    for r in 0..3 {
                        for c in 0..4 {
                            m[(r, c)] = vals[r * 4 + c];
                        }
                    }
                    tr = Some(m);
                }
                _ => {}
            }
        }
        let missing = |name: &str| parse_err(path, 0, format!("missing {name}"));
        Ok(Self {
            p2: p2.unwrap_or(Self::identity().p2),
            r0_rect: r0.ok_or_else(|| missing("R0_rect"))?,
            velo_to_cam: tr.ok_or_else(|| missing("Tr_velo_to_cam"))?,
        })
    }

    pub fn to_text(&self) -> String {
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:.12e}")).collect::<Vec<_>>().join(" ");
        let r0: Vec<f64> = (0..9).map(|i| self.r0_rect[(i / 3, i % 3)]).collect();
        let tr: Vec<f64> = (0..12).map(|i| self.velo_to_cam[(i / 4, i % 4)]).collect();
        format!("P2: {}\nR0_rect: {}\nTr_velo_to_cam: {}\n", join(&self.p2), join(&r0), join(&tr))
    }

    fn rect_from_velo(&self) -> Matrix4<f64> {
        let mut r = Matrix4::identity();
        r.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.r0_rect);
        r * self.velo_to_cam
    }

    pub fn lidar_to_rect(&self, p: Vec3) -> Vec3 {
        let q = self.rect_from_velo() * Vector4::new(p.x, p.y, p.z, 1.0);
        Vec3::new(q.x, q.y, q.z)
    }

    pub fn rect_to_lidar(&self, p: Vec3) -> Result<Vec3> {
        let inv = self
            .rect_from_velo()
            .try_inverse()
            .ok_or_else(|| Error::Format("calibration matrix is singular".into()))?;
        let q = inv * Vector4::new(p.x, p.y, p.z, 1.0);
        Ok(Vec3::new(q.x, q.y, q.z))
    }
}

pub fn read_calib(path: &Path) -> Result<Calib> {
    Calib::parse(&fs::read_to_string(path)?, path)
}

/// Converts a camera-frame label to a LiDAR box: the bottom-center is mapped
/// through the calibration and lifted by `h/2`, and the camera yaw `ry`
/// becomes `-(ry + pi/2)`.
pub fn camera_box_to_lidar(label: &KittiLabel, calib: &Calib) -> Result<BoxParams> {
    let [x, y, z] = label.location;
    let bottom = calib.rect_to_lidar(Vec3::new(x, y, z))?;
    let center = bottom + Vec3::new(0.0, 0.0, label.h / 2.0);
    BoxParams::new(center, label.h, label.w, label.l, -(label.ry + FRAC_PI_2))
}

/// Inverse of [`camera_box_to_lidar`]: returns `(location, ry)`.
pub fn lidar_box_to_camera(b: &BoxParams, calib: &Calib) -> ([f64; 3], f64) {
    let bottom = b.center - Vec3::new(0.0, 0.0, b.h / 2.0);
    let r = calib.lidar_to_rect(bottom);
    ([r.x, r.y, r.z], normalize_angle(-b.theta - FRAC_PI_2))
}

/// LiDAR-frame ground truths of all labelled objects (DontCare dropped).
pub fn labels_to_ground_truths(labels: &[KittiLabel], calib: &Calib) -> Result<Vec<GroundTruth>> {
    labels
        .iter()
        .filter(|l| !l.is_dont_care())
        .map(|l| {
            Ok(GroundTruth { bbox: camera_box_to_lidar(l, calib)?, class: l.class.clone(), difficulty: l.difficulty() })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Scenes and augmentation

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub points: Vec<Vec3>,
    pub boxes: Vec<BoxParams>,
    pub classes: Vec<String>,
}

impl Scene {
    pub fn ground_truths(&self) -> Vec<GroundTruth> {
        self.boxes
            .iter()
            .zip(&self.classes)
            .map(|(b, c)| GroundTruth { bbox: *b, class: c.clone(), difficulty: Some(Difficulty::Easy) })
            .collect()
    }
}

/// Mirror over the x-z plane.
pub fn flip_y(scene: &mut Scene) {
    for p in &mut scene.points {
        p.y = -p.y;
    }
    for b in &mut scene.boxes {
        b.center.y = -b.center.y;
        *b = b.with_theta(-b.theta);
    }
}

/// Global rotation about the z axis.
pub fn rotate_z(scene: &mut Scene, angle: f64) {
    for p in &mut scene.points {
        *p = p.rotate_z(angle);
    }
    for b in &mut scene.boxes {
        *b = b.rotated_about_z(angle);
    }
}

/// Global scaling about the origin.
pub fn scale(scene: &mut Scene, factor: f64) -> Result<()> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(Error::InvalidConfig(format!("scale factor {factor} must be positive")));
    }
    for p in &mut scene.points {
        *p = *p * factor;
    }
    for b in &mut scene.boxes {
        *b = BoxParams::new(b.center * factor, b.h * factor, b.w * factor, b.l * factor, b.theta)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtSamplingConfig {
    pub database: PathBuf,
    pub max_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Mirror with probability 0.5.
    pub flip: bool,
    pub scale_range: [f64; 2],
    pub rot_range: [f64; 2],
    pub gt_sampling: Option<GtSamplingConfig>,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip: true,
            scale_range: [0.95, 1.05],
            rot_range: [-PI / 4.0, PI / 4.0],
            gt_sampling: None,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self { flip: false, scale_range: [1.0, 1.0], rot_range: [0.0, 0.0], gt_sampling: None, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        let [s0, s1] = self.scale_range;
        let [r0, r1] = self.rot_range;
        if !(s0 > 0.0 && s0 <= s1) || !(r0 <= r1) || !(s1.is_finite() && r0.is_finite() && r1.is_finite()) {
            return Err(Error::InvalidConfig("augmentation ranges must be ordered (and scales positive)".into()));
        }
        Ok(())
    }
}

fn sample_range<R: Rng>(rng: &mut R, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Applies, in order: ground-truth sampling (when a database is supplied),
/// random flip, rotation and scaling. Part labels are not carried along;
/// recompute them from the returned scene.
pub fn augment<R: Rng>(scene: &Scene, cfg: &AugmentConfig, db: Option<&GtDatabase>, rng: &mut R) -> Result<Scene> {
    cfg.validate()?;
    let mut out = scene.clone();
    if let (Some(db), Some(gs)) = (db, &cfg.gt_sampling) {
        paste_samples(&mut out, db, gs.max_samples, rng);
    }
    if cfg.flip && rng.random_bool(0.5) {
        flip_y(&mut out);
    }
    let angle = sample_range(rng, cfg.rot_range);
    if angle != 0.0 {
        rotate_z(&mut out, angle);
    }
    let s = sample_range(rng, cfg.scale_range);
    if s != 1.0 {
        scale(&mut out, s)?;
    }
    Ok(out)
}

/// Pastes up to `max_samples` random database objects with their points.
/// A sample whose box overlaps (BEV IoU > 0) an existing or already pasted
/// box is skipped. Returns the number pasted.
pub fn paste_samples<R: Rng>(scene: &mut Scene, db: &GtDatabase, max_samples: usize, rng: &mut R) -> usize {
    if db.entries.is_empty() {
        return 0;
    }
    let mut pasted = 0;
    for _ in 0..max_samples {
        let e = db.entries.choose(rng).unwrap();
        if scene.boxes.iter().any(|b| bev_iou(b, &e.bbox) > 0.0) {
            continue;
        }
        scene.points.extend_from_slice(&e.points);
        scene.boxes.push(e.bbox);
        scene.classes.push(e.class.clone());
        pasted += 1;
    }
    pasted
}

#[derive(Debug, Clone, PartialEq)]
pub struct GtEntry {
    pub class: String,
    pub bbox: BoxParams,
    pub points: Vec<Vec3>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct IndexEntry {
    class: String,
    #[serde(rename = "box")]
    bbox: BoxParams,
    file: String,
    num_points: usize,
}

/// Objects with their interior points, stored as a directory holding
/// `index.json` and one velodyne-layout `.bin` file per object.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GtDatabase {
    pub entries: Vec<GtEntry>,
}

impl GtDatabase {
    pub fn add_scene(&mut self, scene: &Scene) {
        for (b, c) in scene.boxes.iter().zip(&scene.classes) {
            let points = scene.points.iter().copied().filter(|p| point_in_box(*p, b)).collect();
            self.entries.push(GtEntry { class: c.clone(), bbox: *b, points });
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut index = Vec::with_capacity(self.entries.len());
        for (i, e) in self.entries.iter().enumerate() {
            let file = format!("{i:06}_{}.bin", e.class);
            let pts: Vec<LidarPoint> = e.points.iter().map(|&pos| LidarPoint { pos, intensity: 0.0 }).collect();
            write_velodyne(&dir.join(&file), &pts)?;
            index.push(IndexEntry { class: e.class.clone(), bbox: e.bbox, file, num_points: pts.len() });
        }
        fs::write(dir.join("index.json"), serde_json::to_vec_pretty(&index)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let index: Vec<IndexEntry> = serde_json::from_slice(&fs::read(dir.join("index.json"))?)?;
        let entries = index
            .into_iter()
            .map(|e| {
                let points: Vec<Vec3> = read_velodyne(&dir.join(&e.file))?.into_iter().map(|p| p.pos).collect();
                if points.len() != e.num_points {
                    return Err(Error::Format(format!("{}: expected {} points, found {}", e.file, e.num_points, points.len())));
                }
                Ok(GtEntry { class: e.class, bbox: e.bbox, points })
            })
            .collect::<Result<_>>()?;
        Ok(Self { entries })
    }
}

// ---------------------------------------------------------------------------
// Synthetic scenes

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthClass {
    pub name: String,
    pub h: f64,
    pub w: f64,
    pub l: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub num_objects: usize,
    pub points_per_object: usize,
    pub clutter_points: usize,
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    /// Height of the ground plane; objects rest on it.
    pub ground_z: f64,
    /// Fraction of object points placed on the box surface.
    pub surface_fraction: f64,
    /// Relative size jitter around the class size.
    pub size_jitter: f64,
    pub classes: Vec<SynthClass>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        let c = |name: &str, h, w, l| SynthClass { name: name.into(), h, w, l };
        Self {
            num_objects: 8,
            points_per_object: 300,
            clutter_points: 4000,
            x_range: [2.0, 68.0],
            y_range: [-38.0, 38.0],
            ground_z: -1.78,
            surface_fraction: 0.7,
            size_jitter: 0.1,
            classes: vec![c("Car", 1.56, 1.6, 3.9), c("Pedestrian", 1.73, 0.6, 0.8), c("Cyclist", 1.73, 0.6, 1.76)],
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let ok_range = |r: [f64; 2]| r[0] < r[1];
        if !ok_range(self.x_range) || !ok_range(self.y_range) {
            return Err(Error::InvalidConfig("synthetic ranges must be ordered".into()));
        }
        if self.num_objects > 0 && self.classes.is_empty() {
            return Err(Error::InvalidConfig("objects requested but no classes given".into()));
        }
        if !(0.0..=1.0).contains(&self.surface_fraction) || !(0.0..1.0).contains(&self.size_jitter) {
            return Err(Error::InvalidConfig("surface_fraction and size_jitter out of range".into()));
        }
        Ok(())
    }
}

/// Points are kept this fraction inside each face so they stay inside.
const SURFACE_INSET: f64 = 0.98;

fn object_point<R: Rng>(rng: &mut R, b: &BoxParams, surface: bool) -> Vec3 {
    let mut u = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
    if surface {
        // one of the four sides or the top
        let face = rng.random_range(0..5usize);
        match face {
            0..=3 => u[face / 2] = if face % 2 == 0 { 1.0 } else { -1.0 },
            _ => u[2] = 1.0,
        }
    }
    let local = Vec3::new(
        u[0] * SURFACE_INSET * b.l / 2.0,
        u[1] * SURFACE_INSET * b.w / 2.0,
        u[2] * SURFACE_INSET * b.h / 2.0,
    );
    b.frame().to_world(local)
}

/// Deterministic scene: non-overlapping objects resting on the ground, each
/// filled with surface-biased interior points, plus ground clutter outside
/// every box. Placement gives up on an object after 100 rejected tries.
pub fn synth_scene(spec: &SynthSpec, seed: u64) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scene = Scene::default();
    for _ in 0..spec.num_objects {
        for _attempt in 0..100 {
            let class = spec.classes.choose(&mut rng).unwrap();
            let mut jit = || 1.0 + rng.random_range(-spec.size_jitter..=spec.size_jitter);
            let (h, w, l) = (class.h * jit(), class.w * jit(), class.l * jit());
            let x = rng.random_range(spec.x_range[0]..spec.x_range[1]);
            let y = rng.random_range(spec.y_range[0]..spec.y_range[1]);
            let theta = rng.random_range(-PI..PI);
            let b = BoxParams::new(Vec3::new(x, y, spec.ground_z + h / 2.0), h, w, l, theta)?;
            if scene.boxes.iter().any(|o| bev_iou(o, &b) > 0.0) {
                continue;
            }
            scene.boxes.push(b);
            scene.classes.push(class.name.clone());
            break;
        }
    }
    for b in &scene.boxes {
        for _ in 0..spec.points_per_object {
            let surface = rng.random_bool(spec.surface_fraction);
            scene.points.push(object_point(&mut rng, b, surface));
        }
    }
    let mut placed = 0;
    while placed < spec.clutter_points {
        let p = Vec3::new(
            rng.random_range(spec.x_range[0]..spec.x_range[1]),
            rng.random_range(spec.y_range[0]..spec.y_range[1]),
            spec.ground_z - rng.random_range(0.0..0.2),
        );
        if scene.boxes.iter().any(|b| point_in_box(p, b)) {
            continue;
        }
        scene.points.push(p);
        placed += 1;
    }
    Ok(scene)
}
