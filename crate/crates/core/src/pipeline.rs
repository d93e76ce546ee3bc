//! End-to-end run of the whole non-learned pipeline over synthetic scenes.
//!
//! Network heads are stood in for by seeded perturbations of the encoded
//! ground-truth targets, so every stage (voxelization, labels, both codecs,
//! anchors, backbone, pooling, NMS and evaluation) runs on realistic shapes
//! without trained weights. The report is a pure function of the config.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anchorgen::{assign_anchors, bev_dims, generate_anchors, AnchorClassSpec};
use crate::codec::{
    decode_anchor_free, decode_anchor_residual, decode_refine, encode_anchor_free, encode_anchor_residual,
    encode_refine, CodecConfig,
};
use crate::error::Result;
use crate::evalkit::{
    average_precision_11, fp_breakdown, mean_part_abs_error, pearson_correlation, proposal_recall, ApResult,
    Detection, EvalFrame, FpBreakdown, PartError,
};
use crate::geom::{BoxParams, Vec3};
use crate::kittio::{synth_scene, SynthSpec};
use crate::losses::quality_target;
use crate::partlabel::compute_part_labels;
use crate::postproc::{iou3d, rotated_nms, select_proposals, IouMetric, ScoredBox};
use crate::roipool::{fuse_part_semantic, roi_aware_pool_batch, sparse_downpool, CellLinear, PoolMode, PoolSpec};
use crate::sparseconv::{backbone_forward, BackboneConfig, BackboneWeights};
use crate::voxel::{voxelize, VoxelGridSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SmokeConfig {
    pub num_scenes: usize,
    pub seed: u64,
    pub synth: SynthSpec,
    pub grid: VoxelGridSpec,
    pub codec: CodecConfig,
    pub backbone: BackboneConfig,
    pub pool: PoolSpec,
    pub num_proposals: usize,
    pub proposal_nms: f64,
    pub final_nms: f64,
    /// Every n-th foreground point emits an anchor-free proposal.
    pub point_stride: usize,
}

impl Default for SmokeConfig {
    fn default() -> Self {
        Self {
            num_scenes: 100,
            seed: 0,
            synth: SynthSpec { clutter_points: 3000, ..Default::default() },
            grid: VoxelGridSpec::new(
                Vec3::new(0.0, -40.0, -3.0),
                Vec3::new(70.4, 40.0, 1.0),
                Vec3::new(0.2, 0.2, 0.25),
            )
            .expect("static grid"),
            codec: CodecConfig::default(),
            backbone: BackboneConfig {
                in_channels: 3,
                encoder: vec![8, 16, 16, 16],
                decoder: vec![16, 16, 16, 8],
                bev_channels: 8,
                subm_per_level: 1,
            },
            pool: PoolSpec::default(),
            num_proposals: 100,
            proposal_nms: 0.85,
            final_nms: 0.01,
            point_stride: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSummary {
    pub num_points: usize,
    pub num_foreground: usize,
    pub num_voxels: usize,
    pub num_boxes: usize,
    pub num_positive_anchors: usize,
    pub num_proposals: usize,
    pub num_detections: usize,
    pub pooled_nonempty: usize,
    /// FNV-1a over the bit patterns of every intermediate tensor.
    pub digest: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmokeReport {
    pub scenes: Vec<SceneSummary>,
    pub recall_at_100: f64,
    pub ap_car: Vec<ApResult>,
    pub fp: FpBreakdown,
    pub part_error: PartError,
    /// Correlation of per-detection part error with `1 - IoU`.
    pub pearson: Option<f64>,
    pub digest: u64,
}

struct Fnv(u64);

impl Fnv {
    fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }

    fn bytes(&mut self, b: &[u8]) {
        for &x in b {
            self.0 ^= x as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    fn f32s(&mut self, v: &[f32]) {
        for x in v {
            self.bytes(&x.to_bits().to_le_bytes());
        }
    }

    fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.bytes(&x.to_bits().to_le_bytes());
        }
    }

    fn boxed(&mut self, b: &BoxParams) {
        self.f64s(&[b.center.x, b.center.y, b.center.z, b.h, b.w, b.l, b.theta]);
    }
}

fn noisy<R: Rng>(rng: &mut R, v: f64, sigma: f64) -> f64 {
    v + rng.random_range(-sigma..sigma)
}

struct SceneResult {
    summary: SceneSummary,
    proposal_frame: EvalFrame,
    detection_frame: EvalFrame,
    part_errors: Vec<f64>,
    box_errors: Vec<f64>,
}

fn run_scene(cfg: &SmokeConfig, index: usize, weights: &BackboneWeights, lift: &CellLinear) -> Result<SceneResult> {
    let seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add(index as u64);
    let scene = synth_scene(&cfg.synth, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut h = Fnv::new();

    let voxels = voxelize(&scene.points, &cfg.grid)?;
    h.f32s(&voxels.tensor.features);
    let labels = compute_part_labels(&scene.points, &scene.boxes)?;

    // stage one, anchor-free: proposals from perturbed bin/residual targets
    let mut candidates: Vec<ScoredBox> = Vec::new();
    let fg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].foreground).collect();
    for &i in fg.iter().step_by(cfg.point_stride.max(1)) {
        let g = labels[i].box_index.unwrap();
        let mut t = encode_anchor_free(scene.points[i], &scene.boxes[g], &scene.classes[g], &cfg.codec)?;
        t.res_x = noisy(&mut rng, t.res_x, 0.3);
        t.res_y = noisy(&mut rng, t.res_y, 0.3);
        t.res_theta = noisy(&mut rng, t.res_theta, 0.2);
        let b = decode_anchor_free(scene.points[i], &t, &scene.classes[g], &cfg.codec)?;
        candidates.push(ScoredBox { bbox: b, score: rng.random_range(0.3..1.0) });
    }

    // stage one, anchor-based: perturbed residual targets of positive anchors
    let bev = bev_dims(&cfg.grid, cfg.backbone.downsample() * 2);
    let mut num_pos = 0;
    for spec in AnchorClassSpec::kitti_classes() {
        let gts: Vec<BoxParams> = scene
            .boxes
            .iter()
            .zip(&scene.classes)
            .filter(|(_, c)| **c == spec.name)
            .map(|(b, _)| *b)
            .collect();
        if gts.is_empty() {
            continue;
        }
        let anchors = generate_anchors(bev, &spec, &cfg.grid)?;
        let assignment = assign_anchors(&anchors, &gts, &spec)?;
        for (a, g) in assignment.positives() {
            num_pos += 1;
            let mut t = encode_anchor_residual(&anchors[a], &gts[g]);
            t.dx = noisy(&mut rng, t.dx, 0.05);
            t.dy = noisy(&mut rng, t.dy, 0.05);
            let b = decode_anchor_residual(&anchors[a], &t)?;
            candidates.push(ScoredBox { bbox: b, score: rng.random_range(0.3..1.0) });
        }
    }
    for c in &candidates {
        h.boxed(&c.bbox);
    }
    let keep = select_proposals(&candidates, cfg.num_proposals, cfg.proposal_nms, IouMetric::Bev);
    let proposals: Vec<ScoredBox> = keep.iter().map(|&i| candidates[i]).collect();

    // backbone on the voxel features
    let out = backbone_forward(&voxels.tensor, &cfg.backbone, weights)?;
    h.f32s(&out.point_features.features);
    h.f32s(&out.bev.data);

    // per-point features: predicted parts + segmentation score, and the
    // decoder feature of the point's voxel
    let c_sem = out.point_features.channels;
    let mut part_feats = Vec::with_capacity(scene.points.len() * 4);
    let mut sem_feats = Vec::with_capacity(scene.points.len() * c_sem);
    let mut pred_parts = Vec::new();
    let mut gt_parts = Vec::new();
    for (p, l) in scene.points.iter().zip(&labels) {
        let part = if l.foreground { l.part.map(|u| noisy(&mut rng, u, 0.05).clamp(0.0, 1.0)) } else { [0.5; 3] };
        if l.foreground {
            pred_parts.push(part);
            gt_parts.push(l.part);
        }
        part_feats.extend(part.iter().map(|&u| u as f32));
        part_feats.push(if l.foreground { 0.9 } else { 0.1 });
        match cfg.grid.voxel_index(*p).and_then(|c| out.point_features.find(c)) {
            Some(i) => sem_feats.extend_from_slice(out.point_features.feature(i)),
            None => sem_feats.extend(std::iter::repeat_n(0.0, c_sem)),
        }
    }

    let boxes: Vec<BoxParams> = proposals.iter().map(|p| p.bbox).collect();
    let part_grids = roi_aware_pool_batch(&scene.points, &part_feats, 4, &boxes, cfg.pool, PoolMode::Avg)?;
    let sem_grids = roi_aware_pool_batch(&scene.points, &sem_feats, c_sem, &boxes, cfg.pool, PoolMode::Max)?;
    let mut pooled_nonempty = 0;
    for (pg, sg) in part_grids.iter().zip(&sem_grids) {
        let fused = fuse_part_semantic(pg, sg, lift)?;
        let down = sparse_downpool(&fused, 2)?;
        pooled_nonempty += down.num_nonempty();
        h.f32s(&down.values);
    }

    // stage two: refine towards the best-overlapping gt, score by quality
    let mut refined = Vec::with_capacity(proposals.len());
    for p in &proposals {
        let best = scene
            .boxes
            .iter()
            .enumerate()
            .map(|(g, b)| (g, iou3d(&p.bbox, b)))
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
        let (bbox, score) = match best {
            Some((g, iou)) if iou > 0.0 => {
                let mut t = encode_refine(&p.bbox, &scene.boxes[g]);
                let shrink = rng.random_range(0.0..0.9);
                t.dx *= shrink;
                t.dy *= shrink;
                t.dtheta *= shrink;
                let b = decode_refine(&p.bbox, &t)?;
                let q = quality_target(iou3d(&b, &scene.boxes[g]));
                (b, (0.8 * q + 0.2 * p.score).clamp(0.0, 1.0))
            }
            _ => (p.bbox, 0.2 * p.score),
        };
        refined.push(ScoredBox { bbox, score });
    }
    let final_keep = rotated_nms(&refined, cfg.final_nms, IouMetric::Bev);

    let class_of = |b: &BoxParams| -> String {
        scene
            .boxes
            .iter()
            .zip(&scene.classes)
            .map(|(g, c)| (iou3d(b, g), c))
            .filter(|(iou, _)| *iou > 0.0)
            .max_by(|a, b| a.0.total_cmp(&b.0))
            .map_or("Car".to_string(), |(_, c)| c.clone())
    };
    let detections: Vec<Detection> = final_keep
        .iter()
        .map(|&i| Detection { bbox: refined[i].bbox, score: refined[i].score, class: class_of(&refined[i].bbox) })
        .collect();
    for d in &detections {
        h.boxed(&d.bbox);
        h.f64s(&[d.score]);
    }

    // pairs (part error, box error) per detection with a matching gt
    let mut part_errors = Vec::new();
    let mut box_errors = Vec::new();
    for d in &detections {
        let best = scene.boxes.iter().enumerate().map(|(g, b)| (g, iou3d(&d.bbox, b))).max_by(|a, b| a.1.total_cmp(&b.1));
        if let Some((g, iou)) = best.filter(|b| b.1 > 0.0) {
            let (mut e, mut n) = (0.0, 0usize);
            for (i, l) in labels.iter().enumerate() {
                if l.box_index == Some(g) {
                    let base = i * 4;
                    e += (0..3).map(|u| (part_feats[base + u] as f64 - l.part[u]).abs()).sum::<f64>() / 3.0;
                    n += 1;
                }
            }
            if n > 0 {
                part_errors.push(e / n as f64);
                box_errors.push(1.0 - iou);
            }
        }
    }

    let gts = scene.ground_truths();
    let proposal_frame = EvalFrame {
        detections: proposals
            .iter()
            .map(|p| Detection { bbox: p.bbox, score: p.score, class: class_of(&p.bbox) })
            .collect(),
        ground_truths: gts.clone(),
        ..Default::default()
    };
    let summary = SceneSummary {
        num_points: scene.points.len(),
        num_foreground: fg.len(),
        num_voxels: voxels.len(),
        num_boxes: scene.boxes.len(),
        num_positive_anchors: num_pos,
        num_proposals: proposals.len(),
        num_detections: detections.len(),
        pooled_nonempty,
        digest: h.0,
    };
    let detection_frame = EvalFrame { detections, ground_truths: gts, pred_parts, gt_parts };
    Ok(SceneResult { summary, proposal_frame, detection_frame, part_errors, box_errors })
}

/// Runs every scene (in parallel on the current rayon pool) and evaluates.
pub fn run_smoke(cfg: &SmokeConfig) -> Result<SmokeReport> {
    cfg.backbone.validate()?;
    cfg.codec.validate()?;
    let weights = BackboneWeights::seeded(&cfg.backbone, cfg.seed);
    let c_sem = cfg.backbone.output_channels();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x11f7);
    let lift = CellLinear::new(
        4,
        c_sem,
        (0..4 * c_sem).map(|_| rng.random_range(-0.5f32..0.5)).collect(),
        vec![0.0; c_sem],
    )?;
    let results: Vec<SceneResult> = (0..cfg.num_scenes)
        .into_par_iter()
        .map(|i| run_scene(cfg, i, &weights, &lift))
        .collect::<Result<_>>()?;

    let proposal_frames: Vec<EvalFrame> = results.iter().map(|r| r.proposal_frame.clone()).collect();
    let frames: Vec<EvalFrame> = results.iter().map(|r| r.detection_frame.clone()).collect();
    let recall_at_100 = proposal_recall(&proposal_frames, 100, 0.7, IouMetric::ThreeD);
    let ap_car = average_precision_11(&frames, "Car", 0.7, IouMetric::ThreeD);
    let fp = fp_breakdown(&frames, 0.5, 0.7, IouMetric::ThreeD);
    let part_error = mean_part_abs_error(&frames)?;
    let xs: Vec<f64> = results.iter().flat_map(|r| r.part_errors.iter().copied()).collect();
    let ys: Vec<f64> = results.iter().flat_map(|r| r.box_errors.iter().copied()).collect();
    let pearson = pearson_correlation(&xs, &ys).ok();

    let mut h = Fnv::new();
    for r in &results {
        h.bytes(&r.summary.digest.to_le_bytes());
    }
    h.f64s(&[recall_at_100, part_error.mean]);
    for a in &ap_car {
        h.f64s(&[a.ap]);
    }
    Ok(SmokeReport {
        scenes: results.into_iter().map(|r| r.summary).collect(),
        recall_at_100,
        ap_car,
        fp,
        part_error,
        pearson,
        digest: h.0,
    })
}
