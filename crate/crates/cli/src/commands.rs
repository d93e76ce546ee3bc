use std::path::Path;

use log::info;
use partgrid::anchorgen::{assign_anchors, bev_dims, generate_anchors, AnchorLabel};
use partgrid::codec::{encode_anchor_free, encode_anchor_residual, AnchorFreeTarget, AnchorResidualTarget};
use partgrid::kittio::{synth_scene, Scene};
use partgrid::partlabel::{compute_part_labels, PartLabel, summarize, write_label_records, LabelSummary};
use partgrid::pipeline::run_smoke;
use partgrid::postproc::{rotated_nms, ScoredBox};
use partgrid::roipool::{roi_aware_pool_batch, write_grids, GridFileHeader, PoolMode};
use partgrid::sparseconv::{backbone_forward, BackboneWeights, WeightManifest};
use partgrid::voxel::voxelize;
use partgrid::{BoxParams, VoxelGridSpec};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::io::{load_scene, read_bytes, read_json, require_out, require_paths, sidecar, write_bytes, write_json};
use crate::{bench, eval, Command, Failure, Mode, Strategy};

pub fn dispatch(cmd: &Command, cfg: &RunConfig, out: Option<&Path>) -> Result<(), Failure> {
    match cmd {
        Command::Synth => {
            let scene = synth_scene(&cfg.synth, cfg.seed)?;
            info!("synthesized {} points, {} objects", scene.points.len(), scene.boxes.len());
            write_json(out, &scene)
        }
        Command::GenLabels(args) => gen_labels(&load_scene(args)?, out),
        Command::Voxelize(args) => voxelize_scene(&load_scene(args)?, &cfg.grid, out),
        Command::Encode { scene, strategy } => encode(&load_scene(scene)?, *strategy, cfg, out),
        Command::Pool { scene, boxes, mode } => {
            require_paths(boxes)?;
            pool(&load_scene(scene)?, boxes.as_deref(), *mode, cfg, out)
        }
        Command::Backbone { scene, weights, save_weights } => {
            require_paths(weights)?;
            backbone(&load_scene(scene)?, weights.as_deref(), save_weights.as_deref(), cfg, out)
        }
        Command::Nms { input, thresh, metric, top } => {
            require_paths([input])?;
            if !(0.0..=1.0).contains(thresh) {
                return Err(Failure::input(format!("--thresh {thresh} must lie in [0, 1]")));
            }
            let boxes: Vec<ScoredBox> = read_json(input)?;
            let mut keep = rotated_nms(&boxes, *thresh, (*metric).into());
            if let Some(k) = top {
                keep.truncate(*k);
            }
            info!("kept {} of {} boxes", keep.len(), boxes.len());
            write_json(out, &keep.iter().map(|&i| boxes[i]).collect::<Vec<_>>())
        }
        Command::Eval { pred, gt, metric, recall_iou, fp_score, pr_csv } => {
            require_paths([pred, gt])?;
            let opts = eval::EvalOptions { metric: (*metric).into(), recall_iou: *recall_iou, fp_score: *fp_score };
            eval::run(pred, gt, &opts, out, pr_csv.as_deref())
        }
        Command::Bench { target } => bench::run(target, cfg, out),
        Command::Smoke { scenes } => {
            let mut smoke = cfg.smoke.clone();
            smoke.seed = cfg.seed;
            if let Some(n) = scenes {
                smoke.num_scenes = *n;
            }
            let report = run_smoke(&smoke)?;
            info!("smoke digest {:016x}", report.digest);
            write_json(out, &report)
        }
    }
}

fn gen_labels(scene: &Scene, out: Option<&Path>) -> Result<(), Failure> {
    let labels = compute_part_labels(&scene.points, &scene.boxes)?;
    let mut blob = Vec::new();
    write_label_records(&mut blob, &scene.points, &labels)?;
    let summary: LabelSummary = summarize(&labels, scene.boxes.len());
    info!("{} of {} points are foreground", summary.num_foreground, summary.num_points);
    write_bytes(out, &blob)?;
    if let Some(p) = out {
        write_json(Some(&sidecar(p)), &summary)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct VoxelFile<'a> {
    grid: &'a VoxelGridSpec,
    dims: [usize; 3],
    num_voxels: usize,
    coords: &'a [[i32; 3]],
    /// Mean point coordinates per voxel, three per coordinate.
    features: &'a [f32],
    counts: &'a [u32],
}

fn voxelize_scene(scene: &Scene, grid: &VoxelGridSpec, out: Option<&Path>) -> Result<(), Failure> {
    let v = voxelize(&scene.points, grid)?;
    info!("{} points into {} voxels", scene.points.len(), v.len());
    write_json(
        out,
        &VoxelFile {
            grid,
            dims: v.tensor.dims,
            num_voxels: v.len(),
            coords: &v.tensor.coords,
            features: &v.tensor.features,
            counts: &v.counts,
        },
    )
}

#[derive(Serialize)]
struct FreeTarget {
    point: usize,
    gt: usize,
    class: String,
    target: AnchorFreeTarget,
}

#[derive(Serialize)]
struct AnchorTarget {
    anchor: usize,
    class: String,
    gt: usize,
    #[serde(rename = "box")]
    anchor_box: BoxParams,
    target: AnchorResidualTarget,
}

#[derive(Serialize)]
struct AnchorClassSummary {
    class: String,
    num_anchors: usize,
    positive: usize,
    negative: usize,
    ignore: usize,
}

#[derive(Serialize)]
#[serde(tag = "strategy", rename_all = "lowercase")]
enum EncodeFile {
    Free {
        targets: Vec<FreeTarget>,
        /// Foreground points whose object center lies outside the search window.
        skipped: usize,
    },
    Anchor {
        bev_dims: [usize; 2],
        classes: Vec<AnchorClassSummary>,
        targets: Vec<AnchorTarget>,
    },
}

fn encode(scene: &Scene, strategy: Strategy, cfg: &RunConfig, out: Option<&Path>) -> Result<(), Failure> {
    let file = match strategy {
        Strategy::Free => {
            let labels = compute_part_labels(&scene.points, &scene.boxes)?;
            let mut targets = Vec::new();
            let mut skipped = 0;
            for (i, l) in labels.iter().enumerate() {
                let Some(g) = l.box_index else { continue };
                match encode_anchor_free(scene.points[i], &scene.boxes[g], &scene.classes[g], &cfg.codec) {
                    Ok(target) => targets.push(FreeTarget { point: i, gt: g, class: scene.classes[g].clone(), target }),
                    Err(partgrid::Error::OutOfSearchRange { .. }) => skipped += 1,
                    Err(e) => return Err(e.into()),
                }
            }
            EncodeFile::Free { targets, skipped }
        }
        Strategy::Anchor => {
            let dims = bev_dims(&cfg.grid, cfg.backbone.downsample());
            let mut classes = Vec::new();
            let mut targets = Vec::new();
            for spec in &cfg.anchors {
                let anchors = generate_anchors(dims, spec, &cfg.grid)?;
                let idx: Vec<usize> = (0..scene.boxes.len()).filter(|&i| scene.classes[i] == spec.name).collect();
                let gts: Vec<BoxParams> = idx.iter().map(|&i| scene.boxes[i]).collect();
                let a = assign_anchors(&anchors, &gts, spec)?;
                for (k, g) in a.positives() {
                    targets.push(AnchorTarget {
                        anchor: k,
                        class: spec.name.clone(),
                        gt: idx[g],
                        anchor_box: anchors[k],
                        target: encode_anchor_residual(&anchors[k], &gts[g]),
                    });
                }
                classes.push(AnchorClassSummary {
                    class: spec.name.clone(),
                    num_anchors: anchors.len(),
                    positive: a.count(|l| matches!(l, AnchorLabel::Positive(_))),
                    negative: a.count(|l| *l == AnchorLabel::Negative),
                    ignore: a.count(|l| *l == AnchorLabel::Ignore),
                });
            }
            EncodeFile::Anchor { bev_dims: dims, classes, targets }
        }
    };
    write_json(out, &file)
}

/// Four channels per point: foreground flag, then the part location.
pub fn part_features(labels: &[PartLabel]) -> Vec<f32> {
    labels
        .iter()
        .flat_map(|l| [l.foreground as u8 as f32, l.part[0] as f32, l.part[1] as f32, l.part[2] as f32])
        .collect()
}

#[derive(Deserialize)]
#[serde(untagged)]
enum BoxEntry {
    Scored(ScoredBox),
    Plain(BoxParams),
}

fn pool(scene: &Scene, boxes: Option<&Path>, mode: Mode, cfg: &RunConfig, out: Option<&Path>) -> Result<(), Failure> {
    let out = require_out(out, "pool")?;
    let proposals: Vec<BoxParams> = match boxes {
        Some(p) => read_json::<Vec<BoxEntry>>(p)?
            .into_iter()
            .map(|e| match e {
                BoxEntry::Scored(s) => s.bbox,
                BoxEntry::Plain(b) => b,
            })
            .collect(),
        None => scene.boxes.clone(),
    };
    let feats = part_features(&compute_part_labels(&scene.points, &scene.boxes)?);
    let mode = match mode {
        Mode::Max => PoolMode::Max,
        Mode::Avg => PoolMode::Avg,
    };
    let grids = roi_aware_pool_batch(&scene.points, &feats, 4, &proposals, cfg.pool, mode)?;
    let mut blob = Vec::new();
    let header: GridFileHeader = write_grids(&mut blob, &grids, mode)?;
    info!(
        "pooled {} proposals, {} non-empty cells",
        grids.len(),
        grids.iter().map(|g| g.num_nonempty()).sum::<usize>()
    );
    write_bytes(Some(&out), &blob)?;
    write_json(Some(&sidecar(&out)), &header)
}

#[derive(Serialize)]
struct BackboneSummary {
    num_points: usize,
    num_voxels: usize,
    /// `[n_active, channels]` of the full-resolution decoder output.
    point_features: [usize; 2],
    /// `[nx, ny, channels]` of the bird's-eye-view map.
    bev_shape: [usize; 3],
    bev_occupied: usize,
    point_feature_mean: f64,
    point_feature_max: f32,
    weight_seed: Option<u64>,
}

fn backbone(
    scene: &Scene,
    weights: Option<&Path>,
    save: Option<&Path>,
    cfg: &RunConfig,
    out: Option<&Path>,
) -> Result<(), Failure> {
    let (w, weight_seed) = match weights {
        Some(p) => {
            let manifest_path = sidecar(p);
            require_paths([&manifest_path])?;
            let manifest: WeightManifest = read_json(&manifest_path)?;
            let w = BackboneWeights::read(&read_bytes(p)?, &manifest)?;
            w.check(&cfg.backbone)?;
            (w, None)
        }
        None => (BackboneWeights::seeded(&cfg.backbone, cfg.seed), Some(cfg.seed)),
    };
    if let Some(p) = save {
        let mut blob = Vec::new();
        let manifest = w.write(&mut blob)?;
        write_bytes(Some(p), &blob)?;
        write_json(Some(&sidecar(p)), &manifest)?;
    }
    let vox = voxelize(&scene.points, &cfg.grid)?;
    let o = backbone_forward(&vox.tensor, &cfg.backbone, &w)?;
    let pf = &o.point_features;
    let n = pf.features.len().max(1) as f64;
    write_json(
        out,
        &BackboneSummary {
            num_points: scene.points.len(),
            num_voxels: vox.len(),
            point_features: [pf.len(), pf.channels],
            bev_shape: o.bev.shape(),
            bev_occupied: o.bev.occupied.iter().filter(|o| **o).count(),
            point_feature_mean: pf.features.iter().map(|v| *v as f64).sum::<f64>() / n,
            point_feature_max: pf.features.iter().copied().fold(0.0, f32::max),
            weight_seed,
        },
    )
}
