//! `bench`: wall-time percentiles of single stages over synthetic scenes.

use std::path::Path;
use std::time::Instant;

use clap::Subcommand;
use partgrid::kittio::synth_scene;
use partgrid::partlabel::compute_part_labels;
use partgrid::roipool::{roi_aware_pool_batch, PoolMode};
use partgrid::voxel::voxelize;
use serde::Serialize;

use crate::commands::part_features;
use crate::config::RunConfig;
use crate::io::write_json;
use crate::Failure;

#[derive(Debug, Clone, Subcommand)]
pub enum Target {
    /// Voxelization time per scene.
    Voxelize {
        #[arg(long, default_value_t = 100)]
        scenes: usize,
    },
    /// RoI-aware max pooling of part labels over every object of a scene.
    Pool {
        #[arg(long, default_value_t = 100)]
        scenes: usize,
    },
}

#[derive(Debug, Serialize)]
pub struct BenchReport {
    pub target: &'static str,
    pub scenes: usize,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub mean_ms: f64,
    pub max_ms: f64,
    /// Mean of the stage's natural size per scene (points or proposals).
    pub mean_input: f64,
}

/// Nearest-rank percentile of sorted samples.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

fn report(target: &'static str, mut times: Vec<f64>, inputs: &[usize]) -> BenchReport {
    times.sort_by(f64::total_cmp);
    let n = times.len().max(1) as f64;
    BenchReport {
        target,
        scenes: times.len(),
        p50_ms: percentile(&times, 0.5),
        p95_ms: percentile(&times, 0.95),
        mean_ms: times.iter().sum::<f64>() / n,
        max_ms: times.last().copied().unwrap_or(0.0),
        mean_input: inputs.iter().sum::<usize>() as f64 / n,
    }
}

pub fn run(target: &Target, cfg: &RunConfig, out: Option<&Path>) -> Result<(), Failure> {
    let (name, scenes) = match target {
        Target::Voxelize { scenes } => ("voxelize", *scenes),
        Target::Pool { scenes } => ("pool", *scenes),
    };
    if scenes == 0 {
        return Err(Failure::input("--scenes must be positive"));
    }
    let mut times = Vec::with_capacity(scenes);
    let mut inputs = Vec::with_capacity(scenes);
    for i in 0..scenes {
        let scene = synth_scene(&cfg.synth, cfg.seed.wrapping_add(i as u64))?;
        match target {
            Target::Voxelize { .. } => {
                let t = Instant::now();
                voxelize(&scene.points, &cfg.grid)?;
                times.push(t.elapsed().as_secs_f64() * 1e3);
                inputs.push(scene.points.len());
            }
            Target::Pool { .. } => {
                let feats = part_features(&compute_part_labels(&scene.points, &scene.boxes)?);
                let t = Instant::now();
                roi_aware_pool_batch(&scene.points, &feats, 4, &scene.boxes, cfg.pool, PoolMode::Max)?;
                times.push(t.elapsed().as_secs_f64() * 1e3);
                inputs.push(scene.boxes.len());
            }
        }
    }
    write_json(out, &report(name, times, &inputs))
}
