//! Workloads shared by the criterion benches.

use partgrid::postproc::ScoredBox;
use partgrid::voxel::{SparseTensor, VoxelGridSpec};
use partgrid::{BoxParams, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `num_points` points spread over about `num_cells` occupied voxels of `grid`.
pub fn clustered_points(grid: &VoxelGridSpec, num_cells: usize, num_points: usize, seed: u64) -> Vec<Vec3> {
    let mut r = rng(seed);
    let dims = grid.dims();
    let cells: Vec<[usize; 3]> = (0..num_cells)
        .map(|_| [r.random_range(0..dims[0]), r.random_range(0..dims[1]), r.random_range(0..dims[2])])
        .collect();
    let s = grid.voxel_size;
    (0..num_points)
        .map(|i| {
            let c = cells[i % cells.len()];
            grid.range_min
                + Vec3::new(
                    (c[0] as f64 + r.random_range(0.0..1.0)) * s.x,
                    (c[1] as f64 + r.random_range(0.0..1.0)) * s.y,
                    (c[2] as f64 + r.random_range(0.0..1.0)) * s.z,
                )
        })
        .collect()
}

/// Car-sized boxes centred on randomly chosen points.
pub fn boxes_around(points: &[Vec3], n: usize, seed: u64) -> Vec<BoxParams> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let c = points[r.random_range(0..points.len())];
            BoxParams::new(c, 1.56, 1.6, 3.9, r.random_range(-3.1..3.1)).expect("valid box")
        })
        .collect()
}

/// Scored car boxes jittered around a few objects, as a proposal stage emits.
pub fn jittered_proposals(objects: usize, per_object: usize, seed: u64) -> Vec<ScoredBox> {
    let mut r = rng(seed);
    let mut out = Vec::with_capacity(objects * per_object);
    for _ in 0..objects {
        let c = Vec3::new(r.random_range(0.0..70.0), r.random_range(-40.0..40.0), -1.0);
        let theta = r.random_range(-3.1..3.1);
        for _ in 0..per_object {
            let j = Vec3::new(r.random_range(-0.5..0.5), r.random_range(-0.5..0.5), r.random_range(-0.2..0.2));
            let b = BoxParams::new(c + j, 1.56, 1.6, 3.9, theta + r.random_range(-0.2..0.2)).expect("valid box");
            out.push(ScoredBox { bbox: b, score: r.random_range(0.0..1.0) });
        }
    }
    out
}

/// Random active set of `n` voxels with `channels` features on a `dims` grid.
pub fn random_sparse(dims: [usize; 3], n: usize, channels: usize, seed: u64) -> SparseTensor {
    let mut r = rng(seed);
    let mut coords: Vec<[i32; 3]> = (0..n)
        .map(|_| {
            [
                r.random_range(0..dims[0] as i32),
                r.random_range(0..dims[1] as i32),
                r.random_range(0..dims[2] as i32),
            ]
        })
        .collect();
    coords.sort_unstable();
    coords.dedup();
    let features = (0..coords.len() * channels).map(|_| r.random_range(-1.0f32..1.0)).collect();
    SparseTensor::new(dims, channels, coords, features).expect("valid tensor")
}
