//! Independent reference implementations used by the integration and
//! acceptance suites. They favour obviousness over speed.

#![allow(dead_code)]

use partgrid::geom::{BoxParams, Vec3};
use partgrid::postproc::{IouMetric, ScoredBox};
use partgrid::roipool::{PoolMode, PoolSpec, PooledGrid};
use partgrid::sparseconv::{BackboneConfig, BackboneWeights};
use partgrid::voxel::SparseTensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_box<R: Rng>(rng: &mut R, spread: f64) -> BoxParams {
    BoxParams::new(
        Vec3::new(rng.random_range(-spread..spread), rng.random_range(-spread..spread), rng.random_range(-1.0..1.0)),
        rng.random_range(0.5..2.5),
        rng.random_range(0.5..2.5),
        rng.random_range(0.5..5.0),
        rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
    )
    .unwrap()
}

/// Canonical coordinates computed with an explicit rotation matrix.
pub fn local_coords(p: Vec3, b: &BoxParams) -> [f64; 3] {
    let (s, c) = b.theta.sin_cos();
    let dx = p.x - b.center.x;
    let dy = p.y - b.center.y;
    [c * dx + s * dy, -s * dx + c * dy, p.z - b.center.z]
}

fn inside_bev(x: f64, y: f64, b: &BoxParams) -> bool {
    let q = local_coords(Vec3::new(x, y, b.center.z), b);
    q[0].abs() <= b.l / 2.0 && q[1].abs() <= b.w / 2.0
}

/// Monte-Carlo IoU from `n` uniform samples in the joint bounding volume.
pub fn monte_carlo_iou<R: Rng>(a: &BoxParams, b: &BoxParams, metric: IouMetric, n: usize, rng: &mut R) -> f64 {
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for bx in [a, b] {
        let r = 0.5 * (bx.l * bx.l + bx.w * bx.w).sqrt();
        x0 = x0.min(bx.center.x - r);
        x1 = x1.max(bx.center.x + r);
        y0 = y0.min(bx.center.y - r);
        y1 = y1.max(bx.center.y + r);
    }
    let z0 = (a.center.z - a.h / 2.0).min(b.center.z - b.h / 2.0);
    let z1 = (a.center.z + a.h / 2.0).max(b.center.z + b.h / 2.0);
    let (mut both, mut either) = (0usize, 0usize);
    for _ in 0..n {
        let x = rng.random_range(x0..x1);
        let y = rng.random_range(y0..y1);
        let (mut ia, mut ib) = (inside_bev(x, y, a), inside_bev(x, y, b));
        if metric == IouMetric::ThreeD {
            let z = rng.random_range(z0..z1);
            ia &= (z - a.center.z).abs() <= a.h / 2.0;
            ib &= (z - b.center.z).abs() <= b.h / 2.0;
        }
        both += (ia && ib) as usize;
        either += (ia || ib) as usize;
    }
    if either == 0 {
        0.0
    } else {
        both as f64 / either as f64
    }
}

/// Textbook NMS: repeatedly take the best remaining box and drop everything
/// overlapping it by more than `thresh`.
pub fn reference_nms(boxes: &[ScoredBox], thresh: f64, metric: IouMetric) -> Vec<usize> {
    let mut remaining: Vec<usize> = (0..boxes.len()).collect();
    let mut keep = Vec::new();
    while !remaining.is_empty() {
        let mut best = 0;
        for k in 1..remaining.len() {
            let (i, j) = (remaining[k], remaining[best]);
            if boxes[i].score > boxes[j].score || (boxes[i].score == boxes[j].score && i < j) {
                best = k;
            }
        }
        let top = remaining.remove(best);
        keep.push(top);
        remaining.retain(|&j| metric.iou(&boxes[top].bbox, &boxes[j].bbox) <= thresh);
    }
    keep
}

/// Per-cell scan over all points.
pub fn brute_force_pool(
    points: &[Vec3],
    feats: &[f32],
    channels: usize,
    b: &BoxParams,
    spec: PoolSpec,
    mode: PoolMode,
) -> (Vec<f32>, Vec<bool>) {
    let [max, avg] = brute_force_pool_both(points, feats, channels, b, spec);
    match mode {
        PoolMode::Max => max,
        PoolMode::Avg => avg,
    }
}

/// Per-cell brute force: for every cell, scan all in-box points and test
/// membership against the cell's bounds. Returns the max and avg grids.
pub fn brute_force_pool_both(
    points: &[Vec3],
    feats: &[f32],
    channels: usize,
    b: &BoxParams,
    spec: PoolSpec,
) -> [(Vec<f32>, Vec<bool>); 2] {
    let ext = [b.l, b.w, b.h];
    let local: Vec<(usize, [f64; 3])> = points
        .iter()
        .map(|p| local_coords(*p, b))
        .enumerate()
        .filter(|(_, q)| (0..3).all(|a| q[a].abs() <= ext[a] / 2.0))
        .collect();
    let n = [spec.lx, spec.ly, spec.lz];
    let in_cell = |q: &[f64; 3], cell: [usize; 3]| {
        (0..3).all(|a| {
            let lo = -ext[a] / 2.0 + cell[a] as f64 * ext[a] / n[a] as f64;
            let hi = -ext[a] / 2.0 + (cell[a] + 1) as f64 * ext[a] / n[a] as f64;
            let last = cell[a] + 1 == n[a];
            (q[a] >= lo || cell[a] == 0) && (q[a] < hi || last)
        })
    };
    let cells = spec.num_cells();
    let mut max = vec![0.0f32; cells * channels];
    let mut avg = vec![0.0f32; cells * channels];
    let mut empty = vec![true; cells];
    for ix in 0..spec.lx {
        for iy in 0..spec.ly {
            for iz in 0..spec.lz {
                let k = (ix * spec.ly + iy) * spec.lz + iz;
                let members: Vec<usize> =
                    local.iter().filter(|(_, q)| in_cell(q, [ix, iy, iz])).map(|(i, _)| *i).collect();
                if members.is_empty() {
                    continue;
                }
                empty[k] = false;
                for c in 0..channels {
                    let vals = || members.iter().map(|&i| feats[i * channels + c]);
                    max[k * channels + c] = vals().fold(f32::NEG_INFINITY, f32::max);
                    avg[k * channels + c] = (vals().map(|v| v as f64).sum::<f64>() / members.len() as f64) as f32;
                }
            }
        }
    }
    [(max, empty.clone()), (avg, empty)]
}

pub fn grids_match(grid: &PooledGrid, oracle: &(Vec<f32>, Vec<bool>), tol: f32) -> bool {
    grid.empty == oracle.1
        && grid
            .values
            .iter()
            .zip(&oracle.0)
            .all(|(a, b)| if tol == 0.0 { a.to_bits() == b.to_bits() } else { (a - b).abs() <= tol })
}

// ---------------------------------------------------------------------------
// Dense convolution reference

#[derive(Debug, Clone)]
pub struct Dense {
    pub dims: [usize; 3],
    pub channels: usize,
    pub data: Vec<f64>,
    pub active: Vec<bool>,
}

impl Dense {
    pub fn zeros(dims: [usize; 3], channels: usize) -> Self {
        let n = dims[0] * dims[1] * dims[2];
        Self { dims, channels, data: vec![0.0; n * channels], active: vec![false; n] }
    }

    pub fn site(&self, x: i64, y: i64, z: i64) -> Option<usize> {
        let d = self.dims.map(|v| v as i64);
        if x < 0 || y < 0 || z < 0 || x >= d[0] || y >= d[1] || z >= d[2] {
            return None;
        }
        Some(((x * d[1] + y) * d[2] + z) as usize)
    }

    pub fn from_sparse(t: &SparseTensor) -> Self {
        let mut d = Self::zeros(t.dims, t.channels);
        for (i, c) in t.coords.iter().enumerate() {
            let s = d.site(c[0] as i64, c[1] as i64, c[2] as i64).unwrap();
            d.active[s] = true;
            for ch in 0..t.channels {
                d.data[s * t.channels + ch] = t.feature(i)[ch] as f64;
            }
        }
        d
    }

    /// Features of the active sites, in sorted coordinate order.
    pub fn active_features(&self) -> (Vec<[i32; 3]>, Vec<f64>) {
        let mut coords = Vec::new();
        let mut feats = Vec::new();
        for x in 0..self.dims[0] {
            for y in 0..self.dims[1] {
                for z in 0..self.dims[2] {
                    let s = self.site(x as i64, y as i64, z as i64).unwrap();
                    if self.active[s] {
                        coords.push([x as i32, y as i32, z as i32]);
                        feats.extend_from_slice(&self.data[s * self.channels..(s + 1) * self.channels]);
                    }
                }
            }
        }
        (coords, feats)
    }

    pub fn relu(&mut self) {
        for v in &mut self.data {
            *v = v.max(0.0);
        }
    }

    pub fn concat(&self, other: &Dense) -> Dense {
        assert_eq!(self.dims, other.dims);
        let c = self.channels + other.channels;
        let mut out = Dense::zeros(self.dims, c);
        for s in 0..self.active.len() {
            out.active[s] = self.active[s] || other.active[s];
            out.data[s * c..s * c + self.channels]
                .copy_from_slice(&self.data[s * self.channels..(s + 1) * self.channels]);
            out.data[s * c + self.channels..(s + 1) * c]
                .copy_from_slice(&other.data[s * other.channels..(s + 1) * other.channels]);
        }
        out
    }

    fn mask(&mut self) {
        for s in 0..self.active.len() {
            if !self.active[s] {
                for ch in 0..self.channels {
                    self.data[s * self.channels + ch] = 0.0;
                }
            }
        }
    }
}

fn weight(w: &[f32], k: usize, d: [i64; 3], ci: usize, co: usize, cin: usize, cout: usize) -> f64 {
    let r = (k / 2) as i64;
    let idx = (((d[2] + r) * k as i64 + (d[1] + r)) * k as i64 + (d[0] + r)) as usize;
    w[(idx * cin + ci) * cout + co] as f64
}

/// Zero-padded dense convolution `out(o) = b + sum_d in(s o + d) W[d]`
/// evaluated at every output site, then masked: submanifold keeps the input
/// occupancy, strided keeps coarse sites whose `s`-block holds an active
/// input.
#[allow(clippy::too_many_arguments)]
pub fn dense_conv(
    inp: &Dense,
    w: &[f32],
    bias: Option<&[f32]>,
    k: usize,
    stride: [usize; 3],
    submanifold: bool,
    cout: usize,
) -> Dense {
    let cin = inp.channels;
    let out_dims = [0, 1, 2].map(|a| inp.dims[a].div_ceil(stride[a]));
    let mut out = Dense::zeros(out_dims, cout);
    let r = (k / 2) as i64;
    let s = stride.map(|v| v as i64);
    for ox in 0..out_dims[0] as i64 {
        for oy in 0..out_dims[1] as i64 {
            for oz in 0..out_dims[2] as i64 {
                let os = out.site(ox, oy, oz).unwrap();
                for co in 0..cout {
                    let mut acc = bias.map_or(0.0, |b| b[co] as f64);
                    for dz in -r..=r {
                        for dy in -r..=r {
                            for dx in -r..=r {
                                let Some(is) = inp.site(s[0] * ox + dx, s[1] * oy + dy, s[2] * oz + dz) else {
                                    continue;
                                };
                                for ci in 0..cin {
                                    acc += inp.data[is * cin + ci] * weight(w, k, [dx, dy, dz], ci, co, cin, cout);
                                }
                            }
                        }
                    }
                    out.data[os * cout + co] = acc;
                }
                out.active[os] = if submanifold {
                    inp.active[inp.site(ox, oy, oz).unwrap()]
                } else {
                    let mut any = false;
                    for bx in 0..s[0] {
                        for by in 0..s[1] {
                            for bz in 0..s[2] {
                                if let Some(is) = inp.site(s[0] * ox + bx, s[1] * oy + by, s[2] * oz + bz) {
                                    any |= inp.active[is];
                                }
                            }
                        }
                    }
                    any
                };
            }
        }
    }
    out.mask();
    out
}

/// Dense transposed convolution `out(t) = b + sum_{s o + d = t} in(o) W[d]`
/// masked to `target`'s occupancy.
pub fn dense_deconv(inp: &Dense, w: &[f32], bias: Option<&[f32]>, k: usize, stride: [usize; 3], target: &Dense, cout: usize) -> Dense {
    let cin = inp.channels;
    let mut out = Dense::zeros(target.dims, cout);
    out.active = target.active.clone();
    let r = (k / 2) as i64;
    let s = stride.map(|v| v as i64);
    for s_out in 0..out.active.len() {
        for co in 0..cout {
            out.data[s_out * cout + co] = bias.map_or(0.0, |b| b[co] as f64);
        }
    }
    for ox in 0..inp.dims[0] as i64 {
        for oy in 0..inp.dims[1] as i64 {
            for oz in 0..inp.dims[2] as i64 {
                let is = inp.site(ox, oy, oz).unwrap();
                for dz in -r..=r {
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let Some(ts) = out.site(s[0] * ox + dx, s[1] * oy + dy, s[2] * oz + dz) else {
                                continue;
                            };
                            for co in 0..cout {
                                let mut acc = 0.0;
                                for ci in 0..cin {
                                    acc += inp.data[is * cin + ci] * weight(w, k, [dx, dy, dz], ci, co, cin, cout);
                                }
                                out.data[ts * cout + co] += acc;
                            }
                        }
                    }
                }
            }
        }
    }
    out.mask();
    out
}

pub struct DenseBackbone {
    pub point_features: Dense,
    pub bev_volume: Dense,
}

/// The backbone evaluated layer by layer with the dense operators.
pub fn dense_backbone(input: &SparseTensor, cfg: &BackboneConfig, weights: &BackboneWeights) -> DenseBackbone {
    let run = |x: &Dense, name: &str| -> Dense {
        let l = weights.layer(name).unwrap();
        let s = &l.shape;
        let mut y = dense_conv(x, &l.weights, Some(&l.bias), s.kernel, s.stride, s.submanifold, s.out_channels);
        y.relu();
        y
    };
    let n = cfg.encoder.len();
    let mut enc = Vec::new();
    let mut x = Dense::from_sparse(input);
    for lvl in 0..n {
        if lvl > 0 {
            x = run(&x, &format!("enc{lvl}.down"));
        }
        for s in 0..cfg.subm_per_level {
            x = run(&x, &format!("enc{lvl}.subm{s}"));
        }
        enc.push(x.clone());
    }
    let bev_volume = run(&enc[n - 1], "bev.down");
    let mut x = enc[n - 1].clone();
    for lvl in (0..n).rev() {
        let mut y = run(&x.concat(&enc[lvl]), &format!("dec{lvl}.fuse"));
        y = run(&y, &format!("dec{lvl}.subm"));
        if lvl > 0 {
            let l = weights.layer(&format!("dec{lvl}.up")).unwrap();
            let mut t = dense_deconv(&y, &l.weights, Some(&l.bias), 3, l.shape.stride, &enc[lvl - 1], l.shape.out_channels);
            t.relu();
            x = t;
        } else {
            x = run(&y, "dec0.out");
        }
    }
    DenseBackbone { point_features: x, bev_volume }
}

pub fn random_sparse<R: Rng>(rng: &mut R, dims: [usize; 3], channels: usize, occupancy: f64) -> SparseTensor {
    let mut coords = Vec::new();
    let mut feats = Vec::new();
    for x in 0..dims[0] {
        for y in 0..dims[1] {
            for z in 0..dims[2] {
                if rng.random_bool(occupancy) {
                    coords.push([x as i32, y as i32, z as i32]);
                    for _ in 0..channels {
                        feats.push(rng.random_range(-1.0f32..1.0));
                    }
                }
            }
        }
    }
    SparseTensor::new(dims, channels, coords, feats).unwrap()
}

pub fn random_weights<R: Rng>(rng: &mut R, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

/// Largest absolute difference between a sparse tensor and the dense
/// reference on the dense active set; `None` when the supports differ.
pub fn max_abs_diff(sparse: &SparseTensor, dense: &Dense) -> Option<f64> {
    let (coords, feats) = dense.active_features();
    if coords != sparse.coords || sparse.channels != dense.channels {
        return None;
    }
    Some(sparse.features.iter().zip(&feats).map(|(a, b)| (*a as f64 - b).abs()).fold(0.0, f64::max))
}

// ---------------------------------------------------------------------------
// Numerics

pub fn central_difference(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

pub fn rel_close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-3)
}

/// Two-pass sample correlation.
pub fn two_pass_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}
