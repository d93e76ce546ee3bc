//! RoI-aware point cloud pooling.
//!
//! Points inside a proposal are moved to its canonical frame and scattered
//! into a fixed `Lx x Ly x Lz` grid spanning the box (x along the length, y
//! along the width, z along the height). Each cell holds the max or mean of
//! its points' features; cells without points are zero and flagged empty, so
//! proposals of different size or placement around the same points stay
//! distinguishable.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{BoxParams, Vec3};
use crate::voxel::SparseTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub lx: usize,
    pub ly: usize,
    pub lz: usize,
}

impl Default for PoolSpec {
    fn default() -> Self {
        Self { lx: 14, ly: 14, lz: 14 }
    }
}

impl PoolSpec {
    pub fn cube(n: usize) -> Self {
        Self { lx: n, ly: n, lz: n }
    }

    pub fn num_cells(&self) -> usize {
        self.lx * self.ly * self.lz
    }

    fn validate(&self) -> Result<()> {
        if self.lx == 0 || self.ly == 0 || self.lz == 0 {
            return Err(Error::InvalidConfig(format!("pool grid {self:?} has a zero axis")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Max,
    Avg,
}

impl std::str::FromStr for PoolMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "max" => Ok(PoolMode::Max),
            "avg" => Ok(PoolMode::Avg),
            other => Err(format!("unknown pool mode {other:?}, expected max or avg")),
        }
    }
}

/// Dense `Lx x Ly x Lz x C` feature volume with an empty-cell mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledGrid {
    pub spec: PoolSpec,
    pub channels: usize,
    /// Cell-major, channels innermost; cell index `(ix * ly + iy) * lz + iz`.
    pub values: Vec<f32>,
    /// `true` where no point fell into the cell.
    pub empty: Vec<bool>,
}

impl PooledGrid {
    pub fn empty(spec: PoolSpec, channels: usize) -> Self {
        Self {
            spec,
            channels,
            values: vec![0.0; spec.num_cells() * channels],
            empty: vec![true; spec.num_cells()],
        }
    }

    pub fn cell_index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (ix * self.spec.ly + iy) * self.spec.lz + iz
    }

    pub fn cell(&self, idx: usize) -> &[f32] {
        &self.values[idx * self.channels..(idx + 1) * self.channels]
    }

    pub fn num_nonempty(&self) -> usize {
        self.empty.iter().filter(|e| !**e).count()
    }

    /// Non-empty cells as a sparse tensor on an `Lx x Ly x Lz` grid.
    pub fn to_sparse(&self) -> SparseTensor {
        let mut coords = Vec::new();
        let mut features = Vec::new();
        for ix in 0..self.spec.lx {
            for iy in 0..self.spec.ly {
                for iz in 0..self.spec.lz {
                    let k = self.cell_index(ix, iy, iz);
                    if !self.empty[k] {
                        coords.push([ix as i32, iy as i32, iz as i32]);
                        features.extend_from_slice(self.cell(k));
                    }
                }
            }
        }
        SparseTensor {
            dims: [self.spec.lx, self.spec.ly, self.spec.lz],
            channels: self.channels,
            coords,
            features,
        }
    }
}

fn bin(coord: f64, extent: f64, n: usize) -> usize {
    let b = ((coord + extent / 2.0) / extent * n as f64).floor();
    // points on the upper face land in the last bin
    (b.max(0.0) as usize).min(n - 1)
}

/// Cell of a canonical-frame point, or `None` outside the (closed) box.
fn cell_of(local: Vec3, b: &BoxParams, spec: &PoolSpec) -> Option<[usize; 3]> {
    if local.x.abs() > b.l / 2.0 || local.y.abs() > b.w / 2.0 || local.z.abs() > b.h / 2.0 {
        return None;
    }
    Some([
        bin(local.x, b.l, spec.lx),
        bin(local.y, b.w, spec.ly),
        bin(local.z, b.h, spec.lz),
    ])
}

pub fn roi_aware_pool(
    points: &[Vec3],
    features: &[f32],
    channels: usize,
    b: &BoxParams,
    spec: PoolSpec,
    mode: PoolMode,
) -> Result<PooledGrid> {
    spec.validate()?;
    if channels == 0 || features.len() != points.len() * channels {
        return Err(Error::DimensionMismatch(format!(
            "{} points with {} channels need {} features, got {}",
            points.len(),
            channels,
            points.len() * channels,
            features.len()
        )));
    }
    let frame = b.frame();
    let reach = 0.5 * (b.l * b.l + b.w * b.w + b.h * b.h).sqrt();
    let reach2 = reach * reach * (1.0 + 1e-12);

    let mut grid = PooledGrid::empty(spec, channels);
    let mut counts = vec![0u32; spec.num_cells()];
    let mut sums = match mode {
        PoolMode::Avg => vec![0.0f64; spec.num_cells() * channels],
        PoolMode::Max => Vec::new(),
    };

    for (i, &p) in points.iter().enumerate() {
        let d = p - b.center;
        if d.dot(d) > reach2 {
            continue;
        }
        let Some([ix, iy, iz]) = cell_of(frame.to_local(p), b, &spec) else {
            continue;
        };
        let k = grid.cell_index(ix, iy, iz);
        let f = &features[i * channels..(i + 1) * channels];
        match mode {
            PoolMode::Max => {
                let cell = &mut grid.values[k * channels..(k + 1) * channels];
                if counts[k] == 0 {
                    cell.copy_from_slice(f);
                } else {
                    for (c, v) in cell.iter_mut().zip(f) {
                        *c = c.max(*v);
                    }
                }
            }
            PoolMode::Avg => {
                for (s, v) in sums[k * channels..(k + 1) * channels].iter_mut().zip(f) {
                    *s += *v as f64;
                }
            }
        }
        counts[k] += 1;
    }

    for (k, &n) in counts.iter().enumerate() {
        if n == 0 {
            continue;
        }
        grid.empty[k] = false;
        if mode == PoolMode::Avg {
            for c in 0..channels {
                grid.values[k * channels + c] = (sums[k * channels + c] / n as f64) as f32;
            }
        }
    }
    Ok(grid)
}

/// Pools every proposal independently, in parallel.
pub fn roi_aware_pool_batch(
    points: &[Vec3],
    features: &[f32],
    channels: usize,
    proposals: &[BoxParams],
    spec: PoolSpec,
    mode: PoolMode,
) -> Result<Vec<PooledGrid>> {
    proposals
        .par_iter()
        .map(|b| roi_aware_pool(points, features, channels, b, spec, mode))
        .collect()
}

/// Per-cell linear map applied to pooled part features; row-major
/// `in_channels x out_channels` weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellLinear {
    pub in_channels: usize,
    pub out_channels: usize,
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl CellLinear {
    pub fn new(in_channels: usize, out_channels: usize, weights: Vec<f32>, bias: Vec<f32>) -> Result<Self> {
        if weights.len() != in_channels * out_channels || bias.len() != out_channels {
            return Err(Error::DimensionMismatch(format!(
                "linear {in_channels}->{out_channels} got {} weights and {} biases",
                weights.len(),
                bias.len()
            )));
        }
        Ok(Self { in_channels, out_channels, weights, bias })
    }

    pub fn apply(&self, x: &[f32], out: &mut [f32]) {
        for (o, slot) in out.iter_mut().enumerate() {
            let mut acc = self.bias[o] as f64;
            for (i, &xi) in x.iter().enumerate() {
                acc += xi as f64 * self.weights[i * self.out_channels + o] as f64;
            }
            *slot = acc as f32;
        }
    }
}

/// Lifts the avg-pooled part grid to the semantic width and concatenates:
/// `[lift(part) | sem]`. A cell is non-empty in the output if it is
/// non-empty in either input; the lift is applied only where the part grid
/// has points.
pub fn fuse_part_semantic(part: &PooledGrid, sem: &PooledGrid, lift: &CellLinear) -> Result<PooledGrid> {
    if part.spec != sem.spec {
        return Err(Error::DimensionMismatch(format!(
            "part grid {:?} vs semantic grid {:?}",
            part.spec, sem.spec
        )));
    }
    if lift.in_channels != part.channels {
        return Err(Error::ChannelMismatch { expected: lift.in_channels, actual: part.channels });
    }
    if lift.out_channels != sem.channels {
        return Err(Error::ChannelMismatch { expected: sem.channels, actual: lift.out_channels });
    }
    let c2 = sem.channels;
    let mut out = PooledGrid::empty(part.spec, 2 * c2);
    for k in 0..part.spec.num_cells() {
        let dst = &mut out.values[k * 2 * c2..(k + 1) * 2 * c2];
        if !part.empty[k] {
            lift.apply(part.cell(k), &mut dst[..c2]);
        }
        if !sem.empty[k] {
            dst[c2..].copy_from_slice(sem.cell(k));
        }
        out.empty[k] = part.empty[k] && sem.empty[k];
    }
    Ok(out)
}

/// Channelwise max over non-overlapping `factor^3` blocks, ignoring empty
/// cells; a block with no occupied cell stays empty.
pub fn sparse_downpool(grid: &PooledGrid, factor: usize) -> Result<PooledGrid> {
    let s = grid.spec;
    if factor == 0 || s.lx % factor != 0 || s.ly % factor != 0 || s.lz % factor != 0 {
        return Err(Error::IndivisibleDims([s.lx, s.ly, s.lz]));
    }
    let spec = PoolSpec { lx: s.lx / factor, ly: s.ly / factor, lz: s.lz / factor };
    let c = grid.channels;
    let mut out = PooledGrid::empty(spec, c);
    for ix in 0..s.lx {
        for iy in 0..s.ly {
            for iz in 0..s.lz {
                let k = grid.cell_index(ix, iy, iz);
                if grid.empty[k] {
                    continue;
                }
                let o = out.cell_index(ix / factor, iy / factor, iz / factor);
                let dst = &mut out.values[o * c..(o + 1) * c];
                if out.empty[o] {
                    dst.copy_from_slice(grid.cell(k));
                    out.empty[o] = false;
                } else {
                    for (d, v) in dst.iter_mut().zip(grid.cell(k)) {
                        *d = d.max(*v);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Header written next to a pooled-grid blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridFileHeader {
    /// `[Lx, Ly, Lz, C]`.
    pub dims: [usize; 4],
    pub mode: PoolMode,
    pub dtype: String,
    pub grids: Vec<GridOffsets>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridOffsets {
    /// Byte offset of the little-endian f32 values.
    pub values_offset: usize,
    /// Byte offset of the per-cell u8 mask (1 = empty).
    pub mask_offset: usize,
    pub num_nonempty: usize,
}

/// Writes all grids back to back (values then mask per grid) and returns the
/// matching header.
pub fn write_grids<W: Write>(mut out: W, grids: &[PooledGrid], mode: PoolMode) -> Result<GridFileHeader> {
    let (spec, channels) = grids
        .first()
        .map_or((PoolSpec::default(), 0), |g| (g.spec, g.channels));
    let mut offset = 0;
    let mut entries = Vec::with_capacity(grids.len());
    for g in grids {
        if g.spec != spec || g.channels != channels {
            return Err(Error::DimensionMismatch("grids in one file must share a shape".into()));
        }
        let mut buf = Vec::with_capacity(g.values.len() * 4 + g.empty.len());
        for v in &g.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let mask_offset = offset + buf.len();
        buf.extend(g.empty.iter().map(|&e| e as u8));
        out.write_all(&buf)?;
        entries.push(GridOffsets { values_offset: offset, mask_offset, num_nonempty: g.num_nonempty() });
        offset += buf.len();
    }
    Ok(GridFileHeader {
        dims: [spec.lx, spec.ly, spec.lz, channels],
        mode,
        dtype: "f32le".into(),
        grids: entries,
    })
}

pub fn read_grids(bytes: &[u8], header: &GridFileHeader) -> Result<Vec<PooledGrid>> {
    let [lx, ly, lz, c] = header.dims;
    let spec = PoolSpec { lx, ly, lz };
    let cells = spec.num_cells();
    header
        .grids
        .iter()
        .map(|e| {
            let vend = e.values_offset + cells * c * 4;
            let mend = e.mask_offset + cells;
            if vend > bytes.len() || mend > bytes.len() {
                return Err(Error::Format("grid blob shorter than header claims".into()));
            }
            let values = bytes[e.values_offset..vend]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            let empty = bytes[e.mask_offset..mend].iter().map(|&m| m != 0).collect();
            Ok(PooledGrid { spec, channels: c, values, empty })
        })
        .collect()
}
