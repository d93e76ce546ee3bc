//! Point cloud voxelization into a sparse tensor with mean-coordinate
//! features.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Vec3;

/// Axis-aligned voxel grid over a half-open range `[range_min, range_max)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoxelGridSpec {
    pub range_min: Vec3,
    pub range_max: Vec3,
    pub voxel_size: Vec3,
}

impl Default for VoxelGridSpec {
    /// 5 cm x 5 cm x 10 cm voxels over roughly 70 m x 80 m x 4 m in front of
    /// the sensor. The exact range bounds are a configurable approximation.
    fn default() -> Self {
        Self {
            range_min: Vec3::new(0.0, -40.0, -3.0),
            range_max: Vec3::new(70.4, 40.0, 1.0),
            voxel_size: Vec3::new(0.05, 0.05, 0.1),
        }
    }
}

fn axis_cells(extent: f64, size: f64) -> usize {
    let n = extent / size;
    if (n - n.round()).abs() < 1e-6 {
        n.round() as usize
    } else {
        n.ceil() as usize
    }
}

impl VoxelGridSpec {
    pub fn new(range_min: Vec3, range_max: Vec3, voxel_size: Vec3) -> Result<Self> {
        let spec = Self {
            range_min,
            range_max,
            voxel_size,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let lo = self.range_min.to_array();
        let hi = self.range_max.to_array();
        let sz = self.voxel_size.to_array();
        for a in 0..3 {
            if !(lo[a].is_finite() && hi[a].is_finite() && hi[a] > lo[a]) {
                return Err(Error::InvalidGrid(format!(
                    "axis {a}: range [{}, {}) is empty",
                    lo[a], hi[a]
                )));
            }
            if !(sz[a] > 0.0 && sz[a].is_finite()) {
                return Err(Error::InvalidGrid(format!(
                    "axis {a}: voxel size {} must be positive",
                    sz[a]
                )));
            }
        }
        // dims >= 1 follows from the two checks above
        Ok(())
    }

    /// Grid dimensions `(M, N, H)`.
    pub fn dims(&self) -> [usize; 3] {
        let lo = self.range_min.to_array();
        let hi = self.range_max.to_array();
        let sz = self.voxel_size.to_array();
        [0, 1, 2].map(|a| axis_cells(hi[a] - lo[a], sz[a]))
    }

    /// Voxel index of `p`, or `None` if it lies outside the half-open range.
    pub fn voxel_index(&self, p: Vec3) -> Option<[i32; 3]> {
        let dims = self.dims();
        let pv = p.to_array();
        let lo = self.range_min.to_array();
        let hi = self.range_max.to_array();
        let sz = self.voxel_size.to_array();
        let mut idx = [0i32; 3];
        for a in 0..3 {
            if !(pv[a] >= lo[a] && pv[a] < hi[a]) {
                return None;
            }
            let i = ((pv[a] - lo[a]) / sz[a]).floor();
            if i < 0.0 || i >= dims[a] as f64 {
                return None;
            }
            idx[a] = i as i32;
        }
        Some(idx)
    }

    pub fn voxel_center(&self, c: [i32; 3]) -> Vec3 {
        Vec3::new(
            self.range_min.x + (c[0] as f64 + 0.5) * self.voxel_size.x,
            self.range_min.y + (c[1] as f64 + 0.5) * self.voxel_size.y,
            self.range_min.z + (c[2] as f64 + 0.5) * self.voxel_size.z,
        )
    }
}

/// Sparse feature volume: sorted unique integer coordinates with one
/// `channels`-wide feature row per coordinate.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SparseTensor {
    pub dims: [usize; 3],
    pub channels: usize,
    pub coords: Vec<[i32; 3]>,
    /// Row-major `coords.len() x channels`.
    pub features: Vec<f32>,
}

impl SparseTensor {
    pub fn new(
        dims: [usize; 3],
        channels: usize,
        coords: Vec<[i32; 3]>,
        features: Vec<f32>,
    ) -> Result<Self> {
        if channels == 0 {
            return Err(Error::DimensionMismatch("tensor needs >= 1 channel".into()));
        }
        if features.len() != coords.len() * channels {
            return Err(Error::DimensionMismatch(format!(
                "{} coords x {} channels != {} features",
                coords.len(),
                channels,
                features.len()
            )));
        }
        for c in &coords {
            for a in 0..3 {
                if c[a] < 0 || c[a] as usize >= dims[a] {
                    return Err(Error::DimensionMismatch(format!(
                        "coordinate {c:?} outside grid {dims:?}"
                    )));
                }
            }
        }
        let mut t = Self {
            dims,
            channels,
            coords,
            features,
        };
        t.sort_coords()?;
        Ok(t)
    }

    pub fn empty(dims: [usize; 3], channels: usize) -> Self {
        Self {
            dims,
            channels,
            coords: Vec::new(),
            features: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn feature(&self, i: usize) -> &[f32] {
        &self.features[i * self.channels..(i + 1) * self.channels]
    }

    /// Index of `coord` in the sorted coordinate list.
    pub fn find(&self, coord: [i32; 3]) -> Option<usize> {
        self.coords.binary_search(&coord).ok()
    }

    /// Restores the lexicographic coordinate order, rejecting duplicates.
    fn sort_coords(&mut self) -> Result<()> {
        if self.coords.windows(2).all(|w| w[0] < w[1]) {
            return Ok(());
        }
        let mut order: Vec<usize> = (0..self.coords.len()).collect();
        order.sort_unstable_by_key(|&i| self.coords[i]);
        let coords: Vec<[i32; 3]> = order.iter().map(|&i| self.coords[i]).collect();
        if let Some(w) = coords.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::DimensionMismatch(format!(
                "duplicate coordinate {:?}",
                w[0]
            )));
        }
        let c = self.channels;
        let mut features = Vec::with_capacity(self.features.len());
        for &i in &order {
            features.extend_from_slice(&self.features[i * c..(i + 1) * c]);
        }
        self.coords = coords;
        self.features = features;
        Ok(())
    }
}

/// Output of [`voxelize`]: the sparse tensor plus the grid it lives on.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseVoxelTensor {
    pub spec: VoxelGridSpec,
    pub tensor: SparseTensor,
    /// Number of input points that fell into each voxel.
    pub counts: Vec<u32>,
}

impl SparseVoxelTensor {
    pub fn coords(&self) -> &[[i32; 3]] {
        &self.tensor.coords
    }

    pub fn len(&self) -> usize {
        self.tensor.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensor.is_empty()
    }
}

/// One voxel per occupied cell, feature = mean of the absolute coordinates of
/// the points inside. Output is sorted by `(i, j, k)`; points outside the
/// range, including those exactly on `range_max`, are dropped.
pub fn voxelize(points: &[Vec3], spec: &VoxelGridSpec) -> Result<SparseVoxelTensor> {
    spec.validate()?;
    let dims = spec.dims();
    let linear = |c: [i32; 3]| -> u64 {
        (c[0] as u64 * dims[1] as u64 + c[1] as u64) * dims[2] as u64 + c[2] as u64
    };

    let mut keyed: Vec<(u64, [i32; 3], Vec3)> = points
        .iter()
        .filter_map(|&p| spec.voxel_index(p).map(|c| (linear(c), c, p)))
        .collect();
    // Sorting within a voxel by coordinate value fixes the summation order,
    // which makes the result independent of the input permutation.
    keyed.sort_unstable_by(|a, b| {
        a.0.cmp(&b.0)
            .then(a.2.x.total_cmp(&b.2.x))
            .then(a.2.y.total_cmp(&b.2.y))
            .then(a.2.z.total_cmp(&b.2.z))
    });

    let mut coords = Vec::new();
    let mut features = Vec::new();
    let mut counts = Vec::new();
    let mut start = 0;
    while start < keyed.len() {
        let key = keyed[start].0;
        let mut end = start;
        let mut sum = [0.0f64; 3];
        while end < keyed.len() && keyed[end].0 == key {
            let p = keyed[end].2;
            sum[0] += p.x;
            sum[1] += p.y;
            sum[2] += p.z;
            end += 1;
        }
        let n = (end - start) as f64;
        coords.push(keyed[start].1);
        features.extend(sum.iter().map(|s| (s / n) as f32));
        counts.push((end - start) as u32);
        start = end;
    }

    Ok(SparseVoxelTensor {
        spec: *spec,
        tensor: SparseTensor {
            dims,
            channels: 3,
            coords,
            features,
        },
        counts,
    })
}

/// Geometric center of every occupied voxel, parallel to the coordinates.
pub fn voxel_centers(t: &SparseVoxelTensor) -> Vec<Vec3> {
    t.tensor
        .coords
        .iter()
        .map(|&c| t.spec.voxel_center(c))
        .collect()
}
