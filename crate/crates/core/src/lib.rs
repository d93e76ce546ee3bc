//! Non-learned computational pipeline of a part-aware, part-aggregation
//! LiDAR 3D object detector.
//!
//! The crate covers everything around the learned network: voxelization,
//! intra-object part label generation, proposal target codecs, anchor
//! generation and assignment, RoI-aware point cloud pooling, a forward-only
//! sparse convolution engine, losses with analytic gradients, rotated IoU and
//! NMS, evaluation metrics and KITTI-format I/O.
//!
//! Coordinates follow the LiDAR convention: x forward, y left, z up. A box
//! with yaw `theta = 0` has its length along +x.

pub mod anchorgen;
pub mod codec;
pub mod error;
pub mod evalkit;
pub mod geom;
pub mod kittio;
pub mod losses;
pub mod partlabel;
pub mod pipeline;
pub mod postproc;
pub mod roipool;
pub mod sparseconv;
pub mod voxel;

pub use error::{Error, Result};
pub use geom::{BoxParams, CanonicalFrame, Vec3};
pub use postproc::ScoredBox;
pub use voxel::{SparseTensor, SparseVoxelTensor, VoxelGridSpec};
