//! Non-learned building blocks of a camera-based 3D panoptic occupancy
//! pipeline: voxel grids and camera geometry, deformable-attention sampling
//! kernels, temporal alignment, occupancy sparsification, supervision
//! targets, losses with analytic gradients, box-driven panoptic refinement
//! and mIoU / PQ / PQ† evaluation.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod geometry;
pub mod grid;
pub mod harness;
pub mod io;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod refine;
pub mod sparsify;
pub mod supervision;
pub mod taxonomy;
pub mod temporal;

pub use error::{Error, Result};
pub use grid::{
    BinaryMask, Coord, DenseVolume, InstanceGrid, ScoreGrid, SemanticGrid, SparseVolume,
    VoxelGridSpec,
};
pub use taxonomy::Taxonomy;
