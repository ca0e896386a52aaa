//! Prediction of 3D radiotherapy dose volumes from CT volumes that live on
//! mismatched grids (different origins, spacings, and sizes).
//!
//! The pipeline builds a bipartite graph between CT voxel centers and dose
//! voxel centers, embeds CT nodes with a small image encoder, embeds dose
//! nodes with sinusoidal positional encodings of their distance/angle to the
//! PTV center, and regresses per-voxel dose with message passing. Two
//! baseline heuristics (greedy nearest-voxel resampling, k-nearest embedding
//! averaging) share the same encoders for comparison.
//!
//! Everything is deterministic: a single seed drives phantom generation,
//! parameter initialization, and epoch shuffling through named sub-streams,
//! and all parallel reductions run over fixed-size chunks so results do not
//! depend on the worker count.

pub mod autodiff;
pub mod cli;
pub mod error;
pub mod eval;
pub mod graph;
pub mod model;
pub mod parallel;
pub mod phantom;
pub mod rng;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
