//! Building blocks for a two-stage LiDAR car detector that refines proposals
//! on small local point-cloud patches.
//!
//! The crate covers KITTI I/O, oriented-box geometry, voxel encoding,
//! residual box codecs, anchor matching, loss aggregation, training-patch
//! construction, patch-level inference and KITTI-style AP evaluation.
//! Data-parallel paths use rayon when the `parallel` feature is on and fall
//! back to sequential loops otherwise; both produce identical output.

pub mod anchors;
pub mod box_codec;
pub mod config;
mod error;
pub mod evaluator;
pub mod geometry;
pub mod inference;
pub mod kitti_io;
pub mod loss;
pub mod oracle;
pub mod par;
pub mod patch_pipeline;
pub mod seed;
pub mod selfcheck;
pub mod synthetic;
pub mod voxelizer;

pub use error::{Error, Result};

/// Crate version, shared with any language bindings.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
