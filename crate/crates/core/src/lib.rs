// NaN-rejecting checks are written as `!(x > 0.0)` on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
//! Reconstruction of powder-bed-fusion part geometry from laser-power and
//! galvanometer traces.
//!
//! The processing chain is: load a [`trace_io::SignalTrace`], binarize the
//! laser channel and smooth the galvo channels ([`signal_prep`]), split the
//! print into layers ([`segmentation`]), bin sintered samples into a
//! [`grid::VoxelGrid`] ([`rasterizer`]), clean and fill it ([`voxel_ops`]),
//! correct distortion ([`geometry`]) and compare against a reference mesh
//! ([`evaluation`]). [`sim`] produces synthetic traces with known answers.

pub mod calibration;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod grid;
pub mod rasterizer;
pub mod segmentation;
pub mod signal_prep;
pub mod sim;
pub mod trace_io;
pub mod voxel_ops;

pub use error::{Error, Result};
pub use grid::{grid_to_cloud, RasterSpec, VoxelGrid, VoxelKey};
pub use trace_io::{CloudPoint, PointCloud, SignalTrace};
