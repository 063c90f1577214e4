//! Sparse query-based 3D occupancy prediction with multi-level
//! teacher/student distillation, trained on procedurally generated indoor
//! scenes.
//!
//! The crate is organised bottom-up:
//!
//! * [`scene`]: voxel grids, point sets, metrics and the scene file format.
//! * [`matching`]: Hungarian assignment and exact nearest-neighbour search.
//! * [`losses`]: task and distillation losses with analytic gradients.
//! * [`model`]: toy encoder, query decoder, depth branch, checkpoints.
//! * [`distill`]: anchor sampling and the per-scene distillation step.
//! * [`syndata`]: synthetic rooms and exact voxel ray casting.
//! * [`train`]: AdamW, training loops and the gradient-check harness.
//! * [`cli`]: the `discene` command-line front end.
//!
//! Data-parallel loops go through [`par`], which uses rayon when the
//! `parallel` feature is enabled and falls back to plain iterators otherwise.

pub mod cli;
pub mod distill;
pub mod error;
pub mod geometry;
pub mod kinks;
pub mod losses;
pub mod matching;
pub mod model;
pub mod par;
pub mod scene;
pub mod syndata;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
