//! Desk-scale neural-implicit semantic SLAM.
//!
//! The system jointly optimizes hierarchical axis-aligned feature planes, a
//! set of small decoder/fusion networks, and camera poses from an RGB-D
//! stream with per-pixel semantic labels. Scene geometry is modeled as a
//! truncated signed distance field rendered by SDF-based volume rendering;
//! semantics are rendered along a separate density path whose SDF input is
//! gradient-detached. A synthetic scene generator with an exact SDF oracle
//! stands in for recorded datasets during evaluation.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod decoders;
pub mod error;
pub mod eval;
pub mod frontend;
pub mod fusion;
pub mod losses;
pub mod mesh;
pub mod params;
pub mod pose;
pub mod renderer;
pub mod runtime;
pub mod scene_grid;

pub use error::{Error, Result};
