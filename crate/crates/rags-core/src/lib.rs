//! Radar-camera fusion over a 3D Gaussian field, desk scale.
//!
//! The pipeline initializes Gaussian positions from foreground unprojection,
//! radar returns, and in-frustum furthest-point samples; runs iterative
//! rounds of 3D deformable cross-attention, sparse-voxel fusion with
//! height-replicated radar pillars, and frustum-space position refinement;
//! then rasterizes the last levels into BEV feature maps, fuses them with
//! radar pillars, and renders a perspective depth map. Every geometric and
//! rendering step is deterministic under fixed seeds and checked against
//! brute-force oracles and finite-difference gradients in the test suite.

pub mod bench;
pub mod bev;
pub mod camera;
pub mod config;
pub mod error;
pub mod eval;
pub mod field;
pub mod grid;
pub mod fli;
pub mod ima;
pub mod io;
pub mod nn;
pub mod pipeline;
pub mod radar;
pub mod scene;
pub mod splat;
pub mod tensor;
pub mod volume;

pub use bev::BevGrid;
pub use camera::CameraModel;
pub use error::{Error, Result};
pub use field::GaussianField;
pub use grid::{Bounds3, VoxelGridSpec};
pub use radar::{PillarSet, RadarCloud, RadarPoint};
pub use scene::{Box3D, Scene, SceneSpec};
pub use tensor::Tensor;
pub use volume::FeatureVolume;
