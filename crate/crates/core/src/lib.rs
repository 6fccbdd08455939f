//! Surface reconstruction from aerial multi-view imagery with differentiable
//! Gaussian splatting.
//!
//! The pipeline ingests a sparse structure-from-motion model plus the source
//! images, partitions large captures into overlapping ground-plane blocks,
//! optimizes a 3D Gaussian scene per block with photometric and geometric
//! losses, merges the blocks, fuses rendered depth into a TSDF volume, and
//! extracts a triangle mesh. Everything runs on the CPU and is deterministic
//! for a fixed seed.
//!
//! Core math is generic over the scalar type (see [`scalar::Scalar`]); the
//! [`Real`] alias pins the precision used by the shipped pipeline.

pub mod error;
pub mod eval;
pub mod gaussians;
pub mod geom;
pub mod losses;
pub mod mesh;
pub mod partition;
pub mod pipeline;
pub mod raster;
pub mod render;
pub mod scalar;
pub mod scene;
pub mod spatial;
pub mod synth;
pub mod train;
pub mod tsdf;

pub use error::Error;

/// Scalar type used by the full pipeline and the CLI.
pub type Real = f64;

/// Single- and double-precision aliases for the main scene containers.
pub type CameraViewF32 = scene::CameraView<f32>;
pub type CameraViewF64 = scene::CameraView<f64>;
pub type SfmSceneF32 = scene::SfmScene<f32>;
pub type SfmSceneF64 = scene::SfmScene<f64>;
pub type GaussianSceneF32 = gaussians::GaussianScene<f32>;
pub type GaussianSceneF64 = gaussians::GaussianScene<f64>;
pub type DepthMapF32 = raster::DepthMap<f32>;
pub type DepthMapF64 = raster::DepthMap<f64>;
pub type TriangleMeshF32 = mesh::TriangleMesh<f32>;
pub type TriangleMeshF64 = mesh::TriangleMesh<f64>;
