//! Differentiable 3D Gaussian splatting for dense SLAM: scene model, EWA
//! projection, tile rasterization with compositing logs, backpropagation and
//! the tracking/mapping loop with adaptive pruning and dynamic downsampling.
//!
//! Everything is generic over [`Real`] (f32 or f64); the aliases below fix the
//! scalar for callers that do not care.

pub mod backprop;
pub mod gradcheck;
pub mod io;
pub mod math;
pub mod projection;
pub mod raster;
pub mod scalar;
pub mod scene;
pub mod slam;
pub mod synth;

pub use scalar::Real;

pub type Gaussian3D64 = scene::Gaussian3D<f64>;
pub type Gaussian3D32 = scene::Gaussian3D<f32>;
pub type Scene64 = scene::Scene<f64>;
pub type Scene32 = scene::Scene<f32>;
pub type CameraPose64 = scene::CameraPose<f64>;
pub type CameraPose32 = scene::CameraPose<f32>;
pub type FrameState64 = scene::FrameState<f64>;
pub type FrameState32 = scene::FrameState<f32>;
pub type RenderRecord64 = raster::RenderRecord<f64>;
pub type RenderRecord32 = raster::RenderRecord<f32>;
pub type GradientSet64 = backprop::GradientSet<f64>;
pub type GradientSet32 = backprop::GradientSet<f32>;
