//! Boundary- and occupancy-aware Gaussian surfel scene segmentation on the CPU.
//!
//! The crate implements a differentiable surfel splatting renderer with a
//! per-pixel boundary penalty channel, multiview mask refinement by depth
//! reprojection and majority voting, contribution-weighted class assignment,
//! per-class visibility voxel grids with an occupancy penalty on unseen
//! geometry, a two-phase trainer, segmentation metrics (Acc / IoU / BIoU for
//! both extracted and rendered protocols), and a deterministic synthetic
//! benchmark factory.
//!
//! Everything runs in `f64` on the CPU and is bit-reproducible for a fixed
//! seed at any thread count. See the crate `examples/` for runnable entry
//! points per capability and the `beags` binary for the pipeline CLI.

pub mod camera;
pub mod cli;
pub mod error;
pub mod image2;
pub mod io;
pub mod metrics;
pub mod occupancy;
pub mod raster;
pub mod scenegen;
pub mod seeding;
pub mod semantics;
pub mod surfel;
pub mod trainer;

pub use camera::Camera;
pub use error::{Error, Result};
pub use image2::{ClassImage, ColorImage, Image2, ScalarImage, EMPTY_CLASS};
pub use raster::{ParamGrads, RenderOptions, RenderOutput};
pub use surfel::{GaussianSurfel, Ray, SplatHit};
pub use trainer::LossConfig;

/// 3-vectors everywhere are world-space `f64`.
pub type Vec3 = nalgebra::Vector3<f64>;
/// 2-vectors are pixel or UV coordinates.
pub type Vec2 = nalgebra::Vector2<f64>;
