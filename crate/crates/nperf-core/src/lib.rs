//! Desk-scale point-based editable neural rendering.
//!
//! A neural point cloud (positions, confidences, feature vectors) is rendered
//! by volume compositing; objects are segmented from 2D masks into 3D index
//! sets, edited through rigid or deformable transforms, and the vacated empty
//! regions are re-initialized by differentiable neural-point resampling
//! before per-scene fine-tuning. Mutual-information diagnostics quantify how
//! much resampling couples rays across views.
//!
//! Module map:
//! - [`scene`]: domain types and the deterministic synthetic-scene generator
//! - [`geometry`]: projections, rigid/deformable edits, mask lifting and
//!   registration
//! - [`spatial`]: exact kd-tree KNN / radius queries
//! - [`dnr`]: the NI / KWA / GWFA resampling strategies and target planning
//! - [`renderer`]: differentiable point-based volume renderer
//! - [`infotheory`]: ray entropy and mutual-information estimators
//! - [`train`]: the fine-tuning loop and convergence measurement
//! - [`metrics`]: PSNR / SSIM on float images

pub mod dnr;
pub mod error;
pub mod geometry;
pub mod infotheory;
pub mod math;
pub mod metrics;
pub mod parallel;
pub mod renderer;
pub mod scene;
pub mod spatial;
pub mod train;

pub use error::{Error, Result};
pub use math::{Mat3, Vec3};
pub use scene::{Camera, DepthMap, Mask2D, Mask3D, NeuralPointCloud, Ray, SceneSpec};
