//! Feed-forward Gaussian splatting for camera-rig robustness: lifting
//! multi-camera images into 3D Gaussians, a tile-based differentiable
//! rasterizer, novel-rig view synthesis, cross-view distillation, an
//! instance memory bank and a synthetic unseen-rig benchmark.

pub mod distill;
pub mod error;
pub mod gaussians;
pub mod harness;
pub mod geometry;
pub mod image;
pub mod losses;
pub mod membank;
pub mod pipeline;
pub mod rasterizer;
pub mod sh;

pub use error::{Error, Result};
pub use gaussians::{AnalyticHead, DepthMap, FeatureMap, GaussianPrimitive, GaussianSet, LinearHead, ParamHead};
pub use geometry::{Camera, CameraExtrinsics, CameraIntrinsics, CameraRig, RigDelta, RigDeltaRange};
pub use image::Image;
pub use losses::{PerceptualMetric, Ssim};
pub use membank::{InstanceRecord, MemoryBank};
pub use pipeline::{FeatureExtractor, Pipeline};
pub use rasterizer::{rasterize, rasterize_reference, RasterConfig, RenderTarget};
