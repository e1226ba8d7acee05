//! Unsupervised two-stage domain adaptation for optical flow under fog.
//!
//! The pipeline first transfers motion knowledge from clean frames to
//! synthetically fogged frames (depth-driven fog rendering plus rigid-flow
//! geometry), then from synthetic fog to a shifted "real" fog domain by
//! aligning cost-volume correlation histograms and distilling
//! pseudo-labels into an EMA-coupled encoder.

pub mod cda;
pub mod cost_volume;
pub mod error;
pub mod eval;
pub mod flownet;
pub mod fog;
pub mod geometry;
pub mod losses;
pub mod scene;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scene::{SceneConfig, SceneSample};
pub use tensor::{DepthMap, FlowField, ImageGrid, Mask, ParamStore};
