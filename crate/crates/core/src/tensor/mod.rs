//! Raster containers, sampling, and the differentiable op vocabulary.

pub mod autodiff;
pub mod gradcheck;
pub mod grid;
pub mod params;
pub mod sample;

pub use autodiff::{ConvSpec, Gradients, Graph, Var};
pub use gradcheck::grad_check;
pub use grid::{DepthMap, FlowField, ImageGrid, Mask};
pub use params::{Bound, Param, ParamStore};
pub use sample::{bilinear_sample, laplacian, warp, warp_with_mask};
