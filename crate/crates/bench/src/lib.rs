//! Shared inputs for the benchmarks.

use fogflow_core::scene::make_scene;
use fogflow_core::{FlowField, ImageGrid, SceneConfig, SceneSample};

/// Smooth deterministic test pattern in `[0, 1]`.
pub fn pattern(height: usize, width: usize, channels: usize, phase: f64) -> ImageGrid {
    ImageGrid::from_fn(height, width, channels, |x, y, c| {
        0.5 + 0.5 * ((x as f64 * 0.37 + phase).sin() * (y as f64 * 0.23 + c as f64).cos())
    })
}

/// Sub-pixel flow with a rotational component.
pub fn swirl(height: usize, width: usize) -> FlowField {
    let (cx, cy) = (width as f64 / 2.0, height as f64 / 2.0);
    FlowField::from_fn(height, width, |x, y| {
        (0.05 * (y as f64 - cy) + 0.3, -0.05 * (x as f64 - cx))
    })
}

pub fn scene(size: usize) -> SceneSample {
    make_scene(&SceneConfig::random(size, size, 2, 7), 7).expect("valid scene")
}
