//! Values stored in the committed fixture files.

use std::path::{Path, PathBuf};

use fogflow_core::flownet::{FlowNet, NetConfig};
use fogflow_core::{FlowField, ImageGrid};

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

pub fn golden_flow() -> FlowField {
    FlowField::from_fn(3, 4, |x, y| (x as f64 * 0.5 - 1.0, y as f64 * 0.25 + 0.125))
}

pub fn golden_depth() -> ImageGrid {
    ImageGrid::from_fn(3, 4, 1, |x, y, _| 5.0 + x as f64 * 2.5 + y as f64)
}

pub fn golden_stack() -> ImageGrid {
    ImageGrid::from_fn(3, 4, 3, |x, y, c| (x + 4 * y + 12 * c) as f64 / 64.0)
}

pub fn golden_image() -> ImageGrid {
    ImageGrid::from_fn(3, 4, 3, |x, y, c| {
        ((37 * x + 71 * y + 113 * c) % 256) as f64 / 255.0
    })
}

pub fn golden_net() -> FlowNet {
    let cfg = NetConfig {
        enc1: 2,
        enc2: 2,
        dec_hidden: 2,
        disp_hidden: 2,
        ..NetConfig::default()
    };
    FlowNet::new(cfg, 11)
        .unwrap()
        .with_disparity_head(12)
        .unwrap()
}
