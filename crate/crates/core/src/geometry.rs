//! Rigid flow from depth and pose, forward-backward occlusion, and the
//! non-rigid region.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::scene::camera::{CameraModel, IDENTITY};
use crate::scene::Z_MIN;
use crate::tensor::{bilinear_sample, DepthMap, FlowField, Mask};

pub const OCC_ALPHA1: f64 = 0.01;
pub const OCC_ALPHA2: f64 = 0.5;
pub const DEFAULT_TAU: f64 = 1.0;

/// Rigid flow plus the pixels whose transformed point fell behind the
/// camera (their flow is zero and they should be left out of losses).
#[derive(Debug, Clone, PartialEq)]
pub struct RigidFlow {
    pub flow: FlowField,
    pub invalid: Mask,
}

/// `p' = K (R D(p) K^-1 p + t) / z'`, `F = p' - p`.
pub fn project_rigid_flow(depth: &DepthMap, cam: &CameraModel) -> Result<RigidFlow> {
    cam.validate()?;
    let (h, w) = (depth.height(), depth.width());
    let k = &cam.intrinsics;
    let mut flow = FlowField::zeros(h, w);
    let mut invalid = Mask::zeros(h, w);
    if cam.rotation == IDENTITY && cam.translation == [0.0; 3] {
        return Ok(RigidFlow { flow, invalid });
    }
    for y in 0..h {
        for x in 0..w {
            let d = depth.get(x, y);
            let ray = k.unproject(x as f64, y as f64);
            let moved = cam.transform(&[ray[0] * d, ray[1] * d, ray[2] * d]);
            if moved[2] <= Z_MIN {
                invalid.set(x, y, 1.0);
                continue;
            }
            let (px, py) = k.project(&moved);
            flow.set(x, y, px - x as f64, py - y as f64);
        }
    }
    ensure(invalid.count_set() < h * w, || {
        Error::InvalidArgument("every pixel projects behind the camera".into())
    })?;
    Ok(RigidFlow { flow, invalid })
}

fn occlusion_one_way(fwd: &FlowField, bwd: &FlowField, alpha1: f64, alpha2: f64) -> Mask {
    let grid = bwd.as_grid();
    Mask::from_fn(fwd.height(), fwd.width(), |x, y| {
        let (u, v) = fwd.get(x, y);
        let (b, _) = bilinear_sample(grid, x as f64 + u, y as f64 + v);
        let (du, dv) = (u + b[0], v + b[1]);
        let lhs = du * du + dv * dv;
        let rhs = alpha1 * (u * u + v * v + b[0] * b[0] + b[1] * b[1]) + alpha2;
        (lhs > rhs) as u8 as f64
    })
}

/// Forward-backward consistency check. Returns `(O_f, O_b)`: `O_f` is
/// defined on frame-`t` pixels, `O_b` on frame-`t+1` pixels.
pub fn fb_occlusion(
    fwd: &FlowField,
    bwd: &FlowField,
    alpha1: f64,
    alpha2: f64,
) -> Result<(Mask, Mask)> {
    fwd.as_grid().check_extent(bwd.as_grid(), "fb_occlusion")?;
    Ok((
        occlusion_one_way(fwd, bwd, alpha1, alpha2),
        occlusion_one_way(bwd, fwd, alpha1, alpha2),
    ))
}

/// How the non-rigid region `V` is extracted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum NonRigidRule {
    /// `|F - F_rigid| > tau`.
    Residual { tau: f64 },
    /// The forward-backward test form applied to `F` against `F_rigid`:
    /// `|F - F_rigid|^2 > alpha1 (|F|^2 + |F_rigid|^2) + alpha2`.
    Occlusion { alpha1: f64, alpha2: f64 },
}

impl Default for NonRigidRule {
    fn default() -> Self {
        NonRigidRule::Residual { tau: DEFAULT_TAU }
    }
}

pub fn nonrigid_mask(flow: &FlowField, rigid: &FlowField, tau: f64) -> Result<Mask> {
    nonrigid_region(flow, rigid, NonRigidRule::Residual { tau })
}

pub fn nonrigid_region(flow: &FlowField, rigid: &FlowField, rule: NonRigidRule) -> Result<Mask> {
    flow.as_grid()
        .check_extent(rigid.as_grid(), "nonrigid_mask")?;
    if let NonRigidRule::Residual { tau } = rule {
        ensure(tau > 0.0, || {
            Error::InvalidArgument(format!("tau must be positive, got {tau}"))
        })?;
    }
    Ok(Mask::from_fn(flow.height(), flow.width(), |x, y| {
        let (u, v) = flow.get(x, y);
        let (ur, vr) = rigid.get(x, y);
        let r2 = (u - ur).powi(2) + (v - vr).powi(2);
        let set = match rule {
            NonRigidRule::Residual { tau } => r2.sqrt() > tau,
            NonRigidRule::Occlusion { alpha1, alpha2 } => {
                r2 > alpha1 * (u * u + v * v + ur * ur + vr * vr) + alpha2
            }
        };
        set as u8 as f64
    }))
}
