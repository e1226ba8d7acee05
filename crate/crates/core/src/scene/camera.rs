use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

pub type Mat3 = [[f64; 3]; 3];
pub type Vec3 = [f64; 3];

pub const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

pub fn mat_vec(m: &Mat3, v: &Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, o) in row.iter_mut().enumerate() {
            *o = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn transpose(m: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in m.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            out[j][i] = *v;
        }
    }
    out
}

pub fn det(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

pub fn inverse(m: &Mat3) -> Option<Mat3> {
    let d = det(m);
    if d.abs() < 1e-300 {
        return None;
    }
    let c =
        |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    Some([
        [c(1, 2, 1, 2) / d, -c(0, 2, 1, 2) / d, c(0, 1, 1, 2) / d],
        [-c(1, 2, 0, 2) / d, c(0, 2, 0, 2) / d, -c(0, 1, 0, 2) / d],
        [c(1, 2, 0, 1) / d, -c(0, 2, 0, 1) / d, c(0, 1, 0, 1) / d],
    ])
}

/// Rotation from Euler angles in degrees, applied x then y then z.
pub fn rotation_from_euler_deg(angles: Vec3) -> Mat3 {
    let [ax, ay, az] = angles.map(f64::to_radians);
    let rx = [
        [1.0, 0.0, 0.0],
        [0.0, ax.cos(), -ax.sin()],
        [0.0, ax.sin(), ax.cos()],
    ];
    let ry = [
        [ay.cos(), 0.0, ay.sin()],
        [0.0, 1.0, 0.0],
        [-ay.sin(), 0.0, ay.cos()],
    ];
    let rz = [
        [az.cos(), -az.sin(), 0.0],
        [az.sin(), az.cos(), 0.0],
        [0.0, 0.0, 1.0],
    ];
    mat_mul(&rz, &mat_mul(&ry, &rx))
}

/// Pinhole intrinsics with zero skew.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn matrix(&self) -> Mat3 {
        [
            [self.fx, 0.0, self.cx],
            [0.0, self.fy, self.cy],
            [0.0, 0.0, 1.0],
        ]
    }

    /// `K^-1 p` for pixel `(x, y)`.
    #[inline]
    pub fn unproject(&self, x: f64, y: f64) -> Vec3 {
        [(x - self.cx) / self.fx, (y - self.cy) / self.fy, 1.0]
    }

    /// `K X / X_z`.
    #[inline]
    pub fn project(&self, p: &Vec3) -> (f64, f64) {
        (
            self.fx * p[0] / p[2] + self.cx,
            self.fy * p[1] / p[2] + self.cy,
        )
    }
}

/// Intrinsics, relative pose from frame `t` to `t+1`, and stereo baseline.
///
/// `rotation` / `translation` are the point transform `X' = R X + t` that
/// maps a 3-D point in camera-`t` coordinates into camera-`t+1`
/// coordinates. Use [`CameraModel::from_ego_motion`] to build one from the
/// camera's own motion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub intrinsics: Intrinsics,
    pub rotation: Mat3,
    pub translation: Vec3,
    pub baseline: f64,
}

impl CameraModel {
    pub fn new(
        intrinsics: Intrinsics,
        rotation: Mat3,
        translation: Vec3,
        baseline: f64,
    ) -> Result<Self> {
        let cam = Self {
            intrinsics,
            rotation,
            translation,
            baseline,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn identity(intrinsics: Intrinsics, baseline: f64) -> Self {
        Self {
            intrinsics,
            rotation: IDENTITY,
            translation: [0.0; 3],
            baseline,
        }
    }

    /// Camera rotates by `rotation_deg` and its centre moves by
    /// `translation_m`, both expressed in the frame-`t` camera coordinates.
    pub fn from_ego_motion(
        intrinsics: Intrinsics,
        rotation_deg: Vec3,
        translation_m: Vec3,
        baseline: f64,
    ) -> Result<Self> {
        let rc = rotation_from_euler_deg(rotation_deg);
        let r = transpose(&rc);
        let t = mat_vec(&r, &translation_m).map(|v| -v);
        Self::new(intrinsics, r, t, baseline)
    }

    pub fn validate(&self) -> Result<()> {
        let k = &self.intrinsics;
        ensure(k.fx > 0.0 && k.fy > 0.0, || {
            Error::InvalidArgument(format!("focal lengths must be positive: {} {}", k.fx, k.fy))
        })?;
        let rrt = mat_mul(&self.rotation, &transpose(&self.rotation));
        let orth = (0..3).all(|i| (0..3).all(|j| (rrt[i][j] - IDENTITY[i][j]).abs() <= 1e-9));
        ensure(orth && (det(&self.rotation) - 1.0).abs() <= 1e-9, || {
            Error::InvalidArgument("rotation is not orthonormal with det 1".into())
        })?;
        ensure(
            self.translation.iter().all(|v| v.is_finite()) && self.baseline.is_finite(),
            || Error::NonFinite("camera translation".into()),
        )
    }

    /// Moves a camera-`t` point into camera-`t+1` coordinates.
    #[inline]
    pub fn transform(&self, p: &Vec3) -> Vec3 {
        let r = mat_vec(&self.rotation, p);
        [
            r[0] + self.translation[0],
            r[1] + self.translation[1],
            r[2] + self.translation[2],
        ]
    }
}
