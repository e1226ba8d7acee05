//! Homogeneous atmospheric-scattering fog and its inverse.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::tensor::{DepthMap, ImageGrid};

/// Light-fog extinction (1/m).
pub const BETA_LIGHT: f64 = 0.03;
/// Dense-fog extinction (1/m).
pub const BETA_DENSE: f64 = 0.12;
pub const DEFAULT_AIRLIGHT: f64 = 0.8;
/// Transmittance floor used by [`defog`].
pub const T_MIN: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FogParams {
    pub beta: f64,
    /// Atmospheric light per channel. One-channel images use the first entry.
    #[serde(rename = "A", alias = "airlight")]
    pub airlight: [f64; 3],
}

impl Default for FogParams {
    fn default() -> Self {
        Self::dense()
    }
}

impl FogParams {
    pub fn new(beta: f64, airlight: f64) -> Result<Self> {
        let p = Self {
            beta,
            airlight: [airlight; 3],
        };
        p.validate()?;
        Ok(p)
    }

    pub fn light() -> Self {
        Self {
            beta: BETA_LIGHT,
            airlight: [DEFAULT_AIRLIGHT; 3],
        }
    }

    pub fn dense() -> Self {
        Self {
            beta: BETA_DENSE,
            airlight: [DEFAULT_AIRLIGHT; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.beta.is_finite() && self.beta >= 0.0, || {
            Error::InvalidArgument(format!(
                "fog beta must be finite and >= 0, got {}",
                self.beta
            ))
        })?;
        ensure(self.airlight.iter().all(|a| *a > 0.0 && *a <= 1.0), || {
            Error::InvalidArgument(format!(
                "airlight must lie in (0, 1], got {:?}",
                self.airlight
            ))
        })
    }

    fn light_for(&self, channels: usize, c: usize) -> f64 {
        if channels == 3 {
            self.airlight[c]
        } else {
            self.airlight[0]
        }
    }
}

/// `t = exp(-beta * D)`.
pub fn transmittance(depth: &DepthMap, beta: f64) -> Result<ImageGrid> {
    ensure(beta.is_finite() && beta >= 0.0, || {
        Error::InvalidArgument(format!("fog beta must be finite and >= 0, got {beta}"))
    })?;
    Ok(depth.as_grid().map(|d| (-beta * d).exp()))
}

/// Applies `out = I * t + A * (1 - t)` per pixel, given a transmittance map.
pub fn blend_with_transmittance(
    clean: &ImageGrid,
    t: &ImageGrid,
    params: &FogParams,
) -> Result<ImageGrid> {
    clean.check_extent(t, "fog")?;
    let c = clean.channels();
    Ok(ImageGrid::from_fn(
        clean.height(),
        clean.width(),
        c,
        |x, y, ch| {
            let tp = t.get(x, y, 0);
            clean.get(x, y, ch) * tp + params.light_for(c, ch) * (1.0 - tp)
        },
    ))
}

pub fn add_fog(clean: &ImageGrid, depth: &DepthMap, params: &FogParams) -> Result<ImageGrid> {
    params.validate()?;
    let t = transmittance(depth, params.beta)?;
    blend_with_transmittance(clean, &t, params)
}

/// Inverts [`add_fog`]: `I = (J - A * (1 - t)) / t` with `t` clamped to
/// [`T_MIN`].
pub fn defog(foggy: &ImageGrid, depth: &DepthMap, params: &FogParams) -> Result<ImageGrid> {
    params.validate()?;
    let t = transmittance(depth, params.beta)?;
    foggy.check_extent(&t, "defog")?;
    let c = foggy.channels();
    Ok(ImageGrid::from_fn(
        foggy.height(),
        foggy.width(),
        c,
        |x, y, ch| {
            let tp = t.get(x, y, 0).max(T_MIN);
            let a = params.light_for(c, ch);
            (foggy.get(x, y, ch) - a * (1.0 - tp)) / tp
        },
    ))
}

/// Sensor model for the shifted fog domain: gamma curve then additive
/// Gaussian noise, clipped to `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorModel {
    pub gamma: f64,
    pub noise_sigma: f64,
}

impl Default for SensorModel {
    fn default() -> Self {
        Self {
            gamma: 1.2,
            noise_sigma: 0.01,
        }
    }
}

impl SensorModel {
    pub fn apply(&self, img: &ImageGrid, seed: u64) -> Result<ImageGrid> {
        ensure(self.gamma > 0.0 && self.noise_sigma >= 0.0, || {
            Error::InvalidArgument(format!("bad sensor model {self:?}"))
        })?;
        let noise = Normal::new(0.0, self.noise_sigma)
            .map_err(|e| Error::InvalidArgument(format!("sensor noise: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = img.clone();
        for v in out.data_mut() {
            let n = noise.sample(&mut rng);
            *v = (v.clamp(0.0, 1.0).powf(self.gamma) + n).clamp(0.0, 1.0);
        }
        Ok(out)
    }
}

/// Fog followed by the sensor model.
pub fn add_fog_with_sensor(
    clean: &ImageGrid,
    depth: &DepthMap,
    params: &FogParams,
    sensor: &SensorModel,
    seed: u64,
) -> Result<ImageGrid> {
    sensor.apply(&add_fog(clean, depth, params)?, seed)
}
