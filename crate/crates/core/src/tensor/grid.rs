//! Raster containers shared by every stage of the pipeline.
//!
//! All grids are stored row-major with channels interleaved (`H x W x C`),
//! so the value of channel `c` at pixel `(x, y)` lives at
//! `(y * width + x) * channels + c`.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Dense `H x W x C` raster of reals. Used for images, feature maps,
/// cost volumes and (with two channels) flow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageGrid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageGrid {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        ensure(height > 0 && width > 0 && channels > 0, || {
            Error::InvalidArgument(format!("empty grid {height}x{width}x{channels}"))
        })?;
        ensure(data.len() == height * width * channels, || {
            Error::ExtentMismatch(format!(
                "data length {} for {height}x{width}x{channels}",
                data.len()
            ))
        })?;
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Builds a grid by evaluating `f(x, y, c)` at every element.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.index(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        let i = self.index(x, y, c);
        self.data[i] = v;
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = self.index(x, y, 0);
        &self.data[i..i + self.channels]
    }

    pub fn same_extent(&self, other: &ImageGrid) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn same_shape(&self, other: &ImageGrid) -> bool {
        self.same_extent(other) && self.channels == other.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Copies one channel out as a single-channel grid.
    pub fn channel(&self, c: usize) -> ImageGrid {
        ImageGrid::from_fn(self.height, self.width, 1, |x, y, _| self.get(x, y, c))
    }

    /// Channel mean, producing a single-channel grid.
    pub fn to_gray(&self) -> ImageGrid {
        let n = self.channels as f64;
        ImageGrid::from_fn(self.height, self.width, 1, |x, y, _| {
            self.pixel(x, y).iter().sum::<f64>() / n
        })
    }

    pub(crate) fn check_extent(&self, other: &ImageGrid, what: &str) -> Result<()> {
        ensure(self.same_extent(other), || {
            Error::ExtentMismatch(format!(
                "{what}: {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            ))
        })
    }
}

/// Per-pixel displacement `(u, v)` in pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowField {
    grid: ImageGrid,
}

impl FlowField {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            grid: ImageGrid::zeros(height, width, 2),
        }
    }

    pub fn constant(height: usize, width: usize, u: f64, v: f64) -> Self {
        Self::from_fn(height, width, |_, _| (u, v))
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> (f64, f64),
    ) -> Self {
        let mut grid = ImageGrid::zeros(height, width, 2);
        for y in 0..height {
            for x in 0..width {
                let (u, v) = f(x, y);
                grid.set(x, y, 0, u);
                grid.set(x, y, 1, v);
            }
        }
        Self { grid }
    }

    pub fn from_grid(grid: ImageGrid) -> Result<Self> {
        ensure(grid.channels() == 2, || {
            Error::InvalidArgument(format!("flow needs 2 channels, got {}", grid.channels()))
        })?;
        Ok(Self { grid })
    }

    pub fn height(&self) -> usize {
        self.grid.height()
    }

    pub fn width(&self) -> usize {
        self.grid.width()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> (f64, f64) {
        let i = self.grid.index(x, y, 0);
        (self.grid.data()[i], self.grid.data()[i + 1])
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, u: f64, v: f64) {
        self.grid.set(x, y, 0, u);
        self.grid.set(x, y, 1, v);
    }

    pub fn as_grid(&self) -> &ImageGrid {
        &self.grid
    }

    pub fn into_grid(self) -> ImageGrid {
        self.grid
    }

    pub fn is_finite(&self) -> bool {
        self.grid.is_finite()
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            grid: self.grid.map(|v| v * s),
        }
    }

    pub fn max_magnitude(&self) -> f64 {
        (0..self.height())
            .flat_map(|y| (0..self.width()).map(move |x| (x, y)))
            .map(|(x, y)| {
                let (u, v) = self.get(x, y);
                u.hypot(v)
            })
            .fold(0.0, f64::max)
    }
}

/// Binary or soft per-pixel mask in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Mask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self::filled(height, width, 1.0)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Sum of `1 - m`, the weight of the unmasked region.
    pub fn complement_sum(&self) -> f64 {
        self.data.iter().map(|m| 1.0 - m).sum()
    }

    pub fn complement(&self) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|m| 1.0 - m).collect(),
        }
    }

    pub fn count_set(&self) -> usize {
        self.data.iter().filter(|&&m| m >= 0.5).count()
    }

    pub fn to_grid(&self) -> ImageGrid {
        ImageGrid::from_vec(self.height, self.width, 1, self.data.clone())
            .expect("mask extent is non-empty")
    }

    /// Intersection-over-union of the thresholded masks.
    pub fn iou(&self, other: &Mask) -> f64 {
        let (mut inter, mut union) = (0usize, 0usize);
        for (a, b) in self.data.iter().zip(&other.data) {
            let (a, b) = (*a >= 0.5, *b >= 0.5);
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }
}


/// Per-pixel metric depth, strictly positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthMap {
    grid: ImageGrid,
}

impl DepthMap {
    pub fn new(grid: ImageGrid) -> Result<Self> {
        ensure(grid.channels() == 1, || {
            Error::InvalidArgument(format!("depth needs 1 channel, got {}", grid.channels()))
        })?;
        ensure(
            grid.data().iter().all(|d| d.is_finite() && *d > 0.0),
            || Error::InvalidArgument("depth must be positive and finite".into()),
        )?;
        Ok(Self { grid })
    }

    pub fn constant(height: usize, width: usize, depth: f64) -> Result<Self> {
        Self::new(ImageGrid::filled(height, width, 1, depth))
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self> {
        Self::new(ImageGrid::from_fn(height, width, 1, |x, y, _| f(x, y)))
    }

    pub fn height(&self) -> usize {
        self.grid.height()
    }

    pub fn width(&self) -> usize {
        self.grid.width()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.grid.get(x, y, 0)
    }

    pub fn as_grid(&self) -> &ImageGrid {
        &self.grid
    }

    pub fn into_grid(self) -> ImageGrid {
        self.grid
    }

    /// `fx * baseline / depth`, the horizontal stereo disparity in pixels.
    pub fn to_disparity(&self, fx: f64, baseline: f64) -> ImageGrid {
        self.grid.map(|d| fx * baseline / d)
    }
}
