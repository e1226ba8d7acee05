use crate::error::{ensure, Error, Result};
use crate::tensor::grid::{FlowField, ImageGrid, Mask};

/// Interpolation taps for one sample point after border clamping.
///
/// `dx_live` / `dy_live` are false when the coordinate was clamped, in which
/// case the sample does not move with that coordinate.
#[derive(Debug, Clone, Copy)]
pub struct Taps {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    pub ax: f64,
    pub ay: f64,
    pub dx_live: bool,
    pub dy_live: bool,
    pub out_of_bounds: bool,
}

impl Taps {
    pub fn new(width: usize, height: usize, x: f64, y: f64) -> Self {
        let max_x = (width - 1) as f64;
        let max_y = (height - 1) as f64;
        let out_of_bounds = !(0.0..=max_x).contains(&x) || !(0.0..=max_y).contains(&y);
        let cx = x.clamp(0.0, max_x);
        let cy = y.clamp(0.0, max_y);
        let x0 = (cx.floor() as usize).min(width - 1);
        let y0 = (cy.floor() as usize).min(height - 1);
        Taps {
            x0,
            y0,
            x1: (x0 + 1).min(width - 1),
            y1: (y0 + 1).min(height - 1),
            ax: cx - x0 as f64,
            ay: cy - y0 as f64,
            dx_live: (0.0..max_x).contains(&x),
            dy_live: (0.0..max_y).contains(&y),
            out_of_bounds,
        }
    }

    /// Corner weights in the order (x0,y0), (x1,y0), (x0,y1), (x1,y1).
    #[inline]
    pub fn weights(&self) -> [f64; 4] {
        let (ax, ay) = (self.ax, self.ay);
        [
            (1.0 - ax) * (1.0 - ay),
            ax * (1.0 - ay),
            (1.0 - ax) * ay,
            ax * ay,
        ]
    }

    #[inline]
    pub fn corners(&self) -> [(usize, usize); 4] {
        [
            (self.x0, self.y0),
            (self.x1, self.y0),
            (self.x0, self.y1),
            (self.x1, self.y1),
        ]
    }
}

/// Samples every channel of `src` at `(x, y)` into `out`; returns the
/// out-of-bounds flag.
pub fn bilinear_into(src: &ImageGrid, x: f64, y: f64, out: &mut [f64]) -> bool {
    let taps = Taps::new(src.width(), src.height(), x, y);
    let w = taps.weights();
    let corners = taps.corners();
    for (c, o) in out.iter_mut().enumerate().take(src.channels()) {
        *o = corners
            .iter()
            .zip(w)
            .map(|(&(cx, cy), wk)| wk * src.get(cx, cy, c))
            .sum();
    }
    taps.out_of_bounds
}

/// Bilinear interpolation with clamp-to-edge borders.
///
/// Returns the per-channel values and whether `(x, y)` fell outside
/// `[0, W-1] x [0, H-1]`.
pub fn bilinear_sample(src: &ImageGrid, x: f64, y: f64) -> (Vec<f64>, bool) {
    let mut out = vec![0.0; src.channels()];
    let oob = bilinear_into(src, x, y, &mut out);
    (out, oob)
}

/// Backward warp: `out(p) = src(p + flow(p))`.
pub fn warp(src: &ImageGrid, flow: &FlowField) -> Result<ImageGrid> {
    warp_with_mask(src, flow).map(|(img, _)| img)
}

/// Backward warp that also reports which target pixels sampled outside
/// the source frame.
pub fn warp_with_mask(src: &ImageGrid, flow: &FlowField) -> Result<(ImageGrid, Mask)> {
    src.check_extent(flow.as_grid(), "warp")?;
    let (h, w, c) = src.shape();
    let mut out = ImageGrid::zeros(h, w, c);
    let mut oob = Mask::zeros(h, w);
    let mut buf = vec![0.0; c];
    for y in 0..h {
        for x in 0..w {
            let (u, v) = flow.get(x, y);
            let flag = bilinear_into(src, x as f64 + u, y as f64 + v, &mut buf);
            let i = out.index(x, y, 0);
            out.data_mut()[i..i + c].copy_from_slice(&buf);
            oob.set(x, y, flag as u8 as f64);
        }
    }
    Ok((out, oob))
}

/// 5-point discrete Laplacian per channel with replicate padding.
pub fn laplacian(src: &ImageGrid) -> Result<ImageGrid> {
    let (h, w, c) = src.shape();
    ensure(h >= 3 && w >= 3, || {
        Error::TooSmall(format!("laplacian needs at least 3x3, got {h}x{w}"))
    })?;
    let mut out = ImageGrid::zeros(h, w, c);
    for y in 0..h {
        for x in 0..w {
            let (xl, xr) = (x.saturating_sub(1), (x + 1).min(w - 1));
            let (yu, yd) = (y.saturating_sub(1), (y + 1).min(h - 1));
            for ch in 0..c {
                let v = src.get(xl, y, ch)
                    + src.get(xr, y, ch)
                    + src.get(x, yu, ch)
                    + src.get(x, yd, ch)
                    - 4.0 * src.get(x, y, ch);
                out.set(x, y, ch, v);
            }
        }
    }
    Ok(out)
}
