//! Flow metrics, per-region breakdowns, and flow visualization.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::scene::io::write_ppm_with_comment;
use crate::tensor::{DepthMap, FlowField, ImageGrid, Mask};

/// Absolute endpoint-error threshold of an outlier, in pixels.
pub const OUTLIER_PX: f64 = 3.0;
/// Relative endpoint-error threshold of an outlier.
pub const OUTLIER_REL: f64 = 0.05;

fn check_extents(pred: &FlowField, gt: &FlowField, valid: &Mask) -> Result<()> {
    let (h, w) = (gt.height(), gt.width());
    ensure(pred.height() == h && pred.width() == w, || {
        Error::ExtentMismatch(format!(
            "pred {}x{} vs gt {h}x{w}",
            pred.width(),
            pred.height()
        ))
    })?;
    ensure(valid.height() == h && valid.width() == w, || {
        Error::ExtentMismatch(format!(
            "valid mask {}x{} vs gt {h}x{w}",
            valid.width(),
            valid.height()
        ))
    })
}

/// Endpoint error and ground-truth magnitude at one pixel.
fn endpoint(pred: &FlowField, gt: &FlowField, x: usize, y: usize) -> (f64, f64) {
    let (pu, pv) = pred.get(x, y);
    let (gu, gv) = gt.get(x, y);
    ((pu - gu).hypot(pv - gv), gu.hypot(gv))
}

fn valid_pixels(valid: &Mask) -> impl Iterator<Item = (usize, usize)> + '_ {
    let w = valid.width();
    valid
        .data()
        .iter()
        .enumerate()
        .filter(|(_, m)| **m >= 0.5)
        .map(move |(i, _)| (i % w, i / w))
}

fn is_outlier(err: f64, mag: f64) -> bool {
    err > OUTLIER_PX && err > OUTLIER_REL * mag
}

/// Mean endpoint error over valid pixels.
pub fn epe(pred: &FlowField, gt: &FlowField, valid: &Mask) -> Result<f64> {
    check_extents(pred, gt, valid)?;
    let (mut sum, mut n) = (0.0, 0usize);
    for (x, y) in valid_pixels(valid) {
        sum += endpoint(pred, gt, x, y).0;
        n += 1;
    }
    ensure(n > 0, || Error::DegenerateMask("no valid pixels".into()))?;
    Ok(sum / n as f64)
}

/// Fraction of valid pixels whose error exceeds both 3 px and 5% of the
/// ground-truth magnitude.
pub fn f1_all(pred: &FlowField, gt: &FlowField, valid: &Mask) -> Result<f64> {
    check_extents(pred, gt, valid)?;
    let (mut bad, mut n) = (0usize, 0usize);
    for (x, y) in valid_pixels(valid) {
        let (e, m) = endpoint(pred, gt, x, y);
        bad += is_outlier(e, m) as usize;
        n += 1;
    }
    ensure(n > 0, || Error::DegenerateMask("no valid pixels".into()))?;
    Ok(bad as f64 / n as f64)
}

/// Metrics over one pixel subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionStats {
    pub epe: f64,
    pub f1_all: f64,
    pub count: usize,
}

fn region_stats(pred: &FlowField, gt: &FlowField, valid: &Mask) -> Result<Option<RegionStats>> {
    check_extents(pred, gt, valid)?;
    let (mut sum, mut bad, mut n) = (0.0, 0usize, 0usize);
    for (x, y) in valid_pixels(valid) {
        let (e, m) = endpoint(pred, gt, x, y);
        sum += e;
        bad += is_outlier(e, m) as usize;
        n += 1;
    }
    Ok((n > 0).then(|| RegionStats {
        epe: sum / n as f64,
        f1_all: bad as f64 / n as f64,
        count: n,
    }))
}

/// EPE of pixels with depth in `[lo, hi)`; `epe` is absent for an empty band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandEpe {
    pub lo: f64,
    pub hi: f64,
    pub epe: Option<f64>,
    pub count: usize,
}

/// Per-band EPE for ascending band edges `bands` (`n + 1` edges give `n`
/// bands). The last band is closed on the right.
pub fn depth_band_report(
    pred: &FlowField,
    gt: &FlowField,
    depth: &DepthMap,
    valid: &Mask,
    bands: &[f64],
) -> Result<Vec<BandEpe>> {
    check_extents(pred, gt, valid)?;
    ensure(
        depth.height() == gt.height() && depth.width() == gt.width(),
        || Error::ExtentMismatch("depth map vs flow".into()),
    )?;
    ensure(bands.len() >= 2, || {
        Error::InvalidArgument("need at least two band edges".into())
    })?;
    ensure(bands.windows(2).all(|b| b[0] < b[1]), || {
        Error::InvalidArgument(format!("band edges must ascend: {bands:?}"))
    })?;
    let nb = bands.len() - 1;
    let mut sums = vec![(0.0, 0usize); nb];
    for (x, y) in valid_pixels(valid) {
        let d = depth.get(x, y);
        let last = bands[nb];
        if d < bands[0] || d > last {
            continue;
        }
        let b = (bands.partition_point(|&e| e <= d)).clamp(1, nb) - 1;
        sums[b].0 += endpoint(pred, gt, x, y).0;
        sums[b].1 += 1;
    }
    Ok(sums
        .iter()
        .enumerate()
        .map(|(i, &(s, n))| BandEpe {
            lo: bands[i],
            hi: bands[i + 1],
            epe: (n > 0).then(|| s / n as f64),
            count: n,
        })
        .collect())
}

/// Whether present band EPEs never decrease with depth.
pub fn is_non_decreasing(bands: &[BandEpe]) -> bool {
    let present: Vec<f64> = bands.iter().filter_map(|b| b.epe).collect();
    present.windows(2).all(|w| w[0] <= w[1])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub epe: f64,
    pub f1_all: f64,
    pub count: usize,
    pub rigid: Option<RegionStats>,
    pub nonrigid: Option<RegionStats>,
    pub depth_bands: Vec<BandEpe>,
}

/// Optional region inputs of [`evaluate`].
#[derive(Debug, Clone, Copy, Default)]
pub struct Regions<'a> {
    pub nonrigid: Option<&'a Mask>,
    pub depth: Option<(&'a DepthMap, &'a [f64])>,
}

pub fn evaluate(
    pred: &FlowField,
    gt: &FlowField,
    valid: &Mask,
    regions: Regions<'_>,
) -> Result<EvalReport> {
    let all = region_stats(pred, gt, valid)?
        .ok_or_else(|| Error::DegenerateMask("no valid pixels".into()))?;
    let (rigid, nonrigid) = match regions.nonrigid {
        Some(nr) => {
            ensure(
                nr.height() == gt.height() && nr.width() == gt.width(),
                || Error::ExtentMismatch("non-rigid mask vs flow".into()),
            )?;
            let sel = |want: bool| {
                Mask::from_fn(gt.height(), gt.width(), |x, y| {
                    ((valid.get(x, y) >= 0.5 && (nr.get(x, y) >= 0.5) == want) as u8).into()
                })
            };
            (
                region_stats(pred, gt, &sel(false))?,
                region_stats(pred, gt, &sel(true))?,
            )
        }
        None => (None, None),
    };
    let depth_bands = match regions.depth {
        Some((d, edges)) => depth_band_report(pred, gt, d, valid, edges)?,
        None => Vec::new(),
    };
    Ok(EvalReport {
        epe: all.epe,
        f1_all: all.f1_all,
        count: all.count,
        rigid,
        nonrigid,
        depth_bands,
    })
}

/// Averages reports by pixel count.
pub fn pooled(reports: &[EvalReport]) -> Result<RegionStats> {
    let n: usize = reports.iter().map(|r| r.count).sum();
    ensure(n > 0, || Error::DegenerateMask("no reports".into()))?;
    let epe = reports.iter().map(|r| r.epe * r.count as f64).sum::<f64>() / n as f64;
    let f1 = reports
        .iter()
        .map(|r| r.f1_all * r.count as f64)
        .sum::<f64>()
        / n as f64;
    Ok(RegionStats {
        epe,
        f1_all: f1,
        count: n,
    })
}

/// Integer-displacement block matching on grayscale frames: for each pixel,
/// the displacement within `search` minimizing the patch SSD (clamped
/// borders). Ties keep the smallest displacement in scan order.
pub fn block_matching_flow(
    img_t: &ImageGrid,
    img_t1: &ImageGrid,
    search: usize,
    patch: usize,
) -> Result<FlowField> {
    ensure(img_t.same_shape(img_t1), || {
        Error::ExtentMismatch("frame pair".into())
    })?;
    let (a, b) = (img_t.to_gray(), img_t1.to_gray());
    let (h, w) = (a.height() as isize, a.width() as isize);
    let at = |g: &ImageGrid, x: isize, y: isize| {
        g.get(x.clamp(0, w - 1) as usize, y.clamp(0, h - 1) as usize, 0)
    };
    let (s, p) = (search as isize, patch as isize);
    let mut candidates: Vec<(isize, isize)> = (-s..=s)
        .flat_map(|dy| (-s..=s).map(move |dx| (dx, dy)))
        .collect();
    candidates.sort_by_key(|&(dx, dy)| dx * dx + dy * dy);
    Ok(FlowField::from_fn(a.height(), a.width(), |x, y| {
        let (x, y) = (x as isize, y as isize);
        let mut best = (f64::INFINITY, (0, 0));
        for &(dx, dy) in &candidates {
            let mut ssd = 0.0;
            for py in -p..=p {
                for px in -p..=p {
                    let d = at(&a, x + px, y + py) - at(&b, x + px + dx, y + py + dy);
                    ssd += d * d;
                }
            }
            if ssd < best.0 {
                best = (ssd, (dx, dy));
            }
        }
        (best.1 .0 as f64, best.1 .1 as f64)
    }))
}

const WHEEL_SEGMENTS: [(usize, [f64; 3], [f64; 3]); 6] = [
    (15, [1.0, 0.0, 0.0], [1.0, 1.0, 0.0]),
    (6, [1.0, 1.0, 0.0], [0.0, 1.0, 0.0]),
    (4, [0.0, 1.0, 0.0], [0.0, 1.0, 1.0]),
    (11, [0.0, 1.0, 1.0], [0.0, 0.0, 1.0]),
    (13, [0.0, 0.0, 1.0], [1.0, 0.0, 1.0]),
    (6, [1.0, 0.0, 1.0], [1.0, 0.0, 0.0]),
];

fn wheel() -> Vec<[f64; 3]> {
    let mut out = Vec::with_capacity(55);
    for (n, from, to) in WHEEL_SEGMENTS {
        for i in 0..n {
            let t = i as f64 / n as f64;
            out.push([0, 1, 2].map(|c| from[c] + (to[c] - from[c]) * t));
        }
    }
    out
}

/// Color-wheel rendering: hue encodes direction, saturation encodes
/// magnitude relative to `max_magnitude` (per-image maximum when `None`).
/// Returns the image and the normalizer used.
pub fn flow_to_color(flow: &FlowField, max_magnitude: Option<f64>) -> (ImageGrid, f64) {
    let norm = max_magnitude
        .unwrap_or_else(|| flow.max_magnitude())
        .max(1e-12);
    let cols = wheel();
    let n = cols.len();
    let img = ImageGrid::from_fn(flow.height(), flow.width(), 3, |x, y, c| {
        let (u, v) = flow.get(x, y);
        let (u, v) = (u / norm, v / norm);
        let rad = u.hypot(v);
        let a = (-v).atan2(-u) / PI;
        let fk = (a + 1.0) / 2.0 * (n - 1) as f64;
        let k0 = fk.floor() as usize % n;
        let k1 = (k0 + 1) % n;
        let f = fk - fk.floor();
        let col = (1.0 - f) * cols[k0][c] + f * cols[k1][c];
        if rad <= 1.0 {
            1.0 - rad * (1.0 - col)
        } else {
            col * 0.75
        }
    });
    (img, norm)
}

pub fn write_flow_ppm(path: impl AsRef<Path>, flow: &FlowField) -> Result<()> {
    let (img, norm) = flow_to_color(flow, None);
    write_ppm_with_comment(
        path,
        &img,
        &format!("flow color wheel, max magnitude {norm}"),
    )
}
