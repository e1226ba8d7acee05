//! Temporal and spatial-attention cost volumes and their residual fusion.
//!
//! A cost volume is an `H x W x (2r+1)^2` grid: channel `s` of pixel `p`
//! holds the score for displacement `d = (s % side - r, s / side - r)`.
//! The graph-level functions (`*_var`) are what the network uses; the plain
//! functions wrap them for one-off evaluation.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::tensor::autodiff::Selection;
use crate::tensor::{FlowField, Graph, ImageGrid, ParamStore, Var};

/// Name of the SCA kernel inside a [`ParamStore`].
pub const SCA_KERNEL: &str = "sca.kernel";
pub const DEFAULT_RADIUS: usize = 3;
pub const DEFAULT_ALPHA: f64 = 0.25;
pub const DEFAULT_SCA_WINDOW: usize = 7;
pub const DEFAULT_K_SCA: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostVolumeConfig {
    pub radius: usize,
    pub alpha: f64,
    pub sca_window: usize,
    pub k_sca: usize,
}

impl Default for CostVolumeConfig {
    fn default() -> Self {
        Self {
            radius: DEFAULT_RADIUS,
            alpha: DEFAULT_ALPHA,
            sca_window: DEFAULT_SCA_WINDOW,
            k_sca: DEFAULT_K_SCA,
        }
    }
}

impl CostVolumeConfig {
    pub fn validate(&self) -> Result<()> {
        check_window(self.sca_window, self.k_sca)?;
        ensure(self.sca_window == 2 * self.radius + 1, || {
            Error::InvalidArgument(format!(
                "SCA window {} does not match the correlation window of radius {}",
                self.sca_window, self.radius
            ))
        })?;
        ensure(self.alpha.is_finite(), || {
            Error::NonFinite("fusion alpha".into())
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostVolume {
    pub scores: ImageGrid,
    pub radius: usize,
    /// `(min, max)` used when the volume was normalized.
    pub normalization: Option<(f64, f64)>,
}

impl CostVolume {
    pub fn new(scores: ImageGrid, radius: usize) -> Result<Self> {
        let side = 2 * radius + 1;
        ensure(scores.channels() == side * side, || {
            Error::ExtentMismatch(format!(
                "cost volume of radius {radius} needs {} channels, got {}",
                side * side,
                scores.channels()
            ))
        })?;
        ensure(scores.is_finite(), || {
            Error::NonFinite("cost volume".into())
        })?;
        Ok(Self {
            scores,
            radius,
            normalization: None,
        })
    }

    pub fn height(&self) -> usize {
        self.scores.height()
    }

    pub fn width(&self) -> usize {
        self.scores.width()
    }

    pub fn side(&self) -> usize {
        2 * self.radius + 1
    }

    pub fn num_slots(&self) -> usize {
        self.scores.len()
    }

    pub fn slot_of(&self, dx: isize, dy: isize) -> usize {
        let r = self.radius as isize;
        ((dy + r) * self.side() as isize + dx + r) as usize
    }

    pub fn displacement_of(&self, slot: usize) -> (isize, isize) {
        let r = self.radius as isize;
        let side = self.side();
        ((slot % side) as isize - r, (slot / side) as isize - r)
    }

    pub fn get(&self, x: usize, y: usize, dx: isize, dy: isize) -> f64 {
        self.scores.get(x, y, self.slot_of(dx, dy))
    }

    /// Displacement with the highest score at `(x, y)` (first in scan order
    /// on ties).
    pub fn argmax(&self, x: usize, y: usize) -> (isize, isize) {
        let px = self.scores.pixel(x, y);
        let mut best = 0;
        for (i, &v) in px.iter().enumerate() {
            if v > px[best] {
                best = i;
            }
        }
        self.displacement_of(best)
    }

    /// Min-max normalized copy; a constant volume maps to 0.5.
    pub fn normalized(&self) -> CostVolume {
        let (lo, hi) = self.scores.min_max();
        let range = hi - lo;
        let scores = if range > 0.0 {
            self.scores.map(|v| (v - lo) / range)
        } else {
            self.scores.map(|_| 0.5)
        };
        CostVolume {
            scores,
            radius: self.radius,
            normalization: Some((lo, hi)),
        }
    }
}

fn check_window(window: usize, k: usize) -> Result<()> {
    ensure(window >= 3 && window % 2 == 1, || {
        Error::InvalidArgument(format!("SCA window must be odd and >= 3, got {window}"))
    })?;
    ensure(k >= 1 && k < window * window, || {
        Error::InvalidArgument(format!(
            "k_sca = {k} exceeds the {} candidates of a {window}x{window} window",
            window * window - 1
        ))
    })
}

/// `<f_t(p), warp(f_t1, flow)(p + d)> / C`.
pub fn temporal_cv_var(g: &mut Graph, f_t: Var, f_t1: Var, flow: Var, radius: usize) -> Var {
    let warped = g.warp(f_t1, flow);
    g.correlation(f_t, warped, radius)
}

/// Top-`k` neighbour selection for the spatial-attention volume.
///
/// Candidates are the in-frame pixels of the `window x window`
/// neighbourhood, centre excluded, ranked by cosine similarity of the
/// kernel-weighted features `w * f`. Ties keep scan order. Returns the
/// volume `(1/k) sum_i <w*f(q_i), w*f(p)> / C` placed at each selected
/// displacement slot, and the selections.
pub(crate) fn sca_select(
    feat: &ImageGrid,
    kernel: &[f64],
    window: usize,
    k: usize,
) -> Result<(ImageGrid, Vec<Selection>)> {
    check_window(window, k)?;
    let (h, w, c) = feat.shape();
    ensure(kernel.len() == c, || {
        Error::ExtentMismatch(format!(
            "SCA kernel has {} weights for {c} channels",
            kernel.len()
        ))
    })?;
    let m = (window / 2) as isize;
    let weighted: Vec<f64> = feat
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| v * kernel[i % c])
        .collect();
    let norms: Vec<f64> = weighted
        .chunks(c)
        .map(|px| px.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let scale = 1.0 / (k as f64 * c as f64);
    let mut out = ImageGrid::zeros(h, w, window * window);
    let mut picks = Vec::with_capacity(h * w * k);
    let mut cands: Vec<(f64, usize, usize)> = Vec::with_capacity(window * window);
    for y in 0..h {
        for x in 0..w {
            let pi = y * w + x;
            let fp = &weighted[pi * c..(pi + 1) * c];
            cands.clear();
            for dy in -m..=m {
                for dx in -m..=m {
                    let (qx, qy) = (x as isize + dx, y as isize + dy);
                    if (dx == 0 && dy == 0)
                        || qx < 0
                        || qy < 0
                        || qx >= w as isize
                        || qy >= h as isize
                    {
                        continue;
                    }
                    let qi = qy as usize * w + qx as usize;
                    let fq = &weighted[qi * c..(qi + 1) * c];
                    let dot: f64 = fp.iter().zip(fq).map(|(a, b)| a * b).sum();
                    let denom = norms[pi] * norms[qi];
                    let sim = if denom > 0.0 { dot / denom } else { 0.0 };
                    let slot = ((dy + m) * window as isize + dx + m) as usize;
                    cands.push((sim, qi, slot));
                }
            }
            // stable: equal scores keep scan order
            cands.sort_by(|a, b| b.0.total_cmp(&a.0));
            for &(_, qi, slot) in cands.iter().take(k) {
                let fq = &weighted[qi * c..(qi + 1) * c];
                let dot: f64 = fp.iter().zip(fq).map(|(a, b)| a * b).sum();
                out.set(x, y, slot, dot * scale);
                picks.push(Selection {
                    pixel: pi,
                    neighbor: qi,
                    slot,
                });
            }
        }
    }
    Ok((out, picks))
}

/// Spatial-attention cost volume on the graph. Selection is treated as a
/// constant (straight-through); gradients reach the selected pairs only.
pub fn sca_cv_var(g: &mut Graph, feat: Var, kernel: Var, window: usize, k: usize) -> Result<Var> {
    let (value, picks) = sca_select(g.value(feat), g.value(kernel).data(), window, k)?;
    Ok(g.spatial_attention(feat, kernel, value, picks, k))
}

/// `normalize(cv_temp + alpha * cv_spa)`.
pub fn fuse_cv_var(g: &mut Graph, temp: Var, spa: Var, alpha: f64) -> (Var, (f64, f64)) {
    let scaled = g.scale(spa, alpha);
    let sum = g.add(temp, scaled);
    g.min_max_normalize(sum)
}

pub fn temporal_cv(
    f_t: &ImageGrid,
    f_t1: &ImageGrid,
    flow_init: &FlowField,
    radius: usize,
) -> Result<CostVolume> {
    ensure(f_t.same_shape(f_t1), || {
        Error::ExtentMismatch(format!(
            "feature maps {:?} vs {:?}",
            f_t.shape(),
            f_t1.shape()
        ))
    })?;
    f_t.check_extent(flow_init.as_grid(), "temporal_cv flow")?;
    let mut g = Graph::new();
    let a = g.constant(f_t.clone());
    let b = g.constant(f_t1.clone());
    let f = g.constant(flow_init.as_grid().clone());
    let v = temporal_cv_var(&mut g, a, b, f, radius);
    CostVolume::new(g.value(v).clone(), radius)
}

pub fn sca_cv(f_t: &ImageGrid, window: usize, k: usize, kernel: &ParamStore) -> Result<CostVolume> {
    let (value, _) = sca_select(f_t, kernel.value(SCA_KERNEL)?, window, k)?;
    CostVolume::new(value, window / 2)
}

pub fn fuse_cv(temp: &CostVolume, spa: &CostVolume, alpha: f64) -> Result<CostVolume> {
    ensure(
        temp.radius == spa.radius && temp.scores.same_shape(&spa.scores),
        || {
            Error::ExtentMismatch(format!(
                "cost volume layouts differ: {:?} r={} vs {:?} r={}",
                temp.scores.shape(),
                temp.radius,
                spa.scores.shape(),
                spa.radius
            ))
        },
    )?;
    let mut g = Graph::new();
    let a = g.constant(temp.scores.clone());
    let b = g.constant(spa.scores.clone());
    let (v, norm) = fuse_cv_var(&mut g, a, b, alpha);
    let mut out = CostVolume::new(g.value(v).clone(), temp.radius)?;
    out.normalization = Some(norm);
    Ok(out)
}

/// A kernel store holding the identity SCA kernel for `channels` features.
pub fn identity_kernel(channels: usize) -> ParamStore {
    let mut p = ParamStore::new();
    p.insert(SCA_KERNEL, vec![channels], vec![1.0; channels])
        .expect("shape matches");
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_features(h: usize, w: usize, c: usize, seed: u64) -> ImageGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageGrid::from_fn(h, w, c, |_, _, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn self_correlation_peaks_at_zero() {
        // unit-norm features
        let f = ImageGrid::from_fn(6, 6, 2, |x, y, c| {
            let a = (x * 3 + y * 5) as f64 * 0.7;
            if c == 0 {
                a.cos()
            } else {
                a.sin()
            }
        });
        let cv = temporal_cv(&f, &f, &FlowField::zeros(6, 6), 2).unwrap();
        for y in 0..6 {
            for x in 0..6 {
                let zero = cv.get(x, y, 0, 0);
                assert!((zero - 0.5).abs() < 1e-12);
                assert!(cv.scores.pixel(x, y).iter().all(|&s| s <= zero + 1e-12));
            }
        }
    }

    #[test]
    fn shifted_features_argmax() {
        let f = random_features(8, 8, 16, 1);
        let shifted = ImageGrid::from_fn(8, 8, 16, |x, y, c| f.get(x.saturating_sub(1), y, c));
        let cv = temporal_cv(&f, &shifted, &FlowField::zeros(8, 8), 2).unwrap();
        for y in 2..6 {
            for x in 2..6 {
                // brute force over the window
                let mut best = (f64::NEG_INFINITY, (0, 0));
                for dy in -2isize..=2 {
                    for dx in -2isize..=2 {
                        let (qx, qy) = ((x as isize + dx) as usize, (y as isize + dy) as usize);
                        let s: f64 = (0..16)
                            .map(|c| f.get(x, y, c) * shifted.get(qx, qy, c))
                            .sum();
                        if s > best.0 {
                            best = (s, (dx, dy));
                        }
                    }
                }
                assert_eq!(best.1, (1, 0));
                assert_eq!(cv.argmax(x, y), (1, 0));
            }
        }
    }

    #[test]
    fn orthogonal_features_score_zero() {
        let a = ImageGrid::from_fn(5, 5, 2, |_, _, c| (c == 0) as u8 as f64);
        let b = ImageGrid::from_fn(5, 5, 2, |_, _, c| (c == 1) as u8 as f64);
        let cv = temporal_cv(&a, &b, &FlowField::zeros(5, 5), 1).unwrap();
        assert!(cv.scores.data().iter().all(|&v| v == 0.0));
        assert!(temporal_cv(&a, &b, &FlowField::zeros(5, 4), 1).is_err());
    }

    #[test]
    fn zero_displacement_is_symmetric() {
        let a = random_features(6, 7, 4, 2);
        let b = random_features(6, 7, 4, 3);
        let z = FlowField::zeros(6, 7);
        let ab = temporal_cv(&a, &b, &z, 2).unwrap();
        let ba = temporal_cv(&b, &a, &z, 2).unwrap();
        for y in 0..6 {
            for x in 0..7 {
                assert_eq!(ab.get(x, y, 0, 0), ba.get(x, y, 0, 0));
            }
        }
    }

    #[test]
    fn sca_constant_map() {
        let f = ImageGrid::filled(9, 9, 3, 0.4);
        let cv = sca_cv(&f, 5, 4, &identity_kernel(3)).unwrap();
        let per_pixel: Vec<f64> = cv
            .scores
            .data()
            .chunks(25)
            .map(|p| p.iter().sum())
            .collect();
        assert!(per_pixel.iter().all(|&s| (s - 0.16).abs() < 1e-12));
        // interior pixels pick the same slots
        assert_eq!(cv.scores.pixel(3, 3), cv.scores.pixel(5, 4));
    }

    #[test]
    fn sca_single_duplicate() {
        // every pixel has a unique direction except its duplicate one column right
        let f = ImageGrid::from_fn(6, 8, 2, |x, y, c| {
            let a = ((x / 2) * 7 + y * 3) as f64 * 0.37 + 0.1;
            if c == 0 {
                a.cos()
            } else {
                a.sin()
            }
        });
        let cv = sca_cv(&f, 3, 1, &identity_kernel(2)).unwrap();
        for y in 0..6 {
            for x in 0..8 {
                let dx = if x % 2 == 0 { 1 } else { -1 };
                let q = (x as isize + dx) as usize;
                let expect: f64 =
                    (0..2).map(|c| f.get(x, y, c) * f.get(q, y, c)).sum::<f64>() / 2.0;
                assert!((cv.get(x, y, dx, 0) - expect).abs() < 1e-12);
                let others: f64 = cv.scores.pixel(x, y).iter().sum::<f64>() - cv.get(x, y, dx, 0);
                assert_eq!(others, 0.0);
            }
        }
    }

    #[test]
    fn sca_matches_exhaustive_top3() {
        let f = random_features(8, 8, 5, 7);
        let cv = sca_cv(&f, 5, 3, &identity_kernel(5)).unwrap();
        let cos = |a: &[f64], b: &[f64]| {
            let d: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
            let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
            d / (na * nb)
        };
        for y in 0..8usize {
            for x in 0..8usize {
                let mut all = Vec::new();
                for qy in y.saturating_sub(2)..(y + 3).min(8) {
                    for qx in x.saturating_sub(2)..(x + 3).min(8) {
                        if (qx, qy) != (x, y) {
                            all.push((cos(f.pixel(x, y), f.pixel(qx, qy)), qx, qy));
                        }
                    }
                }
                all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
                let mut expect = ImageGrid::zeros(1, 1, 25);
                for &(_, qx, qy) in &all[..3] {
                    let s = (qy + 2 - y) * 5 + (qx + 2 - x);
                    let dot: f64 = f
                        .pixel(x, y)
                        .iter()
                        .zip(f.pixel(qx, qy))
                        .map(|(a, b)| a * b)
                        .sum();
                    expect.set(0, 0, s, dot / (3.0 * 5.0));
                }
                for s in 0..25 {
                    assert!((cv.scores.get(x, y, s) - expect.get(0, 0, s)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn sca_permutation_invariant_over_channels_order() {
        // permuting channels (and the kernel with them) leaves the volume unchanged
        let f = random_features(6, 6, 3, 11);
        let mut kern = ParamStore::new();
        kern.insert(SCA_KERNEL, vec![3], vec![0.5, 1.5, -2.0])
            .unwrap();
        let a = sca_cv(&f, 3, 2, &kern).unwrap();
        let fp = ImageGrid::from_fn(6, 6, 3, |x, y, c| f.get(x, y, (c + 1) % 3));
        let mut kp = ParamStore::new();
        kp.insert(SCA_KERNEL, vec![3], vec![1.5, -2.0, 0.5])
            .unwrap();
        let b = sca_cv(&fp, 3, 2, &kp).unwrap();
        for (u, v) in a.scores.data().iter().zip(b.scores.data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn sca_errors() {
        let f = ImageGrid::filled(5, 5, 2, 1.0);
        let k = identity_kernel(2);
        assert!(sca_cv(&f, 3, 9, &k).is_err());
        assert!(sca_cv(&f, 4, 1, &k).is_err());
        assert!(sca_cv(&f, 3, 0, &k).is_err());
        assert!(sca_cv(&f, 3, 1, &identity_kernel(3)).is_err());
        assert!(sca_cv(&f, 3, 8, &k).is_ok());
    }

    #[test]
    fn fusion_laws() {
        let a = CostVolume::new(random_features(4, 4, 9, 1), 1).unwrap();
        let b = CostVolume::new(random_features(4, 4, 9, 2), 1).unwrap();
        let f0 = fuse_cv(&a, &b, 0.0).unwrap();
        assert_eq!(f0.scores, a.normalized().scores);
        let f1 = fuse_cv(&a, &a, 1.0).unwrap();
        for (u, v) in f1.scores.data().iter().zip(a.normalized().scores.data()) {
            assert!((u - v).abs() < 1e-12);
        }
        let f = fuse_cv(&a, &b, 0.3).unwrap();
        let raw: Vec<f64> = a
            .scores
            .data()
            .iter()
            .zip(b.scores.data())
            .map(|(p, q)| p + 0.3 * q)
            .collect();
        let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(f.normalization, Some((lo, hi)));
        for (u, r) in f.scores.data().iter().zip(&raw) {
            assert!((u - (r - lo) / (hi - lo)).abs() < 1e-9);
        }
        assert!(f.scores.data().contains(&0.0) && f.scores.data().contains(&1.0));
        let c = CostVolume::new(ImageGrid::filled(2, 2, 9, 3.0), 1).unwrap();
        assert!(c.normalized().scores.data().iter().all(|&v| v == 0.5));
        let r2 = CostVolume::new(random_features(4, 4, 25, 3), 2).unwrap();
        assert!(fuse_cv(&a, &r2, 0.5).is_err());
    }

    #[test]
    fn config_defaults_are_consistent() {
        CostVolumeConfig::default().validate().unwrap();
        let bad = CostVolumeConfig {
            sca_window: 5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
