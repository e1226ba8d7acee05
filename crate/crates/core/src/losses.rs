//! Training objectives.
//!
//! Each loss has a plain reference implementation on concrete rasters
//! (exact `|x|`) and a graph version used for training (smoothed `|x|`).

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::tensor::{laplacian, warp, warp_with_mask, FlowField, Graph, ImageGrid, Mask, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparseNorm {
    pub p: f64,
    pub eps: f64,
}

impl Default for SparseNorm {
    fn default() -> Self {
        Self { p: 0.4, eps: 1e-2 }
    }
}

impl SparseNorm {
    pub fn validate(&self) -> Result<()> {
        ensure(self.p > 0.0 && self.p <= 1.0 && self.eps >= 0.0, || {
            Error::InvalidArgument(format!(
                "sparse norm needs 0 < p <= 1 and eps >= 0, got {self:?}"
            ))
        })
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        (x.abs() + self.eps).powf(self.p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub depth: f64,
    pub pho: f64,
    pub geo: f64,
    pub consis: f64,
    pub self_sup: f64,
    pub kl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            depth: 1.0,
            pho: 1.0,
            geo: 0.1,
            consis: 1.0,
            self_sup: 1.0,
            kl: 0.1,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            depth: 0.0,
            pho: 0.0,
            geo: 0.0,
            consis: 0.0,
            self_sup: 0.0,
            kl: 0.0,
        }
    }

    pub fn as_array(&self) -> [f64; 6] {
        [
            self.depth,
            self.pho,
            self.geo,
            self.consis,
            self.self_sup,
            self.kl,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        ensure(
            self.as_array().iter().all(|w| w.is_finite() && *w >= 0.0),
            || Error::InvalidArgument(format!("loss weights must be non-negative: {self:?}")),
        )
    }
}

/// How the unmasked L1 flow losses reduce over pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

impl Reduction {
    fn factor(self, pixels: usize) -> f64 {
        match self {
            Reduction::Sum => 1.0,
            Reduction::Mean => 1.0 / pixels as f64,
        }
    }
}

pub const TERM_NAMES: [&str; 6] = ["depth", "pho", "geo", "consis", "self", "kl"];

/// Values of the six objective terms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub depth: f64,
    pub pho: f64,
    pub geo: f64,
    pub consis: f64,
    pub self_sup: f64,
    pub kl: f64,
}

impl LossTerms {
    pub fn as_array(&self) -> [f64; 6] {
        [
            self.depth,
            self.pho,
            self.geo,
            self.consis,
            self.self_sup,
            self.kl,
        ]
    }

    pub fn uniform(v: f64) -> Self {
        Self {
            depth: v,
            pho: v,
            geo: v,
            consis: v,
            self_sup: v,
            kl: v,
        }
    }
}

/// Weighted sum of the six terms.
pub fn total_loss(terms: &LossTerms, weights: &LossWeights) -> Result<f64> {
    for (name, v) in TERM_NAMES.iter().zip(terms.as_array()) {
        ensure(v.is_finite(), || {
            Error::NonFinite(format!("loss term `{name}` = {v}"))
        })?;
    }
    Ok(terms
        .as_array()
        .iter()
        .zip(weights.as_array())
        .map(|(t, w)| t * w)
        .sum())
}

/// `(|x| + eps)^p` per element, summed over channels.
pub fn sparse_lp(x: &ImageGrid, norm: &SparseNorm) -> ImageGrid {
    let c = x.channels();
    ImageGrid::from_fn(x.height(), x.width(), 1, |px, py, _| {
        (0..c).map(|ch| norm.eval(x.get(px, py, ch))).sum()
    })
}

fn difference(a: &ImageGrid, b: &ImageGrid) -> ImageGrid {
    ImageGrid::from_vec(
        a.height(),
        a.width(),
        a.channels(),
        a.data().iter().zip(b.data()).map(|(p, q)| p - q).collect(),
    )
    .expect("same shape")
}

fn masked_mean(values: &ImageGrid, keep: &[f64], what: &str) -> Result<f64> {
    let denom: f64 = keep.iter().sum();
    ensure(denom > 0.0, || {
        Error::DegenerateMask(format!("{what}: no pixel left after masking"))
    })?;
    Ok(values
        .data()
        .iter()
        .zip(keep)
        .map(|(v, k)| v * k)
        .sum::<f64>()
        / denom)
}

fn one_way_photometric(
    a: &ImageGrid,
    b: &ImageGrid,
    flow: &FlowField,
    occ: &Mask,
    norm: &SparseNorm,
    what: &str,
) -> Result<f64> {
    let warped = warp(b, flow)?;
    let psi = sparse_lp(&difference(a, &warped), norm);
    masked_mean(&psi, occ.complement().data(), what)
}

/// Occlusion-masked bidirectional photometric loss.
pub fn photometric_flow_loss(
    i_t: &ImageGrid,
    i_t1: &ImageGrid,
    f_f: &FlowField,
    f_b: &FlowField,
    o_f: &Mask,
    o_b: &Mask,
    norm: &SparseNorm,
) -> Result<f64> {
    norm.validate()?;
    ensure(i_t.same_shape(i_t1), || {
        Error::ExtentMismatch("photometric frames differ".into())
    })?;
    i_t.check_extent(&o_f.to_grid(), "forward occlusion")?;
    i_t.check_extent(&o_b.to_grid(), "backward occlusion")?;
    Ok(
        one_way_photometric(i_t, i_t1, f_f, o_f, norm, "forward photometric")?
            + one_way_photometric(i_t1, i_t, f_b, o_b, norm, "backward photometric")?,
    )
}

/// Horizontal flow `(-d, 0)` that warps the right view onto the left.
pub fn disparity_flow(disp: &ImageGrid) -> FlowField {
    FlowField::from_fn(disp.height(), disp.width(), |x, y| {
        (-disp.get(x, y, 0), 0.0)
    })
}

/// Edge weight `exp(-mean_c |lap(I)_c|)` on interior pixels, divided by
/// the interior pixel count; zero on the one-pixel border.
pub fn edge_weight(img: &ImageGrid) -> Result<ImageGrid> {
    let lap = laplacian(img)?;
    let (h, w, c) = img.shape();
    let interior = ((h - 2) * (w - 2)) as f64;
    Ok(ImageGrid::from_fn(h, w, 1, |x, y, _| {
        if x == 0 || y == 0 || x == w - 1 || y == h - 1 {
            0.0
        } else {
            (-lap.pixel(x, y).iter().map(|v| v.abs()).sum::<f64>() / c as f64).exp() / interior
        }
    }))
}

fn stereo_terms(
    left: &ImageGrid,
    right: &ImageGrid,
    disp: &ImageGrid,
    norm: &SparseNorm,
) -> Result<f64> {
    ensure(left.same_shape(right), || {
        Error::ExtentMismatch("stereo pair differs".into())
    })?;
    ensure(disp.channels() == 1, || {
        Error::InvalidArgument("disparity must have 1 channel".into())
    })?;
    left.check_extent(disp, "disparity")?;
    let (warped, oob) = warp_with_mask(right, &disparity_flow(disp))?;
    let psi = sparse_lp(&difference(left, &warped), norm);
    let pho = masked_mean(&psi, oob.complement().data(), "stereo photometric")?;
    let lap_d = laplacian(disp)?;
    let wgt = edge_weight(left)?;
    let smooth = lap_d
        .data()
        .iter()
        .zip(wgt.data())
        .map(|(d, w)| d.abs() * w)
        .sum::<f64>();
    Ok(pho + smooth)
}

/// Stereo photometric plus edge-aware second-order disparity smoothness,
/// for both frames. Pixels whose match falls outside the right image are
/// excluded from the photometric mean; smoothness is averaged over interior
/// pixels.
#[allow(clippy::too_many_arguments)]
pub fn depth_loss(
    il_t: &ImageGrid,
    ir_t: &ImageGrid,
    il_t1: &ImageGrid,
    ir_t1: &ImageGrid,
    disp_t: &ImageGrid,
    disp_t1: &ImageGrid,
    norm: &SparseNorm,
) -> Result<f64> {
    norm.validate()?;
    Ok(stereo_terms(il_t, ir_t, disp_t, norm)? + stereo_terms(il_t1, ir_t1, disp_t1, norm)?)
}

/// Mean L1 flow residual over the rigid region `1 - V`.
pub fn geo_flow_loss(f: &FlowField, f_rigid: &FlowField, v: &Mask) -> Result<f64> {
    f.as_grid().check_extent(f_rigid.as_grid(), "geo flow")?;
    f.as_grid().check_extent(&v.to_grid(), "non-rigid mask")?;
    let l1 = ImageGrid::from_fn(f.height(), f.width(), 1, |x, y, _| {
        let (a, b) = (f.get(x, y), f_rigid.get(x, y));
        (a.0 - b.0).abs() + (a.1 - b.1).abs()
    });
    masked_mean(&l1, v.complement().data(), "geo flow")
}

fn l1_flow(a: &FlowField, b: &FlowField, reduction: Reduction, what: &str) -> Result<f64> {
    a.as_grid().check_extent(b.as_grid(), what)?;
    let s: f64 = a
        .as_grid()
        .data()
        .iter()
        .zip(b.as_grid().data())
        .map(|(p, q)| (p - q).abs())
        .sum();
    Ok(s * reduction.factor(a.height() * a.width()))
}

/// `sum |F_syn - F|_1`.
pub fn consistency_loss(f_syn: &FlowField, f: &FlowField, reduction: Reduction) -> Result<f64> {
    l1_flow(f_syn, f, reduction, "consistency")
}

/// `sum |F_real - F_pseudo|_1`; the pseudo-label is a plain value and
/// carries no gradient.
pub fn self_supervised_loss(
    f_real: &FlowField,
    f_pseudo: &FlowField,
    reduction: Reduction,
) -> Result<f64> {
    l1_flow(f_real, f_pseudo, reduction, "self-supervised")
}

/// Graph versions of the objectives.
pub mod graph {
    use super::*;

    pub fn sparse_lp(g: &mut Graph, x: Var, norm: &SparseNorm) -> Var {
        let psi = g.abs_pow(x, norm.p, norm.eps);
        if g.value(psi).channels() == 1 {
            psi
        } else {
            g.sum_channels(psi)
        }
    }

    fn masked_mean(g: &mut Graph, x: Var, keep: ImageGrid, what: &str) -> Result<Var> {
        let denom: f64 = keep.data().iter().sum();
        ensure(denom > 0.0, || {
            Error::DegenerateMask(format!("{what}: no pixel left after masking"))
        })?;
        let m = g.constant(keep);
        let masked = g.mul_mask(x, m);
        let s = g.sum(masked);
        Ok(g.scale(s, 1.0 / denom))
    }

    fn one_way(
        g: &mut Graph,
        a: Var,
        b: Var,
        flow: Var,
        occ: &Mask,
        norm: &SparseNorm,
        what: &str,
    ) -> Result<Var> {
        let warped = g.warp(b, flow);
        let r = g.sub(a, warped);
        let psi = sparse_lp(g, r, norm);
        masked_mean(g, psi, occ.complement().to_grid(), what)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn photometric_flow_loss(
        g: &mut Graph,
        i_t: Var,
        i_t1: Var,
        f_f: Var,
        f_b: Var,
        o_f: &Mask,
        o_b: &Mask,
        norm: &SparseNorm,
    ) -> Result<Var> {
        let fwd = one_way(g, i_t, i_t1, f_f, o_f, norm, "forward photometric")?;
        let bwd = one_way(g, i_t1, i_t, f_b, o_b, norm, "backward photometric")?;
        Ok(g.add(fwd, bwd))
    }

    /// Differentiable [`edge_weight`](super::edge_weight).
    pub fn edge_weight_var(g: &mut Graph, img: Var) -> Var {
        let (h, w, c) = g.value(img).shape();
        let interior = ((h - 2) * (w - 2)) as f64;
        let border = ImageGrid::from_fn(h, w, 1, |x, y, _| {
            if x == 0 || y == 0 || x == w - 1 || y == h - 1 {
                0.0
            } else {
                1.0 / interior
            }
        });
        let lap = g.laplacian(img);
        let a = g.abs(lap);
        let s = g.sum_channels(a);
        let m = g.scale(s, -1.0 / c as f64);
        let e = g.exp(m);
        let bv = g.constant(border);
        g.mul(e, bv)
    }

    /// One frame of the stereo objective; `disp` is an `HxWx1` node.
    pub fn stereo_terms(
        g: &mut Graph,
        left: Var,
        right: Var,
        disp: Var,
        norm: &SparseNorm,
    ) -> Result<Var> {
        let (h, w, _) = g.value(disp).shape();
        let neg = g.scale(disp, -1.0);
        let zeros = g.constant(ImageGrid::zeros(h, w, 1));
        let flow = g.concat(neg, zeros);
        let (_, oob) = warp_with_mask(g.value(right), &disparity_flow(g.value(disp)))?;
        let warped = g.warp(right, flow);
        let r = g.sub(left, warped);
        let psi = sparse_lp(g, r, norm);
        let pho = masked_mean(g, psi, oob.complement().to_grid(), "stereo photometric")?;
        let wv = edge_weight_var(g, left);
        let lap = g.laplacian(disp);
        let a = g.abs(lap);
        let weighted = g.mul(a, wv);
        let smooth = g.sum(weighted);
        Ok(g.add(pho, smooth))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn depth_loss(
        g: &mut Graph,
        il_t: Var,
        ir_t: Var,
        il_t1: Var,
        ir_t1: Var,
        disp_t: Var,
        disp_t1: Var,
        norm: &SparseNorm,
    ) -> Result<Var> {
        let a = stereo_terms(g, il_t, ir_t, disp_t, norm)?;
        let b = stereo_terms(g, il_t1, ir_t1, disp_t1, norm)?;
        Ok(g.add(a, b))
    }

    pub fn geo_flow_loss(g: &mut Graph, f: Var, f_rigid: Var, v: &Mask) -> Result<Var> {
        let d = g.sub(f, f_rigid);
        let a = g.abs(d);
        let l1 = g.sum_channels(a);
        masked_mean(g, l1, v.complement().to_grid(), "geo flow")
    }

    /// `sum |a - b|_1` (or its per-pixel mean).
    pub fn l1_flow(g: &mut Graph, a: Var, b: Var, reduction: Reduction) -> Var {
        let (h, w, _) = g.value(a).shape();
        let d = g.sub(a, b);
        let ab = g.abs(d);
        let s = g.sum(ab);
        g.scale(s, reduction.factor(h * w))
    }

    /// Weighted sum of the present terms, in the order of [`TERM_NAMES`].
    pub fn total_loss(
        g: &mut Graph,
        terms: &[Option<Var>; 6],
        weights: &LossWeights,
    ) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for ((name, term), w) in TERM_NAMES.iter().zip(terms).zip(weights.as_array()) {
            let Some(t) = *term else { continue };
            let v = g.scalar(t);
            ensure(v.is_finite(), || {
                Error::NonFinite(format!("loss term `{name}` = {v}"))
            })?;
            if w == 0.0 {
                continue;
            }
            let s = g.scale(t, w);
            acc = Some(match acc {
                Some(a) => g.add(a, s),
                None => s,
            });
        }
        Ok(acc.unwrap_or_else(|| g.scalar_const(0.0)))
    }
}

/// One row of a loss curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub depth: f64,
    pub pho: f64,
    pub geo: f64,
    pub consis: f64,
    #[serde(rename = "self")]
    pub self_sup: f64,
    pub kl: f64,
    pub total: f64,
}

impl LossRecord {
    pub fn new(step: usize, terms: &LossTerms, total: f64) -> Self {
        Self {
            step,
            depth: terms.depth,
            pho: terms.pho,
            geo: terms.geo,
            consis: terms.consis,
            self_sup: terms.self_sup,
            kl: terms.kl,
            total,
        }
    }
}

pub fn write_loss_csv<W: Write>(out: W, records: &[LossRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)
            .map_err(|e| Error::Format(format!("loss csv: {e}")))?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_loss_csv(path: impl AsRef<Path>, records: &[LossRecord]) -> Result<()> {
    write_loss_csv(std::fs::File::create(path)?, records)
}
