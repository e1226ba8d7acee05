//! Reverse-mode differentiation over a fixed vocabulary of raster ops.
//!
//! A [`Graph`] records every op applied during a forward pass. Values are
//! [`ImageGrid`]s (scalars are `1x1x1` grids, parameter vectors are
//! `1x1xN`). [`Graph::backward`] walks the record in reverse and returns the
//! gradient of a scalar output with respect to every node that depends on
//! a differentiable leaf.
//!
//! The vocabulary is small on purpose: every op here has a hand-written
//! adjoint and is exercised by the finite-difference checks in
//! `tests/gradients.rs`.

use crate::tensor::grid::ImageGrid;
use crate::tensor::sample::Taps;

/// Smoothing used wherever `|x|` appears in a differentiable path.
pub const ABS_EPS: f64 = 1e-6;

#[inline]
pub fn smooth_abs(x: f64) -> f64 {
    (x * x + ABS_EPS * ABS_EPS).sqrt()
}

#[inline]
fn smooth_abs_grad(x: f64) -> f64 {
    x / smooth_abs(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    pub fn weight_len(&self) -> usize {
        self.cout * self.kernel * self.kernel * self.cin
    }

    pub fn out_extent(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }
}

/// One top-k selection made by the spatial-attention op.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Selection {
    pub pixel: usize,
    pub neighbor: usize,
    pub slot: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Reshape(Var),
    MulMask(Var, Var),
    Exp(Var),
    Ln(Var),
    SmoothAbs(Var),
    AbsPow {
        x: Var,
        p: f64,
        eps: f64,
    },
    LeakyRelu(Var, f64),
    Sum(Var),
    SumChannels(Var),
    Channel(Var, usize),
    Concat(Var, Var),
    Warp {
        src: Var,
        flow: Var,
        taps: Vec<Taps>,
    },
    Conv {
        input: Var,
        weight: Var,
        bias: Var,
        spec: ConvSpec,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    Laplacian(Var),
    Correlation {
        f1: Var,
        f2: Var,
        radius: usize,
    },
    Spatial {
        feat: Var,
        kernel: Var,
        picks: Vec<Selection>,
        k: usize,
    },
    MinMax {
        x: Var,
        lo: usize,
        hi: usize,
        range: f64,
    },
    SoftHistogram {
        x: Var,
        picks: Vec<usize>,
        centers: Vec<f64>,
        temperature: f64,
    },
}

struct Node {
    value: ImageGrid,
    op: Op,
    needs_grad: bool,
}

/// Forward record of one differentiable computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar output, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a grid with the node's shape (zeros when unreachable).
    pub fn grid(&self, graph: &Graph, v: Var) -> ImageGrid {
        let (h, w, c) = graph.value(v).shape();
        match self.get(v) {
            Some(g) => ImageGrid::from_vec(h, w, c, g.to_vec()).expect("gradient shape"),
            None => ImageGrid::zeros(h, w, c),
        }
    }
}

fn scalar(v: f64) -> ImageGrid {
    ImageGrid::filled(1, 1, 1, v)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: ImageGrid, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A value that gradients never flow into.
    pub fn constant(&mut self, value: ImageGrid) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: ImageGrid) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn leaf_vec(&mut self, values: &[f64]) -> Var {
        let g = ImageGrid::from_vec(1, 1, values.len(), values.to_vec()).expect("non-empty leaf");
        self.leaf(g)
    }

    pub fn scalar_const(&mut self, v: f64) -> Var {
        self.constant(scalar(v))
    }

    pub fn value(&self, v: Var) -> &ImageGrid {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Detached copy: same value, no gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert!(
            va.same_shape(vb),
            "shape mismatch {:?} vs {:?}",
            va.shape(),
            vb.shape()
        );
        let (h, w, c) = va.shape();
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = ImageGrid::from_vec(h, w, c, data).expect("same shape");
        let ng = self.ng(&[a, b]);
        self.push(value, op, ng)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        let ng = self.ng(&[a]);
        self.push(value, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + s)
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(&mut self, a: Var, height: usize, width: usize, channels: usize) -> Var {
        let data = self.value(a).data().to_vec();
        let value = ImageGrid::from_vec(height, width, channels, data)
            .expect("reshape keeps the element count");
        let ng = self.ng(&[a]);
        self.push(value, Op::Reshape(a), ng)
    }

    /// Multiplies an `HxWxC` grid by an `HxWx1` mask, broadcasting channels.
    pub fn mul_mask(&mut self, a: Var, m: Var) -> Var {
        let (va, vm) = (self.value(a), self.value(m));
        assert!(va.same_extent(vm) && vm.channels() == 1, "mask shape");
        let c = va.channels();
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * vm.data()[i / c])
            .collect();
        let (h, w, _) = va.shape();
        let value = ImageGrid::from_vec(h, w, c, data).expect("shape");
        let ng = self.ng(&[a, m]);
        self.push(value, Op::MulMask(a, m), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Op::Ln(a), f64::ln)
    }

    /// `sqrt(x^2 + eps^2)`, the smoothed absolute value.
    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::SmoothAbs(a), smooth_abs)
    }

    /// `(|x| + eps)^p` with the smoothed absolute value.
    pub fn abs_pow(&mut self, a: Var, p: f64, eps: f64) -> Var {
        self.unary(a, Op::AbsPow { x: a, p, eps }, |x| {
            (smooth_abs(x) + eps).powf(p)
        })
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, Op::LeakyRelu(a, slope), |x| {
            if x > 0.0 {
                x
            } else {
                slope * x
            }
        })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(&[a]);
        self.push(scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn sum_channels(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let (h, w, c) = va.shape();
        let data = va.data().chunks(c).map(|px| px.iter().sum()).collect();
        let value = ImageGrid::from_vec(h, w, 1, data).expect("shape");
        let ng = self.ng(&[a]);
        self.push(value, Op::SumChannels(a), ng)
    }

    pub fn channel(&mut self, a: Var, c: usize) -> Var {
        let value = self.value(a).channel(c);
        let ng = self.ng(&[a]);
        self.push(value, Op::Channel(a, c), ng)
    }

    /// Channel concatenation of two grids with equal extent.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert!(va.same_extent(vb), "concat extent");
        let (ca, cb) = (va.channels(), vb.channels());
        let value = ImageGrid::from_fn(va.height(), va.width(), ca + cb, |x, y, c| {
            if c < ca {
                va.get(x, y, c)
            } else {
                vb.get(x, y, c - ca)
            }
        });
        let ng = self.ng(&[a, b]);
        self.push(value, Op::Concat(a, b), ng)
    }

    /// Backward warp `out(p) = src(p + flow(p))`, differentiable in both.
    pub fn warp(&mut self, src: Var, flow: Var) -> Var {
        let (vs, vf) = (self.value(src), self.value(flow));
        assert!(vs.same_extent(vf) && vf.channels() == 2, "warp shapes");
        let (h, w, c) = vs.shape();
        let mut out = ImageGrid::zeros(h, w, c);
        let mut taps = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let t = Taps::new(w, h, x as f64 + vf.get(x, y, 0), y as f64 + vf.get(x, y, 1));
                let wts = t.weights();
                for ch in 0..c {
                    let v: f64 = t
                        .corners()
                        .iter()
                        .zip(wts)
                        .map(|(&(cx, cy), wk)| wk * vs.get(cx, cy, ch))
                        .sum();
                    out.set(x, y, ch, v);
                }
                taps.push(t);
            }
        }
        let ng = self.ng(&[src, flow]);
        self.push(out, Op::Warp { src, flow, taps }, ng)
    }

    /// 2-D convolution on `HxWxCin` input. Weights are laid out
    /// `[cout][ky][kx][cin]`; zero padding.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, spec: ConvSpec) -> Var {
        let (vi, vw, vb) = (self.value(input), self.value(weight), self.value(bias));
        assert_eq!(vi.channels(), spec.cin, "conv input channels");
        assert_eq!(vw.len(), spec.weight_len(), "conv weight size");
        assert_eq!(vb.len(), spec.cout, "conv bias size");
        let (h, w, _) = vi.shape();
        let (oh, ow) = spec.out_extent(h, w);
        let (k, cin, cout) = (spec.kernel, spec.cin, spec.cout);
        let wd = vw.data();
        let id = vi.data();
        let mut out = ImageGrid::zeros(oh, ow, cout);
        let od = out.data_mut();
        for oy in 0..oh {
            for ox in 0..ow {
                let obase = (oy * ow + ox) * cout;
                od[obase..obase + cout].copy_from_slice(vb.data());
                for ky in 0..k {
                    let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let ibase = (iy as usize * w + ix as usize) * cin;
                        let px = &id[ibase..ibase + cin];
                        for co in 0..cout {
                            let wbase = ((co * k + ky) * k + kx) * cin;
                            let ws = &wd[wbase..wbase + cin];
                            od[obase + co] += ws.iter().zip(px).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
            }
        }
        let ng = self.ng(&[input, weight, bias]);
        self.push(
            out,
            Op::Conv {
                input,
                weight,
                bias,
                spec,
            },
            ng,
        )
    }

    /// Bilinear upsampling by an integer factor (pixel-center aligned).
    pub fn upsample(&mut self, x: Var, factor: usize) -> Var {
        let vx = self.value(x);
        let (h, w, c) = vx.shape();
        let (oh, ow) = (h * factor, w * factor);
        let mut out = ImageGrid::zeros(oh, ow, c);
        for oy in 0..oh {
            for ox in 0..ow {
                let t = upsample_taps(ox, oy, factor, w, h);
                let wts = t.weights();
                for ch in 0..c {
                    let v: f64 = t
                        .corners()
                        .iter()
                        .zip(wts)
                        .map(|(&(cx, cy), wk)| wk * vx.get(cx, cy, ch))
                        .sum();
                    out.set(ox, oy, ch, v);
                }
            }
        }
        let ng = self.ng(&[x]);
        self.push(out, Op::Upsample { x, factor }, ng)
    }

    /// 5-point Laplacian with replicate borders (see [`crate::tensor::laplacian`]).
    pub fn laplacian(&mut self, x: Var) -> Var {
        let value = crate::tensor::sample::laplacian(self.value(x)).expect("laplacian extent");
        let ng = self.ng(&[x]);
        self.push(value, Op::Laplacian(x), ng)
    }

    /// Local correlation `<f1(p), f2(p + d)> / C` over a `(2r+1)^2` window,
    /// displacement slots ordered row-major from `(-r, -r)`. Out-of-frame
    /// features count as zero.
    pub fn correlation(&mut self, f1: Var, f2: Var, radius: usize) -> Var {
        let (v1, v2) = (self.value(f1), self.value(f2));
        assert!(v1.same_shape(v2), "correlation shapes");
        let (h, w, c) = v1.shape();
        let side = 2 * radius + 1;
        let r = radius as isize;
        let inv_c = 1.0 / c as f64;
        let mut out = ImageGrid::zeros(h, w, side * side);
        for y in 0..h {
            for x in 0..w {
                let a = v1.pixel(x, y);
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (qx, qy) = (x as isize + dx, y as isize + dy);
                        if qx < 0 || qy < 0 || qx >= w as isize || qy >= h as isize {
                            continue;
                        }
                        let b = v2.pixel(qx as usize, qy as usize);
                        let slot = ((dy + r) as usize) * side + (dx + r) as usize;
                        let s: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
                        out.set(x, y, slot, s * inv_c);
                    }
                }
            }
        }
        let ng = self.ng(&[f1, f2]);
        self.push(out, Op::Correlation { f1, f2, radius }, ng)
    }

    pub(crate) fn spatial_attention(
        &mut self,
        feat: Var,
        kernel: Var,
        value: ImageGrid,
        picks: Vec<Selection>,
        k: usize,
    ) -> Var {
        let ng = self.ng(&[feat, kernel]);
        self.push(
            value,
            Op::Spatial {
                feat,
                kernel,
                picks,
                k,
            },
            ng,
        )
    }

    /// Min-max normalization to `[0, 1]`; a constant input maps to 0.5.
    /// Returns the normalized node and the `(min, max)` used.
    pub fn min_max_normalize(&mut self, x: Var) -> (Var, (f64, f64)) {
        let vx = self.value(x);
        let (mut lo, mut hi) = (0usize, 0usize);
        for (i, &v) in vx.data().iter().enumerate() {
            if v < vx.data()[lo] {
                lo = i;
            }
            if v > vx.data()[hi] {
                hi = i;
            }
        }
        let (mn, mx) = (vx.data()[lo], vx.data()[hi]);
        let range = mx - mn;
        let value = if range > 0.0 {
            vx.map(|v| (v - mn) / range)
        } else {
            vx.map(|_| 0.5)
        };
        let ng = self.ng(&[x]);
        let out = self.push(value, Op::MinMax { x, lo, hi, range }, ng);
        (out, (mn, mx))
    }

    /// Temperature-softened histogram over the entries of `x` at `picks`:
    /// returns a `1x1xk` grid `(n_soft_i + 1) / (N + k)`.
    pub fn soft_histogram(
        &mut self,
        x: Var,
        picks: Vec<usize>,
        centers: Vec<f64>,
        temperature: f64,
    ) -> Var {
        let vx = self.value(x);
        let k = centers.len();
        let n = picks.len();
        let mut counts = vec![0.0; k];
        let mut s = vec![0.0; k];
        for &i in &picks {
            soft_assign(vx.data()[i], &centers, temperature, &mut s);
            counts.iter_mut().zip(&s).for_each(|(c, si)| *c += si);
        }
        let denom = (n + k) as f64;
        let probs = counts.iter().map(|c| (c + 1.0) / denom).collect();
        let value = ImageGrid::from_vec(1, 1, k, probs).expect("k > 0");
        let ng = self.ng(&[x]);
        self.push(
            value,
            Op::SoftHistogram {
                x,
                picks,
                centers,
                temperature,
            },
            ng,
        )
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(self.value(out).len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(vec![1.0]);
        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        let val = |v: Var| nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s -= g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * vb[i];
                    }
                });
                acc(*b, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * va[i];
                    }
                });
            }
            Op::Scale(a, k) => acc(*a, &mut |s| {
                s.iter_mut().zip(g).for_each(|(s, g)| *s += g * k)
            }),
            Op::AddScalar(a) | Op::Reshape(a) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g))
            }
            Op::MulMask(a, m) => {
                let (va, vm) = (val(*a), val(*m));
                let c = va.len() / vm.len();
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * vm[i / c];
                    }
                });
                acc(*m, &mut |s| {
                    for i in 0..va.len() {
                        s[i / c] += g[i] * va[i];
                    }
                });
            }
            Op::Exp(a) => {
                let y = node.value.data();
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * y[i];
                    }
                });
            }
            Op::Ln(a) => {
                let x = val(*a);
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] / x[i];
                    }
                });
            }
            Op::SmoothAbs(a) => {
                let x = val(*a);
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * smooth_abs_grad(x[i]);
                    }
                });
            }
            Op::AbsPow { x, p, eps } => {
                let xv = val(*x);
                acc(*x, &mut |s| {
                    for i in 0..s.len() {
                        let a = smooth_abs(xv[i]);
                        s[i] += g[i] * p * (a + eps).powf(p - 1.0) * xv[i] / a;
                    }
                });
            }
            Op::LeakyRelu(a, slope) => {
                let x = val(*a);
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * if x[i] > 0.0 { 1.0 } else { *slope };
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |s| s.iter_mut().for_each(|s| *s += g[0])),
            Op::SumChannels(a) => {
                let c = nodes[a.0].value.channels();
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i / c];
                    }
                });
            }
            Op::Channel(a, ch) => {
                let c = nodes[a.0].value.channels();
                acc(*a, &mut |s| {
                    for (p, gv) in g.iter().enumerate() {
                        s[p * c + ch] += gv;
                    }
                });
            }
            Op::Concat(a, b) => {
                let ca = nodes[a.0].value.channels();
                let cb = nodes[b.0].value.channels();
                let ct = ca + cb;
                acc(*a, &mut |s| {
                    for p in 0..s.len() / ca {
                        for c in 0..ca {
                            s[p * ca + c] += g[p * ct + c];
                        }
                    }
                });
                acc(*b, &mut |s| {
                    for p in 0..s.len() / cb {
                        for c in 0..cb {
                            s[p * cb + c] += g[p * ct + ca + c];
                        }
                    }
                });
            }
            Op::Warp { src, flow, taps } => {
                let vs = &nodes[src.0].value;
                let (w, c) = (vs.width(), vs.channels());
                acc(*src, &mut |s| {
                    for (p, t) in taps.iter().enumerate() {
                        let wts = t.weights();
                        for (&(cx, cy), wk) in t.corners().iter().zip(wts) {
                            let base = (cy * w + cx) * c;
                            for ch in 0..c {
                                s[base + ch] += wk * g[p * c + ch];
                            }
                        }
                    }
                });
                acc(*flow, &mut |s| {
                    for (p, t) in taps.iter().enumerate() {
                        let (mut gu, mut gv) = (0.0, 0.0);
                        for ch in 0..c {
                            let s00 = vs.get(t.x0, t.y0, ch);
                            let s10 = vs.get(t.x1, t.y0, ch);
                            let s01 = vs.get(t.x0, t.y1, ch);
                            let s11 = vs.get(t.x1, t.y1, ch);
                            let go = g[p * c + ch];
                            if t.dx_live {
                                gu += go * ((1.0 - t.ay) * (s10 - s00) + t.ay * (s11 - s01));
                            }
                            if t.dy_live {
                                gv += go * ((1.0 - t.ax) * (s01 - s00) + t.ax * (s11 - s10));
                            }
                        }
                        s[2 * p] += gu;
                        s[2 * p + 1] += gv;
                    }
                });
            }
            Op::Conv {
                input,
                weight,
                bias,
                spec,
            } => self.conv_backward(node, g, *input, *weight, *bias, *spec, grads),
            Op::Upsample { x, factor } => {
                let vx = &nodes[x.0].value;
                let (h, w, c) = vx.shape();
                let (oh, ow) = (h * factor, w * factor);
                acc(*x, &mut |s| {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let t = upsample_taps(ox, oy, *factor, w, h);
                            let wts = t.weights();
                            let obase = (oy * ow + ox) * c;
                            for (&(cx, cy), wk) in t.corners().iter().zip(wts) {
                                let base = (cy * w + cx) * c;
                                for ch in 0..c {
                                    s[base + ch] += wk * g[obase + ch];
                                }
                            }
                        }
                    }
                });
            }
            Op::Laplacian(x) => {
                let (h, w, c) = nodes[x.0].value.shape();
                acc(*x, &mut |s| {
                    for y in 0..h {
                        for xx in 0..w {
                            let (xl, xr) = (xx.saturating_sub(1), (xx + 1).min(w - 1));
                            let (yu, yd) = (y.saturating_sub(1), (y + 1).min(h - 1));
                            for ch in 0..c {
                                let go = g[(y * w + xx) * c + ch];
                                s[(y * w + xl) * c + ch] += go;
                                s[(y * w + xr) * c + ch] += go;
                                s[(yu * w + xx) * c + ch] += go;
                                s[(yd * w + xx) * c + ch] += go;
                                s[(y * w + xx) * c + ch] -= 4.0 * go;
                            }
                        }
                    }
                });
            }
            Op::Correlation { f1, f2, radius } => {
                let (v1, v2) = (&nodes[f1.0].value, &nodes[f2.0].value);
                let (h, w, c) = v1.shape();
                let side = 2 * radius + 1;
                let r = *radius as isize;
                let inv_c = 1.0 / c as f64;
                let d = side * side;
                let visit = |target: &mut [f64], first: bool| {
                    for y in 0..h {
                        for x in 0..w {
                            for dy in -r..=r {
                                for dx in -r..=r {
                                    let (qx, qy) = (x as isize + dx, y as isize + dy);
                                    if qx < 0 || qy < 0 || qx >= w as isize || qy >= h as isize {
                                        continue;
                                    }
                                    let (qx, qy) = (qx as usize, qy as usize);
                                    let slot = ((dy + r) as usize) * side + (dx + r) as usize;
                                    let go = g[(y * w + x) * d + slot] * inv_c;
                                    if go == 0.0 {
                                        continue;
                                    }
                                    let (pi, qi) = ((y * w + x) * c, (qy * w + qx) * c);
                                    if first {
                                        for ch in 0..c {
                                            target[pi + ch] += go * v2.data()[qi + ch];
                                        }
                                    } else {
                                        for ch in 0..c {
                                            target[qi + ch] += go * v1.data()[pi + ch];
                                        }
                                    }
                                }
                            }
                        }
                    }
                };
                if f1 == f2 {
                    acc(*f1, &mut |s| {
                        visit(s, true);
                        visit(s, false);
                    });
                } else {
                    acc(*f1, &mut |s| visit(s, true));
                    acc(*f2, &mut |s| visit(s, false));
                }
            }
            Op::Spatial {
                feat,
                kernel,
                picks,
                k,
            } => {
                let vf = &nodes[feat.0].value;
                let kw = nodes[kernel.0].value.data();
                let c = vf.channels();
                let d = node.value.channels();
                let norm = 1.0 / (*k as f64 * c as f64);
                acc(*feat, &mut |s| {
                    for sel in picks {
                        let go = g[sel.pixel * d + sel.slot] * norm;
                        let (pi, qi) = (sel.pixel * c, sel.neighbor * c);
                        for ch in 0..c {
                            let w2 = kw[ch] * kw[ch];
                            s[pi + ch] += go * w2 * vf.data()[qi + ch];
                            s[qi + ch] += go * w2 * vf.data()[pi + ch];
                        }
                    }
                });
                acc(*kernel, &mut |s| {
                    for sel in picks {
                        let go = g[sel.pixel * d + sel.slot] * norm;
                        let (pi, qi) = (sel.pixel * c, sel.neighbor * c);
                        for ch in 0..c {
                            s[ch] += go * 2.0 * kw[ch] * vf.data()[pi + ch] * vf.data()[qi + ch];
                        }
                    }
                });
            }
            Op::MinMax { x, lo, hi, range } => {
                if *range <= 0.0 {
                    return;
                }
                let xv = val(*x);
                let (mn, mx) = (xv[*lo], xv[*hi]);
                let r2 = range * range;
                let (mut g_lo, mut g_hi) = (0.0, 0.0);
                for i in 0..xv.len() {
                    g_lo += g[i] * (xv[i] - mx) / r2;
                    g_hi -= g[i] * (xv[i] - mn) / r2;
                }
                acc(*x, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] / range;
                    }
                    s[*lo] += g_lo;
                    s[*hi] += g_hi;
                });
            }
            Op::SoftHistogram {
                x,
                picks,
                centers,
                temperature,
            } => {
                let xv = val(*x);
                let k = centers.len();
                let denom = (picks.len() + k) as f64;
                let mut sm = vec![0.0; k];
                acc(*x, &mut |s| {
                    for &i in picks {
                        let c = xv[i];
                        soft_assign(c, centers, *temperature, &mut sm);
                        let mean: f64 = (0..k).map(|j| g[j] * sm[j]).sum::<f64>();
                        let mut gc = 0.0;
                        for l in 0..k {
                            let da = -smooth_abs_grad(c - centers[l]) / temperature;
                            gc += sm[l] * (g[l] - mean) * da;
                        }
                        s[i] += gc / denom;
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        node: &Node,
        g: &[f64],
        input: Var,
        weight: Var,
        bias: Var,
        spec: ConvSpec,
        grads: &mut [Option<Vec<f64>>],
    ) {
        let vi = &self.nodes[input.0].value;
        let vw = self.nodes[weight.0].value.data();
        let (h, w, _) = vi.shape();
        let (oh, ow) = (node.value.height(), node.value.width());
        let (k, cin, cout) = (spec.kernel, spec.cin, spec.cout);
        let id = vi.data();
        let mut gi = self.nodes[input.0].needs_grad.then(|| vec![0.0; id.len()]);
        let mut gw = self.nodes[weight.0].needs_grad.then(|| vec![0.0; vw.len()]);
        if self.nodes[bias.0].needs_grad {
            let mut gb = vec![0.0; cout];
            for px in g.chunks(cout) {
                gb.iter_mut().zip(px).for_each(|(b, v)| *b += v);
            }
            add_into(&mut grads[bias.0], gb);
        }
        for oy in 0..oh {
            for ox in 0..ow {
                let go = &g[(oy * ow + ox) * cout..(oy * ow + ox + 1) * cout];
                for ky in 0..k {
                    let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let ibase = (iy as usize * w + ix as usize) * cin;
                        for (co, &gv) in go.iter().enumerate() {
                            if gv == 0.0 {
                                continue;
                            }
                            let wbase = ((co * k + ky) * k + kx) * cin;
                            if let Some(gw) = gw.as_mut() {
                                for ci in 0..cin {
                                    gw[wbase + ci] += gv * id[ibase + ci];
                                }
                            }
                            if let Some(gi) = gi.as_mut() {
                                for ci in 0..cin {
                                    gi[ibase + ci] += gv * vw[wbase + ci];
                                }
                            }
                        }
                    }
                }
            }
        }
        if let Some(gi) = gi {
            add_into(&mut grads[input.0], gi);
        }
        if let Some(gw) = gw {
            add_into(&mut grads[weight.0], gw);
        }
    }
}

fn add_into(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(s) => s.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

fn upsample_taps(ox: usize, oy: usize, factor: usize, w: usize, h: usize) -> Taps {
    let f = factor as f64;
    let sx = (ox as f64 + 0.5) / f - 0.5;
    let sy = (oy as f64 + 0.5) / f - 0.5;
    Taps::new(w, h, sx, sy)
}

/// Softmax over `-|c - center_i| / T` into `out`.
pub(crate) fn soft_assign(c: f64, centers: &[f64], temperature: f64, out: &mut [f64]) {
    let mut best = f64::NEG_INFINITY;
    for (o, &ctr) in out.iter_mut().zip(centers) {
        *o = -smooth_abs(c - ctr) / temperature;
        best = best.max(*o);
    }
    let mut z = 0.0;
    for o in out.iter_mut() {
        *o = (*o - best).exp();
        z += *o;
    }
    out.iter_mut().for_each(|o| *o /= z);
}
