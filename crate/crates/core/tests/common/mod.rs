#![allow(dead_code)]

pub mod golden;

use fogflow_core::cda::{kl_var, soft_distribution_var, CdaConfig};
use fogflow_core::cost_volume::{fuse_cv_var, sca_cv_var, temporal_cv_var, SCA_KERNEL};
use fogflow_core::flownet::{FlowNet, NetConfig};
use fogflow_core::losses::disparity_flow;
use fogflow_core::losses::{graph, LossWeights, Reduction, SparseNorm};
use fogflow_core::tensor::{
    self, grad_check, Bound, FlowField, Graph, ImageGrid, Mask, ParamStore, Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_EPS: f64 = 1e-6;
pub const GRAD_POINTS: u64 = 10;
pub const SIDE: usize = 8;
/// Points whose non-smooth arguments (|x| inputs) lie closer than this to
/// the kink are redrawn.
pub const KINK_MARGIN: f64 = 1e-4;

/// Arguments of the non-smooth functions an op evaluates at a point.
type Kinks = fn(&ParamStore) -> Vec<f64>;

fn grid(store: &ParamStore, name: &str, c: usize) -> ImageGrid {
    ImageGrid::from_vec(SIDE, SIDE, c, store.get(name).unwrap().value.clone()).unwrap()
}

fn diff(a: &ImageGrid, b: &ImageGrid) -> Vec<f64> {
    a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect()
}

fn warp_residual(store: &ParamStore, a: &str, b: &str, flow: &FlowField) -> Vec<f64> {
    diff(
        &grid(store, a, 3),
        &tensor::warp(&grid(store, b, 3), flow).unwrap(),
    )
}

/// One named input of an op under test.
pub struct Input {
    pub name: &'static str,
    pub shape: [usize; 3],
    pub range: (f64, f64),
}

const fn input(name: &'static str, shape: [usize; 3], lo: f64, hi: f64) -> Input {
    Input {
        name,
        shape,
        range: (lo, hi),
    }
}

fn random_store(inputs: &[Input], rng: &mut ChaCha8Rng) -> ParamStore {
    let mut store = ParamStore::new();
    for i in inputs {
        let n = i.shape.iter().product();
        let v = (0..n)
            .map(|_| rng.gen_range(i.range.0..i.range.1))
            .collect();
        store.insert(i.name, i.shape.to_vec(), v).unwrap();
    }
    store
}

fn random_mask(rng: &mut ChaCha8Rng, p: f64) -> Mask {
    Mask::from_fn(SIDE, SIDE, |_, _| if rng.gen_bool(p) { 1.0 } else { 0.0 })
}

/// Reshaped input nodes, in declaration order.
fn bind_inputs(g: &mut Graph, b: &Bound, inputs: &[Input]) -> Vec<Var> {
    inputs
        .iter()
        .map(|i| g.reshape(b.get(i.name), i.shape[0], i.shape[1], i.shape[2]))
        .collect()
}

/// `sum(w * out)` with fixed random weights drawn from `seed`.
fn project(g: &mut Graph, out: Var, seed: u64) -> Var {
    let (h, w, c) = g.value(out).shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let wts = (0..h * w * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let wv = g.constant(ImageGrid::from_vec(h, w, c, wts).unwrap());
    let prod = g.mul(out, wv);
    g.sum(prod)
}

/// Worst relative gradient error of `op` over `GRAD_POINTS` seeded points.
///
/// `extra` holds fixed parameters (network weights) that are checked
/// alongside the random inputs; `op` also receives a per-point RNG for
/// constant side data such as masks.
fn check_op<F>(inputs: &[Input], extra: Option<&ParamStore>, op: F) -> f64
where
    F: Fn(&mut Graph, &Bound, &[Var], &mut ChaCha8Rng) -> Var,
{
    check_op_away_from(inputs, extra, None, op)
}

fn check_op_away_from<F>(
    inputs: &[Input],
    extra: Option<&ParamStore>,
    kinks: Option<Kinks>,
    op: F,
) -> f64
where
    F: Fn(&mut Graph, &Bound, &[Var], &mut ChaCha8Rng) -> Var,
{
    let mut worst: f64 = 0.0;
    for seed in 0..GRAD_POINTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = random_store(inputs, &mut rng);
        while kinks.is_some_and(|k| k(&store).iter().any(|v| v.abs() < KINK_MARGIN)) {
            store = random_store(inputs, &mut rng);
        }
        if let Some(extra) = extra {
            for (name, p) in extra.iter() {
                store
                    .insert(name, p.shape.clone(), p.value.clone())
                    .unwrap();
            }
        }
        let side_seed = rng.gen::<u64>();
        let err = grad_check(
            |g, b| {
                let vars = bind_inputs(g, b, inputs);
                let mut side = ChaCha8Rng::seed_from_u64(side_seed);
                let out = op(g, b, &vars, &mut side);
                project(g, out, seed)
            },
            &store,
            GRAD_EPS,
        )
        .unwrap();
        worst = worst.max(err);
    }
    worst
}

pub fn warp() -> f64 {
    let ins = [
        input("src", [SIDE, SIDE, 3], 0.0, 1.0),
        input("flow", [SIDE, SIDE, 2], -2.0, 2.0),
    ];
    check_op(&ins, None, |g, _, v, _| g.warp(v[0], v[1]))
}

pub fn sparse_lp() -> f64 {
    let ins = [input("x", [SIDE, SIDE, 3], -1.0, 1.0)];
    let kinks: Kinks = |s| s.get("x").unwrap().value.clone();
    check_op_away_from(&ins, None, Some(kinks), |g, _, v, _| {
        graph::sparse_lp(g, v[0], &SparseNorm::default())
    })
}

pub fn photometric() -> f64 {
    let ins = [
        input("i_t", [SIDE, SIDE, 3], 0.0, 1.0),
        input("i_t1", [SIDE, SIDE, 3], 0.0, 1.0),
        input("f_f", [SIDE, SIDE, 2], -1.5, 1.5),
        input("f_b", [SIDE, SIDE, 2], -1.5, 1.5),
    ];
    let kinks: Kinks = |s| {
        let f = |n| FlowField::from_grid(grid(s, n, 2)).unwrap();
        let mut k = warp_residual(s, "i_t", "i_t1", &f("f_f"));
        k.extend(warp_residual(s, "i_t1", "i_t", &f("f_b")));
        k
    };
    check_op_away_from(&ins, None, Some(kinks), |g, _, v, rng| {
        let (o_f, o_b) = (random_mask(rng, 0.2), random_mask(rng, 0.2));
        graph::photometric_flow_loss(
            g,
            v[0],
            v[1],
            v[2],
            v[3],
            &o_f,
            &o_b,
            &SparseNorm::default(),
        )
        .unwrap()
    })
}

pub fn depth() -> f64 {
    let ins = [
        input("il_t", [SIDE, SIDE, 3], 0.0, 1.0),
        input("ir_t", [SIDE, SIDE, 3], 0.0, 1.0),
        input("il_t1", [SIDE, SIDE, 3], 0.0, 1.0),
        input("ir_t1", [SIDE, SIDE, 3], 0.0, 1.0),
        input("disp_t", [SIDE, SIDE, 1], 0.3, 2.5),
        input("disp_t1", [SIDE, SIDE, 1], 0.3, 2.5),
    ];
    let kinks: Kinks = |s| {
        let mut k = Vec::new();
        for (l, r, d) in [("il_t", "ir_t", "disp_t"), ("il_t1", "ir_t1", "disp_t1")] {
            let disp = grid(s, d, 1);
            k.extend(warp_residual(s, l, r, &disparity_flow(&disp)));
            k.extend(tensor::laplacian(&disp).unwrap().data());
            k.extend(tensor::laplacian(&grid(s, l, 3)).unwrap().data());
        }
        k
    };
    check_op_away_from(&ins, None, Some(kinks), |g, _, v, _| {
        graph::depth_loss(
            g,
            v[0],
            v[1],
            v[2],
            v[3],
            v[4],
            v[5],
            &SparseNorm::default(),
        )
        .unwrap()
    })
}

pub fn geo() -> f64 {
    let ins = [
        input("f", [SIDE, SIDE, 2], -2.0, 2.0),
        input("f_rigid", [SIDE, SIDE, 2], -2.0, 2.0),
    ];
    let kinks: Kinks = |s| diff(&grid(s, "f", 2), &grid(s, "f_rigid", 2));
    check_op_away_from(&ins, None, Some(kinks), |g, _, v, rng| {
        let mask = random_mask(rng, 0.3);
        graph::geo_flow_loss(g, v[0], v[1], &mask).unwrap()
    })
}

pub fn consistency() -> f64 {
    let ins = [
        input("f_syn", [SIDE, SIDE, 2], -2.0, 2.0),
        input("f", [SIDE, SIDE, 2], -2.0, 2.0),
    ];
    let kinks: Kinks = |s| diff(&grid(s, "f_syn", 2), &grid(s, "f", 2));
    check_op_away_from(&ins, None, Some(kinks), |g, _, v, _| {
        graph::l1_flow(g, v[0], v[1], Reduction::Sum)
    })
}

pub fn self_supervised() -> f64 {
    let ins = [
        input("f_real", [SIDE, SIDE, 2], -2.0, 2.0),
        input("f_pseudo", [SIDE, SIDE, 2], -2.0, 2.0),
    ];
    let kinks: Kinks = |s| diff(&grid(s, "f_real", 2), &grid(s, "f_pseudo", 2));
    check_op_away_from(&ins, None, Some(kinks), |g, _, v, _| {
        graph::l1_flow(g, v[0], v[1], Reduction::Mean)
    })
}

pub fn total() -> f64 {
    let ins = [
        input("depth", [1, 1, 1], 0.0, 2.0),
        input("pho", [1, 1, 1], 0.0, 2.0),
        input("geo", [1, 1, 1], 0.0, 2.0),
        input("consis", [1, 1, 1], 0.0, 2.0),
        input("self", [1, 1, 1], 0.0, 2.0),
        input("kl", [1, 1, 1], 0.0, 2.0),
    ];
    check_op(&ins, None, |g, _, v, rng| {
        let mut w = LossWeights::zero();
        w.depth = rng.gen_range(0.1..2.0);
        w.pho = rng.gen_range(0.1..2.0);
        w.geo = rng.gen_range(0.1..2.0);
        w.consis = rng.gen_range(0.1..2.0);
        w.self_sup = rng.gen_range(0.1..2.0);
        w.kl = rng.gen_range(0.1..2.0);
        let terms = [
            Some(v[0]),
            Some(v[1]),
            Some(v[2]),
            Some(v[3]),
            Some(v[4]),
            Some(v[5]),
        ];
        graph::total_loss(g, &terms, &w).unwrap()
    })
}

pub fn temporal_cv() -> f64 {
    let ins = [
        input("f_t", [SIDE, SIDE, 4], -1.0, 1.0),
        input("f_t1", [SIDE, SIDE, 4], -1.0, 1.0),
        input("flow", [SIDE, SIDE, 2], -1.5, 1.5),
    ];
    check_op(&ins, None, |g, _, v, _| {
        temporal_cv_var(g, v[0], v[1], v[2], 2)
    })
}

pub fn sca_cv() -> f64 {
    let ins = [
        input("feat", [SIDE, SIDE, 4], -1.0, 1.0),
        input(SCA_KERNEL, [1, 1, 4], 0.5, 1.5),
    ];
    check_op(&ins, None, |g, _, v, _| {
        sca_cv_var(g, v[0], v[1], 5, 4).unwrap()
    })
}

pub fn fused_cv() -> f64 {
    let ins = [
        input("temp", [SIDE, SIDE, 25], -1.0, 1.0),
        input("spa", [SIDE, SIDE, 25], -1.0, 1.0),
    ];
    check_op(&ins, None, |g, _, v, _| fuse_cv_var(g, v[0], v[1], 0.5).0)
}

pub fn soft_kl() -> f64 {
    let ins = [
        input("cv_r", [SIDE, SIDE, 25], 0.0, 1.0),
        input("cv_s", [SIDE, SIDE, 25], 0.0, 1.0),
    ];
    check_op(&ins, None, |g, _, v, rng| {
        let cfg = CdaConfig::linear(64, 10, 0);
        let n = SIDE * SIDE * 25;
        let picks_r: Vec<usize> = (0..64).map(|_| rng.gen_range(0..n)).collect();
        let picks_s: Vec<usize> = (0..64).map(|_| rng.gen_range(0..n)).collect();
        let p_r = soft_distribution_var(g, v[0], picks_r, &cfg);
        let p_s = soft_distribution_var(g, v[1], picks_s, &cfg);
        kl_var(g, p_r, p_s)
    })
}

fn net() -> FlowNet {
    FlowNet::new(NetConfig::default(), 3)
        .unwrap()
        .with_disparity_head(4)
        .unwrap()
}

pub fn encoder() -> f64 {
    let n = net();
    let ins = [input("img", [SIDE, SIDE, 3], 0.0, 1.0)];
    check_op(&ins, Some(&n.params.subset("enc.")), |g, b, v, _| {
        n.encode_var(g, b, v[0])
    })
}

pub fn decoder() -> f64 {
    let n = net();
    let side = 2 * n.config.cost_volume.radius + 1;
    let ins = [input("cv", [SIDE / 4, SIDE / 4, side * side], 0.0, 1.0)];
    check_op(&ins, Some(&n.params.subset("dec.")), |g, b, v, _| {
        n.decode_var(g, b, v[0])
    })
}

pub fn disparity_head() -> f64 {
    let n = net();
    let ins = [input("img", [SIDE, SIDE, 3], 0.0, 1.0)];
    check_op(&ins, Some(&n.params.subset("disp.")), |g, b, v, _| {
        n.disparity_var(g, b, v[0])
    })
}

type Op = (&'static str, fn() -> f64);

/// Every differentiable op with its worst error.
pub fn gradient_suite() -> Vec<(&'static str, f64)> {
    let ops: [Op; 16] = [
        ("warp", warp),
        ("sparse_lp", sparse_lp),
        ("photometric", photometric),
        ("depth", depth),
        ("geo", geo),
        ("consistency", consistency),
        ("self_supervised", self_supervised),
        ("total", total),
        ("temporal_cv", temporal_cv),
        ("sca_cv", sca_cv),
        ("fused_cv", fused_cv),
        ("soft_kl", soft_kl),
        ("encoder", encoder),
        ("decoder", decoder),
        ("disparity_head", disparity_head),
        ("sca_kernel_in_net", sca_kernel_in_net),
    ];
    ops.iter().map(|(n, f)| (*n, f())).collect()
}

/// The fused cost volume as the network computes it, including the SCA
/// kernel parameter.
pub fn sca_kernel_in_net() -> f64 {
    let n = net();
    let ins = [
        input("f_t", [SIDE, SIDE, 16], -1.0, 1.0),
        input("f_t1", [SIDE, SIDE, 16], -1.0, 1.0),
    ];
    check_op(&ins, Some(&n.params.subset(SCA_KERNEL)), |g, b, v, _| {
        n.cost_volume_var(g, b, v[0], v[1]).unwrap()
    })
}
