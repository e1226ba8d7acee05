//! Staged training: clean-domain flow and disparity, synthetic-fog
//! transfer, correlation-aligned distillation into the real-fog branch,
//! then joint fine-tuning of all three branches.
//!
//! A branch whose objective is switched off mirrors its upstream branch, so
//! the deployed model is always the real-fog branch.

use std::collections::{BTreeMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cda::{distribution, kl_loss, kl_var, sample_indices, soft_distribution_var, CdaConfig};
use crate::cost_volume::CostVolume;
use crate::error::{ensure, Error, Result};
use crate::eval::{epe, f1_all, RegionStats};
use crate::flownet::{ema_update_prefix, EmaConfig, FlowNet, NetConfig, ENCODER_PREFIX};
use crate::fog::{add_fog, add_fog_with_sensor, FogParams, SensorModel};
use crate::geometry::{
    fb_occlusion, nonrigid_region, project_rigid_flow, NonRigidRule, RigidFlow, OCC_ALPHA1,
    OCC_ALPHA2,
};
use crate::losses::{graph, LossRecord, LossTerms, LossWeights, Reduction, SparseNorm};
use crate::scene::{make_scene, SceneConfig, SceneSample};
use crate::tensor::{DepthMap, FlowField, Graph, ImageGrid, Mask, ParamStore};

pub const STAGE_CLEAN: &str = "dama_clean";
pub const STAGE_SYNTHETIC: &str = "dama_synthetic";
pub const STAGE_CAMA: &str = "cama";
pub const STAGE_JOINT: &str = "joint";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageSteps {
    pub clean: usize,
    pub synthetic: usize,
    pub cama: usize,
    pub joint: usize,
}

impl Default for StageSteps {
    fn default() -> Self {
        Self {
            clean: 300,
            synthetic: 200,
            cama: 300,
            joint: 200,
        }
    }
}

impl StageSteps {
    pub fn total(&self) -> usize {
        self.clean + self.synthetic + self.cama + self.joint
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    /// Learning rate of the clean, synthetic and CAMA stages.
    pub lr: f64,
    /// Learning rate of the joint stage.
    pub joint_lr: f64,
    pub momentum: f64,
    /// Global gradient-norm clip.
    pub grad_clip: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 5e-3,
            joint_lr: 2e-3,
            momentum: 0.9,
            grad_clip: 10.0,
        }
    }
}

/// Scene manifests. All scenes derive from `manifest_seed`, so the eval set
/// is fixed across training seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub size: usize,
    pub max_objects: usize,
    pub train_scenes: usize,
    pub real_scenes: usize,
    pub eval_scenes: usize,
    pub manifest_seed: u64,
    /// Multiplies camera translation and object motion of the random scenes.
    pub motion_scale: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            size: 32,
            max_objects: 2,
            train_scenes: 8,
            real_scenes: 8,
            eval_scenes: 6,
            manifest_seed: 0,
            motion_scale: 1.0,
        }
    }
}

/// Depth source of the rigid flow in the geometric loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeoDepth {
    /// Stereo depth of the rendered rig.
    #[default]
    Stereo,
    /// Depth from the disparity head, `fx * B / d`.
    Predicted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DivergenceGuard {
    pub window: usize,
    pub factor: f64,
}

impl Default for DivergenceGuard {
    fn default() -> Self {
        Self {
            window: 50,
            factor: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub steps: StageSteps,
    pub optim: OptimConfig,
    pub weights: LossWeights,
    pub reduction: Reduction,
    pub norm: SparseNorm,
    pub net: NetConfig,
    pub cda: CdaConfig,
    pub ema: EmaConfig,
    pub synthetic_fog: FogParams,
    pub real_fog: FogParams,
    pub sensor: SensorModel,
    pub nonrigid: NonRigidRule,
    pub geo_depth: GeoDepth,
    pub guard: DivergenceGuard,
    /// Frame pairs per optimizer step.
    pub batch: usize,
    /// Loss records kept in the report: every `log_every`-th step.
    pub log_every: usize,
    /// Also run the loss-toggle grid.
    pub ablation: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            steps: StageSteps::default(),
            optim: OptimConfig::default(),
            weights: LossWeights::default(),
            reduction: Reduction::Mean,
            norm: SparseNorm::default(),
            net: NetConfig::default(),
            cda: CdaConfig::default(),
            ema: EmaConfig::default(),
            synthetic_fog: FogParams::light(),
            real_fog: FogParams::dense(),
            sensor: SensorModel::default(),
            nonrigid: NonRigidRule::default(),
            geo_depth: GeoDepth::default(),
            guard: DivergenceGuard::default(),
            batch: 4,
            log_every: 10,
            ablation: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let o = &self.optim;
        ensure(
            o.lr > 0.0 && o.joint_lr > 0.0 && o.lr.is_finite() && o.joint_lr.is_finite(),
            || Error::InvalidArgument("learning rates must be positive".into()),
        )?;
        ensure(
            (0.0..1.0).contains(&o.momentum) && o.grad_clip > 0.0,
            || Error::InvalidArgument("momentum must be in [0, 1) and the clip positive".into()),
        )?;
        ensure((0.0..1.0).contains(&self.ema.lambda), || {
            Error::InvalidArgument(format!("EMA lambda {} outside [0, 1)", self.ema.lambda))
        })?;
        let d = &self.data;
        ensure(d.size >= 16 && d.size.is_multiple_of(4), || {
            Error::InvalidArgument(format!(
                "scene size {} must be a multiple of 4, at least 16",
                d.size
            ))
        })?;
        ensure(d.motion_scale.is_finite() && d.motion_scale >= 0.0, || {
            Error::InvalidArgument("motion scale must be finite and non-negative".into())
        })?;
        ensure(
            d.train_scenes > 0 && d.real_scenes > 0 && d.eval_scenes > 0,
            || Error::InvalidArgument("every manifest needs at least one scene".into()),
        )?;
        ensure(self.guard.window > 0 && self.guard.factor > 1.0, || {
            Error::InvalidArgument("divergence guard needs a window and a factor above 1".into())
        })?;
        ensure(self.batch > 0, || {
            Error::InvalidArgument("batch must be positive".into())
        })?;
        ensure(self.log_every > 0, || {
            Error::InvalidArgument("log_every must be positive".into())
        })?;
        self.weights.validate()?;
        self.norm.validate()?;
        self.net.validate()?;
        self.cda.validate()?;
        self.synthetic_fog.validate()?;
        self.real_fog.validate()
    }
}

/// A frame pair of one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct Pair {
    pub t: ImageGrid,
    pub t1: ImageGrid,
}

#[derive(Debug, Clone)]
pub struct TrainSample {
    pub scene: SceneSample,
    pub synthetic: Pair,
    /// Rigid flow from the rig's stereo depth.
    pub rigid: RigidFlow,
}

#[derive(Debug, Clone)]
pub struct EvalSample {
    pub real: Pair,
    pub synthetic: Pair,
    pub gt: FlowField,
    pub nonrigid: Mask,
    pub depth: DepthMap,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<TrainSample>,
    /// Unlabelled real-fog frames of held-out scenes.
    pub real: Vec<Pair>,
    pub eval: Vec<EvalSample>,
}

const SPLIT_TRAIN: u64 = 1;
const SPLIT_REAL: u64 = 2;
const SPLIT_EVAL: u64 = 3;

/// SplitMix64 finalizer over a combined key.
pub fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(tag.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(index.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn render_scene(d: &DataConfig, split: u64, i: usize) -> Result<SceneSample> {
    let seed = derive_seed(d.manifest_seed, split, i as u64);
    let mut sc = SceneConfig::random(d.size, d.size, d.max_objects, seed);
    sc.pose.translation_m = sc.pose.translation_m.map(|t| t * d.motion_scale);
    for o in &mut sc.objects {
        o.motion_px = o.motion_px.map(|m| m * d.motion_scale);
    }
    make_scene(&sc, seed)
}

fn fog_pair(s: &SceneSample, fog: &FogParams) -> Result<Pair> {
    Ok(Pair {
        t: add_fog(&s.left_t, &s.depth_t, fog)?,
        t1: add_fog(&s.left_t1, &s.depth_t1, fog)?,
    })
}

fn real_pair(s: &SceneSample, cfg: &TrainConfig, seed: u64) -> Result<Pair> {
    Ok(Pair {
        t: add_fog_with_sensor(
            &s.left_t,
            &s.depth_t,
            &cfg.real_fog,
            &cfg.sensor,
            derive_seed(seed, 0, 0),
        )?,
        t1: add_fog_with_sensor(
            &s.left_t1,
            &s.depth_t1,
            &cfg.real_fog,
            &cfg.sensor,
            derive_seed(seed, 0, 1),
        )?,
    })
}

pub fn build_dataset(cfg: &TrainConfig) -> Result<Dataset> {
    cfg.validate()?;
    let d = &cfg.data;
    let train = (0..d.train_scenes)
        .map(|i| {
            let scene = render_scene(d, SPLIT_TRAIN, i)?;
            let rigid = project_rigid_flow(&scene.depth_t, &scene.camera)?;
            Ok(TrainSample {
                synthetic: fog_pair(&scene, &cfg.synthetic_fog)?,
                rigid,
                scene,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let real = (0..d.real_scenes)
        .map(|i| {
            real_pair(
                &render_scene(d, SPLIT_REAL, i)?,
                cfg,
                derive_seed(d.manifest_seed, SPLIT_REAL + 10, i as u64),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let eval = (0..d.eval_scenes)
        .map(|i| {
            let s = render_scene(d, SPLIT_EVAL, i)?;
            Ok(EvalSample {
                real: real_pair(
                    &s,
                    cfg,
                    derive_seed(d.manifest_seed, SPLIT_EVAL + 10, i as u64),
                )?,
                synthetic: fog_pair(&s, &cfg.synthetic_fog)?,
                gt: s.gt_flow.clone(),
                nonrigid: s.gt_nonrigid.clone(),
                depth: s.depth_t.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { train, real, eval })
}

/// Which frames of an eval sample a network sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Synthetic,
    Real,
}

impl EvalSample {
    pub fn pair(&self, domain: Domain) -> &Pair {
        match domain {
            Domain::Synthetic => &self.synthetic,
            Domain::Real => &self.real,
        }
    }
}

/// EPE and F1-all pooled over the eval manifest.
pub fn evaluate_net(net: &FlowNet, eval: &[EvalSample], domain: Domain) -> Result<RegionStats> {
    ensure(!eval.is_empty(), || {
        Error::InvalidArgument("empty eval manifest".into())
    })?;
    let (mut e, mut f, mut n) = (0.0, 0.0, 0usize);
    for s in eval {
        let p = s.pair(domain);
        let pred = net.forward_flow(&p.t, &p.t1)?;
        let valid = Mask::ones(s.gt.height(), s.gt.width());
        let count = s.gt.height() * s.gt.width();
        e += epe(&pred, &s.gt, &valid)? * count as f64;
        f += f1_all(&pred, &s.gt, &valid)? * count as f64;
        n += count;
    }
    Ok(RegionStats {
        epe: e / n as f64,
        f1_all: f / n as f64,
        count: n,
    })
}

/// Mean hard-binned `KL(p_r || p_s)` over the eval manifest: the real
/// branch on real frames against the synthetic branch on synthetic frames.
pub fn measure_kl(
    real: &FlowNet,
    synthetic: &FlowNet,
    eval: &[EvalSample],
    cda: &CdaConfig,
) -> Result<f64> {
    ensure(!eval.is_empty(), || {
        Error::InvalidArgument("empty eval manifest".into())
    })?;
    let mut total = 0.0;
    for (i, s) in eval.iter().enumerate() {
        let r = cost_volume_of(real, &s.real)?;
        let y = cost_volume_of(synthetic, &s.synthetic)?;
        let p_r = distribution(&r, &cda.with_seed(derive_seed(cda.seed, 7, i as u64)))?;
        let p_s = distribution(&y, &cda.with_seed(derive_seed(cda.seed, 8, i as u64)))?;
        total += kl_loss(&p_r, &p_s)?;
    }
    Ok(total / eval.len() as f64)
}

fn cost_volume_of(net: &FlowNet, p: &Pair) -> Result<CostVolume> {
    CostVolume::new(
        net.fused_cost_volume(&p.t, &p.t1)?,
        net.config.cost_volume.radius,
    )
}

/// Momentum SGD with global gradient-norm clipping.
#[derive(Debug, Clone, Default)]
pub struct Momentum {
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Momentum {
    pub fn step(&mut self, params: &mut ParamStore, lr: f64, cfg: &OptimConfig) {
        let norm = params.grad_norm_sq().sqrt();
        let scale = if norm > cfg.grad_clip {
            cfg.grad_clip / norm
        } else {
            1.0
        };
        for (name, p) in params.iter_mut() {
            let v = self
                .velocity
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; p.len()]);
            for ((val, g), vel) in p.value.iter_mut().zip(&p.grad).zip(v.iter_mut()) {
                *vel = cfg.momentum * *vel + g * scale;
                *val -= lr * *vel;
            }
        }
    }
}

/// Aborts a stage on a non-finite loss or a `factor`-fold rise over the
/// largest loss of the previous `window` steps.
#[derive(Debug, Clone)]
struct Guard {
    cfg: DivergenceGuard,
    history: VecDeque<f64>,
}

impl Guard {
    fn new(cfg: DivergenceGuard) -> Self {
        Self {
            cfg,
            history: VecDeque::new(),
        }
    }

    fn check(&mut self, stage: &str, step: usize, loss: f64) -> Result<()> {
        let fail = |reason: String| Error::Divergence {
            stage: stage.to_string(),
            step,
            reason,
        };
        if !loss.is_finite() {
            return Err(fail(format!("loss is {loss}")));
        }
        if self.history.len() == self.cfg.window {
            let peak = self.history.iter().cloned().fold(0.0, f64::max);
            if peak > 0.0 && loss > self.cfg.factor * peak {
                return Err(fail(format!(
                    "loss {loss} exceeds {} x {peak}",
                    self.cfg.factor
                )));
            }
            self.history.pop_front();
        }
        self.history.push_back(loss);
        Ok(())
    }
}

fn divergence(stage: &str, step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(reason) => Error::Divergence {
            stage: stage.to_string(),
            step,
            reason: format!("non-finite {reason}"),
        },
        Error::DegenerateMask(reason) => Error::Divergence {
            stage: stage.to_string(),
            step,
            reason,
        },
        other => other,
    }
}

fn backward_into(
    g: &Graph,
    total: crate::tensor::Var,
    net: &mut FlowNet,
    bound: &crate::tensor::Bound,
) {
    let grads = g.backward(total);
    net.params.accumulate(&grads, bound);
}

fn combine(a: &LossTerms, b: &LossTerms, s: f64) -> LossTerms {
    let (x, y) = (a.as_array(), b.as_array());
    let v = |i: usize| x[i] + s * y[i];
    LossTerms {
        depth: v(0),
        pho: v(1),
        geo: v(2),
        consis: v(3),
        self_sup: v(4),
        kl: v(5),
    }
}

/// Runs `f` once per item with cleared gradients, then averages the
/// losses and gradients over the batch.
fn batched(
    net: &mut FlowNet,
    items: &[usize],
    mut f: impl FnMut(&mut FlowNet, usize) -> Result<(LossTerms, f64)>,
) -> Result<(LossTerms, f64)> {
    net.params.zero_grad();
    let inv = 1.0 / items.len() as f64;
    let (mut terms, mut total) = (LossTerms::default(), 0.0);
    for &i in items {
        let (t, v) = f(net, i)?;
        terms = combine(&terms, &t, inv);
        total += inv * v;
    }
    for (_, p) in net.params.iter_mut() {
        p.grad.iter_mut().for_each(|g| *g *= inv);
    }
    Ok((terms, total))
}

fn draw(rng: &mut ChaCha8Rng, n: usize, batch: usize) -> Vec<usize> {
    (0..batch).map(|_| rng.gen_range(0..n)).collect()
}

fn term_values(g: &Graph, terms: &[Option<crate::tensor::Var>; 6]) -> LossTerms {
    let v = |i: usize| terms[i].map(|t| g.scalar(t)).unwrap_or(0.0);
    LossTerms {
        depth: v(0),
        pho: v(1),
        geo: v(2),
        consis: v(3),
        self_sup: v(4),
        kl: v(5),
    }
}

fn flow_value(g: &Graph, v: crate::tensor::Var) -> Result<FlowField> {
    FlowField::from_grid(g.value(v).clone())
}

fn disparity_depth(disp: &ImageGrid, sample: &SceneSample) -> Result<DepthMap> {
    let fb = sample.camera.intrinsics.fx * sample.camera.baseline;
    DepthMap::new(disp.map(|d| fb / d.max(1e-6)))
}

/// One clean-branch step on `L_depth`, `L_pho`, `L_geo`; adds its
/// gradients to the parameter store.
pub fn clean_step(
    cfg: &TrainConfig,
    w: &LossWeights,
    net: &mut FlowNet,
    s: &TrainSample,
) -> Result<(LossTerms, f64)> {
    let mut g = Graph::new();
    let b = net.params.bind(&mut g);
    let sc = &s.scene;
    let (lt, lt1) = (
        g.constant(sc.left_t.clone()),
        g.constant(sc.left_t1.clone()),
    );
    let mut terms = [None; 6];
    let mut disp_t = None;
    if w.depth > 0.0 {
        let (rt, rt1) = (
            g.constant(sc.right_t.clone()),
            g.constant(sc.right_t1.clone()),
        );
        let dt = net.disparity_var(&mut g, &b, lt);
        let dt1 = net.disparity_var(&mut g, &b, lt1);
        disp_t = Some(dt);
        terms[0] = Some(graph::depth_loss(
            &mut g, lt, rt, lt1, rt1, dt, dt1, &cfg.norm,
        )?);
    }
    if w.pho > 0.0 || w.geo > 0.0 {
        let fwd = net.forward_var(&mut g, &b, lt, lt1)?;
        let ff = flow_value(&g, fwd.flow)?;
        if w.pho > 0.0 {
            let bwd = net.forward_var(&mut g, &b, lt1, lt)?;
            let fb = flow_value(&g, bwd.flow)?;
            let (o_f, o_b) = fb_occlusion(&ff, &fb, OCC_ALPHA1, OCC_ALPHA2)?;
            let n = o_f.height() * o_f.width();
            if o_f.count_set() < n && o_b.count_set() < n {
                terms[1] = Some(graph::photometric_flow_loss(
                    &mut g, lt, lt1, fwd.flow, bwd.flow, &o_f, &o_b, &cfg.norm,
                )?);
            }
        }
        if w.geo > 0.0 {
            let rigid = match (cfg.geo_depth, disp_t) {
                (GeoDepth::Predicted, Some(dt)) => {
                    project_rigid_flow(&disparity_depth(g.value(dt), sc)?, &sc.camera)?
                }
                (GeoDepth::Predicted, None) => {
                    let d = net.disparity(&sc.left_t)?;
                    project_rigid_flow(&disparity_depth(&d, sc)?, &sc.camera)?
                }
                (GeoDepth::Stereo, _) => s.rigid.clone(),
            };
            let v = nonrigid_region(&ff, &rigid.flow, cfg.nonrigid)?;
            let v = Mask::from_fn(v.height(), v.width(), |x, y| {
                v.get(x, y).max(rigid.invalid.get(x, y))
            });
            if v.count_set() < v.height() * v.width() {
                let fr = g.constant(rigid.flow.into_grid());
                terms[2] = Some(graph::geo_flow_loss(&mut g, fwd.flow, fr, &v)?);
            }
        }
    }
    let total = graph::total_loss(&mut g, &terms, w)?;
    backward_into(&g, total, net, &b);
    Ok((term_values(&g, &terms), g.scalar(total)))
}

/// One synthetic-branch step on `L_consis` against the clean branch's flow
/// on the clean frames (a plain value, so no gradient reaches the clean
/// branch).
pub fn synthetic_step(
    cfg: &TrainConfig,
    w: &LossWeights,
    net: &mut FlowNet,
    clean: &FlowNet,
    s: &TrainSample,
) -> Result<(LossTerms, f64)> {
    let target = clean.forward_flow(&s.scene.left_t, &s.scene.left_t1)?;
    let mut g = Graph::new();
    let b = net.params.bind(&mut g);
    let (a, c) = (
        g.constant(s.synthetic.t.clone()),
        g.constant(s.synthetic.t1.clone()),
    );
    let out = net.forward_var(&mut g, &b, a, c)?;
    let tv = g.constant(target.into_grid());
    let mut terms = [None; 6];
    terms[3] = Some(graph::l1_flow(&mut g, out.flow, tv, cfg.reduction));
    let total = graph::total_loss(&mut g, &terms, w)?;
    backward_into(&g, total, net, &b);
    Ok((term_values(&g, &terms), g.scalar(total)))
}

/// Soft-binned correlation distribution of the synthetic branch on
/// synthetic frames, as a plain `1x1xk` value.
fn synthetic_distribution(net: &FlowNet, p: &Pair, cda: &CdaConfig) -> Result<ImageGrid> {
    let cv = net.fused_cost_volume(&p.t, &p.t1)?;
    let picks = sample_indices(cv.len(), cda)?;
    let mut g = Graph::new();
    let v = g.constant(cv);
    let d = soft_distribution_var(&mut g, v, picks, cda);
    Ok(g.value(d).clone())
}

/// One real-branch step on `L_self` (pseudo-labels from the synthetic
/// branch on the real frames) and `L_kl` (against the synthetic branch's
/// correlation distribution on `syn`). `seed` drives the correlation
/// sampling.
pub fn real_step(
    cfg: &TrainConfig,
    w: &LossWeights,
    net: &mut FlowNet,
    synthetic: &FlowNet,
    real: &Pair,
    syn: &Pair,
    seed: u64,
) -> Result<(LossTerms, f64)> {
    let mut g = Graph::new();
    let b = net.params.bind(&mut g);
    let (a, c) = (g.constant(real.t.clone()), g.constant(real.t1.clone()));
    let out = net.forward_var(&mut g, &b, a, c)?;
    let mut terms = [None; 6];
    if w.self_sup > 0.0 {
        let pseudo = synthetic.forward_flow(&real.t, &real.t1)?;
        let pv = g.constant(pseudo.into_grid());
        terms[4] = Some(graph::l1_flow(&mut g, out.flow, pv, cfg.reduction));
    }
    if w.kl > 0.0 {
        let p_s =
            synthetic_distribution(synthetic, syn, &cfg.cda.with_seed(derive_seed(seed, 1, 0)))?;
        let ps = g.constant(p_s);
        let picks = sample_indices(
            g.value(out.cost_volume).len(),
            &cfg.cda.with_seed(derive_seed(seed, 2, 0)),
        )?;
        let p_r = soft_distribution_var(&mut g, out.cost_volume, picks, &cfg.cda);
        terms[5] = Some(kl_var(&mut g, p_r, ps));
    }
    let total = graph::total_loss(&mut g, &terms, w)?;
    backward_into(&g, total, net, &b);
    Ok((term_values(&g, &terms), g.scalar(total)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub name: String,
    pub steps: usize,
    pub lr: f64,
    /// Real-domain metrics of the branch this stage trains.
    pub eval: RegionStats,
    pub losses: Vec<LossRecord>,
}

fn clean_active(w: &LossWeights) -> bool {
    w.depth > 0.0 || w.pho > 0.0 || w.geo > 0.0
}

fn synthetic_active(w: &LossWeights) -> bool {
    w.consis > 0.0
}

fn real_active(w: &LossWeights) -> bool {
    w.self_sup > 0.0 || w.kl > 0.0
}

struct StageLog<'a> {
    name: &'a str,
    guard: Guard,
    log_every: usize,
    records: Vec<LossRecord>,
}

impl<'a> StageLog<'a> {
    fn new(name: &'a str, cfg: &TrainConfig) -> Self {
        Self {
            name,
            guard: Guard::new(cfg.guard),
            log_every: cfg.log_every,
            records: Vec::new(),
        }
    }

    fn record(&mut self, step: usize, r: Result<(LossTerms, f64)>) -> Result<()> {
        let (terms, total) = r.map_err(|e| divergence(self.name, step, e))?;
        self.guard.check(self.name, step, total)?;
        if step.is_multiple_of(self.log_every) {
            self.records.push(LossRecord::new(step, &terms, total));
        }
        Ok(())
    }

    fn finish(self, steps: usize, lr: f64, eval: RegionStats) -> StageReport {
        StageReport {
            name: self.name.to_string(),
            steps,
            lr,
            eval,
            losses: self.records,
        }
    }
}

fn stage_rng(cfg: &TrainConfig, stage: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 100 + stage, 0))
}

/// Freshly initialized clean branch (with the disparity head).
pub fn init_clean(cfg: &TrainConfig) -> Result<FlowNet> {
    FlowNet::new(cfg.net, derive_seed(cfg.seed, 50, 0))?
        .with_disparity_head(derive_seed(cfg.seed, 51, 0))
}

pub fn train_clean(
    cfg: &TrainConfig,
    w: &LossWeights,
    data: &Dataset,
    mut net: FlowNet,
) -> Result<(FlowNet, StageReport)> {
    let mut log = StageLog::new(STAGE_CLEAN, cfg);
    let mut opt = Momentum::default();
    let mut rng = stage_rng(cfg, 1);
    let steps = if clean_active(w) { cfg.steps.clean } else { 0 };
    for step in 0..steps {
        let items = draw(&mut rng, data.train.len(), cfg.batch);
        log.record(
            step,
            batched(&mut net, &items, |n, i| {
                clean_step(cfg, w, n, &data.train[i])
            }),
        )?;
        opt.step(&mut net.params, cfg.optim.lr, &cfg.optim);
    }
    let eval = evaluate_net(&net, &data.eval, Domain::Real)?;
    Ok((net, log.finish(steps, cfg.optim.lr, eval)))
}

/// Synthetic branch initialized from the clean branch and trained on
/// `L_consis`.
pub fn train_synthetic(
    cfg: &TrainConfig,
    w: &LossWeights,
    data: &Dataset,
    clean: &FlowNet,
) -> Result<(FlowNet, StageReport)> {
    let mut net = clean.clone();
    let mut log = StageLog::new(STAGE_SYNTHETIC, cfg);
    let mut opt = Momentum::default();
    let mut rng = stage_rng(cfg, 2);
    let steps = if synthetic_active(w) {
        cfg.steps.synthetic
    } else {
        0
    };
    for step in 0..steps {
        let items = draw(&mut rng, data.train.len(), cfg.batch);
        log.record(
            step,
            batched(&mut net, &items, |n, i| {
                synthetic_step(cfg, w, n, clean, &data.train[i])
            }),
        )?;
        opt.step(&mut net.params, cfg.optim.lr, &cfg.optim);
    }
    let eval = evaluate_net(&net, &data.eval, Domain::Real)?;
    Ok((net, log.finish(steps, cfg.optim.lr, eval)))
}

/// Clean and synthetic branches after depth-association motion adaptation.
#[derive(Debug, Clone)]
pub struct DamaOutput {
    pub clean: FlowNet,
    pub synthetic: FlowNet,
    pub stages: Vec<StageReport>,
}

pub fn stage_dama(cfg: &TrainConfig, data: &Dataset) -> Result<DamaOutput> {
    let (clean, a) = train_clean(cfg, &cfg.weights, data, init_clean(cfg)?)?;
    let (synthetic, b) = train_synthetic(cfg, &cfg.weights, data, &clean)?;
    Ok(DamaOutput {
        clean,
        synthetic,
        stages: vec![a, b],
    })
}

/// Real branch initialized from the synthetic branch, trained on
/// `L_self + L_kl`, its encoder EMA-coupled to the synthetic encoder.
pub fn stage_cama(
    cfg: &TrainConfig,
    w: &LossWeights,
    data: &Dataset,
    synthetic: &FlowNet,
) -> Result<(FlowNet, StageReport)> {
    let mut net = synthetic.clone();
    let mut log = StageLog::new(STAGE_CAMA, cfg);
    let mut opt = Momentum::default();
    let mut rng = stage_rng(cfg, 3);
    for step in 0..cfg.steps.cama {
        if real_active(w) {
            let reals = draw(&mut rng, data.real.len(), cfg.batch);
            let syns = draw(&mut rng, data.train.len(), cfg.batch);
            let result = batched(&mut net, &(0..cfg.batch).collect::<Vec<_>>(), |n, j| {
                let seed = derive_seed(cfg.seed, 3, (step * cfg.batch + j) as u64);
                real_step(
                    cfg,
                    w,
                    n,
                    synthetic,
                    &data.real[reals[j]],
                    &data.train[syns[j]].synthetic,
                    seed,
                )
            });
            log.record(step, result)?;
            opt.step(&mut net.params, cfg.optim.lr, &cfg.optim);
        }
        ema_update_prefix(&mut net.params, &synthetic.params, &cfg.ema, ENCODER_PREFIX)?;
    }
    let eval = evaluate_net(&net, &data.eval, Domain::Real)?;
    Ok((net, log.finish(cfg.steps.cama, cfg.optim.lr, eval)))
}

#[derive(Debug, Clone)]
pub struct Branches {
    pub clean: FlowNet,
    pub synthetic: FlowNet,
    pub real: FlowNet,
}

/// All branches trained together on the full objective at the joint rate.
/// Inactive branches mirror their upstream branch after every step.
pub fn stage_joint(
    cfg: &TrainConfig,
    w: &LossWeights,
    data: &Dataset,
    mut b: Branches,
) -> Result<(Branches, StageReport)> {
    let lr = cfg.optim.joint_lr;
    let mut log = StageLog::new(STAGE_JOINT, cfg);
    let (mut oc, mut os, mut or) = (
        Momentum::default(),
        Momentum::default(),
        Momentum::default(),
    );
    let mut rng = stage_rng(cfg, 4);
    for step in 0..cfg.steps.joint {
        let items = draw(&mut rng, data.train.len(), cfg.batch);
        let reals = draw(&mut rng, data.real.len(), cfg.batch);
        let all: Vec<usize> = (0..cfg.batch).collect();
        let step_result = (|| -> Result<(LossTerms, f64)> {
            let (mut terms, mut total) = (LossTerms::default(), 0.0);
            if clean_active(w) {
                let (t, v) = batched(&mut b.clean, &items, |n, i| {
                    clean_step(cfg, w, n, &data.train[i])
                })?;
                (terms, total) = (combine(&terms, &t, 1.0), total + v);
                oc.step(&mut b.clean.params, lr, &cfg.optim);
            }
            if synthetic_active(w) {
                let clean = &b.clean;
                let (t, v) = batched(&mut b.synthetic, &items, |n, i| {
                    synthetic_step(cfg, w, n, clean, &data.train[i])
                })?;
                (terms, total) = (combine(&terms, &t, 1.0), total + v);
                os.step(&mut b.synthetic.params, lr, &cfg.optim);
            } else {
                b.synthetic = b.clean.clone();
            }
            if real_active(w) {
                let syn = &b.synthetic;
                let (t, v) = batched(&mut b.real, &all, |n, j| {
                    let seed = derive_seed(cfg.seed, 4, (step * cfg.batch + j) as u64);
                    real_step(
                        cfg,
                        w,
                        n,
                        syn,
                        &data.real[reals[j]],
                        &data.train[items[j]].synthetic,
                        seed,
                    )
                })?;
                (terms, total) = (combine(&terms, &t, 1.0), total + v);
                or.step(&mut b.real.params, lr, &cfg.optim);
                ema_update_prefix(
                    &mut b.real.params,
                    &b.synthetic.params,
                    &cfg.ema,
                    ENCODER_PREFIX,
                )?;
            } else {
                b.real = b.synthetic.clone();
            }
            Ok((terms, total))
        })();
        log.record(step, step_result)?;
    }
    let eval = evaluate_net(&b.real, &data.eval, Domain::Real)?;
    Ok((b, log.finish(cfg.steps.joint, lr, eval)))
}

/// A named loss toggle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub weights: LossWeights,
}

/// The loss-toggle grid around `w`.
pub fn ablation_rows(w: &LossWeights) -> Vec<AblationRow> {
    let row = |name: &str, consis: bool, self_sup: bool, kl: bool| AblationRow {
        name: name.to_string(),
        weights: LossWeights {
            consis: if consis { w.consis } else { 0.0 },
            self_sup: if self_sup { w.self_sup } else { 0.0 },
            kl: if kl { w.kl } else { 0.0 },
            ..*w
        },
    };
    vec![
        row("no_adaptation", false, false, false),
        row("dama", true, false, false),
        row("dama_self", true, true, false),
        row("dama_kl", true, false, true),
        row("full", true, true, true),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowReport {
    pub name: String,
    pub weights: LossWeights,
    pub stages: Vec<StageReport>,
    /// Deployed (real-branch) metrics on the real-fog eval manifest.
    pub real: RegionStats,
    /// Synthetic branch on the synthetic-fog eval frames.
    pub synthetic_on_synthetic: RegionStats,
    /// Hard-binned `KL(p_r || p_s)` when the real branch is initialized.
    pub kl_start: f64,
    pub kl_end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub format: String,
    pub seed: u64,
    pub total_steps: usize,
    pub rows: Vec<RowReport>,
}

pub const REPORT_FORMAT: &str = "fogflow-report-v1";

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub report: PipelineReport,
    /// Branches of the configured row.
    pub branches: Branches,
}

fn key(vals: &[f64]) -> Vec<u64> {
    vals.iter().map(|v| v.to_bits()).collect()
}

type Cached = (FlowNet, StageReport);

#[derive(Default)]
struct StageCache {
    clean: BTreeMap<Vec<u64>, Cached>,
    synthetic: BTreeMap<Vec<u64>, Cached>,
    cama: BTreeMap<Vec<u64>, Cached>,
    joint: BTreeMap<Vec<u64>, (RowReport, Branches)>,
}

fn run_row(
    cfg: &TrainConfig,
    data: &Dataset,
    row: &AblationRow,
    cache: &mut StageCache,
) -> Result<(RowReport, Branches)> {
    let w = &row.weights;
    let a = w.as_array();
    let kc = key(&a[..3]);
    if !cache.clean.contains_key(&kc) {
        let out = train_clean(cfg, w, data, init_clean(cfg)?)?;
        cache.clean.insert(kc.clone(), out);
    }
    let (clean, rc) = cache.clean[&kc].clone();
    let ks = key(&a[..4]);
    if !cache.synthetic.contains_key(&ks) {
        let out = train_synthetic(cfg, w, data, &clean)?;
        cache.synthetic.insert(ks.clone(), out);
    }
    let (synthetic, rs) = cache.synthetic[&ks].clone();
    let kl_start = measure_kl(&synthetic, &synthetic, &data.eval, &cfg.cda)?;
    let kr = key(&a);
    if let Some((report, b)) = cache.joint.get(&kr) {
        let report = RowReport {
            name: row.name.clone(),
            ..report.clone()
        };
        return Ok((report, b.clone()));
    }
    if !cache.cama.contains_key(&kr) {
        let out = stage_cama(cfg, w, data, &synthetic)?;
        cache.cama.insert(kr.clone(), out);
    }
    let (real, rr) = cache.cama[&kr].clone();
    let (b, rj) = stage_joint(
        cfg,
        w,
        data,
        Branches {
            clean,
            synthetic,
            real,
        },
    )?;
    let report = RowReport {
        name: row.name.clone(),
        weights: *w,
        stages: vec![rc, rs, rr, rj],
        real: evaluate_net(&b.real, &data.eval, Domain::Real)?,
        synthetic_on_synthetic: evaluate_net(&b.synthetic, &data.eval, Domain::Synthetic)?,
        kl_start,
        kl_end: measure_kl(&b.real, &b.synthetic, &data.eval, &cfg.cda)?,
    };
    cache.joint.insert(kr, (report.clone(), b.clone()));
    Ok((report, b))
}

/// Trains and evaluates each row; stages shared between rows run once.
pub fn run_rows(cfg: &TrainConfig, data: &Dataset, rows: &[AblationRow]) -> Result<Vec<RowReport>> {
    cfg.validate()?;
    let mut cache = StageCache::default();
    rows.iter()
        .map(|r| Ok(run_row(cfg, data, r, &mut cache)?.0))
        .collect()
}

/// DAMA, CAMA, then joint fine-tuning; with `cfg.ablation`, also the
/// loss-toggle grid. Stage outputs shared between rows are trained once.
pub fn run_pipeline(cfg: &TrainConfig) -> Result<PipelineOutput> {
    cfg.validate()?;
    let data = build_dataset(cfg)?;
    run_pipeline_on(cfg, &data)
}

pub fn run_pipeline_on(cfg: &TrainConfig, data: &Dataset) -> Result<PipelineOutput> {
    cfg.validate()?;
    let mut cache = StageCache::default();
    let main = AblationRow {
        name: "config".into(),
        weights: cfg.weights,
    };
    let (main_report, branches) = run_row(cfg, data, &main, &mut cache)?;
    let mut rows = vec![main_report];
    if cfg.ablation {
        for row in ablation_rows(&cfg.weights) {
            rows.push(run_row(cfg, data, &row, &mut cache)?.0);
        }
    }
    Ok(PipelineOutput {
        report: PipelineReport {
            format: REPORT_FORMAT.into(),
            seed: cfg.seed,
            total_steps: cfg.steps.total(),
            rows,
        },
        branches,
    })
}

/// Report serialized as pretty JSON with a trailing newline.
pub fn report_json(report: &PipelineReport) -> Result<String> {
    Ok(serde_json::to_string_pretty(report)? + "\n")
}
