//! The small flow estimator shared by every domain branch, its EMA
//! coupling, an optional disparity head, and checkpoint IO.
//!
//! Layout: two stride-2 3x3 conv stages (`enc.*`) produce quarter-resolution
//! features; a temporal correlation volume and a spatial-attention volume
//! (`sca.kernel`) are fused and normalized; two 3x3 conv stages (`dec.*`)
//! map the fused volume to coarse flow, which is upsampled x4 and scaled
//! by 4.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cost_volume::{fuse_cv_var, sca_cv_var, temporal_cv_var, CostVolumeConfig, SCA_KERNEL};
use crate::error::{ensure, Error, Result};
use crate::tensor::{Bound, ConvSpec, FlowField, Graph, ImageGrid, ParamStore, Var};

pub const ENCODER_PREFIX: &str = "enc.";
pub const DISP_PREFIX: &str = "disp.";
pub const MAX_PARAMS: usize = 50_000;
const LEAKY: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub in_channels: usize,
    pub enc1: usize,
    pub enc2: usize,
    pub dec_hidden: usize,
    pub cost_volume: CostVolumeConfig,
    /// Scale applied to the initial weights of the last decoder layer.
    pub out_init_scale: f64,
    pub disp_hidden: usize,
    /// Centre and scale each feature vector to unit RMS before correlation.
    #[serde(default = "default_true")]
    pub feature_norm: bool,
}

fn default_true() -> bool {
    true
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            enc1: 8,
            enc2: 16,
            dec_hidden: 24,
            cost_volume: CostVolumeConfig::default(),
            out_init_scale: 0.1,
            disp_hidden: 8,
            feature_norm: true,
        }
    }
}

impl NetConfig {
    fn conv(cin: usize, cout: usize, stride: usize) -> ConvSpec {
        ConvSpec {
            cin,
            cout,
            kernel: 3,
            stride,
            pad: 1,
        }
    }

    fn layers(&self) -> Vec<(&'static str, ConvSpec)> {
        let side = 2 * self.cost_volume.radius + 1;
        vec![
            ("enc.conv1", Self::conv(self.in_channels, self.enc1, 2)),
            ("enc.conv2", Self::conv(self.enc1, self.enc2, 2)),
            ("dec.conv1", Self::conv(side * side, self.dec_hidden, 1)),
            ("dec.conv2", Self::conv(self.dec_hidden, 2, 1)),
        ]
    }

    fn disp_layers(&self) -> Vec<(&'static str, ConvSpec)> {
        vec![
            (
                "disp.conv1",
                Self::conv(self.in_channels, self.disp_hidden, 1),
            ),
            ("disp.conv2", Self::conv(self.disp_hidden, 1, 1)),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        self.cost_volume.validate()?;
        ensure(
            [self.in_channels, self.enc1, self.enc2, self.dec_hidden]
                .iter()
                .all(|&c| c > 0),
            || Error::InvalidArgument("layer widths must be positive".into()),
        )
    }
}

const NORM_EPS: f64 = 1e-4;

/// Per-pixel `(f - mean_c f) / sqrt(var_c f + eps)`.
fn pixel_norm(g: &mut Graph, x: Var) -> Var {
    let (h, w, c) = g.value(x).shape();
    let inv_c = 1.0 / c as f64;
    let s = g.sum_channels(x);
    let mean = g.scale(s, inv_c);
    let ones = g.constant(ImageGrid::filled(h, w, c, 1.0));
    let mb = g.mul_mask(ones, mean);
    let cx = g.sub(x, mb);
    let sq = g.mul(cx, cx);
    let ss = g.sum_channels(sq);
    let var = g.scale(ss, inv_c);
    let v = g.add_scalar(var, NORM_EPS);
    let l = g.ln(v);
    let half = g.scale(l, -0.5);
    let inv = g.exp(half);
    g.mul_mask(cx, inv)
}

fn init_conv(
    params: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    spec: ConvSpec,
    scale: f64,
) -> Result<()> {
    let fan_in = (spec.kernel * spec.kernel * spec.cin) as f64;
    let bound = (6.0 / fan_in).sqrt() * scale;
    let w: Vec<f64> = (0..spec.weight_len())
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    params.insert(
        format!("{name}.w"),
        vec![spec.cout, spec.kernel, spec.kernel, spec.cin],
        w,
    )?;
    params.insert(format!("{name}.b"), vec![spec.cout], vec![0.0; spec.cout])
}

/// Graph outputs of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct FlowOutput {
    /// Full-resolution flow, `HxWx2`.
    pub flow: Var,
    /// Normalized fused cost volume at feature resolution.
    pub cost_volume: Var,
    pub features_t: Var,
    pub features_t1: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowNet {
    pub config: NetConfig,
    pub params: ParamStore,
}

impl FlowNet {
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let layers = config.layers();
        let last = layers.len() - 1;
        for (i, (name, spec)) in layers.into_iter().enumerate() {
            let scale = if i == last {
                config.out_init_scale
            } else {
                1.0
            };
            init_conv(&mut params, &mut rng, name, spec, scale)?;
        }
        params.insert(SCA_KERNEL, vec![config.enc2], vec![1.0; config.enc2])?;
        Ok(Self { config, params })
    }

    /// Adds the disparity head parameters (`disp.*`).
    pub fn with_disparity_head(mut self, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd15b);
        for (name, spec) in self.config.disp_layers() {
            init_conv(&mut self.params, &mut rng, name, spec, 0.1)?;
        }
        Ok(self)
    }

    pub fn has_disparity_head(&self) -> bool {
        self.params.get("disp.conv1.w").is_some()
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    fn conv_layer(&self, g: &mut Graph, b: &Bound, name: &str, x: Var, spec: ConvSpec) -> Var {
        let w = b.get(&format!("{name}.w"));
        let bias = b.get(&format!("{name}.b"));
        g.conv2d(x, w, bias, spec)
    }

    fn check_input(&self, img: &ImageGrid) -> Result<()> {
        let (h, w, c) = img.shape();
        ensure(c == self.config.in_channels, || {
            Error::InvalidArgument(format!(
                "expected {} channels, got {c}",
                self.config.in_channels
            ))
        })?;
        ensure(h % 4 == 0 && w % 4 == 0 && h >= 4 && w >= 4, || {
            Error::InvalidArgument(format!("extent {h}x{w} is not divisible by 4"))
        })
    }

    pub fn encode_var(&self, g: &mut Graph, b: &Bound, img: Var) -> Var {
        let layers = self.config.layers();
        let x = self.conv_layer(g, b, layers[0].0, img, layers[0].1);
        let x = g.leaky_relu(x, LEAKY);
        let x = self.conv_layer(g, b, layers[1].0, x, layers[1].1);
        let x = g.leaky_relu(x, LEAKY);
        if self.config.feature_norm {
            pixel_norm(g, x)
        } else {
            x
        }
    }

    /// Fused, normalized cost volume from a feature pair.
    pub fn cost_volume_var(&self, g: &mut Graph, b: &Bound, f_t: Var, f_t1: Var) -> Result<Var> {
        let cv = &self.config.cost_volume;
        let (h, w, _) = g.value(f_t).shape();
        let zero = g.constant(ImageGrid::zeros(h, w, 2));
        let temp = temporal_cv_var(g, f_t, f_t1, zero, cv.radius);
        let spa = sca_cv_var(g, f_t, b.get(SCA_KERNEL), cv.sca_window, cv.k_sca)?;
        Ok(fuse_cv_var(g, temp, spa, cv.alpha).0)
    }

    /// Full-resolution flow from a fused cost volume.
    pub fn decode_var(&self, g: &mut Graph, b: &Bound, cv: Var) -> Var {
        let layers = self.config.layers();
        let x = self.conv_layer(g, b, layers[2].0, cv, layers[2].1);
        let x = g.leaky_relu(x, LEAKY);
        let coarse = self.conv_layer(g, b, layers[3].0, x, layers[3].1);
        let up = g.upsample(coarse, 4);
        g.scale(up, 4.0)
    }

    pub fn forward_var(
        &self,
        g: &mut Graph,
        b: &Bound,
        img_t: Var,
        img_t1: Var,
    ) -> Result<FlowOutput> {
        self.check_input(g.value(img_t))?;
        ensure(g.value(img_t).same_shape(g.value(img_t1)), || {
            Error::ExtentMismatch("frame pair differs in shape".into())
        })?;
        let f_t = self.encode_var(g, b, img_t);
        let f_t1 = self.encode_var(g, b, img_t1);
        let cv = self.cost_volume_var(g, b, f_t, f_t1)?;
        let flow = self.decode_var(g, b, cv);
        Ok(FlowOutput {
            flow,
            cost_volume: cv,
            features_t: f_t,
            features_t1: f_t1,
        })
    }

    /// Positive disparity `exp(head(I))` at full resolution.
    pub fn disparity_var(&self, g: &mut Graph, b: &Bound, img: Var) -> Var {
        let layers = self.config.disp_layers();
        let x = self.conv_layer(g, b, layers[0].0, img, layers[0].1);
        let x = g.leaky_relu(x, LEAKY);
        let x = self.conv_layer(g, b, layers[1].0, x, layers[1].1);
        g.exp(x)
    }

    pub fn encode(&self, img_t: &ImageGrid, img_t1: &ImageGrid) -> Result<(ImageGrid, ImageGrid)> {
        self.check_input(img_t)?;
        self.check_input(img_t1)?;
        let mut g = Graph::new();
        let b = self.params.bind_frozen(&mut g);
        let (a, c) = (g.constant(img_t.clone()), g.constant(img_t1.clone()));
        let fa = self.encode_var(&mut g, &b, a);
        let fc = self.encode_var(&mut g, &b, c);
        Ok((g.value(fa).clone(), g.value(fc).clone()))
    }

    pub fn forward_flow(&self, img_t: &ImageGrid, img_t1: &ImageGrid) -> Result<FlowField> {
        let mut g = Graph::new();
        let b = self.params.bind_frozen(&mut g);
        let (a, c) = (g.constant(img_t.clone()), g.constant(img_t1.clone()));
        let out = self.forward_var(&mut g, &b, a, c)?;
        FlowField::from_grid(g.value(out.flow).clone())
    }

    pub fn fused_cost_volume(&self, img_t: &ImageGrid, img_t1: &ImageGrid) -> Result<ImageGrid> {
        let mut g = Graph::new();
        let b = self.params.bind_frozen(&mut g);
        let (a, c) = (g.constant(img_t.clone()), g.constant(img_t1.clone()));
        let out = self.forward_var(&mut g, &b, a, c)?;
        Ok(g.value(out.cost_volume).clone())
    }

    pub fn disparity(&self, img: &ImageGrid) -> Result<ImageGrid> {
        ensure(self.has_disparity_head(), || {
            Error::InvalidArgument("network has no disparity head".into())
        })?;
        let mut g = Graph::new();
        let b = self.params.bind_frozen(&mut g);
        let x = g.constant(img.clone());
        let d = self.disparity_var(&mut g, &b, x);
        Ok(g.value(d).clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmaConfig {
    pub lambda: f64,
}

impl Default for EmaConfig {
    fn default() -> Self {
        Self { lambda: 0.99 }
    }
}

/// `theta_r <- lambda * theta_r + (1 - lambda) * theta_s` on every
/// parameter of `theta_r` whose name starts with `prefix`.
pub fn ema_update_prefix(
    theta_r: &mut ParamStore,
    theta_s: &ParamStore,
    cfg: &EmaConfig,
    prefix: &str,
) -> Result<()> {
    ensure((0.0..1.0).contains(&cfg.lambda), || {
        Error::InvalidArgument(format!("EMA lambda must lie in [0, 1), got {}", cfg.lambda))
    })?;
    let lam = cfg.lambda;
    for (name, p) in theta_r.iter_mut() {
        if !name.starts_with(prefix) {
            continue;
        }
        let s = theta_s.get(name).ok_or_else(|| {
            Error::ExtentMismatch(format!("`{name}` missing from the source parameters"))
        })?;
        ensure(s.shape == p.shape, || {
            Error::ExtentMismatch(format!("`{name}`: {:?} vs {:?}", p.shape, s.shape))
        })?;
        p.value
            .iter_mut()
            .zip(&s.value)
            .for_each(|(r, s)| *r = *r * lam + *s * (1.0 - lam));
    }
    Ok(())
}

/// EMA over all parameters; the two stores must share a layout.
pub fn ema_update(theta_r: &mut ParamStore, theta_s: &ParamStore, cfg: &EmaConfig) -> Result<()> {
    ensure(theta_r.same_layout(theta_s), || {
        Error::ExtentMismatch("EMA parameter layouts differ".into())
    })?;
    ema_update_prefix(theta_r, theta_s, cfg, "")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format: String,
    architecture: NetConfig,
    step: usize,
    seed: u64,
    blob: String,
    tensors: Vec<TensorEntry>,
}

const CHECKPOINT_FORMAT: &str = "fogflow-checkpoint-v1";

/// Loaded checkpoint contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: FlowNet,
    pub step: usize,
    pub seed: u64,
}

fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Writes `<path>` (JSON manifest) and `<path>` with a `.bin` extension
/// (little-endian f32 parameters in manifest order). Values are stored as
/// f32.
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    net: &FlowNet,
    step: usize,
    seed: u64,
) -> Result<()> {
    let path = path.as_ref();
    let blob = blob_path(path);
    let mut bytes = Vec::with_capacity(net.num_params() * 4);
    let mut tensors = Vec::new();
    let mut offset = 0;
    for (name, p) in net.params.iter() {
        ensure(p.value.iter().all(|v| v.is_finite()), || {
            Error::NonFinite(format!("parameter `{name}`"))
        })?;
        for v in &p.value {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: p.shape.clone(),
            offset,
            len: p.len(),
        });
        offset += p.len();
    }
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.into(),
        architecture: net.config,
        step,
        seed,
        blob: blob
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        tensors,
    };
    fs::write(&blob, bytes)?;
    fs::write(path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(path)?)?;
    ensure(manifest.format == CHECKPOINT_FORMAT, || {
        Error::Format(format!("unknown checkpoint format `{}`", manifest.format))
    })?;
    let blob_file = path.parent().unwrap_or(Path::new(".")).join(&manifest.blob);
    let bytes = fs::read(blob_file)?;
    ensure(bytes.len() % 4 == 0, || {
        Error::Format("blob length is not a multiple of 4".into())
    })?;
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    let mut params = ParamStore::new();
    for t in &manifest.tensors {
        ensure(
            t.offset + t.len <= values.len() && t.shape.iter().product::<usize>() == t.len,
            || Error::Format(format!("tensor `{}` does not fit the blob", t.name)),
        )?;
        params.insert(
            t.name.clone(),
            t.shape.clone(),
            values[t.offset..t.offset + t.len].to_vec(),
        )?;
    }
    let template = FlowNet::new(manifest.architecture, 0)?;
    for (name, p) in template.params.iter() {
        let got = params
            .get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks `{name}`")))?;
        ensure(got.shape == p.shape, || {
            Error::Format(format!("`{name}` has shape {:?}", got.shape))
        })?;
    }
    Ok(Checkpoint {
        net: FlowNet {
            config: manifest.architecture,
            params,
        },
        step: manifest.step,
        seed: manifest.seed,
    })
}
