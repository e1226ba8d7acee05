//! Procedural stereo sequences with exact depth, pose and flow.
//!
//! A scene is a slanted (or fronto-parallel) background plane plus any
//! number of fronto-parallel rectangles that translate in the image. Every
//! layer is planar, so each view is related to frame `t` by an exact
//! homography and the renderer can invert it per pixel. Textures are
//! parameterized by frame-`t` pixel coordinates, which keeps them attached
//! to their surface in every view.

pub mod camera;
pub mod io;
pub mod texture;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::tensor::{DepthMap, FlowField, ImageGrid, Mask};
use camera::{inverse, mat_mul, mat_vec, CameraModel, Intrinsics, Mat3, Vec3, IDENTITY};
use texture::Texture;

pub use camera::CameraModel as Camera;

/// Minimum admissible depth along any ray.
pub const Z_MIN: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PoseConfig {
    #[serde(default)]
    pub rotation_deg: [f64; 3],
    #[serde(default)]
    pub translation_m: [f64; 3],
}

/// Background plane given by its depth on the bottom and top image rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackgroundConfig {
    pub near_depth_m: f64,
    pub far_depth_m: f64,
}

impl Default for BackgroundConfig {
    fn default() -> Self {
        Self {
            near_depth_m: 5.0,
            far_depth_m: 50.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TextureConfig {
    pub octaves: usize,
    pub base_period_px: f64,
}

impl Default for TextureConfig {
    fn default() -> Self {
        Self {
            octaves: 3,
            base_period_px: 12.0,
        }
    }
}

/// A textured fronto-parallel rectangle covering pixels
/// `[x0, x1) x [y0, y1)` in frame `t`, displaced by `motion_px` in frame
/// `t+1` on top of the camera-induced motion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectConfig {
    pub rect: [usize; 4],
    pub depth_m: f64,
    #[serde(default)]
    pub motion_px: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub baseline_m: f64,
    #[serde(default)]
    pub pose: PoseConfig,
    #[serde(default)]
    pub background: BackgroundConfig,
    #[serde(default)]
    pub texture: TextureConfig,
    #[serde(default)]
    pub objects: Vec<ObjectConfig>,
}

impl SceneConfig {
    /// A static scene with principal point at the image centre.
    pub fn new(width: usize, height: usize, focal: f64) -> Self {
        Self {
            width,
            height,
            fx: focal,
            fy: focal,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            baseline_m: 0.5,
            pose: PoseConfig::default(),
            background: BackgroundConfig::default(),
            texture: TextureConfig::default(),
            objects: Vec::new(),
        }
    }

    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
        }
    }

    pub fn camera(&self) -> Result<CameraModel> {
        CameraModel::from_ego_motion(
            self.intrinsics(),
            self.pose.rotation_deg,
            self.pose.translation_m,
            self.baseline_m,
        )
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.width >= 16 && self.height >= 16, || {
            Error::TooSmall(format!(
                "scene must be at least 16x16, got {}x{}",
                self.width, self.height
            ))
        })?;
        let bg = &self.background;
        ensure(bg.near_depth_m > 0.0 && bg.far_depth_m > 0.0, || {
            Error::InvalidArgument("background plane behind camera".into())
        })?;
        ensure(self.texture.base_period_px > 0.0, || {
            Error::InvalidArgument("texture period must be positive".into())
        })?;
        for (i, o) in self.objects.iter().enumerate() {
            let [x0, y0, x1, y1] = o.rect;
            ensure(
                x0 < x1 && y0 < y1 && x1 <= self.width && y1 <= self.height,
                || Error::InvalidArgument(format!("object {i} outside frame: {:?}", o.rect)),
            )?;
            ensure(o.depth_m > 0.0 && o.depth_m.is_finite(), || {
                Error::InvalidArgument(format!("object {i} depth plane behind camera"))
            })?;
            ensure(o.motion_px.iter().all(|m| m.is_finite()), || {
                Error::NonFinite(format!("object {i} motion"))
            })?;
        }
        Ok(())
    }

    /// Draws a random driving-like scene: forward/lateral ego-motion, a small
    /// yaw, and up to `max_objects` moving rectangles.
    pub fn random(width: usize, height: usize, max_objects: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5ce0);
        let mut cfg = SceneConfig::new(width, height, width as f64 * 0.8);
        cfg.pose.translation_m = [
            rng.gen_range(-0.6..0.6),
            rng.gen_range(-0.1..0.1),
            rng.gen_range(0.0..1.5),
        ];
        cfg.pose.rotation_deg = [0.0, rng.gen_range(-1.0..1.0), 0.0];
        cfg.background.near_depth_m = rng.gen_range(4.0..7.0);
        cfg.background.far_depth_m = rng.gen_range(30.0..55.0);
        let n = rng.gen_range(0..=max_objects);
        for _ in 0..n {
            let w = rng.gen_range(width / 6..width / 3);
            let h = rng.gen_range(height / 6..height / 3);
            let x0 = rng.gen_range(0..width - w);
            let y0 = rng.gen_range(height / 4..height - h);
            cfg.objects.push(ObjectConfig {
                rect: [x0, y0, x0 + w, y0 + h],
                depth_m: rng.gen_range(5.0..12.0),
                motion_px: [rng.gen_range(-3.0..3.0), rng.gen_range(-1.0..1.0)],
            });
        }
        cfg
    }
}

/// Four frames, their ground truth, and the camera.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub left_t: ImageGrid,
    pub left_t1: ImageGrid,
    pub right_t: ImageGrid,
    pub right_t1: ImageGrid,
    pub depth_t: DepthMap,
    pub depth_t1: DepthMap,
    pub camera: CameraModel,
    /// Flow from frame `t` to `t+1`, defined on frame-`t` pixels.
    pub gt_flow: FlowField,
    /// Flow from frame `t+1` back to `t`, defined on frame-`t+1` pixels.
    pub gt_flow_bwd: FlowField,
    pub gt_nonrigid: Mask,
}

struct Layer {
    /// Plane as `n^T X = 1` in camera-`t` coordinates.
    plane: Vec3,
    rect: Option<[f64; 4]>,
    motion: (f64, f64),
    texture: Texture,
}

impl Layer {
    fn covers(&self, x: f64, y: f64) -> bool {
        match self.rect {
            None => true,
            Some([x0, y0, x1, y1]) => x >= x0 && x < x1 && y >= y0 && y < y1,
        }
    }

    fn point(&self, k: &Intrinsics, x: f64, y: f64) -> Option<Vec3> {
        let ray = k.unproject(x, y);
        let inv_z = self.plane.iter().zip(&ray).map(|(a, b)| a * b).sum::<f64>();
        (inv_z > 0.0).then(|| ray.map(|r| r / inv_z))
    }

    fn is_moving(&self) -> bool {
        self.motion != (0.0, 0.0)
    }
}

#[derive(Clone, Copy)]
struct View {
    rotation: Mat3,
    translation: Vec3,
    later: bool,
}

impl View {
    fn apply(&self, p: &Vec3) -> Vec3 {
        let r = mat_vec(&self.rotation, p);
        [
            r[0] + self.translation[0],
            r[1] + self.translation[1],
            r[2] + self.translation[2],
        ]
    }
}

struct Renderer {
    k: Intrinsics,
    layers: Vec<Layer>,
    width: usize,
    height: usize,
}

/// Where a view pixel lands on the frame-`t` layer stack.
#[derive(Clone, Copy)]
struct Hit {
    layer: usize,
    src: (f64, f64),
    depth: f64,
}

impl Renderer {
    fn homography_inv(&self, layer: &Layer, view: &View) -> Result<Mat3> {
        let km = self.k.matrix();
        let kinv = inverse(&km).expect("valid intrinsics");
        let mut m = view.rotation;
        for (i, row) in m.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v += view.translation[i] * layer.plane[j];
            }
        }
        let h = mat_mul(&km, &mat_mul(&m, &kinv));
        inverse(&h).ok_or_else(|| Error::InvalidArgument("degenerate view of a scene plane".into()))
    }

    fn render(&self, view: &View) -> Result<(ImageGrid, Vec<Hit>)> {
        let hinvs = self
            .layers
            .iter()
            .map(|l| self.homography_inv(l, view))
            .collect::<Result<Vec<_>>>()?;
        let mut img = ImageGrid::zeros(self.height, self.width, 3);
        let mut hits = Vec::with_capacity(self.width * self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                let mut best: Option<Hit> = None;
                for (li, (layer, hinv)) in self.layers.iter().zip(&hinvs).enumerate() {
                    let (qx, qy) = if view.later {
                        (x as f64 - layer.motion.0, y as f64 - layer.motion.1)
                    } else {
                        (x as f64, y as f64)
                    };
                    let ph = mat_vec(hinv, &[qx, qy, 1.0]);
                    if ph[2].abs() < 1e-300 {
                        continue;
                    }
                    let (px, py) = (ph[0] / ph[2], ph[1] / ph[2]);
                    if !layer.covers(px, py) {
                        continue;
                    }
                    let Some(xt) = layer.point(&self.k, px, py) else {
                        if layer.rect.is_none() {
                            return Err(Error::InvalidArgument("depth plane behind camera".into()));
                        }
                        continue;
                    };
                    let depth = view.apply(&xt)[2];
                    if depth <= Z_MIN {
                        return Err(Error::InvalidArgument("depth plane behind camera".into()));
                    }
                    if best.is_none_or(|b| depth < b.depth) {
                        best = Some(Hit {
                            layer: li,
                            src: (px, py),
                            depth,
                        });
                    }
                }
                let hit =
                    best.ok_or_else(|| Error::InvalidArgument("pixel sees no surface".into()))?;
                let tex = &self.layers[hit.layer].texture;
                for c in 0..3 {
                    img.set(x, y, c, tex.sample(hit.src.0, hit.src.1, c));
                }
                hits.push(hit);
            }
        }
        Ok((img, hits))
    }
}

fn layer_seed(seed: u64, layer: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (layer as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f)
}

/// Renders a stereo pair sequence with exact ground truth.
pub fn make_scene(config: &SceneConfig, seed: u64) -> Result<SceneSample> {
    config.validate()?;
    let camera = config.camera()?;
    let k = config.intrinsics();
    let (w, h) = (config.width, config.height);

    // Background: inverse depth is affine in the image row.
    let bg = &config.background;
    let span = (h as f64 - 1.0) / config.fy;
    let slope = (1.0 / bg.near_depth_m - 1.0 / bg.far_depth_m) / span;
    let offset = 1.0 / bg.far_depth_m + slope * config.cy / config.fy;
    let mut layers = vec![Layer {
        plane: [0.0, slope, offset],
        rect: None,
        motion: (0.0, 0.0),
        texture: Texture {
            seed: layer_seed(seed, 0),
            octaves: config.texture.octaves,
            base_period: config.texture.base_period_px,
        },
    }];
    for (i, o) in config.objects.iter().enumerate() {
        let [x0, y0, x1, y1] = o.rect;
        layers.push(Layer {
            plane: [0.0, 0.0, 1.0 / o.depth_m],
            rect: Some([x0 as f64, y0 as f64, x1 as f64, y1 as f64]),
            motion: (o.motion_px[0], o.motion_px[1]),
            texture: Texture {
                seed: layer_seed(seed, i + 1),
                octaves: config.texture.octaves,
                base_period: config.texture.base_period_px * 0.75,
            },
        });
    }
    let renderer = Renderer {
        k,
        layers,
        width: w,
        height: h,
    };

    let b = config.baseline_m;
    let t = camera.translation;
    let left_t_view = View {
        rotation: IDENTITY,
        translation: [0.0; 3],
        later: false,
    };
    let right_t_view = View {
        rotation: IDENTITY,
        translation: [-b, 0.0, 0.0],
        later: false,
    };
    let left_t1_view = View {
        rotation: camera.rotation,
        translation: t,
        later: true,
    };
    let right_t1_view = View {
        rotation: camera.rotation,
        translation: [t[0] - b, t[1], t[2]],
        later: true,
    };

    let (left_t, hits_t) = renderer.render(&left_t_view)?;
    let (right_t, _) = renderer.render(&right_t_view)?;
    let (left_t1, hits_t1) = renderer.render(&left_t1_view)?;
    let (right_t1, _) = renderer.render(&right_t1_view)?;

    let depth_t = DepthMap::from_fn(h, w, |x, y| hits_t[y * w + x].depth)?;
    let depth_t1 = DepthMap::from_fn(h, w, |x, y| hits_t1[y * w + x].depth)?;

    let mut gt_flow = FlowField::zeros(h, w);
    let mut gt_nonrigid = Mask::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let hit = hits_t[y * w + x];
            let layer = &renderer.layers[hit.layer];
            let xt = layer
                .point(&k, x as f64, y as f64)
                .ok_or_else(|| Error::InvalidArgument("depth plane behind camera".into()))?;
            let (qx, qy) = k.project(&camera.transform(&xt));
            gt_flow.set(
                x,
                y,
                qx + layer.motion.0 - x as f64,
                qy + layer.motion.1 - y as f64,
            );
            if layer.is_moving() {
                gt_nonrigid.set(x, y, 1.0);
            }
        }
    }
    let gt_flow_bwd = FlowField::from_fn(h, w, |x, y| {
        let hit = hits_t1[y * w + x];
        (hit.src.0 - x as f64, hit.src.1 - y as f64)
    });

    Ok(SceneSample {
        left_t,
        left_t1,
        right_t,
        right_t1,
        depth_t,
        depth_t1,
        camera,
        gt_flow,
        gt_flow_bwd,
        gt_nonrigid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> SceneConfig {
        let mut c = SceneConfig::new(32, 24, 30.0);
        c.background = BackgroundConfig {
            near_depth_m: 10.0,
            far_depth_m: 10.0,
        };
        c
    }

    #[test]
    fn static_identity_has_zero_flow() {
        let s = make_scene(&base(), 3).unwrap();
        assert!(s.gt_flow.as_grid().data().iter().all(|&v| v.abs() < 1e-12));
        assert_eq!(s.left_t, s.left_t1);
        assert_eq!(s.gt_nonrigid.count_set(), 0);
    }

    #[test]
    fn lateral_translation_over_plane() {
        let mut c = base();
        c.pose.translation_m = [0.4, 0.0, 0.0];
        let s = make_scene(&c, 3).unwrap();
        let expect = -c.fx * 0.4 / 10.0;
        for y in 0..c.height {
            for x in 0..c.width {
                let (u, v) = s.gt_flow.get(x, y);
                assert!((u - expect).abs() < 1e-9 && v.abs() < 1e-9);
            }
        }
    }

    #[test]
    fn moving_rectangle() {
        let mut c = base();
        c.objects.push(ObjectConfig {
            rect: [8, 6, 16, 14],
            depth_m: 5.0,
            motion_px: [2.0, 0.0],
        });
        let s = make_scene(&c, 9).unwrap();
        for y in 0..c.height {
            for x in 0..c.width {
                let inside = (8..16).contains(&x) && (6..14).contains(&y);
                let (u, v) = s.gt_flow.get(x, y);
                let eu = if inside { 2.0 } else { 0.0 };
                assert!((u - eu).abs() < 1e-12 && v.abs() < 1e-12, "({x},{y}) {u}");
                assert_eq!(s.gt_nonrigid.get(x, y), inside as u8 as f64);
            }
        }
        // The object texture moves with it.
        for y in 6..14 {
            for x in 8..16 {
                for ch in 0..3 {
                    assert!((s.left_t.get(x, y, ch) - s.left_t1.get(x + 2, y, ch)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let c = SceneConfig::random(32, 32, 2, 11);
        let a = make_scene(&c, 5).unwrap();
        let b = make_scene(&c, 5).unwrap();
        assert_eq!(a, b);
        let other = make_scene(&c, 6).unwrap();
        assert_ne!(a.left_t, other.left_t);
    }

    #[test]
    fn invalid_configs() {
        let mut c = base();
        c.objects.push(ObjectConfig {
            rect: [20, 0, 40, 5],
            depth_m: 5.0,
            motion_px: [0.0, 0.0],
        });
        assert!(make_scene(&c, 0).is_err());
        let mut c = base();
        c.background.near_depth_m = -1.0;
        assert!(make_scene(&c, 0).is_err());
        let mut c = base();
        c.objects.push(ObjectConfig {
            rect: [0, 0, 4, 4],
            depth_m: 0.0,
            motion_px: [0.0, 0.0],
        });
        assert!(make_scene(&c, 0).is_err());
        assert!(make_scene(&SceneConfig::new(8, 8, 10.0), 0).is_err());
        // Camera driving through the plane.
        let mut c = base();
        c.pose.translation_m = [0.0, 0.0, 12.0];
        assert!(make_scene(&c, 0).is_err());
    }

    #[test]
    fn stereo_disparity_on_plane() {
        let mut c = base();
        c.baseline_m = 1.0;
        let s = make_scene(&c, 2).unwrap();
        let disp = c.fx * c.baseline_m / 10.0; // 3 px
        let d = disp.round() as usize;
        for y in 2..c.height - 2 {
            for x in d + 1..c.width - 1 {
                for ch in 0..3 {
                    let l = s.left_t.get(x, y, ch);
                    let r = s.right_t.get(x - d, y, ch);
                    assert!((l - r).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn config_json_roundtrip() {
        let c = SceneConfig::random(48, 32, 3, 1);
        let js = serde_json::to_string(&c).unwrap();
        let back: SceneConfig = serde_json::from_str(&js).unwrap();
        assert_eq!(c, back);
        let minimal: SceneConfig = serde_json::from_str(
            r#"{"width":32,"height":32,"fx":20,"fy":20,"cx":16,"cy":16,"baseline_m":0.5,
                "pose":{"rotation_deg":[0,0,0],"translation_m":[0.1,0,0]},"objects":[]}"#,
        )
        .unwrap();
        assert!(make_scene(&minimal, 0).is_ok());
    }
}
