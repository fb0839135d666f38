//! Analytic tabletop scenes with planted features and ground-truth labels.
//!
//! Objects are unions of spheres, capsules and boxes. Depth comes from sphere
//! tracing the exact SDF. Features are planted from a codebook:
//!
//! * DINO: one unit code per part, shared by both instances of the part.
//! * SD: `normalize(side + blend·part)` with orthonormal side and part codes, so
//!   the two instances of a part have cosine `blend² / (1 + blend²)`.
//!
//! Pixel features get Gaussian noise and are then averaged down to a coarser
//! grid, like a ViT patch grid.

use std::collections::VecDeque;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bundle::FeatureFamily;
use crate::bundle::{CameraView, DepthMap, FeatureMap, RgbImage, SceneBundle, SourceBundle, Workspace};
use crate::field::{grid_dims, FieldAccess, Probe};
use crate::geometry::{look_at, Camera, Mat3, PoseParams, RigidTransform, Vec3};
use crate::grounding::InteractionArea;
use crate::optimizer::{pose_loss, Attraction, GripperModel, OptimizerConfig};
use crate::tensor::{save_tensor, Tensor};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene spec: {0}")]
    Spec(String),
    #[error("view '{0}' sees nothing")]
    EmptyView(String),
    #[error("part '{part}' ({side}) is not visible in the source view")]
    Occluded { part: String, side: String },
    #[error("{0}")]
    Io(String),
}

/// Part vocabulary shared by every preset, so one codebook serves all scenes.
pub const PARTS: &[&str] = &[
    "table", "body", "head", "ear", "arm", "leg", "sole", "toe", "heel", "opening",
];

pub fn part_index(name: &str) -> Option<usize> {
    PARTS.iter().position(|p| *p == name)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    None,
    Left,
    Right,
}

impl Side {
    pub fn index(self) -> usize {
        match self {
            Side::None => 0,
            Side::Left => 1,
            Side::Right => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Side::None => "none",
            Side::Left => "left",
            Side::Right => "right",
        }
    }

    pub fn opposite(self) -> Side {
        match self {
            Side::Left => Side::Right,
            Side::Right => Side::Left,
            Side::None => Side::None,
        }
    }

    pub fn parse(s: &str) -> Option<Side> {
        [Side::None, Side::Left, Side::Right]
            .into_iter()
            .find(|x| x.name() == s)
    }
}

/// `(part, side)` packed as `part·3 + side`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Label {
    pub part: usize,
    pub side: Side,
}

impl Label {
    pub fn id(self) -> i32 {
        (self.part * 3 + self.side.index()) as i32
    }

    pub fn from_id(id: i32) -> Option<Label> {
        if id < 0 {
            return None;
        }
        let id = id as usize;
        let side = [Side::None, Side::Left, Side::Right][id % 3];
        (id / 3 < PARTS.len()).then_some(Label { part: id / 3, side })
    }

    pub fn part_name(self) -> &'static str {
        PARTS[self.part]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Shape {
    Sphere {
        center: Vec3,
        radius: f64,
    },
    Capsule {
        a: Vec3,
        b: Vec3,
        radius: f64,
    },
    /// Box with half extents `half` in the frame `pose` (local → world).
    Cuboid {
        pose: RigidTransform,
        half: Vec3,
    },
}

impl Shape {
    pub fn sdf(&self, x: &Vec3) -> f64 {
        match self {
            Shape::Sphere { center, radius } => (x - center).norm() - radius,
            Shape::Capsule { a, b, radius } => {
                let ab = b - a;
                let t = ((x - a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
                (x - (a + ab * t)).norm() - radius
            }
            Shape::Cuboid { pose, half } => {
                let local = pose.rotation.transpose() * (x - pose.translation);
                let q = local.abs() - half;
                q.map(|v| v.max(0.0)).norm() + q.max().min(0.0)
            }
        }
    }

    fn transformed(&self, t: &RigidTransform) -> Shape {
        match self {
            Shape::Sphere { center, radius } => Shape::Sphere {
                center: t.apply(center),
                radius: *radius,
            },
            Shape::Capsule { a, b, radius } => Shape::Capsule {
                a: t.apply(a),
                b: t.apply(b),
                radius: *radius,
            },
            Shape::Cuboid { pose, half } => Shape::Cuboid {
                pose: t.compose(pose),
                half: *half,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub label: Label,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub primitives: Vec<Primitive>,
}

impl SceneSpec {
    pub fn sdf(&self, x: &Vec3) -> f64 {
        self.primitives
            .iter()
            .map(|p| p.shape.sdf(x))
            .fold(f64::INFINITY, f64::min)
    }

    /// Closest primitive and its distance.
    pub fn nearest(&self, x: &Vec3) -> Option<(usize, f64)> {
        self.primitives
            .iter()
            .enumerate()
            .map(|(i, p)| (i, p.shape.sdf(x)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
    }

    /// Closest primitive among the non-table ones.
    pub fn nearest_object(&self, x: &Vec3) -> Option<(usize, f64)> {
        self.primitives
            .iter()
            .enumerate()
            .filter(|(_, p)| p.label.part != 0)
            .map(|(i, p)| (i, p.shape.sdf(x)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
    }

    pub fn labels(&self) -> Vec<Label> {
        let mut out: Vec<Label> = Vec::new();
        for p in &self.primitives {
            if !out.contains(&p.label) {
                out.push(p.label);
            }
        }
        out
    }

    pub fn transformed(&self, t: &RigidTransform) -> SceneSpec {
        SceneSpec {
            primitives: self
                .primitives
                .iter()
                .map(|p| Primitive {
                    shape: p.shape.transformed(t),
                    label: p.label,
                })
                .collect(),
        }
    }

    pub fn with_table(mut self) -> SceneSpec {
        self.primitives.push(Primitive {
            shape: Shape::Cuboid {
                pose: RigidTransform::from_translation(Vec3::new(0.0, 0.0, -0.05)),
                half: Vec3::new(0.6, 0.6, 0.05),
            },
            label: Label {
                part: 0,
                side: Side::None,
            },
        });
        self
    }
}

/// Exact signed distance to the union of the spec's primitives.
pub fn analytic_sdf(spec: &SceneSpec, x: &Vec3) -> f64 {
    spec.sdf(x)
}

// ---------------------------------------------------------------------------
// presets

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[default]
    Toy,
    Shoe,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Toy => "toy",
            Preset::Shoe => "shoe",
        }
    }

    pub fn parse(s: &str) -> Option<Preset> {
        [Preset::Toy, Preset::Shoe].into_iter().find(|p| p.name() == s)
    }

    /// Part the evaluation clicks on.
    pub fn click_part(self) -> usize {
        match self {
            Preset::Toy => part_index("arm").unwrap(),
            Preset::Shoe => part_index("opening").unwrap(),
        }
    }

    /// Parts the SD source confusion may leak toward.
    pub fn confusable_parts(self) -> Vec<usize> {
        match self {
            Preset::Toy => vec![part_index("leg").unwrap(), part_index("ear").unwrap()],
            Preset::Shoe => vec![part_index("heel").unwrap(), part_index("toe").unwrap()],
        }
    }
}

/// Per-instance shape variation and placement.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Variation {
    pub yaw: f64,
    pub offset: [f64; 2],
    /// Uniform relative jitter of every primitive's size, drawn per primitive.
    pub jitter: f64,
}

impl Variation {
    pub fn none() -> Self {
        Self {
            yaw: 0.0,
            offset: [0.0; 2],
            jitter: 0.0,
        }
    }
}

fn lab(part: &str, side: Side) -> Label {
    Label {
        part: part_index(part).unwrap(),
        side,
    }
}

/// Left/right-symmetric plush toy facing +y: body on the table, legs stretched
/// forward above it, long upright ears.
fn toy_parts(j: &mut dyn FnMut() -> f64) -> Vec<Primitive> {
    let mut out = vec![
        Primitive {
            shape: Shape::Sphere {
                center: Vec3::new(0.0, 0.0, 0.075),
                radius: 0.065 * j(),
            },
            label: lab("body", Side::None),
        },
        Primitive {
            shape: Shape::Sphere {
                center: Vec3::new(0.0, 0.0, 0.175),
                radius: 0.045 * j(),
            },
            label: lab("head", Side::None),
        },
    ];
    for (side, sx) in [(Side::Left, -1.0), (Side::Right, 1.0)] {
        let tall = j();
        out.push(Primitive {
            shape: Shape::Capsule {
                a: Vec3::new(sx * 0.03, 0.0, 0.2),
                b: Vec3::new(sx * 0.045, 0.0, 0.2 + 0.06 * tall),
                radius: 0.015 * j(),
            },
            label: lab("ear", side),
        });
        let reach = j();
        out.push(Primitive {
            shape: Shape::Capsule {
                a: Vec3::new(sx * 0.05, 0.01, 0.10),
                b: Vec3::new(sx * (0.05 + 0.08 * reach), 0.01 + 0.02 * reach, 0.10 - 0.03 * reach),
                radius: 0.02 * j(),
            },
            label: lab("arm", side),
        });
        let reach = j();
        out.push(Primitive {
            shape: Shape::Capsule {
                a: Vec3::new(sx * 0.04, 0.03, 0.045),
                b: Vec3::new(sx * (0.04 + 0.015 * reach), 0.03 + 0.09 * reach, 0.045),
                radius: 0.02 * j(),
            },
            label: lab("leg", side),
        });
    }
    out
}

/// A pair of shoes side by side, toes toward +y.
fn shoe_parts(j: &mut dyn FnMut() -> f64) -> Vec<Primitive> {
    let mut out = Vec::new();
    for (side, sx) in [(Side::Left, -1.0), (Side::Right, 1.0)] {
        let cx = sx * 0.065;
        let len = 0.055 * j();
        out.push(Primitive {
            shape: Shape::Cuboid {
                pose: RigidTransform::from_translation(Vec3::new(cx, 0.0, 0.009)),
                half: Vec3::new(0.027 * j(), len, 0.009),
            },
            label: lab("sole", side),
        });
        out.push(Primitive {
            shape: Shape::Capsule {
                a: Vec3::new(cx - 0.012, len * 0.6, 0.03),
                b: Vec3::new(cx + 0.012, len * 0.6, 0.03),
                radius: 0.02 * j(),
            },
            label: lab("toe", side),
        });
        out.push(Primitive {
            shape: Shape::Cuboid {
                pose: RigidTransform::from_translation(Vec3::new(cx, -len * 0.7, 0.04)),
                half: Vec3::new(0.024, 0.014 * j(), 0.022),
            },
            label: lab("heel", side),
        });
        out.push(Primitive {
            shape: Shape::Capsule {
                a: Vec3::new(cx, -len * 0.45, 0.07),
                b: Vec3::new(cx, len * 0.05, 0.055),
                radius: 0.012 * j(),
            },
            label: lab("opening", side),
        });
    }
    out
}

/// Object of `preset` (no table) with the given variation.
pub fn preset_spec(preset: Preset, variation: &Variation, rng: &mut ChaCha8Rng) -> SceneSpec {
    let jit = variation.jitter;
    let mut j = || {
        if jit > 0.0 {
            1.0 + rng.random_range(-jit..=jit)
        } else {
            1.0
        }
    };
    let parts = match preset {
        Preset::Toy => toy_parts(&mut j),
        Preset::Shoe => shoe_parts(&mut j),
    };
    let (s, c) = variation.yaw.sin_cos();
    let t = RigidTransform {
        rotation: crate::geometry::Mat3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0),
        translation: Vec3::new(variation.offset[0], variation.offset[1], 0.0),
    };
    SceneSpec { primitives: parts }.transformed(&t)
}

/// Default desk workspace: 0.4 × 0.4 × 0.3 m box around the object.
pub fn desk_workspace() -> Workspace {
    Workspace {
        origin: [-0.2, -0.2, -0.02],
        size: [0.4, 0.4, 0.3],
    }
}

/// `n` cameras on a ring around `target` at the given elevations (cycled).
pub fn ring_cameras(
    target: Vec3,
    n: usize,
    first_azimuth: f64,
    elevations: &[f64],
    distance: f64,
    width: usize,
    height: usize,
    focal: f64,
) -> Vec<Camera> {
    (0..n)
        .map(|k| {
            let az = first_azimuth + k as f64 * std::f64::consts::TAU / n as f64;
            let el = elevations[k % elevations.len()];
            let eye = target + Vec3::new(az.cos() * el.cos(), az.sin() * el.cos(), el.sin()) * distance;
            let pose = look_at(&eye, &target, &Vec3::z());
            Camera::new(
                focal,
                focal,
                (width as f64 - 1.0) / 2.0,
                (height as f64 - 1.0) / 2.0,
                width,
                height,
                pose,
            )
            .expect("valid ring camera")
        })
        .collect()
}

/// Four cameras looking down at the desk from 40° elevation.
pub fn desk_cameras() -> Vec<Camera> {
    ring_cameras(
        Vec3::new(0.0, 0.0, 0.08),
        4,
        std::f64::consts::FRAC_PI_4,
        &[40f64.to_radians()],
        0.55,
        240,
        180,
        230.0,
    )
}

/// Free-floating sphere with a capsule attached, used for field checks.
pub fn sphere_capsule_spec() -> SceneSpec {
    SceneSpec {
        primitives: vec![
            Primitive {
                shape: Shape::Sphere {
                    center: Vec3::new(-0.05, 0.0, 0.1),
                    radius: 0.1,
                },
                label: Label {
                    part: 1,
                    side: Side::None,
                },
            },
            Primitive {
                shape: Shape::Capsule {
                    a: Vec3::new(0.02, -0.05, 0.08),
                    b: Vec3::new(0.14, 0.06, 0.14),
                    radius: 0.04,
                },
                label: Label {
                    part: 4,
                    side: Side::Left,
                },
            },
        ],
    }
}

pub fn sphere_capsule_workspace() -> Workspace {
    Workspace {
        origin: [-0.2, -0.2, -0.05],
        size: [0.4, 0.4, 0.35],
    }
}

/// Four cameras alternating 35° above and below the sphere-capsule scene.
pub fn sphere_capsule_cameras() -> Vec<Camera> {
    let el = 35f64.to_radians();
    ring_cameras(Vec3::new(0.0, 0.0, 0.1), 4, 0.3, &[el, -el], 0.7, 240, 180, 230.0)
}

/// Frontal, tightly framed source camera for a preset.
pub fn source_camera(preset: Preset) -> Camera {
    let (eye, target) = match preset {
        Preset::Toy => (Vec3::new(0.0, 0.42, 0.2), Vec3::new(0.0, 0.0, 0.1)),
        Preset::Shoe => (Vec3::new(0.0, 0.18, 0.3), Vec3::new(0.0, -0.01, 0.03)),
    };
    Camera::new(200.0, 200.0, 79.5, 59.5, 160, 120, look_at(&eye, &target, &Vec3::z())).expect("valid source camera")
}

// ---------------------------------------------------------------------------
// codebook and rendering

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureNoise {
    pub dino: f64,
    pub sd: f64,
}

impl Default for FeatureNoise {
    fn default() -> Self {
        Self { dino: 0.1, sd: 0.2 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    pub dino_dim: usize,
    pub sd_dim: usize,
    pub blend: f64,
    /// Per part, plus a final "void" code for rays that hit nothing.
    dino: Vec<Vec<f64>>,
    sd_side: Vec<Vec<f64>>,
    /// Per part, plus void.
    sd_part: Vec<Vec<f64>>,
}

const CODEBOOK_SEED: u64 = 0xc0de_b00c;

fn orthonormal_set(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    assert!(n <= dim, "cannot fit {n} orthonormal codes in {dim} dimensions");
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(n);
    while out.len() < n {
        let mut v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
        for b in &out {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            out.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    out
}

fn normalized(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn axpy(a: f64, x: &[f64], y: &[f64]) -> Vec<f64> {
    x.iter().zip(y).map(|(x, y)| a * x + y).collect()
}

/// Mixes the SD part code of `part` toward `toward` by `angle` radians.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SdConfusion {
    pub part: usize,
    pub toward: usize,
    pub angle: f64,
}

impl Codebook {
    pub fn new(dino_dim: usize, sd_dim: usize, blend: f64) -> Self {
        let n = PARTS.len() + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(CODEBOOK_SEED);
        let dino = orthonormal_set(n, dino_dim, &mut rng);
        let mut sd = orthonormal_set(3 + n, sd_dim, &mut rng);
        let sd_part = sd.split_off(3);
        Self {
            dino_dim,
            sd_dim,
            blend,
            dino,
            sd_side: sd,
            sd_part,
        }
    }

    pub fn void(&self) -> usize {
        PARTS.len()
    }

    pub fn dino_code(&self, part: usize) -> &[f64] {
        &self.dino[part]
    }

    pub fn sd_code(&self, label: Label, confusion: Option<&SdConfusion>) -> Vec<f64> {
        let part_code = match confusion {
            Some(c) if c.part == label.part => {
                let (s, co) = c.angle.sin_cos();
                axpy(
                    s,
                    &self.sd_part[c.toward],
                    &self.sd_part[label.part].iter().map(|x| co * x).collect::<Vec<_>>(),
                )
            }
            _ => self.sd_part[label.part].clone(),
        };
        normalized(axpy(self.blend, &part_code, &self.sd_side[label.side.index()]))
    }

    pub fn sd_void(&self) -> Vec<f64> {
        normalized(axpy(self.blend, &self.sd_part[self.void()], &self.sd_side[0]))
    }
}

impl Default for Codebook {
    fn default() -> Self {
        Self::new(32, 32, 0.5)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOptions {
    pub noise: FeatureNoise,
    /// Feature grid = image / downsample (both dimensions must divide).
    pub downsample: usize,
    pub seed: u64,
    pub sd_confusion: Option<SdConfusion>,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            noise: FeatureNoise::default(),
            downsample: 4,
            seed: 0,
            sd_confusion: None,
        }
    }
}

const TRACE_EPS: f64 = 1e-5;
const TRACE_STEPS: usize = 256;
const TRACE_FAR: f64 = 3.0;

/// Sphere-traced hit distance along a unit ray.
pub fn sphere_trace(spec: &SceneSpec, origin: &Vec3, dir: &Vec3) -> Option<f64> {
    let mut t = 0.0;
    for _ in 0..TRACE_STEPS {
        let d = spec.sdf(&(origin + dir * t));
        if d < TRACE_EPS {
            return Some(t);
        }
        t += d;
        if t > TRACE_FAR {
            return None;
        }
    }
    None
}

fn sdf_normal(spec: &SceneSpec, x: &Vec3) -> Vec3 {
    let h = 1e-5;
    let mut n = Vec3::zeros();
    for k in 0..3 {
        let mut a = *x;
        let mut b = *x;
        a[k] += h;
        b[k] -= h;
        n[k] = spec.sdf(&a) - spec.sdf(&b);
    }
    n.try_normalize(1e-12).unwrap_or(Vec3::z())
}

const PART_COLORS: [[u8; 3]; 11] = [
    [170, 150, 120],
    [200, 120, 60],
    [210, 140, 80],
    [120, 80, 40],
    [60, 120, 200],
    [80, 160, 80],
    [90, 90, 90],
    [200, 60, 60],
    [150, 60, 150],
    [230, 200, 60],
    [30, 30, 40],
];

/// Raw render of one camera: depth, per-pixel labels (-1 = miss) and RGB.
pub struct RawView {
    pub depth: DepthMap,
    pub labels: Vec<i32>,
    pub rgb: RgbImage,
}

pub fn trace_view(spec: &SceneSpec, camera: &Camera) -> RawView {
    let (w, h) = (camera.width, camera.height);
    let mut depth = vec![0.0f32; w * h];
    let mut labels = vec![-1i32; w * h];
    let mut rgb = RgbImage::new(w, h);
    let origin = camera.center();
    let forward = camera.cam_to_world().rotation.column(2).into_owned();
    let light = Vec3::new(0.3, -0.4, 1.0).normalize();
    for v in 0..h {
        for u in 0..w {
            let dir = camera.ray_direction(u as f64, v as f64);
            let idx = v * w + u;
            match sphere_trace(spec, &origin, &dir) {
                Some(t) => {
                    let p = origin + dir * t;
                    depth[idx] = (t * dir.dot(&forward)) as f32;
                    let (pi, _) = spec.nearest(&p).unwrap();
                    let label = spec.primitives[pi].label;
                    labels[idx] = label.id();
                    let shade = 0.45 + 0.55 * sdf_normal(spec, &p).dot(&light).max(0.0);
                    let c = PART_COLORS[label.part];
                    let tint = match label.side {
                        Side::Left => 0.85,
                        _ => 1.0,
                    };
                    rgb.put(u, v, c.map(|x| (x as f64 * shade * tint).min(255.0) as u8));
                }
                None => rgb.put(u, v, PART_COLORS[10]),
            }
        }
    }
    RawView {
        depth: DepthMap {
            width: w,
            height: h,
            values: depth,
        },
        labels,
        rgb,
    }
}

/// Planted feature maps for a labeled raster.
pub fn plant_features(
    labels: &[i32],
    width: usize,
    height: usize,
    codebook: &Codebook,
    opts: &RenderOptions,
    rng: &mut ChaCha8Rng,
) -> Result<(FeatureMap, FeatureMap), SynthError> {
    let k = opts.downsample.max(1);
    if !width.is_multiple_of(k) || !height.is_multiple_of(k) {
        return Err(SynthError::Spec(format!("image {width}x{height} not divisible by {k}")));
    }
    let (fw, fh) = (width / k, height / k);
    let void_dino = codebook.dino_code(codebook.void()).to_vec();
    let void_sd = codebook.sd_void();
    let mut sd_cache: std::collections::HashMap<i32, Vec<f64>> = Default::default();
    let noise_d = (opts.noise.dino > 0.0).then(|| Normal::new(0.0, opts.noise.dino).unwrap());
    let noise_s = (opts.noise.sd > 0.0).then(|| Normal::new(0.0, opts.noise.sd).unwrap());
    let mut dino = vec![0.0f64; fw * fh * codebook.dino_dim];
    let mut sd = vec![0.0f64; fw * fh * codebook.sd_dim];
    let scale = 1.0 / (k * k) as f64;
    for v in 0..height {
        for u in 0..width {
            let id = labels[v * width + u];
            let (dcode, scode) = match Label::from_id(id) {
                Some(l) => (
                    codebook.dino_code(l.part).to_vec(),
                    sd_cache
                        .entry(id)
                        .or_insert_with(|| codebook.sd_code(l, opts.sd_confusion.as_ref()))
                        .clone(),
                ),
                None => (void_dino.clone(), void_sd.clone()),
            };
            let cell = (v / k) * fw + u / k;
            for (c, x) in dcode.iter().enumerate() {
                let n = noise_d.map_or(0.0, |d| d.sample(rng));
                dino[cell * codebook.dino_dim + c] += (x + n) * scale;
            }
            for (c, x) in scode.iter().enumerate() {
                let n = noise_s.map_or(0.0, |d| d.sample(rng));
                sd[cell * codebook.sd_dim + c] += (x + n) * scale;
            }
        }
    }
    let to32 = |v: Vec<f64>| v.into_iter().map(|x| x as f32).collect::<Vec<_>>();
    Ok((
        FeatureMap::new(fh, fw, codebook.dino_dim, to32(dino)).map_err(SynthError::Spec)?,
        FeatureMap::new(fh, fw, codebook.sd_dim, to32(sd)).map_err(SynthError::Spec)?,
    ))
}

/// Ground-truth labels for a rendered scene.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub origin: Vec3,
    pub dims: [usize; 3],
    pub voxel_size: f64,
    /// Label id per voxel (`-1` = empty), indexed like [`crate::field::VoxelGrid`].
    pub voxel_labels: Vec<i32>,
    pub view_labels: Vec<(String, usize, usize, Vec<i32>)>,
}

impl GroundTruth {
    pub fn label_at(&self, p: &Vec3) -> Option<Label> {
        let rel = (p - self.origin) / self.voxel_size;
        let mut ijk = [0usize; 3];
        for a in 0..3 {
            let c = rel[a].floor();
            if c < 0.0 || c >= self.dims[a] as f64 {
                return None;
            }
            ijk[a] = c as usize;
        }
        let idx = ijk[0] + self.dims[0] * (ijk[1] + self.dims[1] * ijk[2]);
        Label::from_id(self.voxel_labels[idx])
    }

    /// Distinct object labels hit by the segment `a → b`, sampled every `δ/4`.
    pub fn labels_on_segment(&self, a: &Vec3, b: &Vec3) -> Vec<Label> {
        let n = (((b - a).norm() / (self.voxel_size / 4.0)).ceil() as usize).max(1);
        let mut out = Vec::new();
        for i in 0..=n {
            let p = a + (b - a) * (i as f64 / n as f64);
            if let Some(l) = self.label_at(&p) {
                if l.part != 0 && !out.contains(&l) {
                    out.push(l);
                }
            }
        }
        out
    }

    pub fn voxel_count(&self, label: Label) -> usize {
        self.voxel_labels.iter().filter(|&&l| l == label.id()).count()
    }

    /// Writes `ground_truth.json`, `ground_truth_voxels.tsr` and one
    /// `{view}_labels.tsr` per view into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), SynthError> {
        let io = |e: String| SynthError::Io(e);
        fs::create_dir_all(dir).map_err(|e| io(e.to_string()))?;
        let [nx, ny, nz] = self.dims;
        let vox = Tensor::new(vec![nz, ny, nx], self.voxel_labels.iter().map(|&l| l as f32).collect())
            .map_err(|e| io(e.to_string()))?;
        save_tensor(&vox, &dir.join("ground_truth_voxels.tsr")).map_err(|e| io(e.to_string()))?;
        let mut views = serde_json::Map::new();
        for (name, w, h, labels) in &self.view_labels {
            let file = format!("{name}_labels.tsr");
            let t =
                Tensor::new(vec![*h, *w], labels.iter().map(|&l| l as f32).collect()).map_err(|e| io(e.to_string()))?;
            save_tensor(&t, &dir.join(&file)).map_err(|e| io(e.to_string()))?;
            views.insert(name.clone(), file.into());
        }
        let labels: Vec<serde_json::Value> = (0..PARTS.len() as i32 * 3)
            .filter_map(Label::from_id)
            .filter(|l| self.voxel_count(*l) > 0)
            .map(|l| serde_json::json!({"id": l.id(), "part": l.part_name(), "side": l.side}))
            .collect();
        let doc = serde_json::json!({
            "version": 1,
            "origin": [self.origin.x, self.origin.y, self.origin.z],
            "dims": self.dims,
            "voxel": self.voxel_size,
            "voxel_labels": "ground_truth_voxels.tsr",
            "labels": labels,
            "views": views,
        });
        fs::write(
            dir.join("ground_truth.json"),
            serde_json::to_string_pretty(&doc).unwrap(),
        )
        .map_err(|e| io(e.to_string()))
    }
}

/// Voxel labels: the nearest object primitive wherever it is within `δ/2`.
pub fn voxel_labels(spec: &SceneSpec, workspace: &Workspace, voxel_size: f64) -> Result<GroundTruth, SynthError> {
    let dims = grid_dims(workspace, voxel_size).map_err(|e| SynthError::Spec(e.to_string()))?;
    let origin = workspace.origin();
    let n = dims[0] * dims[1] * dims[2];
    let labels = (0..n)
        .map(|i| {
            let (x, y, z) = (i % dims[0], (i / dims[0]) % dims[1], i / (dims[0] * dims[1]));
            let c = origin + Vec3::new(x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5) * voxel_size;
            match spec.nearest_object(&c) {
                Some((pi, d)) if d <= voxel_size / 2.0 => spec.primitives[pi].label.id(),
                _ => -1,
            }
        })
        .collect();
    Ok(GroundTruth {
        origin,
        dims,
        voxel_size,
        voxel_labels: labels,
        view_labels: Vec::new(),
    })
}

/// Renders every camera of a scene into a bundle, plus ground truth.
pub fn render_scene(
    spec: &SceneSpec,
    cameras: &[Camera],
    workspace: Workspace,
    voxel_size: f64,
    codebook: &Codebook,
    opts: &RenderOptions,
) -> Result<(SceneBundle, GroundTruth), SynthError> {
    if spec.primitives.is_empty() {
        return Err(SynthError::Spec("scene has no primitives".into()));
    }
    let mut views = Vec::with_capacity(cameras.len());
    let mut gt = voxel_labels(spec, &workspace, voxel_size)?;
    for (i, cam) in cameras.iter().enumerate() {
        let name = format!("cam{i}");
        let raw = trace_view(spec, cam);
        if raw.labels.iter().all(|&l| l < 0) {
            return Err(SynthError::EmptyView(name));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(i as u64 + 1);
        let (dino, sd) = plant_features(&raw.labels, cam.width, cam.height, codebook, opts, &mut rng)?;
        gt.view_labels.push((name.clone(), cam.width, cam.height, raw.labels));
        views.push(CameraView {
            name,
            camera: cam.clone(),
            rgb: raw.rgb,
            depth: raw.depth,
            dino,
            sd,
        });
    }
    let bundle = SceneBundle::new(views, workspace, voxel_size).map_err(|e| SynthError::Spec(e.to_string()))?;
    Ok((bundle, gt))
}

/// Pixel of the mask farthest (4-neighbour steps) from any non-mask pixel,
/// first in raster order on ties.
pub fn most_interior_pixel(labels: &[i32], width: usize, height: usize, label: i32) -> Option<(usize, usize)> {
    let n = width * height;
    let mut dist = vec![usize::MAX; n];
    let mut queue = VecDeque::new();
    for i in 0..n {
        let (u, v) = (i % width, i / width);
        let border = u == 0 || v == 0 || u + 1 == width || v + 1 == height;
        if labels[i] != label {
            dist[i] = 0;
            queue.push_back(i);
        } else if border {
            dist[i] = 1;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let (u, v) = (i % width, i / width);
        let mut nb = Vec::with_capacity(4);
        if u > 0 {
            nb.push(i - 1);
        }
        if u + 1 < width {
            nb.push(i + 1);
        }
        if v > 0 {
            nb.push(i - width);
        }
        if v + 1 < height {
            nb.push(i + width);
        }
        for j in nb {
            if dist[j] == usize::MAX {
                dist[j] = dist[i] + 1;
                queue.push_back(j);
            }
        }
    }
    (0..n)
        .filter(|&i| labels[i] == label)
        .max_by(|&a, &b| dist[a].cmp(&dist[b]).then(b.cmp(&a)))
        .map(|i| (i % width, i / width))
}

/// Source image of `spec` with a click on the most interior pixel of `target`.
pub fn render_source(
    spec: &SceneSpec,
    camera: &Camera,
    codebook: &Codebook,
    opts: &RenderOptions,
    target: Label,
) -> Result<(SourceBundle, (f64, f64), Vec<i32>), SynthError> {
    let raw = trace_view(spec, camera);
    let (u, v) = most_interior_pixel(&raw.labels, camera.width, camera.height, target.id()).ok_or_else(|| {
        SynthError::Occluded {
            part: target.part_name().into(),
            side: target.side.name().into(),
        }
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let (dino, sd) = plant_features(&raw.labels, camera.width, camera.height, codebook, opts, &mut rng)?;
    let src = SourceBundle::new(raw.rgb, dino, sd).map_err(|e| SynthError::Spec(e.to_string()))?;
    Ok((src, (u as f64, v as f64), raw.labels))
}

/// Plane `z = 0` with a descriptor planted in a disc around the origin:
/// `s = clamp(z, ±τ)`, cosine `(1 - (ρ/R)²)²` inside radius `R`, 0 outside.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlantedDisc {
    pub radius: f64,
    pub truncation: f64,
}

impl Default for PlantedDisc {
    fn default() -> Self {
        Self {
            radius: 0.05,
            truncation: 0.04,
        }
    }
}

impl PlantedDisc {
    pub fn cosine(&self, x: &Vec3) -> (f64, Vec3) {
        let q = (x.x * x.x + x.y * x.y) / (self.radius * self.radius);
        if q >= 1.0 {
            return (0.0, Vec3::zeros());
        }
        let k = -4.0 * (1.0 - q) / (self.radius * self.radius);
        ((1.0 - q) * (1.0 - q), Vec3::new(k * x.x, k * x.y, 0.0))
    }
}

impl FieldAccess for PlantedDisc {
    fn sdf(&self, x: &Vec3) -> f64 {
        x.z.clamp(-self.truncation, self.truncation)
    }

    fn sdf_with_gradient(&self, x: &Vec3) -> (f64, Vec3) {
        if x.z.abs() >= self.truncation {
            (self.sdf(x), Vec3::zeros())
        } else {
            (x.z, Vec3::z())
        }
    }

    fn probe(&self, x: &Vec3, _: FeatureFamily, _: &[f64]) -> Probe {
        let (s, ds) = self.sdf_with_gradient(x);
        let (cos, dcos) = self.cosine(x);
        Probe { s, ds, cos, dcos }
    }
}

/// Seed voxels over the disc plane: a `(2n+1)²` patch of centers spaced `step`
/// around `(cx, cy)` at `height` above the plane.
pub fn disc_area(center: (f64, f64), height: f64, n: usize, step: f64, voxel_size: f64) -> InteractionArea {
    let side = 2 * n + 1;
    let mut centers = Vec::with_capacity(side * side);
    for j in 0..side {
        for i in 0..side {
            let dx = (i as f64 - n as f64) * step;
            let dy = (j as f64 - n as f64) * step;
            centers.push([center.0 + dx, center.1 + dy, height]);
        }
    }
    InteractionArea {
        voxels: (0..centers.len()).collect(),
        scores: vec![1.0; centers.len()],
        centers,
        origin: [0.0; 3],
        dims: [side, side, 1],
        voxel_size,
    }
}

/// Exhaustive search over finger-center positions on a grid (`half` on each
/// side of `center`, spacing `step`) with the rotation held fixed. Returns the
/// lowest unregularized loss and the finger center attaining it.
#[allow(clippy::too_many_arguments)]
pub fn brute_force_translation(
    field: &dyn FieldAccess,
    gripper: &GripperModel,
    attraction: &Attraction,
    cfg: &OptimizerConfig,
    rotation: &Mat3,
    samples: &[Vec3],
    center: &Vec3,
    half: f64,
    step: f64,
) -> (f64, Vec3) {
    let n = (half / step).round() as i64;
    let mut best = (f64::INFINITY, *center);
    for i in -n..=n {
        for j in -n..=n {
            for k in -n..=n {
                let c = center + Vec3::new(i as f64, j as f64, k as f64) * step;
                let pose = RigidTransform {
                    rotation: *rotation,
                    translation: c - rotation * gripper.finger_center,
                };
                let (l, _) = pose_loss(&PoseParams::at(pose), samples, gripper, field, attraction, cfg);
                if l < best.0 {
                    best = (l, c);
                }
            }
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn sphere(r: f64) -> SceneSpec {
        SceneSpec {
            primitives: vec![Primitive {
                shape: Shape::Sphere {
                    center: Vec3::zeros(),
                    radius: r,
                },
                label: lab("body", Side::None),
            }],
        }
    }

    #[test]
    fn sdf_examples() {
        let s = sphere(0.1);
        assert_relative_eq!(analytic_sdf(&s, &Vec3::new(0.2, 0.0, 0.0)), 0.1, epsilon = 1e-15);
        assert_relative_eq!(analytic_sdf(&s, &Vec3::zeros()), -0.1, epsilon = 1e-15);
        let cap = Shape::Capsule {
            a: Vec3::zeros(),
            b: Vec3::new(1.0, 0.0, 0.0),
            radius: 0.1,
        };
        assert_relative_eq!(cap.sdf(&Vec3::new(0.5, 0.3, 0.0)), 0.2, epsilon = 1e-12);
        assert_relative_eq!(cap.sdf(&Vec3::new(-0.3, 0.0, 0.0)), 0.2, epsilon = 1e-12);
        let cube = Shape::Cuboid {
            pose: RigidTransform::identity(),
            half: Vec3::new(1.0, 1.0, 1.0),
        };
        assert_relative_eq!(cube.sdf(&Vec3::new(2.0, 0.0, 0.0)), 1.0);
        assert_relative_eq!(cube.sdf(&Vec3::new(2.0, 2.0, 1.0)), 2f64.sqrt());
        assert_relative_eq!(cube.sdf(&Vec3::new(0.5, 0.0, 0.0)), -0.5);
    }

    #[test]
    fn union_is_min() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = preset_spec(Preset::Toy, &Variation::none(), &mut rng);
        for _ in 0..200 {
            let x = Vec3::new(
                rng.random_range(-0.2..0.2),
                rng.random_range(-0.2..0.2),
                rng.random_range(0.0..0.3),
            );
            let m = spec
                .primitives
                .iter()
                .map(|p| p.shape.sdf(&x))
                .fold(f64::INFINITY, f64::min);
            assert_eq!(analytic_sdf(&spec, &x), m);
        }
    }

    #[test]
    fn traced_depth_matches_ray_sphere() {
        let cam = Camera::new(
            100.0,
            100.0,
            31.5,
            31.5,
            64,
            64,
            look_at(&Vec3::new(0.0, 0.0, -1.1), &Vec3::zeros(), &Vec3::y()),
        )
        .unwrap();
        // principal point between pixels: use an odd-size camera for an exact center pixel
        let cam_c = Camera::new(100.0, 100.0, 32.0, 32.0, 65, 65, *cam.cam_to_world()).unwrap();
        let raw = trace_view(&sphere(0.1), &cam_c);
        let d = raw.depth.at(32, 32) as f64;
        assert!((d - 1.0).abs() < 1e-4, "{d}");
        // every hit pixel back-projects onto the surface
        for v in 0..65 {
            for u in 0..65 {
                let z = raw.depth.at(u, v) as f64;
                if z > 0.0 {
                    let p = cam_c.backproject(u as f64, v as f64, z).unwrap();
                    assert!(analytic_sdf(&sphere(0.1), &p).abs() < 1e-3);
                }
            }
        }
    }

    #[test]
    fn codebook_properties() {
        let cb = Codebook::default();
        let arm = part_index("arm").unwrap();
        let l = Label {
            part: arm,
            side: Side::Left,
        };
        let r = Label {
            part: arm,
            side: Side::Right,
        };
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        assert_relative_eq!(dot(&cb.sd_code(l, None), &cb.sd_code(r, None)), 0.2, epsilon = 1e-12);
        for p in 0..=PARTS.len() {
            assert_relative_eq!(dot(cb.dino_code(p), cb.dino_code(p)), 1.0, epsilon = 1e-12);
            for q in 0..p {
                assert!(dot(cb.dino_code(p), cb.dino_code(q)).abs() < 1e-12);
            }
        }
        let c = SdConfusion {
            part: arm,
            toward: part_index("leg").unwrap(),
            angle: std::f64::consts::FRAC_PI_2,
        };
        let confused = cb.sd_code(l, Some(&c));
        let leg = cb.sd_code(
            Label {
                part: c.toward,
                side: Side::Left,
            },
            None,
        );
        assert_relative_eq!(dot(&confused, &leg), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn noise_free_arm_features() {
        let cb = Codebook::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = preset_spec(Preset::Toy, &Variation::none(), &mut rng).with_table();
        let opts = RenderOptions {
            noise: FeatureNoise { dino: 0.0, sd: 0.0 },
            ..Default::default()
        };
        let (src, click, labels) =
            render_source(&spec, &source_camera(Preset::Toy), &cb, &opts, lab("arm", Side::Left)).unwrap();
        assert_eq!(
            labels[click.1 as usize * 160 + click.0 as usize],
            lab("arm", Side::Left).id()
        );
        // fully interior feature cells of both arms carry the same DINO code
        let arm = part_index("arm").unwrap();
        let mut count = 0;
        for v in 0..30 {
            for u in 0..40 {
                let block: Vec<i32> = (0..16).map(|k| labels[(v * 4 + k / 4) * 160 + u * 4 + k % 4]).collect();
                if block.iter().all(|&l| Label::from_id(l).is_some_and(|l| l.part == arm)) {
                    let f = src.dino.pixel_f64(u, v);
                    for (a, b) in f.iter().zip(cb.dino_code(arm)) {
                        assert!((a - b).abs() < 1e-6);
                    }
                    count += 1;
                }
            }
        }
        assert!(count > 20, "{count}");
    }

    #[test]
    fn interior_pixel() {
        let mut l = vec![0i32; 7 * 5];
        for v in 1..4 {
            for u in 1..6 {
                l[v * 7 + u] = 3;
            }
        }
        assert_eq!(most_interior_pixel(&l, 7, 5, 3), Some((2, 2)));
        assert_eq!(most_interior_pixel(&l, 7, 5, 9), None);
    }

    #[test]
    fn seeded_generation_is_deterministic() {
        let var = Variation {
            yaw: 0.3,
            offset: [0.01, -0.02],
            jitter: 0.12,
        };
        let a = preset_spec(Preset::Toy, &var, &mut ChaCha8Rng::seed_from_u64(5));
        let b = preset_spec(Preset::Toy, &var, &mut ChaCha8Rng::seed_from_u64(5));
        let c = preset_spec(Preset::Toy, &var, &mut ChaCha8Rng::seed_from_u64(6));
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.labels(), c.labels());
    }
}
