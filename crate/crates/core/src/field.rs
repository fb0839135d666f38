//! Differentiable descriptor field fused from calibrated RGB-D views.
//!
//! For a query point every view contributes a projective signed distance
//! `s_i = clamp(D_i(u, v) - z_cam, -τ, τ)` and the bilinearly sampled feature
//! vectors at the point's projection. Views are blended by
//! `w_i = max((τ - |s_i|) / τ, w_min)`. A view whose raw distance is `≤ -τ`
//! sees the point far behind its observed surface and is skipped.
//!
//! Analytic gradients follow the same path (projection, bilinear lookup,
//! clamp, weighting); clamp and floor regions carry zero gradient.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;
use thiserror::Error;

use crate::bundle::{DepthMap, FeatureFamily, FeatureMap, SceneBundle, Workspace};
use crate::geometry::{Camera, Vec3};
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FieldError {
    #[error("invalid fusion config: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    Argument(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    /// Truncation distance τ (m); `None` means four voxels.
    pub truncation: Option<f64>,
    /// Floor of the per-view weight for contributing views.
    pub weight_floor: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            truncation: None,
            weight_floor: 1e-3,
        }
    }
}

impl FusionConfig {
    pub fn truncation_for(&self, voxel_size: f64) -> f64 {
        self.truncation.unwrap_or(4.0 * voxel_size)
    }
}

/// Fused field value at one point.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldSample {
    pub s: f64,
    pub dino: Vec<f64>,
    pub sd: Vec<f64>,
    pub weight_sum: f64,
    pub valid: bool,
}

impl FieldSample {
    pub fn features(&self, family: FeatureFamily) -> &[f64] {
        match family {
            FeatureFamily::Dino => &self.dino,
            FeatureFamily::Sd => &self.sd,
        }
    }
}

/// Spatial derivatives at one point. Feature Jacobians are stored per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldGradient {
    pub ds: Vec3,
    pub dino: Option<Vec<Vec3>>,
    pub sd: Option<Vec<Vec3>>,
}

/// Signed distance and cosine similarity to a descriptor, both with gradients.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Probe {
    pub s: f64,
    pub ds: Vec3,
    pub cos: f64,
    pub dcos: Vec3,
}

struct View {
    camera: Camera,
    depth: DepthMap,
    dino: FeatureMap,
    sd: FeatureMap,
}

impl View {
    fn features(&self, family: FeatureFamily) -> &FeatureMap {
        match family {
            FeatureFamily::Dino => &self.dino,
            FeatureFamily::Sd => &self.sd,
        }
    }
}

/// Per-view intermediate for one query point.
#[derive(Clone, Copy, Debug)]
struct ViewHit {
    view: usize,
    s: f64,
    ds: Vec3,
    w: f64,
    dw: Vec3,
    u: f64,
    v: f64,
    du: Vec3,
    dv: Vec3,
    depth_cell: (usize, usize),
    clamped: bool,
    floored: bool,
}

/// Bilinear stencil on a feature grid.
#[derive(Clone, Copy, Debug)]
struct Stencil {
    offsets: [usize; 4],
    w: [f64; 4],
    dw_du: [f64; 4],
    dw_dv: [f64; 4],
    du: Vec3,
    dv: Vec3,
}

/// Why a view does not contribute at a point; part of the piece signature.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ViewPiece {
    Behind,
    OutsideImage,
    InvalidDepth,
    Occluded,
    Contributing {
        depth_cell: (usize, usize),
        clamped: bool,
        floored: bool,
        positive: bool,
        dino_cell: (usize, usize, bool, bool),
        sd_cell: (usize, usize, bool, bool),
    },
}

pub struct DescriptorField {
    views: Vec<View>,
    truncation: f64,
    weight_floor: f64,
    dino_channels: usize,
    sd_channels: usize,
}

type Hits = SmallVec<[ViewHit; 8]>;

/// Cell origin and fraction along one axis of a grid with `n` samples.
#[inline]
fn cell_1d(x: f64, n: usize) -> (usize, f64) {
    if n < 2 {
        return (0, 0.0);
    }
    let i = (x.floor().max(0.0) as usize).min(n - 2);
    (i, x - i as f64)
}

impl DescriptorField {
    pub fn new(scene: &SceneBundle, cfg: &FusionConfig) -> Result<Self, FieldError> {
        let truncation = cfg.truncation_for(scene.voxel_size);
        if !(truncation > 0.0 && truncation.is_finite()) {
            return Err(FieldError::Config(format!(
                "truncation must be positive, got {truncation}"
            )));
        }
        if !(cfg.weight_floor > 0.0 && cfg.weight_floor < 1.0) {
            return Err(FieldError::Config(format!(
                "weight floor must lie in (0, 1), got {}",
                cfg.weight_floor
            )));
        }
        let views = scene
            .views
            .iter()
            .map(|v| View {
                camera: v.camera.clone(),
                depth: v.depth.clone(),
                dino: v.dino.clone(),
                sd: v.sd.clone(),
            })
            .collect();
        Ok(Self {
            views,
            truncation,
            weight_floor: cfg.weight_floor,
            dino_channels: scene.channels(FeatureFamily::Dino),
            sd_channels: scene.channels(FeatureFamily::Sd),
        })
    }

    pub fn truncation(&self) -> f64 {
        self.truncation
    }

    pub fn channels(&self, family: FeatureFamily) -> usize {
        match family {
            FeatureFamily::Dino => self.dino_channels,
            FeatureFamily::Sd => self.sd_channels,
        }
    }

    pub fn view_count(&self) -> usize {
        self.views.len()
    }

    fn view_hit(&self, index: usize, x: &Vec3, grad: bool) -> Result<ViewHit, ViewPiece> {
        let view = &self.views[index];
        let cam = &view.camera;
        let w2c = cam.world_to_cam();
        let xc = w2c.apply(x);
        let z = xc.z;
        if z <= crate::geometry::MIN_CAMERA_DEPTH {
            return Err(ViewPiece::Behind);
        }
        let u = cam.fx * xc.x / z + cam.cx;
        let v = cam.fy * xc.y / z + cam.cy;
        if !cam.contains_pixel(u, v) {
            return Err(ViewPiece::OutsideImage);
        }
        let depth = &view.depth;
        let (c0, a) = cell_1d(u, depth.width);
        let (r0, b) = cell_1d(v, depth.height);
        let c1 = (c0 + 1).min(depth.width - 1);
        let r1 = (r0 + 1).min(depth.height - 1);
        let d00 = depth.at(c0, r0);
        let d10 = depth.at(c1, r0);
        let d01 = depth.at(c0, r1);
        let d11 = depth.at(c1, r1);
        if ![d00, d10, d01, d11].iter().all(|&d| DepthMap::is_valid_value(d)) {
            return Err(ViewPiece::InvalidDepth);
        }
        let (d00, d10, d01, d11) = (d00 as f64, d10 as f64, d01 as f64, d11 as f64);
        let d = (1.0 - a) * (1.0 - b) * d00 + a * (1.0 - b) * d10 + (1.0 - a) * b * d01 + a * b * d11;
        let tau = self.truncation;
        let raw = d - z;
        if raw <= -tau {
            return Err(ViewPiece::Occluded);
        }
        let clamped = raw >= tau;
        let s = raw.min(tau);
        let lin = (tau - s.abs()) / tau;
        let floored = lin <= self.weight_floor;
        let w = if floored { self.weight_floor } else { lin };

        let mut hit = ViewHit {
            view: index,
            s,
            ds: Vec3::zeros(),
            w,
            dw: Vec3::zeros(),
            u,
            v,
            du: Vec3::zeros(),
            dv: Vec3::zeros(),
            depth_cell: (c0, r0),
            clamped,
            floored,
        };
        if grad {
            let r = &cam.cam_to_world().rotation;
            let inv_z = 1.0 / z;
            hit.du = r * Vec3::new(cam.fx * inv_z, 0.0, -cam.fx * xc.x * inv_z * inv_z);
            hit.dv = r * Vec3::new(0.0, cam.fy * inv_z, -cam.fy * xc.y * inv_z * inv_z);
            if !clamped {
                let dd_du = (1.0 - b) * (d10 - d00) + b * (d11 - d01);
                let dd_dv = (1.0 - a) * (d01 - d00) + a * (d11 - d10);
                let dz = r.column(2).into_owned();
                hit.ds = hit.du * dd_du + hit.dv * dd_dv - dz;
                if !floored {
                    let sign = if s >= 0.0 { 1.0 } else { -1.0 };
                    hit.dw = hit.ds * (-sign / tau);
                }
            }
        }
        Ok(hit)
    }

    fn hits(&self, x: &Vec3, grad: bool) -> Hits {
        (0..self.views.len())
            .filter_map(|i| self.view_hit(i, x, grad).ok())
            .collect()
    }

    fn stencil(&self, hit: &ViewHit, family: FeatureFamily) -> Stencil {
        let view = &self.views[hit.view];
        let fm = view.features(family);
        let sx = fm.width as f64 / view.camera.width as f64;
        let sy = fm.height as f64 / view.camera.height as f64;
        let (uf, u_free) = clamp_axis(hit.u * sx, fm.width);
        let (vf, v_free) = clamp_axis(hit.v * sy, fm.height);
        let (c0, a) = cell_1d(uf, fm.width);
        let (r0, b) = cell_1d(vf, fm.height);
        let c1 = (c0 + 1).min(fm.width - 1);
        let r1 = (r0 + 1).min(fm.height - 1);
        let ch = fm.channels;
        let off = |c: usize, r: usize| (r * fm.width + c) * ch;
        Stencil {
            offsets: [off(c0, r0), off(c1, r0), off(c0, r1), off(c1, r1)],
            w: [(1.0 - a) * (1.0 - b), a * (1.0 - b), (1.0 - a) * b, a * b],
            dw_du: [-(1.0 - b), 1.0 - b, -b, b],
            dw_dv: [-(1.0 - a), -a, 1.0 - a, a],
            du: if u_free && fm.width > 1 {
                hit.du * sx
            } else {
                Vec3::zeros()
            },
            dv: if v_free && fm.height > 1 {
                hit.dv * sy
            } else {
                Vec3::zeros()
            },
        }
    }

    fn fused_sdf(hits: &Hits) -> (f64, f64, Vec3) {
        let wsum: f64 = hits.iter().map(|h| h.w).sum();
        let s = hits.iter().map(|h| h.w * h.s).sum::<f64>() / wsum;
        let mut num = Vec3::zeros();
        let mut dwsum = Vec3::zeros();
        for h in hits {
            num += h.dw * h.s + h.ds * h.w;
            dwsum += h.dw;
        }
        (s, wsum, (num - dwsum * s) / wsum)
    }

    fn fused_features(&self, hits: &Hits, family: FeatureFamily, wsum: f64) -> Vec<f64> {
        let ch = self.channels(family);
        let mut f = vec![0.0; ch];
        for h in hits {
            let st = self.stencil(h, family);
            let data = &self.views[h.view].features(family).data;
            for k in 0..4 {
                let wk = h.w * st.w[k];
                if wk == 0.0 {
                    continue;
                }
                let px = &data[st.offsets[k]..st.offsets[k] + ch];
                for (acc, &p) in f.iter_mut().zip(px) {
                    *acc += wk * p as f64;
                }
            }
        }
        f.iter_mut().for_each(|v| *v /= wsum);
        f
    }

    /// Fused signed distance and features at `x`.
    pub fn query(&self, x: &Vec3) -> FieldSample {
        let hits = self.hits(x, false);
        if hits.is_empty() {
            return FieldSample {
                s: self.truncation,
                dino: vec![0.0; self.dino_channels],
                sd: vec![0.0; self.sd_channels],
                weight_sum: 0.0,
                valid: false,
            };
        }
        let wsum: f64 = hits.iter().map(|h| h.w).sum();
        let s = hits.iter().map(|h| h.w * h.s).sum::<f64>() / wsum;
        FieldSample {
            s,
            dino: self.fused_features(&hits, FeatureFamily::Dino, wsum),
            sd: self.fused_features(&hits, FeatureFamily::Sd, wsum),
            weight_sum: wsum,
            valid: true,
        }
    }

    /// Signed distance only.
    pub fn sdf(&self, x: &Vec3) -> f64 {
        let hits = self.hits(x, false);
        if hits.is_empty() {
            return self.truncation;
        }
        let wsum: f64 = hits.iter().map(|h| h.w).sum();
        hits.iter().map(|h| h.w * h.s).sum::<f64>() / wsum
    }

    /// Signed distance and its spatial gradient.
    pub fn sdf_with_gradient(&self, x: &Vec3) -> (f64, Vec3) {
        let hits = self.hits(x, true);
        if hits.is_empty() {
            return (self.truncation, Vec3::zeros());
        }
        let (s, _, ds) = Self::fused_sdf(&hits);
        (s, ds)
    }

    /// Analytic gradient of the signed distance and of the requested feature families.
    pub fn query_gradient(&self, x: &Vec3, families: &[FeatureFamily]) -> FieldGradient {
        let hits = self.hits(x, true);
        let mut out = FieldGradient {
            ds: Vec3::zeros(),
            dino: None,
            sd: None,
        };
        let wants = |f| families.contains(&f);
        if hits.is_empty() {
            if wants(FeatureFamily::Dino) {
                out.dino = Some(vec![Vec3::zeros(); self.dino_channels]);
            }
            if wants(FeatureFamily::Sd) {
                out.sd = Some(vec![Vec3::zeros(); self.sd_channels]);
            }
            return out;
        }
        let (_, wsum, ds) = Self::fused_sdf(&hits);
        out.ds = ds;
        let dwsum: Vec3 = hits.iter().map(|h| h.dw).sum();
        for family in FeatureFamily::ALL {
            if !wants(family) {
                continue;
            }
            let f = self.fused_features(&hits, family, wsum);
            let ch = f.len();
            let mut jac = vec![Vec3::zeros(); ch];
            for h in &hits {
                let st = self.stencil(h, family);
                let data = &self.views[h.view].features(family).data;
                for c in 0..ch {
                    let mut g = 0.0;
                    let mut gu = 0.0;
                    let mut gv = 0.0;
                    for k in 0..4 {
                        let p = data[st.offsets[k] + c] as f64;
                        g += st.w[k] * p;
                        gu += st.dw_du[k] * p;
                        gv += st.dw_dv[k] * p;
                    }
                    jac[c] += h.dw * g + (st.du * gu + st.dv * gv) * h.w;
                }
            }
            for (c, j) in jac.iter_mut().enumerate() {
                *j = (*j - dwsum * f[c]) / wsum;
            }
            match family {
                FeatureFamily::Dino => out.dino = Some(jac),
                FeatureFamily::Sd => out.sd = Some(jac),
            }
        }
        out
    }

    /// Cosine similarity between the fused `family` feature and `descriptor`.
    /// A zero-norm fused feature scores 0.
    pub fn cosine(&self, x: &Vec3, family: FeatureFamily, descriptor: &[f64]) -> f64 {
        let s = self.query(x);
        cosine(s.features(family), descriptor)
    }

    /// Signed distance and descriptor cosine with analytic gradients, in one pass.
    pub fn probe(&self, x: &Vec3, family: FeatureFamily, descriptor: &[f64]) -> Probe {
        let hits = self.hits(x, true);
        if hits.is_empty() {
            return Probe {
                s: self.truncation,
                ds: Vec3::zeros(),
                cos: 0.0,
                dcos: Vec3::zeros(),
            };
        }
        let (s, wsum, ds) = Self::fused_sdf(&hits);
        let ch = self.channels(family);
        let dnorm = descriptor.iter().map(|v| v * v).sum::<f64>().sqrt();

        let stencils: SmallVec<[Stencil; 8]> = hits.iter().map(|h| self.stencil(h, family)).collect();
        let mut f: SmallVec<[f64; 64]> = SmallVec::from_elem(0.0, ch);
        for (h, st) in hits.iter().zip(&stencils) {
            let data = &self.views[h.view].features(family).data;
            for k in 0..4 {
                let wk = h.w * st.w[k];
                if wk == 0.0 {
                    continue;
                }
                for (acc, &p) in f.iter_mut().zip(&data[st.offsets[k]..st.offsets[k] + ch]) {
                    *acc += wk * p as f64;
                }
            }
        }
        f.iter_mut().for_each(|v| *v /= wsum);
        let fnorm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
        if fnorm < 1e-12 || dnorm == 0.0 {
            return Probe {
                s,
                ds,
                cos: 0.0,
                dcos: Vec3::zeros(),
            };
        }
        let dot: f64 = f.iter().zip(descriptor).map(|(a, b)| a * b).sum();
        let cos = dot / (fnorm * dnorm);
        // d cos / d f = (d̂ - cos f̂) / |f|, orthogonal to f
        let a: SmallVec<[f64; 64]> = f
            .iter()
            .zip(descriptor)
            .map(|(fc, dc)| (dc / dnorm - cos * fc / fnorm) / fnorm)
            .collect();
        let mut dcos = Vec3::zeros();
        for (h, st) in hits.iter().zip(&stencils) {
            let data = &self.views[h.view].features(family).data;
            let mut ag = 0.0;
            let mut agu = 0.0;
            let mut agv = 0.0;
            for k in 0..4 {
                let px = &data[st.offsets[k]..st.offsets[k] + ch];
                let dotk: f64 = a.iter().zip(px).map(|(x, &p)| x * p as f64).sum();
                ag += st.w[k] * dotk;
                agu += st.dw_du[k] * dotk;
                agv += st.dw_dv[k] * dotk;
            }
            dcos += h.dw * ag + (st.du * agu + st.dv * agv) * h.w;
        }
        Probe {
            s,
            ds,
            cos,
            dcos: dcos / wsum,
        }
    }

    /// Which smooth piece of the field `x` falls into, per view.
    ///
    /// Two points with equal signatures lie in the same polynomial/rational piece,
    /// so finite differences between them are free of clamp, floor and cell-edge kinks.
    pub fn piece_signature(&self, x: &Vec3) -> Vec<ViewPiece> {
        (0..self.views.len())
            .map(|i| match self.view_hit(i, x, false) {
                Err(p) => p,
                Ok(h) => {
                    let cell = |family| {
                        let view = &self.views[i];
                        let fm = view.features(family);
                        let (uf, uf_free) = clamp_axis(h.u * fm.width as f64 / view.camera.width as f64, fm.width);
                        let (vf, vf_free) = clamp_axis(h.v * fm.height as f64 / view.camera.height as f64, fm.height);
                        (cell_1d(uf, fm.width).0, cell_1d(vf, fm.height).0, uf_free, vf_free)
                    };
                    ViewPiece::Contributing {
                        depth_cell: h.depth_cell,
                        clamped: h.clamped,
                        floored: h.floored,
                        positive: h.s >= 0.0,
                        dino_cell: cell(FeatureFamily::Dino),
                        sd_cell: cell(FeatureFamily::Sd),
                    }
                }
            })
            .collect()
    }

    /// True when the whole axis-aligned stencil of half-width `h` around `x`
    /// shares one piece signature.
    pub fn is_smooth_at(&self, x: &Vec3, h: f64) -> bool {
        let sig = self.piece_signature(x);
        (0..3).all(|k| {
            [-h, h].iter().all(|&step| {
                let mut y = *x;
                y[k] += step;
                self.piece_signature(&y) == sig
            })
        })
    }
}

/// Read access used by the pose optimizer; lets tests plug in analytic fields.
pub trait FieldAccess: Sync {
    fn sdf(&self, x: &Vec3) -> f64;
    fn sdf_with_gradient(&self, x: &Vec3) -> (f64, Vec3);
    fn probe(&self, x: &Vec3, family: FeatureFamily, descriptor: &[f64]) -> Probe;
}

impl FieldAccess for DescriptorField {
    fn sdf(&self, x: &Vec3) -> f64 {
        DescriptorField::sdf(self, x)
    }

    fn sdf_with_gradient(&self, x: &Vec3) -> (f64, Vec3) {
        DescriptorField::sdf_with_gradient(self, x)
    }

    fn probe(&self, x: &Vec3, family: FeatureFamily, descriptor: &[f64]) -> Probe {
        DescriptorField::probe(self, x, family, descriptor)
    }
}

fn clamp_axis(x: f64, n: usize) -> (f64, bool) {
    let hi = (n - 1) as f64;
    if x < 0.0 {
        (0.0, false)
    } else if x > hi {
        (hi, false)
    } else {
        (x, true)
    }
}

/// Cosine similarity; zero when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na < 1e-24 || nb < 1e-24 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

// ---------------------------------------------------------------------------
// voxel grids

/// Regular grid of field samples over the workspace. Voxel `(i, j, k)` is stored
/// at `i + nx * (j + ny * k)` and centered at `origin + (i+½, j+½, k+½)·δ`.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    pub origin: Vec3,
    pub dims: [usize; 3],
    pub voxel_size: f64,
    pub samples: Vec<FieldSample>,
}

impl VoxelGrid {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    pub fn coords(&self, index: usize) -> [usize; 3] {
        let [nx, ny, _] = self.dims;
        [index % nx, (index / nx) % ny, index / (nx * ny)]
    }

    pub fn center(&self, index: usize) -> Vec3 {
        let [i, j, k] = self.coords(index);
        self.origin + Vec3::new(i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5) * self.voxel_size
    }

    /// Voxel containing `p`, if inside the grid.
    pub fn locate(&self, p: &Vec3) -> Option<usize> {
        let rel = (p - self.origin) / self.voxel_size;
        let mut ijk = [0usize; 3];
        for a in 0..3 {
            let c = rel[a].floor();
            if c < 0.0 || c >= self.dims[a] as f64 {
                return None;
            }
            ijk[a] = c as usize;
        }
        Some(self.index(ijk[0], ijk[1], ijk[2]))
    }

    pub fn valid_count(&self) -> usize {
        self.samples.iter().filter(|s| s.valid).count()
    }

    /// Debug dump with shape `[nz, ny, nx, 2 + C_dino + C_sd]`, channels
    /// `[s, validity, dino…, sd…]`.
    pub fn to_tensor(&self) -> Tensor {
        let cd = self.samples.first().map_or(0, |s| s.dino.len());
        let cs = self.samples.first().map_or(0, |s| s.sd.len());
        let mut data = Vec::with_capacity(self.len() * (2 + cd + cs));
        for s in &self.samples {
            data.push(s.s as f32);
            data.push(if s.valid { 1.0 } else { 0.0 });
            data.extend(s.dino.iter().map(|&v| v as f32));
            data.extend(s.sd.iter().map(|&v| v as f32));
        }
        Tensor::new(vec![self.dims[2], self.dims[1], self.dims[0], 2 + cd + cs], data).expect("consistent voxel dump")
    }
}

/// Voxel counts per axis, `ceil(size / δ)` with a small tolerance for
/// sizes that are exact multiples of δ.
pub fn grid_dims(workspace: &Workspace, voxel_size: f64) -> Result<[usize; 3], FieldError> {
    if !(voxel_size > 0.0 && voxel_size.is_finite()) {
        return Err(FieldError::Argument(format!(
            "voxel size must be positive, got {voxel_size}"
        )));
    }
    if !workspace.size.iter().chain(&workspace.origin).all(|v| v.is_finite()) {
        return Err(FieldError::Argument("workspace must be finite".into()));
    }
    if workspace.size.iter().any(|&s| voxel_size > s) {
        return Err(FieldError::Argument(format!(
            "voxel size {voxel_size} exceeds a workspace side {:?}",
            workspace.size
        )));
    }
    Ok(workspace
        .size
        .map(|s| ((s / voxel_size) - 1e-9).ceil().max(1.0) as usize))
}

pub fn build_voxel_grid(
    field: &DescriptorField,
    workspace: &Workspace,
    voxel_size: f64,
) -> Result<VoxelGrid, FieldError> {
    let dims = grid_dims(workspace, voxel_size)?;
    let mut grid = VoxelGrid {
        origin: workspace.origin(),
        dims,
        voxel_size,
        samples: Vec::new(),
    };
    let n = dims[0] * dims[1] * dims[2];
    grid.samples = (0..n).into_par_iter().map(|i| field.query(&grid.center(i))).collect();
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundle::{CameraView, RgbImage};
    use crate::geometry::{Camera, RigidTransform};
    use approx::assert_relative_eq;

    /// One camera at the origin looking down +z at a plane 1 m away.
    fn plane_scene(depth_value: f32) -> SceneBundle {
        let (w, h) = (64, 48);
        let camera = Camera::new(50.0, 50.0, 31.5, 23.5, w, h, RigidTransform::identity()).unwrap();
        let dino: Vec<f32> = (0..16 * 12).flat_map(|i| [1.0, (i % 7) as f32 * 0.1]).collect();
        let view = CameraView {
            name: "cam".into(),
            camera,
            rgb: RgbImage::new(w, h),
            depth: DepthMap {
                width: w,
                height: h,
                values: vec![depth_value; w * h],
            },
            dino: FeatureMap::new(12, 16, 2, dino).unwrap(),
            sd: FeatureMap::new(12, 16, 3, vec![0.3; 12 * 16 * 3]).unwrap(),
        };
        SceneBundle::new(
            vec![view],
            Workspace {
                origin: [-0.2, -0.2, 0.8],
                size: [0.4, 0.4, 0.3],
            },
            0.01,
        )
        .unwrap()
    }

    fn plane_field() -> DescriptorField {
        DescriptorField::new(&plane_scene(1.0), &FusionConfig::default()).unwrap()
    }

    #[test]
    fn plane_signed_distance() {
        let f = plane_field();
        assert_relative_eq!(f.query(&Vec3::new(0.0, 0.0, 0.9)).s, 0.04, epsilon = 1e-12);
        assert_relative_eq!(f.query(&Vec3::new(0.0, 0.0, 0.97)).s, 0.03, epsilon = 1e-12);
        assert_relative_eq!(f.query(&Vec3::new(0.0, 0.0, 1.0)).s, 0.0, epsilon = 1e-12);
        assert_relative_eq!(f.query(&Vec3::new(0.0, 0.0, 1.02)).s, -0.02, epsilon = 1e-12);
        // far behind the plane: occluded, no contributor
        let deep = f.query(&Vec3::new(0.0, 0.0, 1.2));
        assert!(!deep.valid);
    }

    #[test]
    fn plane_with_wide_truncation() {
        let cfg = FusionConfig {
            truncation: Some(0.2),
            ..Default::default()
        };
        let f = DescriptorField::new(&plane_scene(1.0), &cfg).unwrap();
        assert_relative_eq!(f.query(&Vec3::new(0.0, 0.0, 0.9)).s, 0.1, epsilon = 1e-12);
        let g = f.query_gradient(&Vec3::new(0.0, 0.0, 0.9), &[]);
        assert_relative_eq!(g.ds.z, -1.0, epsilon = 1e-9);
        assert_relative_eq!(g.ds.x, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn outside_all_images_is_invalid() {
        let f = plane_field();
        for x in [Vec3::new(5.0, 0.0, 1.0), Vec3::new(0.0, 0.0, -1.0)] {
            let s = f.query(&x);
            assert!(!s.valid);
            assert_eq!(s.s, f.truncation());
            assert_eq!(s.weight_sum, 0.0);
            assert!(s.dino.iter().chain(&s.sd).all(|&v| v == 0.0));
            let g = f.query_gradient(&x, &FeatureFamily::ALL);
            assert_eq!(g.ds, Vec3::zeros());
            assert!(g.dino.unwrap().iter().all(|v| *v == Vec3::zeros()));
        }
    }

    #[test]
    fn invalid_depth_everywhere() {
        let f = DescriptorField::new(&plane_scene(0.0), &FusionConfig::default()).unwrap();
        assert!(!f.query(&Vec3::new(0.0, 0.0, 0.95)).valid);
        let scene = plane_scene(0.0);
        let grid = build_voxel_grid(&f, &scene.workspace, 0.05).unwrap();
        assert_eq!(grid.valid_count(), 0);
    }

    #[test]
    fn weight_floor_in_free_space() {
        let f = plane_field();
        let s = f.query(&Vec3::new(0.0, 0.0, 0.5));
        assert!(s.valid);
        assert_eq!(s.s, f.truncation());
        assert_relative_eq!(s.weight_sum, 1e-3);
    }

    #[test]
    fn grid_dims_examples() {
        let ws = Workspace {
            origin: [0.0; 3],
            size: [0.4, 0.4, 0.3],
        };
        assert_eq!(grid_dims(&ws, 0.01).unwrap(), [40, 40, 30]);
        assert_eq!(grid_dims(&ws, 0.03).unwrap(), [14, 14, 10]);
        assert!(grid_dims(&ws, 0.35).is_err());
        assert!(grid_dims(&ws, 0.0).is_err());
    }

    #[test]
    fn grid_samples_equal_queries() {
        let scene = plane_scene(1.0);
        let f = plane_field();
        let grid = build_voxel_grid(&f, &scene.workspace, 0.02).unwrap();
        assert_eq!(grid.dims, [20, 20, 15]);
        for idx in (0..grid.len()).step_by(37) {
            assert_eq!(grid.samples[idx], f.query(&grid.center(idx)));
            assert_eq!(grid.locate(&grid.center(idx)), Some(idx));
        }
        let t = grid.to_tensor();
        assert_eq!(t.shape(), &[15, 20, 20, 7]);
    }

    #[test]
    fn features_follow_proportional_mapping() {
        let f = plane_field();
        // pixel (32, 24) maps to feature cell (8, 6); dino channel 1 = (i % 7)/10 with i = 6*16+8
        let x = f.views[0].camera.backproject(32.0, 24.0, 0.99).unwrap();
        let s = f.query(&x);
        assert_relative_eq!(s.dino[0], 1.0, epsilon = 1e-9);
        assert_relative_eq!(s.dino[1], ((6 * 16 + 8) % 7) as f64 * 0.1, epsilon = 1e-6);
    }

    #[test]
    fn cosine_convention() {
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
        assert_relative_eq!(cosine(&[1.0, 1.0], &[1.0, 0.0]), std::f64::consts::FRAC_1_SQRT_2);
    }
}
