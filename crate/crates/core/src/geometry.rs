//! Pinhole cameras, rigid transforms and the axis-angle rotation parameterization.
//!
//! Camera frames follow the usual computer-vision convention: +z looks forward,
//! +x points right in the image and +y points down. Pixel coordinates place
//! pixel centers on integer values, so column `c` and row `r` sit at `(u, v) = (c, r)`.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Tolerance used when validating rotation matrices read from disk.
pub const ROTATION_TOLERANCE: f64 = 1e-6;

/// Below this depth (camera z) a point counts as behind the camera.
pub const MIN_CAMERA_DEPTH: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("rotation is not orthonormal with det +1 (max deviation {deviation:.3e})")]
    InvalidRotation { deviation: f64 },
    #[error("invalid rigid transform: {0}")]
    InvalidTransform(String),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),
}

/// Largest absolute deviation of `R^T R` from identity, combined with `|det R - 1|`.
pub fn rotation_deviation(r: &Mat3) -> f64 {
    let gram = r.transpose() * r - Mat3::identity();
    let ortho = gram.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    ortho.max((r.determinant() - 1.0).abs())
}

/// An element of SE(3): `y = R x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Validating constructor.
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self, GeometryError> {
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::InvalidTransform("non-finite translation".into()));
        }
        let deviation = rotation_deviation(&rotation);
        if !(deviation <= ROTATION_TOLERANCE) {
            return Err(GeometryError::InvalidRotation { deviation });
        }
        Ok(Self { rotation, translation })
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self {
            rotation: Mat3::identity(),
            translation,
        }
    }

    /// Parses a row-major 4x4 homogeneous matrix.
    pub fn from_row_major(m: &[f64]) -> Result<Self, GeometryError> {
        if m.len() != 16 {
            return Err(GeometryError::InvalidTransform(format!(
                "expected 16 entries, got {}",
                m.len()
            )));
        }
        let bottom = [m[12], m[13], m[14], m[15]];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return Err(GeometryError::InvalidTransform(format!(
                "bottom row must be [0, 0, 0, 1], got {bottom:?}"
            )));
        }
        let rotation = Mat3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        Self::new(rotation, Vec3::new(m[3], m[7], m[11]))
    }

    pub fn to_row_major(&self) -> [f64; 16] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t.x,
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t.y,
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t.z,
            0.0,
            0.0,
            0.0,
            1.0,
        ]
    }

    /// Analytic inverse `(R^T, -R^T t)`.
    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`, i.e. apply `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    #[inline]
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn rotation_row_major(&self) -> [f64; 9] {
        let r = &self.rotation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
        ]
    }
}

/// Applies `T` to every point of a set.
pub fn transform_points(transform: &RigidTransform, points: &[Vec3]) -> Vec<Vec3> {
    points.iter().map(|p| transform.apply(p)).collect()
}

/// Result of projecting a world point into a camera.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImagePoint {
    pub u: f64,
    pub v: f64,
    /// Camera-frame z of the point (m).
    pub depth: f64,
}

/// Pinhole camera without distortion.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    cam_to_world: RigidTransform,
    world_to_cam: RigidTransform,
}

impl Camera {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        cam_to_world: RigidTransform,
    ) -> Result<Self, GeometryError> {
        if !(fx > 0.0 && fx.is_finite() && fy > 0.0 && fy.is_finite()) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive, got fx={fx}, fy={fy}"
            )));
        }
        if width == 0 || height == 0 {
            return Err(GeometryError::InvalidIntrinsics("empty image".into()));
        }
        if !(cx >= 0.0 && cx < width as f64 && cy >= 0.0 && cy < height as f64) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "principal point ({cx}, {cy}) outside a {width}x{height} image"
            )));
        }
        let deviation = rotation_deviation(&cam_to_world.rotation);
        if !(deviation <= ROTATION_TOLERANCE) {
            return Err(GeometryError::InvalidRotation { deviation });
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            world_to_cam: cam_to_world.inverse(),
            cam_to_world,
        })
    }

    /// Builds a camera from a row-major 3x3 intrinsic matrix.
    pub fn from_matrix(
        k: &[f64],
        width: usize,
        height: usize,
        cam_to_world: RigidTransform,
    ) -> Result<Self, GeometryError> {
        if k.len() != 9 {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "expected 9 entries, got {}",
                k.len()
            )));
        }
        if k[1] != 0.0 || k[3] != 0.0 || k[6] != 0.0 || k[7] != 0.0 || k[8] != 1.0 {
            return Err(GeometryError::InvalidIntrinsics(
                "expected [fx 0 cx; 0 fy cy; 0 0 1]".into(),
            ));
        }
        Self::new(k[0], k[4], k[2], k[5], width, height, cam_to_world)
    }

    pub fn intrinsic_matrix(&self) -> [f64; 9] {
        [self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0]
    }

    pub fn cam_to_world(&self) -> &RigidTransform {
        &self.cam_to_world
    }

    pub fn world_to_cam(&self) -> &RigidTransform {
        &self.world_to_cam
    }

    pub fn center(&self) -> Vec3 {
        self.cam_to_world.translation
    }

    /// Projects a world point; `None` when the point is behind the camera.
    pub fn project(&self, x_world: &Vec3) -> Option<ImagePoint> {
        let xc = self.world_to_cam.apply(x_world);
        if xc.z <= MIN_CAMERA_DEPTH {
            return None;
        }
        Some(ImagePoint {
            u: self.fx * xc.x / xc.z + self.cx,
            v: self.fy * xc.y / xc.z + self.cy,
            depth: xc.z,
        })
    }

    /// Lifts pixel `(u, v)` at camera depth `depth` into the world frame.
    pub fn backproject(&self, u: f64, v: f64, depth: f64) -> Result<Vec3, GeometryError> {
        if !(depth > 0.0) {
            return Err(GeometryError::NonPositiveDepth(depth));
        }
        let xc = Vec3::new((u - self.cx) / self.fx * depth, (v - self.cy) / self.fy * depth, depth);
        Ok(self.cam_to_world.apply(&xc))
    }

    /// Unit ray direction (world frame) through pixel `(u, v)`.
    pub fn ray_direction(&self, u: f64, v: f64) -> Vec3 {
        let d = Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0);
        (self.cam_to_world.rotation * d).normalize()
    }

    pub fn contains_pixel(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u <= (self.width - 1) as f64 && v <= (self.height - 1) as f64
    }
}

/// Camera pose at `eye` looking at `target`, with image-up roughly along `up`.
pub fn look_at(eye: &Vec3, target: &Vec3, up: &Vec3) -> RigidTransform {
    let z = (target - eye).normalize();
    let mut x = z.cross(up);
    if x.norm() < 1e-9 {
        x = z.cross(&Vec3::x());
    }
    let x = x.normalize();
    let y = z.cross(&x);
    RigidTransform {
        rotation: Mat3::from_columns(&[x, y, z]),
        translation: *eye,
    }
}

pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues' formula. Uses the Taylor expansion for tiny angles.
pub fn exp_rotvec(w: &Vec3) -> Mat3 {
    let theta2 = w.norm_squared();
    let theta = theta2.sqrt();
    let k = skew(w);
    let (a, b) = if theta < 1e-8 {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Mat3::identity() + k * a + k * k * b
}

/// Inverse of [`exp_rotvec`] for rotations away from angle π.
pub fn log_rotation(r: &Mat3) -> Vec3 {
    let cos = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = cos.acos();
    let v = Vec3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    if theta < 1e-8 {
        return v * 0.5;
    }
    if std::f64::consts::PI - theta < 1e-6 {
        // axis from the symmetric part
        let s = (r + Mat3::identity()) * 0.5;
        let mut axis = Vec3::new(
            s[(0, 0)].max(0.0).sqrt(),
            s[(1, 1)].max(0.0).sqrt(),
            s[(2, 2)].max(0.0).sqrt(),
        );
        if s[(0, 1)] < 0.0 {
            axis.y = -axis.y;
        }
        if s[(0, 2)] < 0.0 {
            axis.z = -axis.z;
        }
        return axis.normalize() * theta;
    }
    v * (theta / (2.0 * theta.sin()))
}

/// Right Jacobian of SO(3): `Exp(w + dw) ≈ Exp(w) Exp(J_r(w) dw)`.
pub fn right_jacobian(w: &Vec3) -> Mat3 {
    let theta2 = w.norm_squared();
    let theta = theta2.sqrt();
    let k = skew(w);
    let (a, b) = if theta < 1e-6 {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        ((1.0 - theta.cos()) / theta2, (theta - theta.sin()) / (theta2 * theta))
    };
    Mat3::identity() - k * a + k * k * b
}

/// Uniform rotation on SO(3) drawn via the axis-angle route: a uniform unit axis
/// and an angle with density proportional to `1 - cos θ` on `[0, π]`.
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Mat3 {
    let axis = loop {
        let v = Vec3::new(
            rng.random_range(-1.0..=1.0),
            rng.random_range(-1.0..=1.0),
            rng.random_range(-1.0..=1.0),
        );
        let n = v.norm();
        if n > 1e-6 && n <= 1.0 {
            break v / n;
        }
    };
    let angle = loop {
        let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let accept: f64 = rng.random_range(0.0..1.0);
        if accept * 2.0 <= 1.0 - theta.cos() {
            break theta;
        }
    };
    exp_rotvec(&(axis * angle))
}

/// Optimization state for a gripper pose: increments about a fixed base pose.
///
/// The realized transform is `R = R_base · Exp(rotvec)`, `t = t_base + tvec`,
/// so the rotation stays on SO(3) for any finite increment.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseParams {
    pub rotvec: Vec3,
    pub tvec: Vec3,
    pub base: RigidTransform,
}

impl PoseParams {
    pub fn at(base: RigidTransform) -> Self {
        Self {
            rotvec: Vec3::zeros(),
            tvec: Vec3::zeros(),
            base,
        }
    }

    pub fn realize(&self) -> RigidTransform {
        RigidTransform {
            rotation: self.base.rotation * exp_rotvec(&self.rotvec),
            translation: self.base.translation + self.tvec,
        }
    }

    /// Parameters packed as `[rotvec, tvec]`.
    pub fn to_array(&self) -> [f64; 6] {
        [
            self.rotvec.x,
            self.rotvec.y,
            self.rotvec.z,
            self.tvec.x,
            self.tvec.y,
            self.tvec.z,
        ]
    }

    pub fn with_array(&self, p: &[f64; 6]) -> Self {
        Self {
            rotvec: Vec3::new(p[0], p[1], p[2]),
            tvec: Vec3::new(p[3], p[4], p[5]),
            base: self.base,
        }
    }
}

/// Serializable pose, rotation stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

impl From<&RigidTransform> for PoseRecord {
    fn from(t: &RigidTransform) -> Self {
        Self {
            rotation: t.rotation_row_major(),
            translation: [t.translation.x, t.translation.y, t.translation.z],
        }
    }
}

impl PoseRecord {
    pub fn to_transform(&self) -> Result<RigidTransform, GeometryError> {
        let r = &self.rotation;
        RigidTransform::new(
            Mat3::new(r[0], r[1], r[2], r[3], r[4], r[5], r[6], r[7], r[8]),
            Vec3::new(self.translation[0], self.translation[1], self.translation[2]),
        )
    }
}
