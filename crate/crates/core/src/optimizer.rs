//! Gripper pose optimization over the descriptor field.
//!
//! Every candidate starts at an area voxel with a random orientation and
//! minimizes
//!
//! ```text
//! J = -1/M_s Σ_{x ∈ T·X_i} [λ_af·cos(f(x), d⁺) - λ_ag·s(x)]
//!     -1/M_g Σ_{x ∈ T·X_g} λ_r·s(x)
//!     + λ_reg (‖ω‖ + ‖t‖)
//! ```
//!
//! over the pose increments `(ω, t)` with Adam. `X_i` are interaction samples
//! around the finger center, frozen per candidate; `X_g` is the gripper body.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bundle::FeatureFamily;
use crate::field::FieldAccess;
use crate::geometry::{random_rotation, right_jacobian, PoseParams, PoseRecord, RigidTransform, Vec3};
use crate::grounding::InteractionArea;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimizerError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("no collision-free initialization among {0} candidates")]
    NoFreeInit(usize),
    #[error("no collision-free pose after optimization (best failed candidate {index}, cost {cost})")]
    NoFreePose { index: usize, cost: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GripperConfig {
    /// Distance between the inner finger faces (m).
    pub finger_gap: f64,
    /// Finger extent along the motion axis x.
    pub finger_thickness: f64,
    /// Finger extent along y.
    pub finger_width: f64,
    /// Finger extent along the approach axis z.
    pub finger_length: f64,
    pub palm_height: f64,
    /// Palm extent along y.
    pub palm_depth: f64,
    /// Total body points; half on the palm, a quarter on each finger.
    pub body_points: usize,
    /// Interaction sampler standard deviations in the tool frame.
    pub sigma: [f64; 3],
}

impl Default for GripperConfig {
    fn default() -> Self {
        Self {
            finger_gap: 0.08,
            finger_thickness: 0.01,
            finger_width: 0.02,
            finger_length: 0.05,
            palm_height: 0.02,
            palm_depth: 0.04,
            body_points: 512,
            sigma: [0.01, 0.02, 0.01],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lambda_af: f64,
    pub lambda_ag: f64,
    pub lambda_r: f64,
    pub lambda_reg: f64,
    /// Interaction samples per candidate (M_s).
    pub samples: usize,
    /// Random orientations per area voxel (K).
    pub rotations_per_voxel: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Collision margin (m); `None` means one voxel.
    pub margin: Option<f64>,
    /// Largest fraction of body points allowed inside the scene at initialization.
    pub max_inside_fraction: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lambda_af: 1.0,
            lambda_ag: 0.5,
            lambda_r: 1.0,
            lambda_reg: 0.01,
            samples: 100,
            rotations_per_voxel: 8,
            iterations: 300,
            learning_rate: 0.005,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            margin: None,
            max_inside_fraction: 0.01,
        }
    }
}

impl OptimizerConfig {
    pub fn margin_for(&self, voxel_size: f64) -> f64 {
        self.margin.unwrap_or(voxel_size)
    }

    pub fn validate(&self) -> Result<(), OptimizerError> {
        let weights = [self.lambda_af, self.lambda_ag, self.lambda_r, self.lambda_reg];
        if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(OptimizerError::Config(format!(
                "loss weights must be non-negative, got {weights:?}"
            )));
        }
        if self.samples == 0 || self.rotations_per_voxel == 0 || self.iterations == 0 {
            return Err(OptimizerError::Config(
                "samples, rotations_per_voxel and iterations must be at least 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0)
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.epsilon > 0.0)
        {
            return Err(OptimizerError::Config("invalid Adam hyperparameters".into()));
        }
        if let Some(m) = self.margin {
            if !(m >= 0.0 && m.is_finite()) {
                return Err(OptimizerError::Config(format!("margin must be non-negative, got {m}")));
            }
        }
        if !(0.0..=1.0).contains(&self.max_inside_fraction) {
            return Err(OptimizerError::Config("max_inside_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Parallel-jaw gripper in its tool frame: origin at the palm base, +z the
/// approach axis, +x the finger motion axis.
#[derive(Clone, Debug, PartialEq)]
pub struct GripperModel {
    pub finger_center: Vec3,
    pub body_points: Vec<Vec3>,
    pub sigma: Vec3,
    /// Inner finger pad centers; the closing segment runs between them.
    pub pads: [Vec3; 2],
}

const BODY_SEED: u64 = 0x6772_6970;

/// Uniform samples on the surface of an axis-aligned box.
fn box_surface_points(lo: Vec3, hi: Vec3, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec3> {
    use rand::Rng;
    let e = hi - lo;
    let areas = [e.y * e.z, e.y * e.z, e.x * e.z, e.x * e.z, e.x * e.y, e.x * e.y];
    let total: f64 = areas.iter().sum();
    (0..n)
        .map(|_| {
            let mut pick = rng.random_range(0.0..total);
            let mut face = 0;
            while face < 5 && pick >= areas[face] {
                pick -= areas[face];
                face += 1;
            }
            let mut p = Vec3::new(
                lo.x + rng.random_range(0.0..=1.0) * e.x,
                lo.y + rng.random_range(0.0..=1.0) * e.y,
                lo.z + rng.random_range(0.0..=1.0) * e.z,
            );
            let axis = face / 2;
            p[axis] = if face % 2 == 0 { lo[axis] } else { hi[axis] };
            p
        })
        .collect()
}

impl GripperModel {
    pub fn new(cfg: &GripperConfig) -> Result<Self, OptimizerError> {
        let dims = [
            cfg.finger_gap,
            cfg.finger_thickness,
            cfg.finger_width,
            cfg.finger_length,
            cfg.palm_height,
            cfg.palm_depth,
        ];
        if dims.iter().any(|d| !(*d > 0.0 && d.is_finite())) {
            return Err(OptimizerError::Config(format!(
                "gripper dimensions must be positive, got {dims:?}"
            )));
        }
        if cfg.body_points == 0 {
            return Err(OptimizerError::Config("gripper needs at least one body point".into()));
        }
        let [sx, sy, sz] = cfg.sigma;
        if !(sx > 0.0 && sz > 0.0 && sy > sx && sy > sz) {
            return Err(OptimizerError::Config(format!(
                "sampler needs sigma_y > sigma_x, sigma_z > 0, got {:?}",
                cfg.sigma
            )));
        }
        let half_gap = cfg.finger_gap / 2.0;
        let outer = half_gap + cfg.finger_thickness;
        let z0 = cfg.palm_height;
        let z1 = z0 + cfg.finger_length;
        let finger_center = Vec3::new(0.0, 0.0, z0 + cfg.finger_length / 2.0);

        let mut rng = ChaCha8Rng::seed_from_u64(BODY_SEED);
        let per_finger = cfg.body_points / 4;
        let palm = cfg.body_points - 2 * per_finger;
        let fw = cfg.finger_width / 2.0;
        let pd = cfg.palm_depth / 2.0;
        let mut body = box_surface_points(Vec3::new(-outer, -pd, 0.0), Vec3::new(outer, pd, z0), palm, &mut rng);
        body.extend(box_surface_points(
            Vec3::new(half_gap, -fw, z0),
            Vec3::new(outer, fw, z1),
            per_finger,
            &mut rng,
        ));
        body.extend(box_surface_points(
            Vec3::new(-outer, -fw, z0),
            Vec3::new(-half_gap, fw, z1),
            per_finger,
            &mut rng,
        ));

        Ok(Self {
            finger_center,
            body_points: body,
            sigma: Vec3::new(sx, sy, sz),
            pads: [
                Vec3::new(-half_gap, 0.0, finger_center.z),
                Vec3::new(half_gap, 0.0, finger_center.z),
            ],
        })
    }

    /// `n` Gaussian samples around the finger center, in the tool frame.
    pub fn sample_interaction(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec3> {
        let dist: Vec<Normal<f64>> = (0..3).map(|k| Normal::new(0.0, self.sigma[k]).unwrap()).collect();
        (0..n)
            .map(|_| self.finger_center + Vec3::new(dist[0].sample(rng), dist[1].sample(rng), dist[2].sample(rng)))
            .collect()
    }

    /// Closing segment between the finger pads at `pose`.
    pub fn pad_segment(&self, pose: &RigidTransform) -> (Vec3, Vec3) {
        (pose.apply(&self.pads[0]), pose.apply(&self.pads[1]))
    }
}

/// What drives the feature attraction term.
#[derive(Clone, Debug, PartialEq)]
pub struct Attraction {
    pub family: FeatureFamily,
    pub descriptor: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseCandidate {
    pub index: usize,
    /// Area voxel the candidate was seeded at.
    pub voxel: usize,
    pub params: PoseParams,
    /// Interaction samples `X_i` in the tool frame.
    pub samples: Vec<Vec3>,
    pub trace: Vec<f64>,
    pub collision_ok: bool,
    pub final_cost: f64,
    pub failure: Option<String>,
}

/// One candidate per (area voxel, orientation); candidate `i` draws from its
/// own ChaCha stream `i`, so the set does not depend on evaluation order.
pub fn init_candidates(
    area: &InteractionArea,
    gripper: &GripperModel,
    cfg: &OptimizerConfig,
    seed: u64,
) -> Result<Vec<PoseCandidate>, OptimizerError> {
    if area.is_empty() {
        return Err(OptimizerError::Argument("empty interaction area".into()));
    }
    let k = cfg.rotations_per_voxel;
    let mut out = Vec::with_capacity(area.len() * k);
    for (vi, center) in area.centers.iter().enumerate() {
        let c = Vec3::new(center[0], center[1], center[2]);
        for r in 0..k {
            let index = vi * k + r;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(index as u64);
            let rotation = random_rotation(&mut rng);
            let base = RigidTransform {
                rotation,
                translation: c - rotation * gripper.finger_center,
            };
            out.push(PoseCandidate {
                index,
                voxel: area.voxels[vi],
                params: PoseParams::at(base),
                samples: gripper.sample_interaction(cfg.samples, &mut rng),
                trace: Vec::new(),
                collision_ok: false,
                final_cost: f64::INFINITY,
                failure: None,
            });
        }
    }
    Ok(out)
}

/// Body-point penetration statistics at a pose: (fraction with s < 0, min s).
pub fn penetration(field: &dyn FieldAccess, gripper: &GripperModel, pose: &RigidTransform) -> (f64, f64) {
    let mut inside = 0usize;
    let mut min_s = f64::INFINITY;
    for p in &gripper.body_points {
        let s = field.sdf(&pose.apply(p));
        if s < 0.0 {
            inside += 1;
        }
        min_s = min_s.min(s);
    }
    (inside as f64 / gripper.body_points.len() as f64, min_s)
}

/// Keep candidates whose initial pose is nearly collision-free. Returns the
/// retained candidates and, for the dropped ones, `(index, reason)`.
pub fn collision_prefilter(
    candidates: Vec<PoseCandidate>,
    field: &dyn FieldAccess,
    gripper: &GripperModel,
    max_inside_fraction: f64,
    margin: f64,
) -> (Vec<PoseCandidate>, Vec<(usize, String)>) {
    let verdicts: Vec<Option<String>> = candidates
        .par_iter()
        .map(|c| {
            let (frac, min_s) = penetration(field, gripper, &c.params.realize());
            if frac > max_inside_fraction {
                Some(format!("{:.1}% of body points inside the scene", 100.0 * frac))
            } else if min_s < -margin {
                Some(format!("body point at depth {:.4} m", -min_s))
            } else {
                None
            }
        })
        .collect();
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for (c, v) in candidates.into_iter().zip(verdicts) {
        match v {
            None => kept.push(c),
            Some(reason) => dropped.push((c.index, reason)),
        }
    }
    (kept, dropped)
}

/// Loss and its gradient with respect to `[rotvec, tvec]`.
pub fn pose_loss(
    params: &PoseParams,
    samples: &[Vec3],
    gripper: &GripperModel,
    field: &dyn FieldAccess,
    attraction: &Attraction,
    cfg: &OptimizerConfig,
) -> (f64, [f64; 6]) {
    let pose = params.realize();
    let rt = pose.rotation.transpose();
    let mut j = 0.0;
    let mut force = Vec3::zeros();
    let mut torque = Vec3::zeros();
    let mut push = |p: &Vec3, g: Vec3| {
        force += g;
        torque += p.cross(&(rt * g));
    };

    if !samples.is_empty() {
        let ms = samples.len() as f64;
        for p in samples {
            let y = pose.apply(p);
            let (s, ds, cos, dcos) = if cfg.lambda_af > 0.0 {
                let pr = field.probe(&y, attraction.family, &attraction.descriptor);
                (pr.s, pr.ds, pr.cos, pr.dcos)
            } else {
                let (s, ds) = field.sdf_with_gradient(&y);
                (s, ds, 0.0, Vec3::zeros())
            };
            j += (-cfg.lambda_af * cos + cfg.lambda_ag * s) / ms;
            push(p, (dcos * -cfg.lambda_af + ds * cfg.lambda_ag) / ms);
        }
    }
    if cfg.lambda_r > 0.0 {
        let mg = gripper.body_points.len() as f64;
        for p in &gripper.body_points {
            let (s, ds) = field.sdf_with_gradient(&pose.apply(p));
            j -= cfg.lambda_r * s / mg;
            push(p, ds * (-cfg.lambda_r / mg));
        }
    }

    let (wn, tn) = (params.rotvec.norm(), params.tvec.norm());
    j += cfg.lambda_reg * (wn + tn);
    let mut dw = right_jacobian(&params.rotvec).transpose() * torque;
    let mut dt = force;
    if wn > 0.0 {
        dw += params.rotvec * (cfg.lambda_reg / wn);
    }
    if tn > 0.0 {
        dt += params.tvec * (cfg.lambda_reg / tn);
    }
    (j, [dw.x, dw.y, dw.z, dt.x, dt.y, dt.z])
}

/// Adam on the pose increments, then the final cost and collision recheck.
pub fn optimize_pose(
    mut cand: PoseCandidate,
    field: &dyn FieldAccess,
    gripper: &GripperModel,
    attraction: &Attraction,
    cfg: &OptimizerConfig,
    margin: f64,
) -> PoseCandidate {
    let mut x = cand.params.to_array();
    let mut m = [0.0; 6];
    let mut v = [0.0; 6];
    cand.trace = Vec::with_capacity(cfg.iterations);
    for it in 1..=cfg.iterations {
        let (j, g) = pose_loss(
            &cand.params.with_array(&x),
            &cand.samples,
            gripper,
            field,
            attraction,
            cfg,
        );
        if !j.is_finite() || g.iter().any(|g| !g.is_finite()) {
            cand.failure = Some(format!("non-finite loss at iteration {it}"));
            cand.params = cand.params.with_array(&x);
            cand.collision_ok = false;
            cand.final_cost = f64::INFINITY;
            return cand;
        }
        cand.trace.push(j);
        let b1 = 1.0 - cfg.beta1.powi(it as i32);
        let b2 = 1.0 - cfg.beta2.powi(it as i32);
        for k in 0..6 {
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
            x[k] -= cfg.learning_rate * (m[k] / b1) / ((v[k] / b2).sqrt() + cfg.epsilon);
        }
    }
    cand.params = cand.params.with_array(&x);
    let (j, _) = pose_loss(&cand.params, &cand.samples, gripper, field, attraction, cfg);
    cand.final_cost = j;
    let (_, min_s) = penetration(field, gripper, &cand.params.realize());
    cand.collision_ok = j.is_finite() && min_s >= -margin;
    if !j.is_finite() {
        cand.failure = Some("non-finite final cost".into());
    } else if !cand.collision_ok {
        cand.failure = Some(format!("body point at depth {:.4} m after optimization", -min_s));
    }
    cand
}

/// Lowest final cost among collision-free candidates; ties go to the lowest index.
pub fn select_best(candidates: &[PoseCandidate]) -> Result<usize, OptimizerError> {
    let best = candidates
        .iter()
        .enumerate()
        .filter(|(_, c)| c.collision_ok)
        .min_by(|a, b| {
            a.1.final_cost
                .total_cmp(&b.1.final_cost)
                .then(a.1.index.cmp(&b.1.index))
        });
    match best {
        Some((i, _)) => Ok(i),
        None => {
            let worst = candidates
                .iter()
                .filter(|c| c.final_cost.is_finite())
                .min_by(|a, b| a.final_cost.total_cmp(&b.final_cost).then(a.index.cmp(&b.index)));
            Err(match worst {
                Some(c) => OptimizerError::NoFreePose {
                    index: c.index,
                    cost: c.final_cost,
                },
                None => OptimizerError::NoFreePose {
                    index: candidates.first().map_or(0, |c| c.index),
                    cost: f64::INFINITY,
                },
            })
        }
    }
}

/// Serializable outcome of a full optimization run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseResult {
    pub pose: PoseRecord,
    pub cost: f64,
    pub collision_ok: bool,
    pub trace: Vec<f64>,
    pub candidate_count: usize,
    pub retained: usize,
    pub candidate_index: usize,
}

#[derive(Clone, Debug)]
pub struct OptimizationRun {
    pub result: PoseResult,
    pub best: PoseCandidate,
    pub candidates: Vec<PoseCandidate>,
    pub dropped: Vec<(usize, String)>,
}

/// Initialize, prefilter, optimize every survivor and pick the best pose.
/// `progress` receives `(finished, total, candidate)` after each candidate.
#[allow(clippy::too_many_arguments)]
pub fn run_optimizer(
    area: &InteractionArea,
    field: &dyn FieldAccess,
    gripper: &GripperModel,
    attraction: &Attraction,
    cfg: &OptimizerConfig,
    margin: f64,
    seed: u64,
    progress: Option<&(dyn Fn(usize, usize, &PoseCandidate) + Sync)>,
) -> Result<OptimizationRun, OptimizerError> {
    cfg.validate()?;
    let candidates = init_candidates(area, gripper, cfg, seed)?;
    let total = candidates.len();
    let (kept, dropped) = collision_prefilter(candidates, field, gripper, cfg.max_inside_fraction, margin);
    if kept.is_empty() {
        return Err(OptimizerError::NoFreeInit(total));
    }
    let retained = kept.len();
    let done = AtomicUsize::new(0);
    let optimized: Vec<PoseCandidate> = kept
        .into_par_iter()
        .map(|c| {
            let out = optimize_pose(c, field, gripper, attraction, cfg, margin);
            let n = done.fetch_add(1, Ordering::Relaxed) + 1;
            if let Some(cb) = progress {
                cb(n, retained, &out);
            }
            out
        })
        .collect();
    let best_i = select_best(&optimized)?;
    let best = optimized[best_i].clone();
    let result = PoseResult {
        pose: PoseRecord::from(&best.params.realize()),
        cost: best.final_cost,
        collision_ok: best.collision_ok,
        trace: best.trace.clone(),
        candidate_count: total,
        retained,
        candidate_index: best.index,
    };
    Ok(OptimizationRun {
        result,
        best,
        candidates: optimized,
        dropped,
    })
}
