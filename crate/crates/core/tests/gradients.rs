use c2g_core::bundle::FeatureFamily;
use c2g_core::field::{DescriptorField, FusionConfig};
use c2g_core::geometry::{random_rotation, PoseParams, RigidTransform, Vec3};
use c2g_core::optimizer::{pose_loss, Attraction, GripperConfig, GripperModel, OptimizerConfig};
use c2g_core::synthetic::{
    render_scene, sphere_capsule_cameras, sphere_capsule_spec, sphere_capsule_workspace, Codebook, RenderOptions,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;

fn field() -> DescriptorField {
    let (bundle, _) = render_scene(
        &sphere_capsule_spec(),
        &sphere_capsule_cameras(),
        sphere_capsule_workspace(),
        0.01,
        &Codebook::default(),
        &RenderOptions::default(),
    )
    .unwrap();
    DescriptorField::new(
        &bundle,
        &FusionConfig {
            truncation: Some(0.04),
            ..Default::default()
        },
    )
    .unwrap()
}

fn rel_err(an: &[f64], fd: &[f64]) -> f64 {
    let d: f64 = an.iter().zip(fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let n: f64 = an.iter().map(|a| a * a).sum::<f64>().sqrt();
    d / n.max(1e-9)
}

#[test]
fn query_gradient_matches_central_differences() {
    let field = field();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut errs = Vec::new();
    while errs.len() < 300 {
        let x = Vec3::new(
            rng.random_range(-0.2..0.2),
            rng.random_range(-0.2..0.2),
            rng.random_range(-0.05..0.3),
        );
        let q = field.query(&x);
        if !q.valid || q.s.abs() >= 0.04 || !field.is_smooth_at(&x, H) {
            continue;
        }
        let g = field.query_gradient(&x, &[FeatureFamily::Dino, FeatureFamily::Sd]);
        let (mut an, mut fd) = (Vec::new(), Vec::new());
        for k in 0..3 {
            let (mut a, mut b) = (x, x);
            a[k] += H;
            b[k] -= H;
            let (qa, qb) = (field.query(&a), field.query(&b));
            an.push(g.ds[k]);
            fd.push((qa.s - qb.s) / (2.0 * H));
            for (c, j) in g.dino.as_ref().unwrap().iter().enumerate() {
                an.push(j[k]);
                fd.push((qa.dino[c] - qb.dino[c]) / (2.0 * H));
            }
            for (c, j) in g.sd.as_ref().unwrap().iter().enumerate() {
                an.push(j[k]);
                fd.push((qa.sd[c] - qb.sd[c]) / (2.0 * H));
            }
        }
        errs.push(rel_err(&an, &fd));
    }
    let good = errs.iter().filter(|&&e| e < 1e-3).count();
    assert!(good * 100 >= 95 * errs.len(), "{good}/{}", errs.len());
}

#[test]
fn pose_loss_gradient_matches_central_differences() {
    let field = field();
    let cfg = OptimizerConfig::default();
    let gripper = GripperModel::new(&GripperConfig {
        body_points: 128,
        ..Default::default()
    })
    .unwrap();
    let attraction = Attraction {
        family: FeatureFamily::Dino,
        descriptor: Codebook::default().dino_code(4).to_vec(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut errs = Vec::new();
    while errs.len() < 50 {
        let c = Vec3::new(
            rng.random_range(-0.15..0.2),
            rng.random_range(-0.15..0.15),
            rng.random_range(0.0..0.25),
        );
        if field.sdf(&c).abs() > 0.03 {
            continue;
        }
        let rotation = random_rotation(&mut rng);
        let base = RigidTransform {
            rotation,
            translation: c - rotation * gripper.finger_center,
        };
        let samples = gripper.sample_interaction(cfg.samples, &mut rng);
        let mut jitter = || {
            Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            )
        };
        let p = PoseParams {
            rotvec: jitter() * 0.1,
            tvec: jitter() * 0.005,
            base,
        };
        let x = p.to_array();
        let points: Vec<Vec3> = samples.iter().chain(&gripper.body_points).copied().collect();
        let pose = p.realize();
        let sig: Vec<_> = points.iter().map(|q| field.piece_signature(&pose.apply(q))).collect();
        let off_boundary = (0..6).all(|k| {
            [-H, H].iter().all(|step| {
                let mut a = x;
                a[k] += step;
                let moved = p.with_array(&a).realize();
                points
                    .iter()
                    .zip(&sig)
                    .all(|(q, s)| &field.piece_signature(&moved.apply(q)) == s)
            })
        });
        if !off_boundary {
            continue;
        }
        let (_, g) = pose_loss(&p, &samples, &gripper, &field, &attraction, &cfg);
        let mut fd = [0.0; 6];
        for k in 0..6 {
            let (mut a, mut b) = (x, x);
            a[k] += H;
            b[k] -= H;
            let la = pose_loss(&p.with_array(&a), &samples, &gripper, &field, &attraction, &cfg).0;
            let lb = pose_loss(&p.with_array(&b), &samples, &gripper, &field, &attraction, &cfg).0;
            fd[k] = (la - lb) / (2.0 * H);
        }
        errs.push(rel_err(&g, &fd));
    }
    let good = errs.iter().filter(|&&e| e < 1e-3).count();
    assert!(good * 100 >= 95 * errs.len(), "{good}/{}", errs.len());
}
