//! Seeded offline evaluation on synthetic scenes: every method grasps the
//! clicked part of one of two mirror-image instances and the finger segment
//! is scored against ground-truth voxel labels.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotator::annotate_traced;
use crate::bundle::{SceneBundle, SourceBundle};
use crate::geometry::Vec3;
use crate::grounding::Method;
use crate::pipeline::{prepare_scene, run_annotated, C2GConfig, PipelineError, Silent};
use crate::synthetic::{
    desk_cameras, desk_workspace, preset_spec, render_scene, render_source, source_camera, Codebook, GroundTruth,
    Label, Preset, RenderOptions, SdConfusion, Side, SynthError, Variation,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid eval config: {0}")]
    Config(String),
    #[error("trial {trial}: {source}")]
    Synth { trial: usize, source: SynthError },
}

/// Knobs of the synthetic trial generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrialConfig {
    pub voxel_size: f64,
    /// Largest planar offset of the scene object (m).
    pub max_offset: f64,
    /// Relative size jitter of scene primitives.
    pub scene_jitter: f64,
    /// Relative size jitter of the source instance.
    pub source_jitter: f64,
    /// Largest yaw of the source instance (rad).
    pub source_yaw: f64,
    /// Largest mixing angle of the source SD confusion (rad).
    pub max_sd_confusion: f64,
    pub dino_noise: f64,
    pub sd_noise: f64,
}

impl Default for TrialConfig {
    fn default() -> Self {
        Self {
            voxel_size: 0.01,
            max_offset: 0.02,
            scene_jitter: 0.1,
            source_jitter: 0.15,
            source_yaw: 0.2,
            max_sd_confusion: std::f64::consts::FRAC_PI_2,
            dino_noise: 0.1,
            sd_noise: 0.2,
        }
    }
}

/// One generated trial.
pub struct Trial {
    pub index: usize,
    pub scene: SceneBundle,
    pub truth: GroundTruth,
    pub source: SourceBundle,
    pub click: (f64, f64),
    /// Per-pixel label ids of the source image, -1 off objects.
    pub source_labels: Vec<i32>,
    pub target: Label,
    pub confusion: SdConfusion,
}

/// Builds trial `index` of a seeded run. Independent of every other trial.
pub fn make_trial(preset: Preset, cfg: &TrialConfig, seed: u64, index: usize) -> Result<Trial, EvalError> {
    let wrap = |e| EvalError::Synth {
        trial: index,
        source: e,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let codebook = Codebook::default();
    let side = if rng.random_bool(0.5) { Side::Left } else { Side::Right };
    let target = Label {
        part: preset.click_part(),
        side,
    };
    let confusable = preset.confusable_parts();
    let confusion = SdConfusion {
        part: target.part,
        toward: confusable[rng.random_range(0..confusable.len())],
        angle: rng.random_range(0.0..=cfg.max_sd_confusion),
    };
    let scene_var = Variation {
        yaw: rng.random_range(0.0..std::f64::consts::TAU),
        offset: [
            rng.random_range(-cfg.max_offset..=cfg.max_offset),
            rng.random_range(-cfg.max_offset..=cfg.max_offset),
        ],
        jitter: cfg.scene_jitter,
    };
    let source_var = Variation {
        yaw: rng.random_range(-cfg.source_yaw..=cfg.source_yaw),
        offset: [0.0; 2],
        jitter: cfg.source_jitter,
    };
    let scene_seed: u64 = rng.random();
    let source_seed: u64 = rng.random();
    let scene_spec = preset_spec(preset, &scene_var, &mut rng).with_table();
    let source_spec = preset_spec(preset, &source_var, &mut rng).with_table();
    let noise = crate::synthetic::FeatureNoise {
        dino: cfg.dino_noise,
        sd: cfg.sd_noise,
    };
    let (scene, truth) = render_scene(
        &scene_spec,
        &desk_cameras(),
        desk_workspace(),
        cfg.voxel_size,
        &codebook,
        &RenderOptions {
            noise: noise.clone(),
            seed: scene_seed,
            ..Default::default()
        },
    )
    .map_err(wrap)?;
    let (source, click, source_labels) = render_source(
        &source_spec,
        &source_camera(preset),
        &codebook,
        &RenderOptions {
            noise,
            seed: source_seed,
            sd_confusion: Some(confusion),
            ..Default::default()
        },
        target,
    )
    .map_err(wrap)?;
    Ok(Trial {
        index,
        scene,
        truth,
        source,
        click,
        source_labels,
        target,
        confusion,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    /// Fingers close on the clicked part of the clicked instance only.
    Success,
    /// Right instance, wrong part.
    PartMiss,
    /// Fingers touch the other instance.
    WrongInstance,
    /// Nothing on either side between the fingers.
    Miss,
    /// The pipeline returned an error.
    Error,
}

impl Outcome {
    pub const ALL: [Outcome; 5] = [
        Outcome::Success,
        Outcome::PartMiss,
        Outcome::WrongInstance,
        Outcome::Miss,
        Outcome::Error,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Outcome::Success => "success",
            Outcome::PartMiss => "part_miss",
            Outcome::WrongInstance => "wrong_instance",
            Outcome::Miss => "miss",
            Outcome::Error => "error",
        }
    }

    pub fn correct_side(self) -> bool {
        matches!(self, Outcome::Success | Outcome::PartMiss)
    }
}

/// Scores the labels found between the fingers against the clicked target.
pub fn classify(hits: &[Label], target: Label) -> Outcome {
    let other = target.side.opposite();
    if hits.iter().any(|l| l.side == other) {
        Outcome::WrongInstance
    } else if hits.contains(&target) {
        Outcome::Success
    } else if hits.iter().any(|l| l.side == target.side) {
        Outcome::PartMiss
    } else {
        Outcome::Miss
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub method: Method,
    pub target: String,
    pub outcome: Outcome,
    /// `part:side` labels between the fingers.
    pub hits: Vec<String>,
    pub cost: Option<f64>,
    pub collision_ok: Option<bool>,
    pub area_size: Option<usize>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub trials: usize,
    pub success: usize,
    pub correct_side: usize,
    pub part_miss: usize,
    pub wrong_instance: usize,
    pub miss: usize,
    pub error: usize,
    pub collision_violations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub preset: Preset,
    pub seed: u64,
    pub trials: usize,
    pub methods: Vec<Method>,
    pub summary: BTreeMap<String, MethodSummary>,
    pub records: Vec<TrialRecord>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn summary_for(&self, method: Method) -> Option<&MethodSummary> {
        self.summary.get(method.name())
    }

    /// Aligned text table, one row per method.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<10} {:>7} {:>8} {:>9} {:>10} {:>15} {:>5} {:>6}",
            "method", "trials", "success", "side_ok", "part_miss", "wrong_instance", "miss", "error"
        );
        for m in &self.methods {
            let s = &self.summary[m.name()];
            let _ = writeln!(
                out,
                "{:<10} {:>7} {:>8} {:>9} {:>10} {:>15} {:>5} {:>6}",
                m.name(),
                s.trials,
                s.success,
                s.correct_side,
                s.part_miss,
                s.wrong_instance,
                s.miss,
                s.error
            );
        }
        out
    }
}

/// Everything `offline_eval` needs besides the trial count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub preset: Preset,
    pub trials: TrialConfig,
    pub pipeline: C2GConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            preset: Preset::Toy,
            trials: TrialConfig::default(),
            pipeline: eval_pipeline_config(),
        }
    }
}

/// Pipeline config pinned for the offline evaluation: the defaults with a
/// sparser gripper body cloud (128 points).
pub fn eval_pipeline_config() -> C2GConfig {
    let mut cfg = C2GConfig::default();
    cfg.gripper.body_points = 128;
    cfg
}

fn label_name(l: &Label) -> String {
    format!("{}:{}", l.part_name(), l.side.name())
}

/// Runs `n_trials` seeded trials of every method. Failures are tallied, not
/// returned; `progress` is told about each finished (trial, method).
pub fn offline_eval(
    n_trials: usize,
    methods: &[Method],
    cfg: &EvalConfig,
    seed: u64,
    progress: &dyn Fn(&TrialRecord),
) -> Result<EvalReport, EvalError> {
    if n_trials == 0 {
        return Err(EvalError::Config("at least one trial required".into()));
    }
    if methods.is_empty() {
        return Err(EvalError::Config("at least one method required".into()));
    }
    cfg.pipeline.validate().map_err(|e| EvalError::Config(e.to_string()))?;
    let mut records = Vec::with_capacity(n_trials * methods.len());
    for index in 0..n_trials {
        let trial = make_trial(cfg.preset, &cfg.trials, seed, index)?;
        let mut pipe = cfg.pipeline.clone();
        pipe.seed = seed.wrapping_add(index as u64);
        let prepared = prepare_scene(&trial.scene, &pipe);
        let annotation = annotate_traced(&trial.source, trial.click, &pipe.annotator);
        for &method in methods {
            let outcome = match (&prepared, &annotation) {
                (Ok(p), Ok(a)) => run_annotated(p, a.clone(), 0.0, method, &pipe, &Silent),
                (Err(e), _) => Err(PipelineError::Input(e.to_string())),
                (_, Err(e)) => Err(PipelineError::Annotation(e.clone())),
            };
            let record = match outcome {
                Ok(out) => {
                    let [a, b] = out.result.finger_segment;
                    let hits = trial.truth.labels_on_segment(&Vec3::from(a), &Vec3::from(b));
                    TrialRecord {
                        trial: index,
                        method,
                        target: label_name(&trial.target),
                        outcome: classify(&hits, trial.target),
                        hits: hits.iter().map(label_name).collect(),
                        cost: Some(out.result.cost),
                        collision_ok: Some(out.result.collision_ok),
                        area_size: Some(out.result.area.len()),
                        error: None,
                    }
                }
                Err(e) => TrialRecord {
                    trial: index,
                    method,
                    target: label_name(&trial.target),
                    outcome: Outcome::Error,
                    hits: Vec::new(),
                    cost: None,
                    collision_ok: None,
                    area_size: None,
                    error: Some(format!("{}: {e}", e.stage())),
                },
            };
            progress(&record);
            records.push(record);
        }
    }
    let mut summary = BTreeMap::new();
    for &m in methods {
        let mut s = MethodSummary::default();
        for r in records.iter().filter(|r| r.method == m) {
            s.trials += 1;
            match r.outcome {
                Outcome::Success => s.success += 1,
                Outcome::PartMiss => s.part_miss += 1,
                Outcome::WrongInstance => s.wrong_instance += 1,
                Outcome::Miss => s.miss += 1,
                Outcome::Error => s.error += 1,
            }
            s.correct_side += r.outcome.correct_side() as usize;
            s.collision_violations += (r.collision_ok == Some(false)) as usize;
        }
        summary.insert(m.name().to_string(), s);
    }
    Ok(EvalReport {
        preset: cfg.preset,
        seed,
        trials: n_trials,
        methods: methods.to_vec(),
        summary,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::part_index;

    fn l(part: &str, side: Side) -> Label {
        Label {
            part: part_index(part).unwrap(),
            side,
        }
    }

    #[test]
    fn outcome_rules() {
        let t = l("arm", Side::Left);
        assert_eq!(classify(&[t, l("body", Side::None)], t), Outcome::Success);
        assert_eq!(classify(&[t, l("arm", Side::Right)], t), Outcome::WrongInstance);
        assert_eq!(classify(&[l("leg", Side::Left)], t), Outcome::PartMiss);
        assert_eq!(classify(&[l("body", Side::None)], t), Outcome::Miss);
        assert_eq!(classify(&[], t), Outcome::Miss);
        assert!(Outcome::PartMiss.correct_side());
        assert!(!Outcome::WrongInstance.correct_side());
    }

    #[test]
    fn zero_trials_rejected() {
        let r = offline_eval(0, &[Method::C2g], &EvalConfig::default(), 0, &|_| {});
        assert!(matches!(r, Err(EvalError::Config(_))));
    }
}
