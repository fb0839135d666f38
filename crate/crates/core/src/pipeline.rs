//! End-to-end composition: click annotation, descriptor field, grounding and
//! pose optimization, with every intermediate artifact kept.

use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotator::{
    annotate_traced, heatmap_overlay, AnnotationError, AnnotationTrace, AnnotatorConfig, SourceAnnotation,
};
use crate::bundle::{FeatureFamily, SceneBundle, SourceBundle};
use crate::field::{build_voxel_grid, DescriptorField, FieldError, FusionConfig, VoxelGrid};
use crate::geometry::PoseRecord;
use crate::grounding::{ground, Grounding, GroundingConfig, GroundingError, GroundingSummary, InteractionArea, Method};
use crate::optimizer::{
    run_optimizer, Attraction, GripperConfig, GripperModel, OptimizationRun, OptimizerConfig, OptimizerError,
    PoseCandidate, PoseResult,
};
use crate::tensor::save_tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Config,
    Input,
    Annotation,
    Field,
    Grounding,
    Optimizer,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Config => "config",
            Stage::Input => "input",
            Stage::Annotation => "annotation",
            Stage::Field => "field",
            Stage::Grounding => "grounding",
            Stage::Optimizer => "optimizer",
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("input: {0}")]
    Input(String),
    #[error("annotation: {0}")]
    Annotation(#[from] AnnotationError),
    #[error("field: {0}")]
    Field(#[from] FieldError),
    #[error("grounding: {0}")]
    Grounding(#[from] GroundingError),
    #[error("optimizer: {0}")]
    Optimizer(#[from] OptimizerError),
    #[error("output: {0}")]
    Output(String),
}

impl PipelineError {
    pub fn stage(&self) -> &'static str {
        match self {
            PipelineError::Config(_) => "config",
            PipelineError::Input(_) => "input",
            PipelineError::Annotation(_) => "annotation",
            PipelineError::Field(_) => "field",
            PipelineError::Grounding(_) => "grounding",
            PipelineError::Optimizer(_) => "optimizer",
            PipelineError::Output(_) => "output",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct C2GConfig {
    pub seed: u64,
    pub fusion: FusionConfig,
    pub annotator: AnnotatorConfig,
    pub grounding: GroundingConfig,
    pub optimizer: OptimizerConfig,
    pub gripper: GripperConfig,
}

impl C2GConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, PipelineError> {
        let cfg: C2GConfig = toml::from_str(s).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies a JSON object of overrides, e.g. `{"grounding": {"theta_dino": 0.7}}`.
    pub fn with_overrides(&self, overrides: &serde_json::Value) -> Result<Self, PipelineError> {
        let mut base = serde_json::to_value(self).expect("config serializes");
        merge(&mut base, overrides);
        let cfg: C2GConfig = serde_json::from_value(base).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let cfg = |e: String| PipelineError::Config(e);
        if let Some(t) = self.fusion.truncation {
            if !(t > 0.0 && t.is_finite()) {
                return Err(cfg(format!("fusion.truncation must be positive, got {t}")));
            }
        }
        if !(self.fusion.weight_floor > 0.0 && self.fusion.weight_floor < 1.0) {
            return Err(cfg(format!(
                "fusion.weight_floor must lie in (0, 1), got {}",
                self.fusion.weight_floor
            )));
        }
        let a = &self.annotator;
        if !(a.max_match_fraction > 0.0 && a.max_match_fraction <= 1.0) {
            return Err(cfg(format!(
                "annotator.max_match_fraction must lie in (0, 1], got {}",
                a.max_match_fraction
            )));
        }
        self.grounding.validate().map_err(|e| cfg(e.to_string()))?;
        self.optimizer.validate().map_err(|e| cfg(e.to_string()))?;
        GripperModel::new(&self.gripper).map_err(|e| cfg(e.to_string()))?;
        Ok(())
    }
}

fn merge(base: &mut serde_json::Value, over: &serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}

/// Callbacks for long runs. All methods default to no-ops.
pub trait Observer: Sync {
    fn stage(&self, _stage: Stage) {}
    /// One more candidate finished optimizing.
    fn candidate(&self, _done: usize, _total: usize, _candidate: &PoseCandidate) {}
}

pub struct Silent;

impl Observer for Silent {}

/// Wall-clock milliseconds per stage. Not part of result equality.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub annotation_ms: f64,
    pub field_ms: f64,
    pub grounding_ms: f64,
    pub optimizer_ms: f64,
}

/// File names of the diagnostics written next to `result.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub heatmap: String,
    pub grounding: String,
    pub grounding_channels: Vec<String>,
}

impl Default for Diagnostics {
    fn default() -> Self {
        Self {
            heatmap: "heatmap.png".into(),
            grounding: "grounding.tsr".into(),
            grounding_channels: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraspResult {
    pub method: Method,
    pub seed: u64,
    pub pose: PoseRecord,
    pub cost: f64,
    pub collision_ok: bool,
    /// Inner finger pad centers at the final pose.
    pub finger_segment: [[f64; 3]; 2],
    pub optimizer: PoseResult,
    pub annotation: SourceAnnotation,
    pub area: InteractionArea,
    pub grounding: GroundingSummary,
    pub timings: StageTimings,
    pub diagnostics: Diagnostics,
}

impl GraspResult {
    /// Copy with timings zeroed, for comparing runs.
    pub fn canonical(&self) -> GraspResult {
        GraspResult {
            timings: StageTimings::default(),
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("result serializes")
    }
}

/// Result plus the in-memory artifacts of every stage.
#[derive(Clone, Debug)]
pub struct GraspOutput {
    pub result: GraspResult,
    pub annotation: AnnotationTrace,
    pub grounding: Grounding,
    pub run: OptimizationRun,
}

/// Scene-side state shared by every click on the same scene.
pub struct PreparedScene {
    pub field: DescriptorField,
    pub grid: VoxelGrid,
    pub build_ms: f64,
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

pub fn prepare_scene(scene: &SceneBundle, cfg: &C2GConfig) -> Result<PreparedScene, PipelineError> {
    let t = Instant::now();
    let field = DescriptorField::new(scene, &cfg.fusion)?;
    let grid = build_voxel_grid(&field, &scene.workspace, scene.voxel_size)?;
    Ok(PreparedScene {
        field,
        grid,
        build_ms: ms(t),
    })
}

pub fn run_c2g(
    scene: &SceneBundle,
    source: &SourceBundle,
    click: (f64, f64),
    cfg: &C2GConfig,
) -> Result<GraspOutput, PipelineError> {
    run_method(scene, source, click, Method::C2g, cfg, &Silent)
}

pub fn run_method(
    scene: &SceneBundle,
    source: &SourceBundle,
    click: (f64, f64),
    method: Method,
    cfg: &C2GConfig,
    observer: &dyn Observer,
) -> Result<GraspOutput, PipelineError> {
    cfg.validate()?;
    source
        .check_compatible(scene)
        .map_err(|e| PipelineError::Input(e.to_string()))?;
    observer.stage(Stage::Annotation);
    let t = Instant::now();
    let annotation = annotate_traced(source, click, &cfg.annotator)?;
    let annotation_ms = ms(t);
    observer.stage(Stage::Field);
    let prepared = prepare_scene(scene, cfg)?;
    run_annotated(&prepared, annotation, annotation_ms, method, cfg, observer)
}

/// Feature family of the attraction term: DINO, except for the SD-only
/// baseline, which never looks at DINO features after annotation.
pub fn attraction_family(method: Method) -> FeatureFamily {
    match method {
        Method::SdOnly => FeatureFamily::Sd,
        Method::C2g | Method::DinoOnly => FeatureFamily::Dino,
    }
}

/// Runs grounding and optimization for an existing annotation on a prepared scene.
pub fn run_annotated(
    prepared: &PreparedScene,
    annotation: AnnotationTrace,
    annotation_ms: f64,
    method: Method,
    cfg: &C2GConfig,
    observer: &dyn Observer,
) -> Result<GraspOutput, PipelineError> {
    observer.stage(Stage::Grounding);
    let t = Instant::now();
    let grounding = ground(&prepared.grid, &annotation.annotation, method, &cfg.grounding)?;
    let grounding_ms = ms(t);

    observer.stage(Stage::Optimizer);
    let t = Instant::now();
    let gripper = GripperModel::new(&cfg.gripper)?;
    let family = attraction_family(method);
    let attraction = Attraction {
        family,
        descriptor: annotation.annotation.descriptors(family).0.to_vec(),
    };
    let margin = cfg.optimizer.margin_for(prepared.grid.voxel_size);
    let progress = |done: usize, total: usize, c: &PoseCandidate| observer.candidate(done, total, c);
    let run = run_optimizer(
        &grounding.area,
        &prepared.field,
        &gripper,
        &attraction,
        &cfg.optimizer,
        margin,
        cfg.seed,
        Some(&progress),
    )?;
    let optimizer_ms = ms(t);

    let (a, b) = gripper.pad_segment(&run.best.params.realize());
    let result = GraspResult {
        method,
        seed: cfg.seed,
        pose: run.result.pose.clone(),
        cost: run.result.cost,
        collision_ok: run.result.collision_ok,
        finger_segment: [a.into(), b.into()],
        optimizer: run.result.clone(),
        annotation: annotation.annotation.clone(),
        area: grounding.area.clone(),
        grounding: grounding.summary.clone(),
        timings: StageTimings {
            annotation_ms,
            field_ms: prepared.build_ms,
            grounding_ms,
            optimizer_ms,
        },
        diagnostics: Diagnostics {
            grounding_channels: grounding.channels.iter().map(|(n, _)| n.clone()).collect(),
            ..Diagnostics::default()
        },
    };
    Ok(GraspOutput {
        result,
        annotation,
        grounding,
        run,
    })
}

/// Writes `result.json` and the diagnostics it references into `dir`.
pub fn write_grasp_output(output: &GraspOutput, source: &SourceBundle, dir: &Path) -> Result<(), PipelineError> {
    let err = |e: String| PipelineError::Output(e);
    fs::create_dir_all(dir).map_err(|e| err(format!("{}: {e}", dir.display())))?;
    let d = &output.result.diagnostics;
    heatmap_overlay(&source.image, &output.annotation.heatmap)
        .save_png(&dir.join(&d.heatmap))
        .map_err(|e| err(e.to_string()))?;
    if let Some(t) = output.grounding.to_tensor() {
        save_tensor(&t, &dir.join(&d.grounding)).map_err(|e| err(e.to_string()))?;
    }
    fs::write(dir.join("result.json"), output.result.to_json()).map_err(|e| err(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = C2GConfig::default();
        let text = cfg.to_toml_string();
        assert_eq!(C2GConfig::from_toml_str(&text).unwrap(), cfg);
        assert_eq!(C2GConfig::from_toml_str("").unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(C2GConfig::from_toml_str("[grounding]\ntheta = 0.5\n").is_err());
        assert!(C2GConfig::from_toml_str("[grounding]\ntheta_dino = 1.5\n").is_err());
        assert!(C2GConfig::from_toml_str("[optimizer]\niterations = 0\n").is_err());
    }

    #[test]
    fn overrides_merge_nested_keys() {
        let cfg = C2GConfig::default()
            .with_overrides(&serde_json::json!({"seed": 9, "grounding": {"theta_dino": 0.7}}))
            .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.grounding.theta_dino, 0.7);
        assert_eq!(cfg.grounding.top_quartile, GroundingConfig::default().top_quartile);
        assert!(C2GConfig::default()
            .with_overrides(&serde_json::json!({"grounding": {"theta_dino": 0.0}}))
            .is_err());
    }

    #[test]
    fn stage_tags() {
        let e = PipelineError::from(AnnotationError::NoInstances);
        assert_eq!(e.stage(), "annotation");
        assert_eq!(
            PipelineError::from(GroundingError::Empty("x".into())).stage(),
            "grounding"
        );
    }
}
