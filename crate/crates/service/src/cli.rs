//! `c2g` subcommands. Exit codes: 0 ok, 1 validation error, 2 pipeline error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use c2g_core::annotator::{annotate_traced, heatmap_overlay, AnnotationError};
use c2g_core::bundle::{
    detect_bundle_kind, load_scene_bundle, load_source_bundle, write_scene_bundle, write_source_bundle, BundleKind,
};
use c2g_core::eval::{make_trial, offline_eval, EvalConfig, TrialConfig};
use c2g_core::grounding::Method;
use c2g_core::pipeline::{run_method, write_grasp_output, C2GConfig, PipelineError, Silent};
use c2g_core::synthetic::{most_interior_pixel, Label, Preset};
use clap::{Parser, Subcommand};
use serde_json::json;

use crate::server::{serve, AppState};
use crate::store::{content_id, kind_name, Store};

#[derive(Debug, Parser)]
#[command(
    name = "c2g",
    version,
    about = "Click-to-grasp: pick a part in a source image, get a gripper pose in the scene"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a scene or source bundle and print a summary.
    Validate { bundle: PathBuf },
    /// Annotate a source image at a click and print the descriptors.
    Annotate {
        source: PathBuf,
        #[arg(long, value_parser = parse_click)]
        click: (f64, f64),
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write annotation.json, heatmap.png and overlay.png here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the full pipeline and write result.json plus diagnostics.
    Grasp {
        scene: PathBuf,
        source: PathBuf,
        #[arg(long, value_parser = parse_click)]
        click: (f64, f64),
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// c2g, dino or sd.
        #[arg(long, default_value = "c2g", value_parser = parse_method)]
        method: Method,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a synthetic scene, source image and ground truth.
    Synth {
        #[arg(long, default_value = "toy", value_parser = parse_preset)]
        preset: Preset,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Seeded offline evaluation of several methods on synthetic trials.
    Eval {
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value = "c2g,dino,sd", value_delimiter = ',', value_parser = parse_method)]
        methods: Vec<Method>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value = "toy", value_parser = parse_preset)]
        preset: Preset,
        /// Pipeline config; defaults to the pinned evaluation settings.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write eval.json and eval.txt here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long, env = "C2G_PORT", default_value_t = 8080)]
        port: u16,
        #[arg(long, env = "C2G_DATA_DIR", default_value = "data")]
        data: PathBuf,
        #[arg(long, env = "C2G_WORKERS", default_value_t = 2)]
        workers: usize,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

pub fn parse_click(s: &str) -> Result<(f64, f64), String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    match parts.as_slice() {
        [u, v] => {
            let u: f64 = u.parse().map_err(|e| format!("bad u '{u}': {e}"))?;
            let v: f64 = v.parse().map_err(|e| format!("bad v '{v}': {e}"))?;
            Ok((u, v))
        }
        _ => Err(format!("expected u,v, got '{s}'")),
    }
}

fn parse_method(s: &str) -> Result<Method, String> {
    Method::parse(s).ok_or_else(|| format!("unknown method '{s}' (c2g, dino, sd)"))
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    Preset::parse(s).ok_or_else(|| format!("unknown preset '{s}' (toy, shoe)"))
}

/// An error plus the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

fn invalid(e: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: 1,
        error: e.into(),
    }
}

fn failed(e: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: 2,
        error: e.into(),
    }
}

fn classify(e: PipelineError) -> Failure {
    let code = match &e {
        PipelineError::Config(_) | PipelineError::Input(_) => 1,
        PipelineError::Annotation(AnnotationError::ClickOutside { .. }) => 1,
        _ => 2,
    };
    Failure {
        code,
        error: anyhow!("{e}"),
    }
}

fn load_config(path: Option<&Path>, fallback: C2GConfig) -> Result<C2GConfig, Failure> {
    match path {
        Some(p) => C2GConfig::load(p).map_err(invalid),
        None => Ok(fallback),
    }
}

/// Prints a line to stdout; a closed pipe (`| head`) is not an error.
fn emit(text: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{text}").and_then(|_| out.flush());
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text)
        .with_context(|| path.display().to_string())
        .map_err(failed)
}

pub fn run(cli: Cli) -> ExitCode {
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Validate { bundle } => validate(&bundle),
        Command::Annotate {
            source,
            click,
            config,
            out,
        } => annotate(&source, click, config.as_deref(), out.as_deref()),
        Command::Grasp {
            scene,
            source,
            click,
            config,
            seed,
            method,
            out,
        } => grasp(&scene, &source, click, config.as_deref(), seed, method, &out),
        Command::Synth { preset, out, seed } => synth(preset, &out, seed),
        Command::Eval {
            trials,
            methods,
            seed,
            preset,
            config,
            out,
            quiet,
        } => eval(trials, &methods, seed, preset, config.as_deref(), out.as_deref(), quiet),
        Command::Serve {
            port,
            data,
            workers,
            config,
        } => {
            let cfg = load_config(config.as_deref(), C2GConfig::default())?;
            let store = Store::open(&data).map_err(invalid)?;
            let state = AppState::new(store, cfg, workers);
            let rt = tokio::runtime::Runtime::new().map_err(failed)?;
            rt.block_on(serve(state, port)).map_err(failed)
        }
    }
}

fn validate(dir: &Path) -> Result<(), Failure> {
    let kind = detect_bundle_kind(dir).map_err(invalid)?;
    let summary = match kind {
        BundleKind::Scene => {
            let b = load_scene_bundle(dir).map_err(invalid)?;
            json!({
                "kind": "scene",
                "views": b.views.iter().map(|v| json!({
                    "name": v.name,
                    "image": [v.camera.width, v.camera.height],
                    "dino": [v.dino.height, v.dino.width, v.dino.channels],
                    "sd": [v.sd.height, v.sd.width, v.sd.channels],
                    "invalid_depth": v.depth.invalid_count(),
                })).collect::<Vec<_>>(),
                "workspace": {"origin": b.workspace.origin, "size": b.workspace.size},
                "voxel": b.voxel_size,
            })
        }
        BundleKind::Source => {
            let b = load_source_bundle(dir).map_err(invalid)?;
            json!({
                "kind": "source",
                "image": [b.image.width, b.image.height],
                "dino": [b.dino.height, b.dino.width, b.dino.channels],
                "sd": [b.sd.height, b.sd.width, b.sd.channels],
            })
        }
    };
    let mut summary = summary;
    summary["id"] = json!(content_id(dir).map_err(invalid)?);
    emit(&serde_json::to_string_pretty(&summary).unwrap());
    eprintln!("ok: valid {} bundle", kind_name(kind));
    Ok(())
}

fn annotate(dir: &Path, click: (f64, f64), config: Option<&Path>, out: Option<&Path>) -> Result<(), Failure> {
    let cfg = load_config(config, C2GConfig::default())?;
    let source = load_source_bundle(dir).map_err(invalid)?;
    let trace = annotate_traced(&source, click, &cfg.annotator).map_err(|e| classify(e.into()))?;
    let doc = json!({
        "annotation": trace.annotation,
        "centroids": trace.annotation.centroid_json(),
    });
    if let Some(out) = out {
        fs::create_dir_all(out)
            .with_context(|| out.display().to_string())
            .map_err(failed)?;
        write_json(&out.join("annotation.json"), &doc)?;
        let h = &trace.heatmap;
        let mut heat = c2g_core::bundle::RgbImage::new(h.width, h.height);
        for (i, &t) in h.values.iter().enumerate() {
            heat.put(i % h.width, i / h.width, c2g_core::annotator::colormap(t));
        }
        heat.save_png(&out.join("heatmap.png")).map_err(failed)?;
        heatmap_overlay(&source.image, h)
            .save_png(&out.join("overlay.png"))
            .map_err(failed)?;
    }
    emit(&serde_json::to_string_pretty(&doc).unwrap());
    Ok(())
}

fn grasp(
    scene: &Path,
    source: &Path,
    click: (f64, f64),
    config: Option<&Path>,
    seed: Option<u64>,
    method: Method,
    out: &Path,
) -> Result<(), Failure> {
    let mut cfg = load_config(config, C2GConfig::default())?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let scene = load_scene_bundle(scene).map_err(invalid)?;
    let source = load_source_bundle(source).map_err(invalid)?;
    let output = run_method(&scene, &source, click, method, &cfg, &Silent).map_err(classify)?;
    write_grasp_output(&output, &source, out).map_err(classify)?;
    let r = &output.result;
    emit(
        &serde_json::to_string_pretty(&json!({
            "result": out.join("result.json"),
            "cost": r.cost,
            "collision_ok": r.collision_ok,
            "finger_segment": r.finger_segment,
            "area_size": r.area.len(),
        }))
        .unwrap(),
    );
    Ok(())
}

fn synth(preset: Preset, out: &Path, seed: u64) -> Result<(), Failure> {
    let trial = make_trial(preset, &TrialConfig::default(), seed, 0).map_err(failed)?;
    fs::create_dir_all(out)
        .with_context(|| out.display().to_string())
        .map_err(failed)?;
    write_scene_bundle(&trial.scene, &out.join("scene")).map_err(failed)?;
    write_source_bundle(&trial.source, &out.join("source")).map_err(failed)?;
    trial.truth.write(&out.join("ground_truth")).map_err(failed)?;
    let other = Label {
        side: trial.target.side.opposite(),
        ..trial.target
    };
    let (w, h) = (trial.source.image.width, trial.source.image.height);
    let other_click = most_interior_pixel(&trial.source_labels, w, h, other.id());
    let doc = json!({
        "preset": preset,
        "seed": seed,
        "click": [trial.click.0, trial.click.1],
        "target": {"part": trial.target.part_name(), "side": trial.target.side},
        "other_click": other_click.map(|(u, v)| [u as f64, v as f64]),
        "scene": "scene",
        "source": "source",
        "ground_truth": "ground_truth",
    });
    write_json(&out.join("trial.json"), &doc)?;
    emit(&serde_json::to_string_pretty(&doc).unwrap());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn eval(
    trials: usize,
    methods: &[Method],
    seed: u64,
    preset: Preset,
    config: Option<&Path>,
    out: Option<&Path>,
    quiet: bool,
) -> Result<(), Failure> {
    let mut cfg = EvalConfig {
        preset,
        ..Default::default()
    };
    cfg.pipeline = load_config(config, cfg.pipeline)?;
    let progress = |r: &c2g_core::eval::TrialRecord| {
        if !quiet {
            eprintln!("trial {:>3} {:<10} {}", r.trial, r.method.name(), r.outcome.name());
        }
    };
    let report = offline_eval(trials, methods, &cfg, seed, &progress).map_err(invalid)?;
    let table = report.table();
    let json = report.to_json();
    if let Some(out) = out {
        fs::create_dir_all(out)
            .with_context(|| out.display().to_string())
            .map_err(failed)?;
        fs::write(out.join("eval.json"), &json).map_err(failed)?;
        fs::write(out.join("eval.txt"), &table).map_err(failed)?;
    }
    emit(&format!("{table}{json}"));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clicks_parse() {
        assert_eq!(parse_click("12.5, 3"), Ok((12.5, 3.0)));
        assert!(parse_click("1").is_err());
        assert!(parse_click("1,2,3").is_err());
        assert!(parse_click("a,2").is_err());
    }
}
