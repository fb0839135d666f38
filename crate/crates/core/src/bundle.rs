//! Scene and source bundles: manifests, ingestion and validation.
//!
//! A bundle is a directory holding `manifest.json` plus the files it references.
//! Depth maps and feature maps use the `C2GT` tensor container, RGB images are PNG.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Camera, GeometryError, RigidTransform, Vec3};
use crate::tensor::{load_tensor, save_tensor, Tensor, TensorError};

pub const MANIFEST: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Tensor {
        path: PathBuf,
        #[source]
        source: TensorError,
    },
    #[error("{path}: png: {message}")]
    Png { path: PathBuf, message: String },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("view '{view}', field '{field}': {message}")]
    View {
        view: String,
        field: String,
        message: String,
    },
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
}

impl BundleError {
    fn view(view: &str, field: &str, message: impl Into<String>) -> Self {
        Self::View {
            view: view.to_string(),
            field: field.to_string(),
            message: message.into(),
        }
    }

    fn invalid(field: &str, message: impl Into<String>) -> Self {
        Self::Invalid {
            field: field.to_string(),
            message: message.into(),
        }
    }
}

/// The two feature extractor families fused by the field.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureFamily {
    Dino,
    Sd,
}

impl FeatureFamily {
    pub const ALL: [FeatureFamily; 2] = [FeatureFamily::Dino, FeatureFamily::Sd];

    pub fn name(self) -> &'static str {
        match self {
            FeatureFamily::Dino => "dino",
            FeatureFamily::Sd => "sd",
        }
    }
}

impl std::fmt::Display for FeatureFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// 8-bit RGB raster, row-major, 3 bytes per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn put(&mut self, col: usize, row: usize, rgb: [u8; 3]) {
        let i = 3 * (row * self.width + col);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn get(&self, col: usize, row: usize) -> [u8; 3] {
        let i = 3 * (row * self.width + col);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn encode_png(&self) -> Result<Vec<u8>, String> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc.write_header().map_err(|e| e.to_string())?;
            writer.write_image_data(&self.data).map_err(|e| e.to_string())?;
        }
        Ok(out)
    }

    pub fn save_png(&self, path: &Path) -> Result<(), BundleError> {
        let bytes = self.encode_png().map_err(|message| BundleError::Png {
            path: path.to_path_buf(),
            message,
        })?;
        fs::write(path, bytes).map_err(|source| BundleError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load_png(path: &Path) -> Result<Self, BundleError> {
        let file = File::open(path).map_err(|source| BundleError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let png_err = |message: String| BundleError::Png {
            path: path.to_path_buf(),
            message,
        };
        let mut decoder = png::Decoder::new(BufReader::new(file));
        decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = decoder.read_info().map_err(|e| png_err(e.to_string()))?;
        let mut buf = vec![
            0;
            reader
                .output_buffer_size()
                .ok_or_else(|| png_err("image too large".into()))?
        ];
        let info = reader.next_frame(&mut buf).map_err(|e| png_err(e.to_string()))?;
        let (w, h) = (info.width as usize, info.height as usize);
        let bytes = &buf[..info.buffer_size()];
        let data = match info.color_type {
            png::ColorType::Rgb => bytes.to_vec(),
            png::ColorType::Rgba => bytes.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
            png::ColorType::Grayscale => bytes.iter().flat_map(|&g| [g, g, g]).collect(),
            png::ColorType::GrayscaleAlpha => bytes.chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
            other => return Err(png_err(format!("unsupported color type {other:?}"))),
        };
        Ok(Self {
            width: w,
            height: h,
            data,
        })
    }
}

/// Metric depth (camera z, m). Zero or non-finite entries are invalid.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
}

impl DepthMap {
    pub fn from_tensor(t: Tensor) -> Result<Self, String> {
        match *t.shape() {
            [h, w] => Ok(Self {
                width: w,
                height: h,
                values: t.into_data(),
            }),
            ref s => Err(format!("depth must be H x W, got shape {s:?}")),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.height, self.width], self.values.clone()).expect("consistent depth map")
    }

    #[inline]
    pub fn is_valid_value(d: f32) -> bool {
        d.is_finite() && d > 0.0
    }

    #[inline]
    pub fn at(&self, col: usize, row: usize) -> f32 {
        self.values[row * self.width + col]
    }

    pub fn invalid_count(&self) -> usize {
        self.values.iter().filter(|&&d| !Self::is_valid_value(d)).count()
    }
}

/// Dense feature map `H x W x C`, row-major with channels innermost.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self, String> {
        if height == 0 || width == 0 || channels == 0 {
            return Err("feature map dimensions must be positive".into());
        }
        if data.len() != height * width * channels {
            return Err(format!(
                "feature map {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            ));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn from_tensor(t: Tensor) -> Result<Self, String> {
        match *t.shape() {
            [h, w, c] => Self::new(h, w, c, t.into_data()),
            ref s => Err(format!("features must be H x W x C, got shape {s:?}")),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.height, self.width, self.channels], self.data.clone()).expect("consistent feature map")
    }

    #[inline]
    pub fn pixel(&self, col: usize, row: usize) -> &[f32] {
        let i = (row * self.width + col) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn pixel_f64(&self, col: usize, row: usize) -> Vec<f64> {
        self.pixel(col, row).iter().map(|&v| v as f64).collect()
    }

    /// Horizontally mirrored copy.
    pub fn mirrored(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for row in 0..self.height {
            for col in (0..self.width).rev() {
                data.extend_from_slice(self.pixel(col, row));
            }
        }
        Self { data, ..self.clone() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CameraView {
    pub name: String,
    pub camera: Camera,
    pub rgb: RgbImage,
    pub depth: DepthMap,
    pub dino: FeatureMap,
    pub sd: FeatureMap,
}

impl CameraView {
    pub fn features(&self, family: FeatureFamily) -> &FeatureMap {
        match family {
            FeatureFamily::Dino => &self.dino,
            FeatureFamily::Sd => &self.sd,
        }
    }

    fn validate(&self) -> Result<(), BundleError> {
        let n = &self.name;
        if self.rgb.width != self.camera.width || self.rgb.height != self.camera.height {
            return Err(BundleError::view(n, "rgb", "image size disagrees with camera"));
        }
        if self.depth.width != self.rgb.width || self.depth.height != self.rgb.height {
            return Err(BundleError::view(
                n,
                "depth",
                format!(
                    "depth is {}x{} but rgb is {}x{}",
                    self.depth.height, self.depth.width, self.rgb.height, self.rgb.width
                ),
            ));
        }
        for family in FeatureFamily::ALL {
            let f = self.features(family);
            if f.width > self.rgb.width || f.height > self.rgb.height {
                return Err(BundleError::view(
                    n,
                    family.name(),
                    format!(
                        "feature grid {}x{} larger than image {}x{}",
                        f.height, f.width, self.rgb.height, self.rgb.width
                    ),
                ));
            }
        }
        Ok(())
    }
}

/// Axis-aligned box over the tabletop.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Workspace {
    pub origin: [f64; 3],
    pub size: [f64; 3],
}

impl Workspace {
    pub fn origin(&self) -> Vec3 {
        Vec3::from(self.origin)
    }

    pub fn size(&self) -> Vec3 {
        Vec3::from(self.size)
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|k| p[k] >= self.origin[k] && p[k] <= self.origin[k] + self.size[k])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneBundle {
    pub views: Vec<CameraView>,
    pub workspace: Workspace,
    pub voxel_size: f64,
}

impl SceneBundle {
    pub fn new(views: Vec<CameraView>, workspace: Workspace, voxel_size: f64) -> Result<Self, BundleError> {
        let b = Self {
            views,
            workspace,
            voxel_size,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), BundleError> {
        if self.views.is_empty() {
            return Err(BundleError::invalid("views", "at least one view required"));
        }
        if !self.workspace.size.iter().all(|&s| s > 0.0 && s.is_finite())
            || !self.workspace.origin.iter().all(|o| o.is_finite())
        {
            return Err(BundleError::invalid("workspace", "size must be positive and finite"));
        }
        if !(self.voxel_size > 0.0 && self.voxel_size.is_finite()) {
            return Err(BundleError::invalid("workspace.voxel", "voxel size must be positive"));
        }
        let first = &self.views[0];
        for v in &self.views {
            v.validate()?;
            if self.views.iter().filter(|o| o.name == v.name).count() > 1 {
                return Err(BundleError::view(&v.name, "name", "duplicate view name"));
            }
            for family in FeatureFamily::ALL {
                let (c, c0) = (v.features(family).channels, first.features(family).channels);
                if c != c0 {
                    return Err(BundleError::view(
                        &v.name,
                        family.name(),
                        format!("{c} channels but view '{}' has {c0}", first.name),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn channels(&self, family: FeatureFamily) -> usize {
        self.views[0].features(family).channels
    }

    pub fn view(&self, name: &str) -> Option<&CameraView> {
        self.views.iter().find(|v| v.name == name)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SourceBundle {
    pub image: RgbImage,
    pub dino: FeatureMap,
    pub sd: FeatureMap,
}

impl SourceBundle {
    pub fn new(image: RgbImage, dino: FeatureMap, sd: FeatureMap) -> Result<Self, BundleError> {
        let b = Self { image, dino, sd };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), BundleError> {
        for family in FeatureFamily::ALL {
            let f = self.features(family);
            if f.width > self.image.width || f.height > self.image.height {
                return Err(BundleError::invalid(
                    family.name(),
                    format!(
                        "feature grid {}x{} larger than image {}x{}",
                        f.height, f.width, self.image.height, self.image.width
                    ),
                ));
            }
        }
        Ok(())
    }

    pub fn features(&self, family: FeatureFamily) -> &FeatureMap {
        match family {
            FeatureFamily::Dino => &self.dino,
            FeatureFamily::Sd => &self.sd,
        }
    }

    /// Checks the source against a scene's channel counts.
    pub fn check_compatible(&self, scene: &SceneBundle) -> Result<(), BundleError> {
        for family in FeatureFamily::ALL {
            let (c, s) = (self.features(family).channels, scene.channels(family));
            if c != s {
                return Err(BundleError::invalid(
                    family.name(),
                    format!("source has {c} channels, scene has {s}"),
                ));
            }
        }
        Ok(())
    }

    /// Left-right mirror of image and feature maps.
    pub fn mirrored(&self) -> Self {
        let mut image = RgbImage::new(self.image.width, self.image.height);
        for row in 0..self.image.height {
            for col in 0..self.image.width {
                image.put(self.image.width - 1 - col, row, self.image.get(col, row));
            }
        }
        Self {
            image,
            dino: self.dino.mirrored(),
            sd: self.sd.mirrored(),
        }
    }
}

// ---------------------------------------------------------------------------
// manifests

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeaturePaths {
    pub dino: String,
    pub sd: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewManifest {
    pub name: String,
    pub rgb: String,
    pub depth: String,
    pub intrinsics: Vec<f64>,
    pub cam_to_world: Vec<f64>,
    pub features: FeaturePaths,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkspaceManifest {
    pub origin: [f64; 3],
    pub size: [f64; 3],
    pub voxel: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneManifest {
    pub version: u32,
    pub views: Vec<ViewManifest>,
    pub workspace: WorkspaceManifest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceManifest {
    pub version: u32,
    pub image: String,
    pub features: FeaturePaths,
}

/// Which kind of bundle a manifest describes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BundleKind {
    Scene,
    Source,
}

pub fn detect_bundle_kind(dir: &Path) -> Result<BundleKind, BundleError> {
    let value: serde_json::Value = read_json(&dir.join(MANIFEST))?;
    if value.get("views").is_some() {
        Ok(BundleKind::Scene)
    } else if value.get("image").is_some() {
        Ok(BundleKind::Source)
    } else {
        Err(BundleError::Manifest("neither a scene nor a source manifest".into()))
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, BundleError> {
    let file = File::open(path).map_err(|source| BundleError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_reader(BufReader::new(file)).map_err(|e| BundleError::Manifest(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), BundleError> {
    let file = File::create(path).map_err(|source| BundleError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::to_writer_pretty(BufWriter::new(file), value)
        .map_err(|e| BundleError::Manifest(format!("{}: {e}", path.display())))
}

fn load_tensor_at(path: &Path) -> Result<Tensor, BundleError> {
    load_tensor(path).map_err(|source| BundleError::Tensor {
        path: path.to_path_buf(),
        source,
    })
}

fn save_tensor_at(t: &Tensor, path: &Path) -> Result<(), BundleError> {
    save_tensor(t, path).map(|_| ()).map_err(|source| BundleError::Tensor {
        path: path.to_path_buf(),
        source,
    })
}

fn ensure_dir(dir: &Path) -> Result<(), BundleError> {
    fs::create_dir_all(dir).map_err(|source| BundleError::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn load_features(dir: &Path, rel: &str, view: &str, family: FeatureFamily) -> Result<FeatureMap, BundleError> {
    let t = load_tensor_at(&dir.join(rel))?;
    FeatureMap::from_tensor(t).map_err(|m| BundleError::view(view, family.name(), m))
}

pub fn load_scene_bundle(dir: &Path) -> Result<SceneBundle, BundleError> {
    let manifest: SceneManifest = read_json(&dir.join(MANIFEST))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(BundleError::Manifest(format!(
            "unsupported version {}",
            manifest.version
        )));
    }
    let mut views = Vec::with_capacity(manifest.views.len());
    for vm in &manifest.views {
        let name = vm.name.as_str();
        let rgb = RgbImage::load_png(&dir.join(&vm.rgb))?;
        let depth = DepthMap::from_tensor(load_tensor_at(&dir.join(&vm.depth))?)
            .map_err(|m| BundleError::view(name, "depth", m))?;
        let pose = RigidTransform::from_row_major(&vm.cam_to_world)
            .map_err(|e| BundleError::view(name, "cam_to_world", e.to_string()))?;
        let camera = Camera::from_matrix(&vm.intrinsics, rgb.width, rgb.height, pose).map_err(|e| {
            let field = match e {
                GeometryError::InvalidRotation { .. } => "cam_to_world",
                _ => "intrinsics",
            };
            BundleError::view(name, field, e.to_string())
        })?;
        let dino = load_features(dir, &vm.features.dino, name, FeatureFamily::Dino)?;
        let sd = load_features(dir, &vm.features.sd, name, FeatureFamily::Sd)?;
        views.push(CameraView {
            name: vm.name.clone(),
            camera,
            rgb,
            depth,
            dino,
            sd,
        });
    }
    let ws = &manifest.workspace;
    SceneBundle::new(
        views,
        Workspace {
            origin: ws.origin,
            size: ws.size,
        },
        ws.voxel,
    )
}

pub fn scene_manifest(bundle: &SceneBundle) -> SceneManifest {
    SceneManifest {
        version: MANIFEST_VERSION,
        views: bundle
            .views
            .iter()
            .map(|v| ViewManifest {
                name: v.name.clone(),
                rgb: format!("{}_rgb.png", v.name),
                depth: format!("{}_depth.tsr", v.name),
                intrinsics: v.camera.intrinsic_matrix().to_vec(),
                cam_to_world: v.camera.cam_to_world().to_row_major().to_vec(),
                features: FeaturePaths {
                    dino: format!("{}_dino.tsr", v.name),
                    sd: format!("{}_sd.tsr", v.name),
                },
            })
            .collect(),
        workspace: WorkspaceManifest {
            origin: bundle.workspace.origin,
            size: bundle.workspace.size,
            voxel: bundle.voxel_size,
        },
    }
}

pub fn write_scene_bundle(bundle: &SceneBundle, dir: &Path) -> Result<(), BundleError> {
    ensure_dir(dir)?;
    let manifest = scene_manifest(bundle);
    for (v, vm) in bundle.views.iter().zip(&manifest.views) {
        v.rgb.save_png(&dir.join(&vm.rgb))?;
        save_tensor_at(&v.depth.to_tensor(), &dir.join(&vm.depth))?;
        save_tensor_at(&v.dino.to_tensor(), &dir.join(&vm.features.dino))?;
        save_tensor_at(&v.sd.to_tensor(), &dir.join(&vm.features.sd))?;
    }
    write_json(&dir.join(MANIFEST), &manifest)
}

pub fn load_source_bundle(dir: &Path) -> Result<SourceBundle, BundleError> {
    let manifest: SourceManifest = read_json(&dir.join(MANIFEST))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(BundleError::Manifest(format!(
            "unsupported version {}",
            manifest.version
        )));
    }
    let image = RgbImage::load_png(&dir.join(&manifest.image))?;
    let dino = FeatureMap::from_tensor(load_tensor_at(&dir.join(&manifest.features.dino))?)
        .map_err(|m| BundleError::invalid("dino", m))?;
    let sd = FeatureMap::from_tensor(load_tensor_at(&dir.join(&manifest.features.sd))?)
        .map_err(|m| BundleError::invalid("sd", m))?;
    SourceBundle::new(image, dino, sd)
}

pub fn write_source_bundle(bundle: &SourceBundle, dir: &Path) -> Result<(), BundleError> {
    ensure_dir(dir)?;
    let manifest = SourceManifest {
        version: MANIFEST_VERSION,
        image: "image.png".into(),
        features: FeaturePaths {
            dino: "dino.tsr".into(),
            sd: "sd.tsr".into(),
        },
    };
    bundle.image.save_png(&dir.join(&manifest.image))?;
    save_tensor_at(&bundle.dino.to_tensor(), &dir.join(&manifest.features.dino))?;
    save_tensor_at(&bundle.sd.to_tensor(), &dir.join(&manifest.features.sd))?;
    write_json(&dir.join(MANIFEST), &manifest)
}

/// Files referenced by a bundle manifest, manifest first.
pub fn bundle_files(dir: &Path) -> Result<Vec<PathBuf>, BundleError> {
    let mut files = vec![PathBuf::from(MANIFEST)];
    match detect_bundle_kind(dir)? {
        BundleKind::Scene => {
            let m: SceneManifest = read_json(&dir.join(MANIFEST))?;
            for v in m.views {
                files.extend([v.rgb, v.depth, v.features.dino, v.features.sd].map(PathBuf::from));
            }
        }
        BundleKind::Source => {
            let m: SourceManifest = read_json(&dir.join(MANIFEST))?;
            files.extend([m.image, m.features.dino, m.features.sd].map(PathBuf::from));
        }
    }
    Ok(files)
}
