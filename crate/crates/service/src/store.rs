//! Content-addressed bundle storage under the data directory.
//!
//! Layout: `<data>/scenes/<id>/` and `<data>/sources/<id>/`, where `id` is the
//! hex SHA-256 of the bundle's files (see [`content_id`]).

use std::collections::HashMap;
use std::fs;
use std::path::{Component, Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use c2g_core::bundle::{
    bundle_files, detect_bundle_kind, load_scene_bundle, load_source_bundle, BundleError, BundleKind, SceneBundle,
    SourceBundle,
};
use c2g_core::pipeline::{prepare_scene, C2GConfig, PipelineError, PreparedScene};
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{0}")]
    Bundle(#[from] BundleError),
    #[error("{0}")]
    Upload(String),
    #[error("expected a {expected} bundle, got a {got} bundle")]
    WrongKind { expected: &'static str, got: &'static str },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn kind_name(kind: BundleKind) -> &'static str {
    match kind {
        BundleKind::Scene => "scene",
        BundleKind::Source => "source",
    }
}

/// Digest over `(relative path, length, bytes)` of every bundle file, in
/// manifest order.
pub fn content_id(dir: &Path) -> Result<String, StoreError> {
    let mut h = Sha256::new();
    for rel in bundle_files(dir)? {
        let path = dir.join(&rel);
        let bytes = fs::read(&path).map_err(io(&path))?;
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0]);
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Rejects absolute paths and `..` in uploaded file names.
pub fn safe_relative(name: &str) -> Option<PathBuf> {
    let p = PathBuf::from(name);
    let ok = !name.is_empty() && p.components().all(|c| matches!(c, Component::Normal(_)));
    ok.then_some(p)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Slot {
    Scenes,
    Sources,
}

impl Slot {
    fn dir(self) -> &'static str {
        match self {
            Slot::Scenes => "scenes",
            Slot::Sources => "sources",
        }
    }

    fn kind(self) -> BundleKind {
        match self {
            Slot::Scenes => BundleKind::Scene,
            Slot::Sources => BundleKind::Source,
        }
    }
}

pub struct Store {
    root: PathBuf,
    scenes: RwLock<HashMap<String, Arc<SceneBundle>>>,
    sources: RwLock<HashMap<String, Arc<SourceBundle>>>,
    prepared: Mutex<HashMap<(String, String), Arc<PreparedScene>>>,
}

impl Store {
    /// Opens `root`, loading stored bundles and importing any bundle
    /// directories placed directly inside it (e.g. `c2g synth` output).
    pub fn open(root: &Path) -> Result<Self, StoreError> {
        for slot in [Slot::Scenes, Slot::Sources] {
            let d = root.join(slot.dir());
            fs::create_dir_all(&d).map_err(io(&d))?;
        }
        let store = Self {
            root: root.to_path_buf(),
            scenes: RwLock::new(HashMap::new()),
            sources: RwLock::new(HashMap::new()),
            prepared: Mutex::new(HashMap::new()),
        };
        for slot in [Slot::Scenes, Slot::Sources] {
            let d = root.join(slot.dir());
            let mut entries: Vec<PathBuf> = fs::read_dir(&d)
                .map_err(io(&d))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_dir())
                .collect();
            entries.sort();
            for dir in entries {
                let id = dir.file_name().unwrap().to_string_lossy().into_owned();
                if id.starts_with('.') {
                    continue;
                }
                store.load(slot, &id, &dir)?;
            }
        }
        let mut extra: Vec<PathBuf> = fs::read_dir(root)
            .map_err(io(root))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir() && p.join(c2g_core::bundle::MANIFEST).is_file())
            .collect();
        extra.sort();
        for dir in extra {
            store.import(&dir)?;
        }
        Ok(store)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn load(&self, slot: Slot, id: &str, dir: &Path) -> Result<(), StoreError> {
        match slot {
            Slot::Scenes => {
                let b = load_scene_bundle(dir)?;
                self.scenes.write().unwrap().insert(id.to_string(), Arc::new(b));
            }
            Slot::Sources => {
                let b = load_source_bundle(dir)?;
                self.sources.write().unwrap().insert(id.to_string(), Arc::new(b));
            }
        }
        Ok(())
    }

    /// Copies a bundle directory into the store. Returns its kind and id.
    pub fn import(&self, dir: &Path) -> Result<(BundleKind, String), StoreError> {
        let kind = detect_bundle_kind(dir)?;
        let slot = match kind {
            BundleKind::Scene => Slot::Scenes,
            BundleKind::Source => Slot::Sources,
        };
        let files: Vec<(PathBuf, Vec<u8>)> = bundle_files(dir)?
            .into_iter()
            .map(|rel| {
                let path = dir.join(&rel);
                fs::read(&path).map(|b| (rel, b)).map_err(io(&path))
            })
            .collect::<Result<_, _>>()?;
        let id = self.put(slot, files)?;
        Ok((kind, id))
    }

    pub fn put_scene(&self, files: Vec<(PathBuf, Vec<u8>)>) -> Result<String, StoreError> {
        self.put(Slot::Scenes, files)
    }

    pub fn put_source(&self, files: Vec<(PathBuf, Vec<u8>)>) -> Result<String, StoreError> {
        self.put(Slot::Sources, files)
    }

    /// Writes the files to a staging directory, validates the bundle, and
    /// moves it to its content address. Re-uploads return the existing id.
    fn put(&self, slot: Slot, files: Vec<(PathBuf, Vec<u8>)>) -> Result<String, StoreError> {
        if files.is_empty() {
            return Err(StoreError::Upload("no files in upload".into()));
        }
        let base = self.root.join(slot.dir());
        let stage = tempdir_in(&base)?;
        let result = (|| {
            for (rel, bytes) in &files {
                let path = stage.join(rel);
                if let Some(parent) = path.parent() {
                    fs::create_dir_all(parent).map_err(io(parent))?;
                }
                fs::write(&path, bytes).map_err(io(&path))?;
            }
            let kind = detect_bundle_kind(&stage)?;
            if kind != slot.kind() {
                return Err(StoreError::WrongKind {
                    expected: kind_name(slot.kind()),
                    got: kind_name(kind),
                });
            }
            let id = content_id(&stage)?;
            let known = match slot {
                Slot::Scenes => self.scenes.read().unwrap().contains_key(&id),
                Slot::Sources => self.sources.read().unwrap().contains_key(&id),
            };
            if known {
                return Ok(id);
            }
            self.load(slot, &id, &stage)?;
            let dest = base.join(&id);
            if dest.exists() {
                fs::remove_dir_all(&dest).map_err(io(&dest))?;
            }
            fs::rename(&stage, &dest).map_err(io(&dest))?;
            Ok(id)
        })();
        if stage.exists() {
            let _ = fs::remove_dir_all(&stage);
        }
        result
    }

    pub fn scene(&self, id: &str) -> Option<Arc<SceneBundle>> {
        self.scenes.read().unwrap().get(id).cloned()
    }

    pub fn source(&self, id: &str) -> Option<Arc<SourceBundle>> {
        self.sources.read().unwrap().get(id).cloned()
    }

    pub fn scene_ids(&self) -> Vec<String> {
        let mut v: Vec<String> = self.scenes.read().unwrap().keys().cloned().collect();
        v.sort();
        v
    }

    pub fn source_ids(&self) -> Vec<String> {
        let mut v: Vec<String> = self.sources.read().unwrap().keys().cloned().collect();
        v.sort();
        v
    }

    /// Field and voxel grid for a scene, cached per fusion settings.
    pub fn prepared(
        &self,
        id: &str,
        scene: &SceneBundle,
        cfg: &C2GConfig,
    ) -> Result<Arc<PreparedScene>, PipelineError> {
        let key = (
            id.to_string(),
            serde_json::to_string(&cfg.fusion).expect("fusion config serializes"),
        );
        if let Some(p) = self.prepared.lock().unwrap().get(&key) {
            return Ok(p.clone());
        }
        let p = Arc::new(prepare_scene(scene, cfg)?);
        self.prepared.lock().unwrap().entry(key).or_insert(p.clone());
        Ok(p)
    }
}

fn tempdir_in(base: &Path) -> Result<PathBuf, StoreError> {
    use std::sync::atomic::{AtomicU64, Ordering};
    static NEXT: AtomicU64 = AtomicU64::new(0);
    loop {
        let n = NEXT.fetch_add(1, Ordering::Relaxed);
        let p = base.join(format!(".upload-{}-{n}", std::process::id()));
        match fs::create_dir(&p) {
            Ok(()) => return Ok(p),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(io(&p)(e)),
        }
    }
}
