//! Grasp job registry. Jobs move queued → running → done | failed.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use c2g_core::grounding::Grounding;
use c2g_core::optimizer::PoseCandidate;
use c2g_core::pipeline::{GraspResult, Observer, Stage};
use serde::Serialize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Clone, Debug, Serialize)]
pub struct Progress {
    pub stage: Option<&'static str>,
    pub fraction: f64,
    pub candidates_done: usize,
    pub candidates_total: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct JobError {
    pub stage: String,
    pub message: String,
}

/// Snapshot served by `GET /jobs/{id}`.
#[derive(Clone, Debug, Serialize)]
pub struct JobView {
    pub id: String,
    pub scene_id: String,
    pub source_id: String,
    pub state: JobState,
    pub progress: Progress,
    /// Loss trace of the best collision-free candidate finished so far.
    pub loss_trace: Vec<f64>,
    pub best_cost: Option<f64>,
    pub error: Option<JobError>,
}

pub struct Job {
    view: Mutex<JobView>,
    result: Mutex<Option<Arc<(GraspResult, Grounding)>>>,
}

impl Job {
    pub fn view(&self) -> JobView {
        self.view.lock().unwrap().clone()
    }

    pub fn result(&self) -> Option<Arc<(GraspResult, Grounding)>> {
        self.result.lock().unwrap().clone()
    }

    pub fn start(&self) {
        let mut v = self.view.lock().unwrap();
        if v.state == JobState::Queued {
            v.state = JobState::Running;
        }
    }

    pub fn finish(&self, result: GraspResult, grounding: Grounding) {
        let mut v = self.view.lock().unwrap();
        v.state = JobState::Done;
        v.progress.fraction = 1.0;
        v.best_cost = Some(result.cost);
        v.loss_trace = result.optimizer.trace.clone();
        *self.result.lock().unwrap() = Some(Arc::new((result, grounding)));
    }

    pub fn fail(&self, stage: &str, message: String) {
        let mut v = self.view.lock().unwrap();
        v.state = JobState::Failed;
        v.error = Some(JobError {
            stage: stage.to_string(),
            message,
        });
    }

    fn bump(v: &mut JobView, fraction: f64) {
        v.progress.fraction = v.progress.fraction.max(fraction);
    }
}

impl Observer for Job {
    fn stage(&self, stage: Stage) {
        let mut v = self.view.lock().unwrap();
        v.progress.stage = Some(stage.name());
        let f = match stage {
            Stage::Annotation | Stage::Config | Stage::Input => 0.0,
            Stage::Field => 0.05,
            Stage::Grounding => 0.15,
            Stage::Optimizer => 0.2,
        };
        Job::bump(&mut v, f);
    }

    fn candidate(&self, done: usize, total: usize, c: &PoseCandidate) {
        let mut v = self.view.lock().unwrap();
        v.progress.candidates_done = v.progress.candidates_done.max(done);
        v.progress.candidates_total = total;
        Job::bump(&mut v, 0.2 + 0.8 * done as f64 / total.max(1) as f64);
        if c.collision_ok && v.best_cost.is_none_or(|b| c.final_cost < b) {
            v.best_cost = Some(c.final_cost);
            v.loss_trace = c.trace.clone();
        }
    }
}

#[derive(Default)]
pub struct Registry {
    next: AtomicU64,
    jobs: RwLock<HashMap<String, Arc<Job>>>,
    /// Most recent finished job per scene, for voxel slices.
    latest: RwLock<HashMap<String, String>>,
}

impl Registry {
    pub fn create(&self, scene_id: &str, source_id: &str) -> (String, Arc<Job>) {
        let n = self.next.fetch_add(1, Ordering::Relaxed) + 1;
        let id = format!("job-{n:06}");
        let job = Arc::new(Job {
            view: Mutex::new(JobView {
                id: id.clone(),
                scene_id: scene_id.to_string(),
                source_id: source_id.to_string(),
                state: JobState::Queued,
                progress: Progress {
                    stage: None,
                    fraction: 0.0,
                    candidates_done: 0,
                    candidates_total: 0,
                },
                loss_trace: Vec::new(),
                best_cost: None,
                error: None,
            }),
            result: Mutex::new(None),
        });
        self.jobs.write().unwrap().insert(id.clone(), job.clone());
        (id, job)
    }

    pub fn get(&self, id: &str) -> Option<Arc<Job>> {
        self.jobs.read().unwrap().get(id).cloned()
    }

    pub fn mark_latest(&self, scene_id: &str, job_id: &str) {
        self.latest
            .write()
            .unwrap()
            .insert(scene_id.to_string(), job_id.to_string());
    }

    pub fn latest_for(&self, scene_id: &str) -> Option<Arc<Job>> {
        let id = self.latest.read().unwrap().get(scene_id).cloned()?;
        self.get(&id)
    }
}
