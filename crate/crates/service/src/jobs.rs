//! Pair jobs, the job store, the model registry and the worker pool.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::mpsc::{self, Receiver, SyncSender, TrySendError};
use std::sync::{Arc, Mutex, RwLock};
use std::thread;

use serde::Serialize;
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use shoeprint_core::evalkit::Category;
use shoeprint_core::forest::{self, ForestModel, FEATURE_NAMES, INDICATOR_NAMES};
use shoeprint_core::icp::{AlignmentResult, Direction};
use shoeprint_core::imgproc::GrayImage;
use shoeprint_core::pipeline::{self, PipelineConfig, PrintOptions};
use shoeprint_core::pointcloud::{self, PointCloud, RigidTransform};
use shoeprint_core::seed;

use crate::error::{Result, ServiceError};

/// Overlay layers are downsampled to at most this many points.
pub const MAX_OVERLAY_POINTS: usize = 5000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    Queued,
    Aligning,
    Featurizing,
    Done,
    Failed,
}

#[derive(Clone, Debug, Serialize)]
pub struct ImageRef {
    pub filename: Option<String>,
    pub sha256: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct JobError {
    pub code: String,
    pub message: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct AlignmentSummary {
    /// Maps K onto Q.
    pub transform: RigidTransform,
    pub objective: f64,
    pub selection_score: f64,
    pub direction: Direction,
    pub start_used: usize,
    pub rate_used: f64,
    pub candidates: usize,
}

impl From<&AlignmentResult> for AlignmentSummary {
    fn from(a: &AlignmentResult) -> Self {
        Self {
            transform: a.transform,
            objective: a.objective,
            selection_score: a.selection_score,
            direction: a.direction,
            start_used: a.start_used,
            rate_used: a.rate_used,
            candidates: a.candidates.len(),
        }
    }
}

/// Downsampled clouds for the alignment overlay, in bottom-origin pixel units.
#[derive(Clone, Debug, Serialize)]
pub struct Overlay {
    pub q: Vec<[f64; 2]>,
    pub k_star: Vec<[f64; 2]>,
    pub q_total: usize,
    pub k_total: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct PairJob {
    pub job_id: String,
    pub q_image: ImageRef,
    pub k_image: ImageRef,
    pub model_id: String,
    pub category: Category,
    pub seed: u64,
    pub status: JobStatus,
    pub alignment: Option<AlignmentSummary>,
    /// Feature name to value, in model column order; `null` marks an undefined metric.
    pub features: Option<Map<String, Value>>,
    pub posterior: Option<f64>,
    pub error: Option<JobError>,
    pub overlay: Option<Overlay>,
}

/// Synchronized map of jobs.
#[derive(Default)]
pub struct JobStore {
    jobs: Mutex<HashMap<String, PairJob>>,
}

impl JobStore {
    pub fn insert(&self, job: PairJob) {
        self.jobs.lock().unwrap().insert(job.job_id.clone(), job);
    }

    pub fn remove(&self, id: &str) {
        self.jobs.lock().unwrap().remove(id);
    }

    pub fn get(&self, id: &str) -> Option<PairJob> {
        self.jobs.lock().unwrap().get(id).cloned()
    }

    pub fn len(&self) -> usize {
        self.jobs.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Applies `f` and moves the job to `status`. Status never moves backwards.
    fn advance(&self, id: &str, status: JobStatus, f: impl FnOnce(&mut PairJob)) {
        if let Some(job) = self.jobs.lock().unwrap().get_mut(id) {
            if status >= job.status {
                f(job);
                job.status = status;
            }
        }
    }
}

/// Models loaded from a directory, keyed by file stem.
#[derive(Default)]
pub struct ModelRegistry {
    models: RwLock<BTreeMap<String, Arc<ForestModel>>>,
}

impl ModelRegistry {
    /// Loads every `*.json` model in `dir`.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let reg = ModelRegistry::default();
        let mut entries: Vec<_> = std::fs::read_dir(dir.as_ref())?.collect::<std::io::Result<_>>()?;
        entries.sort_by_key(|e| e.path());
        for e in entries {
            let path = e.path();
            if path.extension().and_then(|s| s.to_str()) != Some("json") {
                continue;
            }
            let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            match ForestModel::load(&path) {
                Ok(m) => reg.insert(id, m),
                Err(e) => log::warn!("skipping model {}: {e}", path.display()),
            }
        }
        Ok(reg)
    }

    pub fn insert(&self, id: impl Into<String>, model: ForestModel) {
        self.models.write().unwrap().insert(id.into(), Arc::new(model));
    }

    pub fn ids(&self) -> Vec<String> {
        self.models.read().unwrap().keys().cloned().collect()
    }

    /// The model named `default`, otherwise the first id in sort order.
    pub fn default_id(&self) -> Option<String> {
        let m = self.models.read().unwrap();
        if m.contains_key("default") {
            Some("default".into())
        } else {
            m.keys().next().cloned()
        }
    }

    pub fn resolve(&self, id: Option<&str>) -> Result<(String, Arc<ForestModel>)> {
        let id = match id {
            Some(id) => id.to_string(),
            None => self.default_id().ok_or(ServiceError::NoModel)?,
        };
        let model = self.models.read().unwrap().get(&id).cloned().ok_or_else(|| ServiceError::UnknownModel(id.clone()))?;
        Ok((id, model))
    }
}

pub fn parse_category(s: &str) -> Result<Category> {
    match s.to_ascii_lowercase().as_str() {
        "pristine" => Ok(Category::Pristine),
        "blurry" => Ok(Category::Blurry),
        "partial" => Ok(Category::Partial),
        _ => Err(ServiceError::BadRequest(format!("unknown category {s:?} (expected pristine, blurry or partial)"))),
    }
}

/// Posterior for one feature row. Models trained with category indicators get
/// the one-hot encoding of `category` appended.
pub fn posterior(model: &ForestModel, values: &[f64], category: Category) -> Result<f64> {
    if model.indicator_columns {
        let mut row = values.to_vec();
        row.extend((0..INDICATOR_NAMES.len()).map(|i| (i == category.index()) as u8 as f64));
        Ok(model.predict(&forest::feature_columns_with_indicators(), &row)?)
    } else {
        Ok(model.predict(&forest::feature_columns(), values)?)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Job seed from the service seed and the job content, so resubmitting the
/// same pair against the same model repeats every random draw.
pub fn job_seed(service_seed: u64, q: &[u8], k: &[u8], model_id: &str) -> u64 {
    let mut h = Sha256::new();
    for part in [q, k, model_id.as_bytes()] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part);
    }
    let d = h.finalize();
    let mut first = [0u8; 8];
    first.copy_from_slice(&d[..8]);
    seed::derive(service_seed, u64::from_le_bytes(first))
}

pub fn named_features(values: &[f64]) -> Map<String, Value> {
    FEATURE_NAMES
        .iter()
        .zip(values)
        .map(|(n, v)| (n.to_string(), serde_json::Number::from_f64(*v).map(Value::Number).unwrap_or(Value::Null)))
        .collect()
}

fn overlay_layer(cloud: &PointCloud, seed_value: u64) -> Vec<[f64; 2]> {
    if cloud.is_empty() {
        return Vec::new();
    }
    let rate = (MAX_OVERLAY_POINTS as f64 / cloud.len() as f64).min(1.0);
    pointcloud::downsample(cloud, rate, seed_value).map(|c| c.iter().map(|p| [p.x, p.y]).collect()).unwrap_or_default()
}

/// One unit of work for the pool.
pub struct Work {
    pub job_id: String,
    pub q: GrayImage,
    pub k: GrayImage,
    pub model: Arc<ForestModel>,
    pub category: Category,
    pub seed: u64,
}

/// Runs the whole pipeline for one job, recording progress in the store.
pub fn run_job(work: Work, store: &JobStore, base: &PipelineConfig) {
    let id = work.job_id.clone();
    let mut cfg = base.clone();
    cfg.seed = work.seed;
    store.advance(&id, JobStatus::Aligning, |_| {});
    let fail = |e: shoeprint_core::Error| {
        log::info!("job {id} failed: {e}");
        store.advance(&id, JobStatus::Failed, |j| j.error = Some(JobError { code: e.code().into(), message: e.to_string() }));
    };
    let prepared = pipeline::prepare_print(&work.q, PrintOptions::default(), &cfg)
        .and_then(|q| pipeline::prepare_print(&work.k, PrintOptions::default(), &cfg).map(|k| (q, k)));
    let (q, k) = match prepared {
        Ok(v) => v,
        Err(e) => return fail(e),
    };
    let alignment = match pipeline::align_prints(&q, &k, &cfg) {
        Ok(a) => a,
        Err(e) => return fail(e),
    };
    let summary = AlignmentSummary::from(&alignment);
    let k_star = alignment.aligned(&k.cloud);
    let overlay = Overlay {
        q: overlay_layer(&q.cloud, seed::derive_str(work.seed, "overlay-q")),
        k_star: overlay_layer(&k_star, seed::derive_str(work.seed, "overlay-k")),
        q_total: q.cloud.len(),
        k_total: k.cloud.len(),
    };
    store.advance(&id, JobStatus::Featurizing, |j| {
        j.alignment = Some(summary);
        j.overlay = Some(overlay);
    });
    let analysis = match pipeline::featurize_aligned(&q, &k, alignment, &cfg) {
        Ok(a) => a,
        Err(e) => return fail(e),
    };
    match posterior(&work.model, &analysis.features.values, work.category) {
        Ok(p) => store.advance(&id, JobStatus::Done, |j| {
            j.features = Some(named_features(&analysis.features.values));
            j.posterior = Some(p);
        }),
        Err(ServiceError::Core(e)) => fail(e),
        Err(e) => fail(shoeprint_core::Error::State(e.to_string())),
    }
}

/// Fixed-width pool of worker threads fed by a bounded queue.
pub struct WorkerPool {
    tx: SyncSender<Work>,
}

impl WorkerPool {
    /// Starts `width` workers. A pool of width 0 accepts jobs but never runs them.
    pub fn start(width: usize, queue_capacity: usize, store: Arc<JobStore>, cfg: PipelineConfig) -> Self {
        let (tx, rx) = mpsc::sync_channel::<Work>(queue_capacity);
        let rx: Arc<Mutex<Receiver<Work>>> = Arc::new(Mutex::new(rx));
        for i in 0..width {
            let rx = rx.clone();
            let store = store.clone();
            let cfg = cfg.clone();
            thread::Builder::new()
                .name(format!("pair-worker-{i}"))
                .spawn(move || loop {
                    let next = rx.lock().unwrap().recv();
                    match next {
                        Ok(work) => run_job(work, &store, &cfg),
                        Err(_) => break,
                    }
                })
                .expect("spawn worker thread");
        }
        if width == 0 {
            // Keep the receiver alive so submissions queue up instead of failing.
            std::mem::forget(rx);
        }
        Self { tx }
    }

    pub fn submit(&self, work: Work) -> Result<()> {
        match self.tx.try_send(work) {
            Ok(()) => Ok(()),
            Err(TrySendError::Full(_)) => Err(ServiceError::QueueFull),
            Err(TrySendError::Disconnected(_)) => Err(ServiceError::Core(shoeprint_core::Error::State("worker pool stopped".into()))),
        }
    }
}
