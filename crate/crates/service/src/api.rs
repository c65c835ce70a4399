//! HTTP routes.

use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::multipart::MultipartError;
use axum::extract::{DefaultBodyLimit, Multipart, Path, Query, State};
use axum::http::StatusCode;
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;
use tower_http::services::ServeDir;

use shoeprint_core::evalkit::{Category, Scenario};
use shoeprint_core::forest::FEATURE_NAMES;
use shoeprint_core::imgproc;
use shoeprint_core::pipeline::PipelineConfig;

use crate::error::{Result, ServiceError};
use crate::jobs::{self, ImageRef, JobStatus, JobStore, ModelRegistry, PairJob, WorkerPool, Work};
use crate::population::{self, Population};

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub seed: u64,
    pub workers: usize,
    pub queue_capacity: usize,
    /// Per-image upload limit in bytes.
    pub max_image_bytes: usize,
    pub pipeline: PipelineConfig,
    pub static_dir: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 1,
            queue_capacity: 64,
            max_image_bytes: 25 * 1024 * 1024,
            pipeline: PipelineConfig::default(),
            static_dir: None,
        }
    }
}

pub struct AppState {
    pub config: ServiceConfig,
    pub jobs: Arc<JobStore>,
    pub models: ModelRegistry,
    pub population: Population,
    pool: WorkerPool,
}

impl AppState {
    pub fn new(config: ServiceConfig, models: ModelRegistry, population: Population) -> Arc<Self> {
        let jobs = Arc::new(JobStore::default());
        let pool = WorkerPool::start(config.workers, config.queue_capacity, jobs.clone(), config.pipeline.clone());
        Arc::new(Self { config, jobs, models, population, pool })
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    // Two images plus multipart framing.
    let body_limit = 2 * state.config.max_image_bytes + 64 * 1024;
    let api = Router::new()
        .route("/api/health", get(health))
        .route("/api/models", get(list_models))
        .route("/api/pairs", post(create_pair).layer(DefaultBodyLimit::max(body_limit)))
        .route("/api/pairs/{id}", get(get_pair))
        .route("/api/population", get(list_population))
        .route("/api/population/{metric}", get(get_population));
    let app = match &state.config.static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.fallback(|| async { (StatusCode::NOT_FOUND, Json(json!({"error": {"code": "NotFound", "message": "no such route"}}))) }),
    };
    app.with_state(state)
}

async fn health(State(st): State<Arc<AppState>>) -> impl IntoResponse {
    Json(json!({ "status": "ok", "jobs": st.jobs.len() }))
}

async fn list_models(State(st): State<Arc<AppState>>) -> impl IntoResponse {
    Json(json!({ "models": st.models.ids(), "default": st.models.default_id() }))
}

fn multipart_error(e: MultipartError, limit: usize) -> ServiceError {
    if e.status() == StatusCode::PAYLOAD_TOO_LARGE {
        ServiceError::TooLarge { limit }
    } else {
        ServiceError::BadRequest(e.body_text())
    }
}

struct Upload {
    filename: Option<String>,
    bytes: Vec<u8>,
}

async fn create_pair(State(st): State<Arc<AppState>>, mut form: Multipart) -> Result<(StatusCode, Json<serde_json::Value>)> {
    let limit = st.config.max_image_bytes;
    let (mut q, mut k, mut model_id, mut category) = (None, None, None, None);
    while let Some(field) = form.next_field().await.map_err(|e| multipart_error(e, limit))? {
        let name = field.name().unwrap_or_default().to_string();
        let filename = field.file_name().map(str::to_string);
        let bytes = field.bytes().await.map_err(|e| multipart_error(e, limit))?;
        match name.as_str() {
            "q_image" | "k_image" => {
                if bytes.len() > limit {
                    return Err(ServiceError::TooLarge { limit });
                }
                let up = Upload { filename, bytes: bytes.to_vec() };
                if name == "q_image" {
                    q = Some(up);
                } else {
                    k = Some(up);
                }
            }
            "model_id" => model_id = Some(String::from_utf8_lossy(&bytes).trim().to_string()).filter(|s| !s.is_empty()),
            "category" => category = Some(jobs::parse_category(String::from_utf8_lossy(&bytes).trim())?),
            _ => log::debug!("ignoring multipart field {name}"),
        }
    }
    let q = q.ok_or(ServiceError::MissingField("q_image"))?;
    let k = k.ok_or(ServiceError::MissingField("k_image"))?;
    let decode = |field: &str, up: &Upload| {
        imgproc::decode_gray(&up.bytes).map_err(|e| ServiceError::BadImage { field: field.into(), message: e.to_string() })
    };
    let q_img = decode("q_image", &q)?;
    let k_img = decode("k_image", &k)?;
    let (model_id, model) = st.models.resolve(model_id.as_deref())?;
    let category = category.unwrap_or(Category::Pristine);

    let seed = jobs::job_seed(st.config.seed, &q.bytes, &k.bytes, &model_id);
    let job_id = uuid::Uuid::new_v4().to_string();
    let image_ref = |up: &Upload, img: &imgproc::GrayImage| ImageRef {
        filename: up.filename.clone(),
        sha256: jobs::sha256_hex(&up.bytes),
        width: img.width(),
        height: img.height(),
    };
    st.jobs.insert(PairJob {
        job_id: job_id.clone(),
        q_image: image_ref(&q, &q_img),
        k_image: image_ref(&k, &k_img),
        model_id,
        category,
        seed,
        status: JobStatus::Queued,
        alignment: None,
        features: None,
        posterior: None,
        error: None,
        overlay: None,
    });
    let work = Work { job_id: job_id.clone(), q: q_img, k: k_img, model, category, seed };
    if let Err(e) = st.pool.submit(work) {
        st.jobs.remove(&job_id);
        return Err(e);
    }
    Ok((StatusCode::ACCEPTED, Json(json!({ "job_id": job_id }))))
}

async fn get_pair(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<PairJob>> {
    st.jobs.get(&id).map(Json).ok_or(ServiceError::UnknownJob(id))
}

async fn list_population(State(st): State<Arc<AppState>>) -> impl IntoResponse {
    Json(json!({ "scenarios": st.population.scenarios(), "metrics": FEATURE_NAMES.to_vec() }))
}

#[derive(Debug, Deserialize)]
struct PopulationQuery {
    scenario: Option<String>,
    bins: Option<usize>,
    points: Option<usize>,
}

async fn get_population(
    State(st): State<Arc<AppState>>,
    Path(metric): Path<String>,
    Query(q): Query<PopulationQuery>,
) -> Result<impl IntoResponse> {
    let scenario = match q.scenario.as_deref() {
        None | Some("") => Scenario::PristineAN,
        Some(s) => s.parse::<Scenario>().map_err(|e| ServiceError::BadRequest(e.to_string()))?,
    };
    let bins = q.bins.unwrap_or(population::DEFAULT_BINS).clamp(1, 500);
    let points = q.points.unwrap_or(population::DEFAULT_KDE_POINTS).clamp(2, 4096);
    Ok(Json(st.population.metric(&metric, scenario, bins, points)?))
}
