//! HTTP+JSON routes.
//!
//! Long operations (training, sampling, fine-tuning, inference) are enqueued
//! and answered with `202 Accepted` and the task record; clients poll
//! `/tasks/{id}` for the result. Feedback submission is synchronous.

use std::path::Path;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine as _;
use prefpaint_core::preference::DpoConfig;
use prefpaint_core::registry::is_valid_hash;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::Error;
use crate::ids::Id;
use crate::orchestrator::{Orchestrator, TaskFilter};
use crate::service::{Service, ServiceConfig};
use crate::task::{FinetuneJob, Job, SampleJob, TaskKind, TaskState, TrainBaseJob, MAX_SAMPLE_COUNT};

pub struct AppState {
    pub service: Arc<Service>,
    pub queue: Orchestrator,
}

impl AppState {
    /// Opens everything under `data_dir` and starts `workers` task threads.
    pub fn open(data_dir: impl AsRef<Path>, config: ServiceConfig, workers: usize) -> crate::Result<Arc<Self>> {
        let dir = data_dir.as_ref();
        let service = Arc::new(Service::open(dir, config)?);
        let queue = Orchestrator::open(dir)?;
        queue.start(service.clone(), workers);
        Ok(Arc::new(Self { service, queue }))
    }

    fn submit(&self, job: Job) -> Result<Response, ApiError> {
        self.service.check_job(&job)?;
        let task = self.queue.enqueue(job)?;
        Ok((StatusCode::ACCEPTED, Json(task)).into_response())
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        use prefpaint_core::Error as C;
        let status = match &e {
            Error::Core(c) => match c {
                C::NotFound(_) => StatusCode::NOT_FOUND,
                C::Conflict(_) => StatusCode::CONFLICT,
                C::Pgm(_) => StatusCode::BAD_REQUEST,
                C::Validation(_)
                | C::Shape(_)
                | C::UnknownToken(_)
                | C::UnknownPrompt { .. }
                | C::NothingToInpaint
                | C::Protocol(_)
                | C::Feedback(_)
                | C::Pair(_)
                | C::Config(_)
                | C::TimestepRange { .. } => StatusCode::UNPROCESSABLE_ENTITY,
                _ => StatusCode::INTERNAL_SERVER_ERROR,
            },
            Error::Unavailable => StatusCode::SERVICE_UNAVAILABLE,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        if status.is_server_error() {
            log::error!("{e}");
        }
        Self::new(status, e.to_string())
    }
}

impl From<prefpaint_core::Error> for ApiError {
    fn from(e: prefpaint_core::Error) -> Self {
        Error::Core(e).into()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        Self::new(r.status(), r.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T = Response> = Result<T, ApiError>;

fn parse_id(raw: &str, what: &str) -> ApiResult<Id> {
    raw.parse()
        .map_err(|_| ApiError::new(StatusCode::NOT_FOUND, format!("no {what} {raw:?}")))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(|| async { Json(json!({ "status": "ok" })) }))
        .route("/config", get(config))
        .route("/tree", get(tree))
        .route("/models", post(create_root))
        .route("/models/{id}", get(model))
        .route("/models/{id}/sample", post(sample))
        .route("/models/{id}/finetune", post(finetune))
        .route("/models/{id}/infer", post(infer))
        .route("/batches", get(batches))
        .route("/batches/{id}", get(batch))
        .route("/batches/{id}/feedback", post(feedback))
        .route("/tasks", get(tasks))
        .route("/tasks/{id}", get(task))
        .route("/showcase", get(showcase))
        .route("/showcase/{id}", get(showcase_entry))
        .route("/blobs/{hash}", get(blob))
        .with_state(state)
}

async fn config(State(app): State<Arc<AppState>>) -> Json<Value> {
    let cfg = app.service.config();
    Json(json!({
        "image_side": cfg.diffusion.image_side,
        "timesteps": cfg.diffusion.timesteps,
        "prompt_vocab": cfg.diffusion.prompt_vocab,
        "max_sample_count": MAX_SAMPLE_COUNT,
        "max_pairs_per_group": cfg.max_pairs_per_group,
        "dpo": cfg.dpo,
    }))
}

#[derive(Deserialize)]
struct TreeQuery {
    domain: Option<String>,
}

async fn tree(State(app): State<Arc<AppState>>, Query(q): Query<TreeQuery>) -> impl IntoResponse {
    Json(app.service.tree(q.domain.as_deref()))
}

#[derive(Deserialize)]
struct CreateRootBody {
    domain: String,
    steps: Option<usize>,
    seed: Option<u64>,
    #[serde(default)]
    description: String,
}

async fn create_root(State(app): State<Arc<AppState>>, body: Result<Json<CreateRootBody>, JsonRejection>) -> ApiResult {
    let Json(b) = body?;
    app.submit(Job::TrainBase(TrainBaseJob {
        domain: b.domain,
        steps: b.steps.unwrap_or(app.service.config().train_steps),
        seed: b.seed,
        description: b.description,
    }))
}

async fn model(State(app): State<Arc<AppState>>, UrlPath(raw): UrlPath<String>) -> ApiResult {
    let id = parse_id(&raw, "model")?;
    let node = app.service.node(id)?;
    let view = app
        .service
        .tree(Some(&node.domain_tag))
        .nodes
        .into_iter()
        .find(|n| n.node_id == id)
        .expect("node is in its own domain");
    let lineage: Vec<Id> = app.service.registry().lineage(id.0)?.iter().map(|n| Id(n.node_id)).collect();
    Ok(Json(json!({ "node": view, "lineage": lineage })).into_response())
}

#[derive(Deserialize)]
struct SampleBody {
    count: usize,
    #[serde(default)]
    prompts: Vec<String>,
    seed: Option<u64>,
}

async fn sample(
    State(app): State<Arc<AppState>>,
    UrlPath(raw): UrlPath<String>,
    body: Result<Json<SampleBody>, JsonRejection>,
) -> ApiResult {
    let node_id = parse_id(&raw, "model")?;
    app.service.node(node_id)?;
    let Json(b) = body?;
    app.submit(Job::SamplePairs(SampleJob {
        node_id,
        count: b.count,
        prompts: b.prompts,
        seed: b.seed,
    }))
}

#[derive(Deserialize)]
struct FinetuneBody {
    batch_ids: Vec<Id>,
    #[serde(default)]
    dpo: Option<Map<String, Value>>,
    #[serde(default)]
    description: String,
    seed: Option<u64>,
}

/// Applies per-request overrides on top of the service defaults.
fn merge_dpo(defaults: &DpoConfig, overrides: Option<Map<String, Value>>) -> ApiResult<DpoConfig> {
    let Some(overrides) = overrides else {
        return Ok(defaults.clone());
    };
    let mut merged = serde_json::to_value(defaults).map_err(Error::from)?;
    let fields = merged.as_object_mut().expect("config serializes to an object");
    for (k, v) in overrides {
        if !fields.contains_key(&k) {
            return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, format!("unknown dpo field {k:?}")));
        }
        fields.insert(k, v);
    }
    serde_json::from_value(merged)
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, format!("invalid dpo override: {e}")))
}

async fn finetune(
    State(app): State<Arc<AppState>>,
    UrlPath(raw): UrlPath<String>,
    body: Result<Json<FinetuneBody>, JsonRejection>,
) -> ApiResult {
    let node_id = parse_id(&raw, "model")?;
    app.service.node(node_id)?;
    let Json(b) = body?;
    let dpo = merge_dpo(&app.service.config().dpo, b.dpo)?;
    app.submit(Job::Finetune(FinetuneJob {
        node_id,
        batch_ids: b.batch_ids,
        dpo,
        description: b.description,
        seed: b.seed,
    }))
}

#[derive(Deserialize)]
struct InferBody {
    /// Base64 of a binary PGM.
    image: String,
    /// Base64 of a binary PGM: 255 keeps a pixel, 0 marks the hole.
    mask: String,
    prompt: String,
    seed: Option<u64>,
}

async fn infer(
    State(app): State<Arc<AppState>>,
    UrlPath(raw): UrlPath<String>,
    body: Result<Json<InferBody>, JsonRejection>,
) -> ApiResult {
    let node_id = parse_id(&raw, "model")?;
    app.service.node(node_id)?;
    let Json(b) = body?;
    let decode = |field: &str, text: &str| {
        base64::engine::general_purpose::STANDARD
            .decode(text)
            .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("{field} is not valid base64: {e}")))
    };
    let image = decode("image", &b.image)?;
    let mask = decode("mask", &b.mask)?;
    let job = app.service.prepare_infer(node_id, &image, &mask, &b.prompt, b.seed)?;
    app.submit(job)
}

#[derive(Serialize)]
struct BatchSummary {
    batch_id: Id,
    node_id: Id,
    status: crate::store::BatchStatus,
    items: usize,
    pairs_formed: Option<usize>,
    created_at: chrono::DateTime<chrono::Utc>,
}

async fn batches(State(app): State<Arc<AppState>>) -> impl IntoResponse {
    let list: Vec<BatchSummary> = app
        .service
        .store()
        .batches()
        .into_iter()
        .map(|b| BatchSummary {
            batch_id: b.batch_id,
            node_id: b.node_id,
            status: b.status,
            items: b.items.len(),
            pairs_formed: b.pairs_formed,
            created_at: b.created_at,
        })
        .collect();
    Json(list)
}

async fn batch(State(app): State<Arc<AppState>>, UrlPath(raw): UrlPath<String>) -> ApiResult {
    let id = parse_id(&raw, "batch")?;
    Ok(Json(app.service.store().batch(id)?).into_response())
}

#[derive(Deserialize)]
struct Rating {
    sample_id: String,
    value: i32,
}

#[derive(Deserialize)]
struct FeedbackBody {
    records: Vec<Rating>,
    #[serde(default = "anonymous")]
    rater_id: String,
}

fn anonymous() -> String {
    "anonymous".into()
}

async fn feedback(
    State(app): State<Arc<AppState>>,
    UrlPath(raw): UrlPath<String>,
    body: Result<Json<FeedbackBody>, JsonRejection>,
) -> ApiResult {
    let id = parse_id(&raw, "batch")?;
    let Json(b) = body?;
    let ratings: Vec<(String, i32)> = b.records.into_iter().map(|r| (r.sample_id, r.value)).collect();
    let service = app.service.clone();
    let outcome = tokio::task::spawn_blocking(move || service.submit_feedback(id, &ratings, &b.rater_id))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(outcome).into_response())
}

#[derive(Deserialize)]
struct TaskQuery {
    state: Option<TaskState>,
    kind: Option<TaskKind>,
    #[serde(default)]
    offset: usize,
    limit: Option<usize>,
}

async fn tasks(State(app): State<Arc<AppState>>, Query(q): Query<TaskQuery>) -> impl IntoResponse {
    Json(app.queue.list(&TaskFilter {
        state: q.state,
        kind: q.kind,
        offset: q.offset,
        limit: q.limit,
    }))
}

async fn task(State(app): State<Arc<AppState>>, UrlPath(raw): UrlPath<String>) -> ApiResult {
    let id = parse_id(&raw, "task")?;
    Ok(Json(app.queue.get(id)?).into_response())
}

#[derive(Deserialize)]
struct ShowcaseQuery {
    #[serde(default)]
    page: usize,
    per_page: Option<usize>,
}

async fn showcase(State(app): State<Arc<AppState>>, Query(q): Query<ShowcaseQuery>) -> impl IntoResponse {
    let per_page = q.per_page.unwrap_or(20).clamp(1, 100);
    let (entries, total) = app.service.store().showcase_page(q.page, per_page);
    Json(json!({ "page": q.page, "per_page": per_page, "total": total, "entries": entries }))
}

async fn showcase_entry(State(app): State<Arc<AppState>>, UrlPath(raw): UrlPath<String>) -> ApiResult {
    let id = parse_id(&raw, "showcase entry")?;
    Ok(Json(app.service.store().showcase_entry(id)?).into_response())
}

async fn blob(State(app): State<Arc<AppState>>, UrlPath(hash): UrlPath<String>) -> ApiResult {
    if !is_valid_hash(&hash) {
        return Err(ApiError::new(StatusCode::NOT_FOUND, format!("no blob {hash:?}")));
    }
    let bytes = app.service.registry().blobs().get(&hash)?;
    let content_type = if bytes.starts_with(b"P5") {
        "image/x-portable-graymap"
    } else {
        "application/octet-stream"
    };
    Ok((
        [
            (header::CONTENT_TYPE, content_type.to_string()),
            (header::CACHE_CONTROL, "public, max-age=31536000, immutable".to_string()),
            (header::ETAG, format!("\"{hash}\"")),
        ],
        bytes,
    )
        .into_response())
}
