use std::sync::{Arc, Mutex, MutexGuard};

use axum::extract::{Path, Query, Request, State};
use axum::http::header::CACHE_CONTROL;
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use deco_core::mesh::{BrushCache, TemplateMesh};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::error::ApiError;
use crate::store::{QualificationAnswer, Review, Store, StrokeSubmission};
use crate::API_SCHEMA_VERSION;

pub const TOKEN_HEADER: &str = "x-annotation-token";
const IMMUTABLE: &str = "public, max-age=31536000, immutable";

/// Shared server state: immutable mesh data plus the single-writer store.
#[derive(Clone)]
pub struct AppState {
    template: Arc<TemplateMesh>,
    cache: Arc<BrushCache>,
    store: Arc<Mutex<Store>>,
    token: Option<Arc<str>>,
}

impl AppState {
    pub fn new(
        template: TemplateMesh,
        cache: BrushCache,
        store: Store,
        token: Option<String>,
    ) -> Result<Self, ApiError> {
        if cache.num_vertices() != template.num_vertices() {
            return Err(ApiError::BadRequest(format!(
                "brush cache covers {} vertices, template has {}",
                cache.num_vertices(),
                template.num_vertices()
            )));
        }
        Ok(Self {
            template: Arc::new(template),
            cache: Arc::new(cache),
            store: Arc::new(Mutex::new(store)),
            token: token.map(Into::into),
        })
    }

    fn store(&self) -> MutexGuard<'_, Store> {
        // a panic mid-request cannot leave a half-applied transition: events
        // are validated before any field is written
        self.store.lock().unwrap_or_else(|e| e.into_inner())
    }
}

async fn check_token(State(state): State<AppState>, req: Request, next: Next) -> Response {
    if let Some(expected) = &state.token {
        let given = req.headers().get(TOKEN_HEADER).and_then(|v| v.to_str().ok());
        if given != Some(expected.as_ref()) {
            return ApiError::Unauthorized.into_response();
        }
    }
    next.run(req).await
}

async fn template(State(s): State<AppState>) -> Response {
    let body = json!({
        "schema_version": API_SCHEMA_VERSION,
        "template": *s.template,
        "brush_radii": s.cache.radii(),
    });
    ([(CACHE_CONTROL, IMMUTABLE)], Json(body)).into_response()
}

#[derive(Deserialize)]
struct RadiusQuery {
    radius: f64,
}

async fn brush_cache(State(s): State<AppState>, Query(q): Query<RadiusQuery>) -> Result<Response, ApiError> {
    let table = s
        .cache
        .table(q.radius)
        .ok_or_else(|| ApiError::NotFound(format!("radius {} is not published", q.radius)))?;
    let body = json!({
        "schema_version": API_SCHEMA_VERSION,
        "radius": q.radius,
        "neighborhoods": table,
    });
    Ok(([(CACHE_CONTROL, IMMUTABLE)], Json(body)).into_response())
}

#[derive(Deserialize)]
struct AnnotatorQuery {
    annotator: String,
}

async fn next_task(State(s): State<AppState>, Query(q): Query<AnnotatorQuery>) -> Result<Json<Value>, ApiError> {
    let next = s.store().next_task(&q.annotator, &s.cache)?;
    Ok(Json(json!({ "schema_version": API_SCHEMA_VERSION, "next": next })))
}

async fn submit(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Json(sub): Json<StrokeSubmission>,
) -> Result<Json<Value>, ApiError> {
    let accepted = s.store().submit(&id, &sub, &s.cache)?;
    Ok(Json(
        json!({ "schema_version": API_SCHEMA_VERSION, "accepted": accepted }),
    ))
}

async fn review(State(s): State<AppState>, Json(r): Json<Review>) -> Result<Json<Value>, ApiError> {
    let task = s.store().review(&r, &s.cache)?;
    Ok(Json(json!({ "schema_version": API_SCHEMA_VERSION, "task": task })))
}

#[derive(Deserialize)]
struct AgreementQuery {
    /// Comma-separated image ids.
    image_set: String,
}

async fn agreement(State(s): State<AppState>, Query(q): Query<AgreementQuery>) -> Result<Json<Value>, ApiError> {
    let images: Vec<String> = q
        .image_set
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect();
    let per_image = s.store().agreement(&images, s.template.num_vertices())?;
    Ok(Json(
        json!({ "schema_version": API_SCHEMA_VERSION, "images": per_image }),
    ))
}

#[derive(Deserialize)]
struct QualifyRequest {
    annotator: String,
    answers: Vec<QualificationAnswer>,
}

async fn qualify(State(s): State<AppState>, Json(q): Json<QualifyRequest>) -> Result<Json<Value>, ApiError> {
    let result = s.store().qualify(&q.annotator, &q.answers, &s.cache)?;
    Ok(Json(json!({ "schema_version": API_SCHEMA_VERSION, "result": result })))
}

async fn export(State(s): State<AppState>) -> Result<Json<Value>, ApiError> {
    let ds = s.store().export(s.template.id(), s.template.num_vertices())?;
    Ok(Json(json!({
        "schema_version": deco_core::data::DATASET_SCHEMA_VERSION,
        "template_id": ds.template_id,
        "n_vertices": ds.n_vertices,
        "vocabulary": ds.vocabulary,
        "splits": ds.splits,
        "records": ds.records,
    })))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/template", get(template))
        .route("/brush-cache", get(brush_cache))
        .route("/task/next", get(next_task))
        .route("/task/{id}/annotation", post(submit))
        .route("/qa/review", post(review))
        .route("/qa/agreement", get(agreement))
        .route("/qualify", post(qualify))
        .route("/export", get(export))
        .layer(middleware::from_fn_with_state(state.clone(), check_token))
        .with_state(state)
}
