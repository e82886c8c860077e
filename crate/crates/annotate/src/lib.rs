//! HTTP backend for the vertex-painting annotation workflow.
//!
//! Clients paint locally with the published brush cache and send their
//! stroke log together with the vertex set they ended up with. The server
//! replays the strokes and accepts the submission only if both sets agree.
//! All state transitions go through one [`Store`] behind a mutex and are
//! appended to a JSONL event log, which is replayed on startup.

mod error;
mod replay;
mod routes;
mod store;

use std::net::SocketAddr;
use std::path::Path;

use deco_core::mesh::{BrushCache, TemplateMesh};

pub use error::ApiError;
pub use replay::{diff, replay};
pub use routes::{router, AppState, TOKEN_HEADER};
pub use store::{
    Accepted, AnnotationTask, Event, ImageAgreement, NextTask, QualificationAnswer, QualificationItem,
    QualificationResult, Review, ServiceConfig, Store, StrokeSubmission, TaskSpec, TaskState, Verdict,
    SCENE_SUPPORTED_PROMPT,
};

pub const API_SCHEMA_VERSION: u32 = 1;

/// Router for a fresh or log-restored service.
pub fn build(
    template: TemplateMesh,
    cache: BrushCache,
    config: ServiceConfig,
    log_path: Option<&Path>,
) -> Result<axum::Router, ApiError> {
    let token = config.token.clone();
    let store = Store::open(config, &cache, log_path)?;
    Ok(router(AppState::new(template, cache, store, token)?))
}

/// Serves until the process is stopped.
pub async fn serve(addr: SocketAddr, app: axum::Router) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, app).await
}
