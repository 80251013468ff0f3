//! HTTP front of the annotation store.
//!
//! | method | path                       | success            |
//! |--------|----------------------------|--------------------|
//! | GET    | /api/tasks/next?annotator= | 200 task, 204 none |
//! | POST   | /api/tasks/{id}/annotation | 200 `{task_id, status}` |
//! | GET    | /api/tasks/{id}            | 200 task           |
//! | GET    | /api/progress              | 200 counts         |
//!
//! Failures carry `{"error": kind, "message": ...}` with 404 for unknown
//! tasks, 409 for a missing, expired or foreign lease or a repeated record,
//! 422 for rubric or payload violations, 400 for a missing annotator.

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use deskrlhf_core::annotation::{AnnotationStore, Lease, Rejection, SubmitError, Task, TaskStatus};
use deskrlhf_core::io::write_jsonl;
use deskrlhf_core::model::text::decode;
use deskrlhf_core::model::Token;
use deskrlhf_core::preference::AnnotationRecord;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

pub type Clock = Arc<dyn Fn() -> u64 + Send + Sync>;

pub fn system_clock() -> Clock {
    Arc::new(|| {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0)
    })
}

/// Files rewritten whenever a task becomes done.
#[derive(Debug, Clone)]
pub struct Exports {
    pub annotations: PathBuf,
    pub rankings: PathBuf,
}

pub struct AppState {
    store: Mutex<AnnotationStore>,
    exports: Option<Exports>,
    clock: Clock,
}

impl AppState {
    pub fn new(store: AnnotationStore, exports: Option<Exports>, clock: Clock) -> Arc<Self> {
        Arc::new(Self {
            store: Mutex::new(store),
            exports,
            clock,
        })
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, AnnotationStore> {
        self.store.lock().unwrap_or_else(|p| p.into_inner())
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/tasks/next", get(next_task))
        .route("/api/tasks/{id}", get(get_task))
        .route("/api/tasks/{id}/annotation", post(submit))
        .route("/api/progress", get(progress))
        .with_state(state)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ResponseView {
    pub response_id: u32,
    pub tokens: Vec<Token>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TaskView {
    pub id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompt_text: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompt_tokens: Option<Vec<Token>>,
    pub responses: Vec<ResponseView>,
    pub status: TaskStatus,
    pub completed_by: Vec<String>,
    pub lease: Option<Lease>,
}

impl TaskView {
    fn of(task: &Task, now_ms: u64) -> Self {
        let text_mode = task.prompt.text.is_some();
        Self {
            id: task.id().to_string(),
            prompt_text: task.prompt.text.clone(),
            prompt_tokens: task.prompt.tokens.clone(),
            responses: task
                .responses
                .iter()
                .map(|r| ResponseView {
                    response_id: r.response_id,
                    tokens: r.tokens.clone(),
                    text: if text_mode { decode(&r.tokens).ok() } else { None },
                })
                .collect(),
            status: task.status(now_ms),
            completed_by: task.completed_by().into_iter().map(str::to_string).collect(),
            lease: task.active_lease(now_ms).cloned(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SubmitReply {
    pub task_id: String,
    pub status: TaskStatus,
}

fn failure(status: StatusCode, kind: &str, message: impl Into<String>) -> Response {
    let body = serde_json::json!({ "error": kind, "message": message.into() });
    (status, Json(body)).into_response()
}

fn rejection(r: Rejection) -> Response {
    match r {
        Rejection::UnknownTask(m) => failure(StatusCode::NOT_FOUND, "unknown-task", m),
        Rejection::Invalid(m) => failure(StatusCode::UNPROCESSABLE_ENTITY, "rubric", m),
        Rejection::Conflict(m) => failure(StatusCode::CONFLICT, "lease", m),
    }
}

fn internal(e: deskrlhf_core::Error) -> Response {
    failure(StatusCode::INTERNAL_SERVER_ERROR, e.kind(), e.to_string())
}

#[derive(Debug, Deserialize)]
struct NextQuery {
    annotator: Option<String>,
}

async fn next_task(State(state): State<Arc<AppState>>, Query(q): Query<NextQuery>) -> Response {
    let Some(annotator) = q.annotator.filter(|a| !a.is_empty()) else {
        return failure(StatusCode::BAD_REQUEST, "annotator", "query parameter `annotator` is required");
    };
    let now = (state.clock)();
    let mut store = state.lock();
    match store.next_task(&annotator, now) {
        Ok(Some(task)) => Json(TaskView::of(task, now)).into_response(),
        Ok(None) => StatusCode::NO_CONTENT.into_response(),
        Err(e) => internal(e),
    }
}

async fn get_task(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Response {
    let now = (state.clock)();
    let store = state.lock();
    match store.task(&id) {
        Ok(task) => Json(TaskView::of(task, now)).into_response(),
        Err(r) => rejection(r),
    }
}

async fn submit(State(state): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> Response {
    let now = (state.clock)();
    let mut store = state.lock();
    if let Err(r) = store.task(&id) {
        return rejection(r);
    }
    let record: AnnotationRecord = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return failure(StatusCode::UNPROCESSABLE_ENTITY, "rubric", e.to_string()),
    };
    match store.submit(&id, record, now) {
        Ok(status) => {
            if status == TaskStatus::Done {
                if let Some(x) = &state.exports {
                    let exported = store
                        .finished(now)
                        .and_then(|(records, rankings)| {
                            write_jsonl(&x.annotations, &records)?;
                            write_jsonl(&x.rankings, &rankings)
                        });
                    if let Err(e) = exported {
                        return internal(e);
                    }
                }
            }
            Json(SubmitReply { task_id: id, status }).into_response()
        }
        Err(SubmitError::Rejected(r)) => rejection(r),
        Err(SubmitError::Storage(e)) => internal(e),
    }
}

async fn progress(State(state): State<Arc<AppState>>) -> Response {
    let now = (state.clock)();
    Json(state.lock().progress(now)).into_response()
}
