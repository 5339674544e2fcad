//! HTTP API for the annotation interface.
//!
//! Without an assignment plan, each item goes to at most one annotator: the
//! first to request it holds it until answering. With a plan, annotators see
//! only their planned items, and several annotators may share one.

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::path::{Component as PathComponent, Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use wmbench_core::qa::{build_prompt, QaItem, Task};
use wmbench_core::verify::check_labels;

use crate::store::{AnswerRecord, AnswerStore};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateView {
    pub label: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action: Option<String>,
}

/// An item as shown to an annotator: no ground truth, no graphs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskView {
    pub item_id: String,
    pub task: Task,
    pub steps: usize,
    pub prompt: String,
    pub context_url: String,
    /// Forward: actions in order. Inverse: image URLs of the states in order.
    pub givens: Vec<String>,
    pub candidates: Vec<CandidateView>,
}

fn asset_url(path: &str) -> String {
    format!("/assets/{}", path.trim_start_matches('/'))
}

impl TaskView {
    pub fn of(item: &QaItem) -> Self {
        let (givens, candidates) = match item.task {
            Task::Forward => (
                item.actions_rendered.clone(),
                item.candidate_observations
                    .iter()
                    .enumerate()
                    .map(|(i, o)| CandidateView {
                        label: i + 1,
                        image_url: Some(asset_url(o.as_str())),
                        action: None,
                    })
                    .collect(),
            ),
            Task::Inverse => (
                item.ordered_observations.iter().map(|o| asset_url(o.as_str())).collect(),
                item.actions_rendered
                    .iter()
                    .enumerate()
                    .map(|(i, a)| CandidateView {
                        label: i + 1,
                        image_url: None,
                        action: Some(a.clone()),
                    })
                    .collect(),
            ),
        };
        TaskView {
            item_id: item.id.clone(),
            task: item.task,
            steps: item.steps,
            prompt: build_prompt(item),
            context_url: asset_url(item.context.as_str()),
            givens,
            candidates,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NextTask {
    pub task: Option<TaskView>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerSubmission {
    pub item_id: String,
    pub annotator: String,
    pub permutation: Vec<i64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    UnknownItem,
    InvalidPermutation,
    AssignedToOther,
    AlreadyAnswered,
    MissingAnnotator,
    StorageFailed,
}

impl RejectReason {
    fn status(self) -> StatusCode {
        match self {
            RejectReason::UnknownItem => StatusCode::NOT_FOUND,
            RejectReason::InvalidPermutation => StatusCode::UNPROCESSABLE_ENTITY,
            RejectReason::AssignedToOther | RejectReason::AlreadyAnswered => StatusCode::CONFLICT,
            RejectReason::MissingAnnotator => StatusCode::BAD_REQUEST,
            RejectReason::StorageFailed => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmissionAck {
    pub accepted_for_storage: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<RejectReason>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatorProgress {
    pub annotator: String,
    pub answered: usize,
    pub remaining: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub total_items: usize,
    pub answered_items: usize,
    pub answers: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotator: Option<AnnotatorProgress>,
}

/// One line of an assignment plan.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannedAssignment {
    pub item_id: String,
    pub annotator: String,
}

#[derive(Default)]
struct Assignments {
    /// Open mode: current holder of each item.
    holder: HashMap<String, String>,
}

pub struct AppState {
    items: Vec<QaItem>,
    index: HashMap<String, usize>,
    store: AnswerStore,
    plan: Option<BTreeMap<String, Vec<String>>>,
    assignments: Mutex<Assignments>,
    data_dir: Option<PathBuf>,
    ui_dir: Option<PathBuf>,
}

impl AppState {
    /// `store` should be opened with the dataset's item ids.
    pub fn new(items: Vec<QaItem>, store: AnswerStore) -> Self {
        let index = items.iter().enumerate().map(|(i, it)| (it.id.clone(), i)).collect();
        AppState {
            items,
            index,
            store,
            plan: None,
            assignments: Mutex::new(Assignments::default()),
            data_dir: None,
            ui_dir: None,
        }
    }

    pub fn with_plan(mut self, plan: &[PlannedAssignment]) -> Self {
        let mut by: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for p in plan {
            let list = by.entry(p.annotator.clone()).or_default();
            if !list.contains(&p.item_id) {
                list.push(p.item_id.clone());
            }
        }
        self.plan = Some(by);
        self
    }

    pub fn with_data_dir(mut self, dir: Option<PathBuf>) -> Self {
        self.data_dir = dir;
        self
    }

    pub fn with_ui_dir(mut self, dir: Option<PathBuf>) -> Self {
        self.ui_dir = dir;
        self
    }

    pub fn store(&self) -> &AnswerStore {
        &self.store
    }

    fn answered_by_anyone(&self, records: &[AnswerRecord], item: &str) -> bool {
        records.iter().any(|r| r.item_id == item)
    }

    fn next_for(&self, annotator: &str) -> Option<&QaItem> {
        let records = self.store.records();
        let answered = |item: &str| records.iter().any(|r| r.item_id == item && r.responder_id == annotator);
        if let Some(plan) = &self.plan {
            return plan
                .get(annotator)?
                .iter()
                .filter(|id| !answered(id))
                .find_map(|id| self.index.get(id).map(|&i| &self.items[i]));
        }
        let mut a = self.assignments.lock().expect("assignment lock");
        if let Some(item) = self
            .items
            .iter()
            .find(|it| a.holder.get(&it.id).map(String::as_str) == Some(annotator) && !self.answered_by_anyone(&records, &it.id))
        {
            return Some(item);
        }
        let item = self
            .items
            .iter()
            .find(|it| !a.holder.contains_key(&it.id) && !self.answered_by_anyone(&records, &it.id))?;
        a.holder.insert(item.id.clone(), annotator.to_owned());
        Some(item)
    }

    fn submit(&self, s: &AnswerSubmission) -> Result<(), (RejectReason, String)> {
        if s.annotator.trim().is_empty() {
            return Err((RejectReason::MissingAnnotator, "annotator is empty".into()));
        }
        let Some(&i) = self.index.get(&s.item_id) else {
            return Err((RejectReason::UnknownItem, s.item_id.clone()));
        };
        let item = &self.items[i];
        check_labels(&s.permutation, item.transitions()).map_err(|e| (RejectReason::InvalidPermutation, e.to_string()))?;

        // the lock spans the checks and the append
        let mut a = self.assignments.lock().expect("assignment lock");
        let records = self.store.records();
        if records.iter().any(|r| r.item_id == s.item_id && r.responder_id == s.annotator) {
            return Err((RejectReason::AlreadyAnswered, s.item_id.clone()));
        }
        match &self.plan {
            Some(plan) => {
                if !plan.get(&s.annotator).is_some_and(|l| l.contains(&s.item_id)) {
                    return Err((RejectReason::AssignedToOther, "item is not in this annotator's plan".into()));
                }
            }
            None => {
                let held_by_other = a.holder.get(&s.item_id).is_some_and(|h| h != &s.annotator);
                if held_by_other || self.answered_by_anyone(&records, &s.item_id) {
                    return Err((RejectReason::AssignedToOther, s.item_id.clone()));
                }
                a.holder.insert(s.item_id.clone(), s.annotator.clone());
            }
        }
        let mut rec = AnswerRecord::now(&s.item_id, &s.annotator);
        rec.permutation = Some(s.permutation.clone());
        self.store
            .append(rec)
            .map_err(|e| (RejectReason::StorageFailed, e.to_string()))
    }

    fn progress(&self, annotator: Option<&str>) -> Progress {
        let records = self.store.records();
        let answered_items = self.items.iter().filter(|it| self.answered_by_anyone(&records, &it.id)).count();
        let annotator = annotator.map(|who| {
            let answered = records.iter().filter(|r| r.responder_id == who).count();
            let remaining = match &self.plan {
                Some(plan) => plan.get(who).map_or(0, |l| {
                    l.iter()
                        .filter(|id| !records.iter().any(|r| &r.item_id == *id && r.responder_id == who))
                        .count()
                }),
                None => {
                    let a = self.assignments.lock().expect("assignment lock");
                    self.items
                        .iter()
                        .filter(|it| {
                            !self.answered_by_anyone(&records, &it.id)
                                && a.holder.get(&it.id).is_none_or(|h| h == who)
                        })
                        .count()
                }
            };
            AnnotatorProgress {
                annotator: who.to_owned(),
                answered,
                remaining,
            }
        });
        Progress {
            total_items: self.items.len(),
            answered_items,
            answers: records.len(),
            annotator,
        }
    }
}

#[derive(Debug, Deserialize)]
struct AnnotatorQuery {
    annotator: Option<String>,
}

async fn next_task(State(st): State<Arc<AppState>>, Query(q): Query<AnnotatorQuery>) -> Response {
    let Some(who) = q.annotator.filter(|a| !a.trim().is_empty()) else {
        return reject(RejectReason::MissingAnnotator, "annotator query parameter is required".into());
    };
    Json(NextTask {
        task: st.next_for(&who).map(TaskView::of),
    })
    .into_response()
}

fn reject(reason: RejectReason, detail: String) -> Response {
    (
        reason.status(),
        Json(SubmissionAck {
            accepted_for_storage: false,
            reason: Some(reason),
            detail: Some(detail),
        }),
    )
        .into_response()
}

async fn post_answer(State(st): State<Arc<AppState>>, Json(s): Json<AnswerSubmission>) -> Response {
    match st.submit(&s) {
        Ok(()) => {
            tracing::info!(item = %s.item_id, annotator = %s.annotator, "answer stored");
            Json(SubmissionAck {
                accepted_for_storage: true,
                reason: None,
                detail: None,
            })
            .into_response()
        }
        Err((reason, detail)) => reject(reason, detail),
    }
}

async fn progress(State(st): State<Arc<AppState>>, Query(q): Query<AnnotatorQuery>) -> Json<Progress> {
    Json(st.progress(q.annotator.as_deref()))
}

/// Joins `rel` onto `root` if it stays inside it.
pub fn safe_join(root: &Path, rel: &str) -> Option<PathBuf> {
    let rel = Path::new(rel);
    if rel.components().any(|c| !matches!(c, PathComponent::Normal(_))) {
        return None;
    }
    let root = root.canonicalize().ok()?;
    let full = root.join(rel).canonicalize().ok()?;
    full.starts_with(&root).then_some(full)
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("webp") => "image/webp",
        Some("html") => "text/html; charset=utf-8",
        Some("js" | "mjs") => "text/javascript",
        Some("css") => "text/css",
        Some("json") => "application/json",
        Some("svg") => "image/svg+xml",
        _ => "application/octet-stream",
    }
}

async fn send_file(root: Option<&Path>, rel: &str) -> Response {
    let Some(path) = root.and_then(|r| safe_join(r, rel)) else {
        return StatusCode::NOT_FOUND.into_response();
    };
    match tokio::fs::read(&path).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, content_type(&path))], bytes).into_response(),
        Err(_) => StatusCode::NOT_FOUND.into_response(),
    }
}

async fn asset(State(st): State<Arc<AppState>>, UrlPath(rel): UrlPath<String>) -> Response {
    send_file(st.data_dir.as_deref(), &rel).await
}

async fn ui(State(st): State<Arc<AppState>>, uri: Uri) -> Response {
    let rel = uri.path().trim_start_matches('/');
    let rel = if rel.is_empty() { "index.html" } else { rel };
    send_file(st.ui_dir.as_deref(), rel).await
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/tasks/next", get(next_task))
        .route("/api/answers", post(post_answer))
        .route("/api/progress", get(progress))
        .route("/assets/{*path}", get(asset))
        .fallback(ui)
        .with_state(state)
}

pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "annotation API listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
