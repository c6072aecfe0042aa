//! Human-evaluation HTTP service over one run directory.

use std::collections::BTreeMap;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Serialize;
use serde_json::{json, Value};
use tower_http::services::ServeDir;

use screennav_core::dataset::{append_jsonl, load_predictions, read_jsonl, TRANSCRIPTS_FILE};
use screennav_core::evaluator::{human_accuracy, latest_judgments, Judgment};
use screennav_core::{Dataset, ParsedAction};

use crate::commands::RUN_CONFIG_FILE;
use crate::config::RunConfig;

pub const JUDGMENTS_DIR: &str = "judgments";
pub const TOKEN_HEADER: &str = "x-session-token";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskSet {
    IntendedActionDescription,
    LocalizedActionExecution,
}

/// One model step offered for judgment.
#[derive(Debug, Clone, Serialize)]
pub struct Sample {
    pub sample_id: String,
    pub episode_id: String,
    pub step: usize,
    pub instruction: String,
    pub model_output: String,
    pub parsed_action: ParsedAction,
    pub task_set: TaskSet,
    #[serde(skip)]
    screenshot: PathBuf,
    #[serde(skip)]
    tagged: Option<PathBuf>,
}

pub fn sample_id(episode_id: &str, step: usize) -> String {
    format!("{episode_id}:{step}")
}

pub struct AppState {
    samples: Vec<Sample>,
    by_id: BTreeMap<String, usize>,
    judgments_dir: PathBuf,
    sessions: Mutex<BTreeMap<String, Vec<Judgment>>>,
    token: Option<String>,
}

impl AppState {
    /// Build samples from `<run_dir>/transcripts.jsonl` and replay any
    /// judgment logs already in `<run_dir>/judgments/`.
    pub fn load(dataset_root: &Path, run_dir: &Path, token: Option<String>) -> Result<Self> {
        let dataset = Dataset::open(dataset_root)?;
        let transcripts = load_predictions(&run_dir.join(TRANSCRIPTS_FILE))?;
        let task_set = match fs::read_to_string(run_dir.join(RUN_CONFIG_FILE))
            .ok()
            .and_then(|t| serde_json::from_str::<RunConfig>(&t).ok())
        {
            Some(cfg) if !cfg.use_tags => TaskSet::IntendedActionDescription,
            _ => TaskSet::LocalizedActionExecution,
        };

        let mut samples = Vec::new();
        for t in &transcripts {
            let episode = dataset.load_episode(&t.episode_id)?;
            for record in &t.steps {
                let Some(step) = episode.steps.get(record.step) else {
                    bail!("{} step {} has no screenshot in the dataset", t.episode_id, record.step);
                };
                let tagged = run_dir.join(&record.tagged_screen);
                samples.push(Sample {
                    sample_id: sample_id(&t.episode_id, record.step),
                    episode_id: t.episode_id.clone(),
                    step: record.step,
                    instruction: t.instruction.clone(),
                    model_output: record.raw_model_text.clone(),
                    parsed_action: record.parsed_action.clone(),
                    task_set,
                    screenshot: dataset.root().join(&step.screenshot),
                    tagged: tagged.is_file().then_some(tagged),
                });
            }
        }
        let by_id = samples.iter().enumerate().map(|(i, s)| (s.sample_id.clone(), i)).collect();

        let judgments_dir = run_dir.join(JUDGMENTS_DIR);
        let mut sessions = BTreeMap::new();
        if judgments_dir.is_dir() {
            for entry in fs::read_dir(&judgments_dir)? {
                let path = entry?.path();
                if path.extension().is_some_and(|x| x == "jsonl") {
                    let session = path.file_stem().unwrap().to_string_lossy().into_owned();
                    sessions.insert(session, read_jsonl::<Judgment>(&path)?);
                }
            }
        }
        Ok(Self {
            samples,
            by_id,
            judgments_dir,
            sessions: Mutex::new(sessions),
            token,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }
}

fn valid_session(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

async fn require_token(State(state): State<Arc<AppState>>, headers: HeaderMap, req: Request, next: Next) -> Response {
    if let Some(token) = &state.token {
        let given = headers.get(TOKEN_HEADER).and_then(|v| v.to_str().ok());
        if given != Some(token.as_str()) {
            return error(StatusCode::UNAUTHORIZED, "missing or wrong session token");
        }
    }
    next.run(req).await
}

async fn health(State(state): State<Arc<AppState>>) -> Json<Value> {
    Json(json!({ "status": "ok", "samples": state.samples.len() }))
}

async fn next_sample(State(state): State<Arc<AppState>>, UrlPath(session): UrlPath<String>) -> Response {
    if !valid_session(&session) {
        return error(StatusCode::BAD_REQUEST, "session ids use letters, digits, `-`, `_`");
    }
    let sessions = state.sessions.lock().unwrap();
    let judged = sessions.get(&session).map(|j| latest_judgments(j)).unwrap_or_default();
    let remaining = state.samples.iter().filter(|s| !judged.contains_key(&s.sample_id)).count();
    let Some(sample) = state.samples.iter().find(|s| !judged.contains_key(&s.sample_id)) else {
        return StatusCode::NO_CONTENT.into_response();
    };
    let mut body = serde_json::to_value(sample).unwrap();
    body["screenshot_url"] = json!(format!("/api/samples/{}/screenshot", sample.sample_id));
    body["tagged_url"] = match sample.tagged {
        Some(_) => json!(format!("/api/samples/{}/tagged", sample.sample_id)),
        None => Value::Null,
    };
    body["remaining"] = json!(remaining);
    Json(body).into_response()
}

fn metrics_body(session: &str, judgments: &[Judgment], total: usize) -> Value {
    match human_accuracy(judgments) {
        Ok(acc) => json!({
            "session": session,
            "judged": acc.samples,
            "correct": acc.correct,
            "fraction": acc.fraction,
            "accuracy": acc.percent,
            "total_samples": total,
        }),
        Err(_) => json!({
            "session": session,
            "judged": 0,
            "correct": 0,
            "fraction": null,
            "accuracy": null,
            "total_samples": total,
        }),
    }
}

async fn metrics(State(state): State<Arc<AppState>>, UrlPath(session): UrlPath<String>) -> Response {
    if !valid_session(&session) {
        return error(StatusCode::BAD_REQUEST, "session ids use letters, digits, `-`, `_`");
    }
    let sessions = state.sessions.lock().unwrap();
    let judgments = sessions.get(&session).map(Vec::as_slice).unwrap_or(&[]);
    Json(metrics_body(&session, judgments, state.samples.len())).into_response()
}

/// Body fields are checked by hand so a bad score maps to 422 rather than
/// the extractor's generic rejection.
async fn post_judgment(State(state): State<Arc<AppState>>, UrlPath(session): UrlPath<String>, body: Bytes) -> Response {
    if !valid_session(&session) {
        return error(StatusCode::BAD_REQUEST, "session ids use letters, digits, `-`, `_`");
    }
    let Ok(body) = serde_json::from_slice::<Value>(&body) else {
        return error(StatusCode::BAD_REQUEST, "body is not JSON");
    };
    let Some(sample_id) = body.get("sample_id").and_then(Value::as_str) else {
        return error(StatusCode::UNPROCESSABLE_ENTITY, "sample_id must be a string");
    };
    let score = match body.get("score").and_then(Value::as_i64) {
        Some(s @ (0 | 1)) if body["score"].is_i64() || body["score"].is_u64() => s,
        _ => return error(StatusCode::UNPROCESSABLE_ENTITY, "score must be 0 or 1"),
    };
    let note = match body.get("note") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(_) => return error(StatusCode::UNPROCESSABLE_ENTITY, "note must be a string"),
    };
    let timestamp = match body.get("timestamp") {
        None | Some(Value::Null) => now_ms(),
        Some(v) => match v.as_u64() {
            Some(t) => t,
            None => return error(StatusCode::UNPROCESSABLE_ENTITY, "timestamp must be a non-negative integer"),
        },
    };
    if !state.by_id.contains_key(sample_id) {
        return error(StatusCode::NOT_FOUND, format!("unknown sample {sample_id:?}"));
    }

    let judgment = Judgment {
        sample_id: sample_id.to_string(),
        score,
        note,
        timestamp,
    };
    let mut sessions = state.sessions.lock().unwrap();
    let log = sessions.entry(session.clone()).or_default();
    // Offline clients resend queued judgments; (sample_id, timestamp) identifies one.
    let duplicate = log
        .iter()
        .any(|j| j.sample_id == judgment.sample_id && j.timestamp == judgment.timestamp);
    if !duplicate {
        let path = state.judgments_dir.join(format!("{session}.jsonl"));
        if let Err(e) = fs::create_dir_all(&state.judgments_dir).map_err(|e| e.to_string()).and_then(|_| {
            append_jsonl(&path, &judgment).map_err(|e| e.to_string())
        }) {
            return error(StatusCode::INTERNAL_SERVER_ERROR, e);
        }
        log.push(judgment);
    }
    let metrics = metrics_body(&session, log, state.samples.len());
    Json(json!({ "ok": true, "duplicate": duplicate, "metrics": metrics })).into_response()
}

fn png(path: &Path) -> Response {
    match fs::read(path) {
        Ok(bytes) => ([(header::CONTENT_TYPE, "image/png")], bytes).into_response(),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, format!("{}: {e}", path.display())),
    }
}

async fn screenshot(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Response {
    match state.by_id.get(&id) {
        Some(&i) => png(&state.samples[i].screenshot),
        None => error(StatusCode::NOT_FOUND, format!("unknown sample {id:?}")),
    }
}

async fn tagged(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Response {
    match state.by_id.get(&id).and_then(|&i| state.samples[i].tagged.as_ref()) {
        Some(path) => png(path),
        None => error(StatusCode::NOT_FOUND, format!("no tagged screenshot for {id:?}")),
    }
}

async fn index_page() -> &'static str {
    "screennav review service. Start with --ui-dir to serve the annotation UI.\n"
}

/// Routes: `/api/health`, `/api/session/{id}/{next,judgment,metrics}`,
/// `/api/samples/{id}/{screenshot,tagged}`, and the UI bundle at `/`.
pub fn router(state: Arc<AppState>, ui_dir: Option<&Path>) -> Router {
    let guarded = Router::new()
        .route("/api/session/{id}/next", get(next_sample))
        .route("/api/session/{id}/judgment", post(post_judgment))
        .route("/api/session/{id}/metrics", get(metrics))
        .route("/api/samples/{id}/screenshot", get(screenshot))
        .route("/api/samples/{id}/tagged", get(tagged))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token));
    let app = Router::new().route("/api/health", get(health)).merge(guarded);
    let app = match ui_dir {
        Some(dir) => app.fallback_service(ServeDir::new(dir)),
        None => app.route("/", get(index_page)),
    };
    app.with_state(state)
}

pub async fn serve(state: AppState, ui_dir: Option<PathBuf>, bind: SocketAddr) -> Result<()> {
    let app = router(Arc::new(state), ui_dir.as_deref());
    let listener = tokio::net::TcpListener::bind(bind)
        .await
        .with_context(|| format!("binding {bind}"))?;
    tracing::info!(addr = %listener.local_addr()?, "review service listening");
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
