//! HTTP and WebSocket front end over the [`Hub`].

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path as FsPath, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use anyhow::Context;
use axum::body::Bytes;
use axum::extract::ws::{CloseFrame, Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures_util::{SinkExt, StreamExt};
use serde::{Deserialize, Serialize};
use tokio::sync::{mpsc, oneshot};

use crate::clock::SystemClock;
use crate::cms::{export_worksheet, import_worksheet, StoreError, WorksheetStore};
use crate::console::MetricsOptions;
use crate::grader::Grade;
use crate::model::Role;
use crate::server::config::Config;
use crate::server::events::{recover_with_snapshots, FileStore, SnapshotDir};
use crate::server::hub::{Effect, FrameError, Hub, HubDeps, JoinError, Outbox};
use crate::tutor::{BackendError, TutorBackend};

pub const EVENT_LOG_FILE: &str = "events.jsonl";
pub const SNAPSHOT_DIR: &str = "snapshots";

/// Routes frames to live WebSocket connections.
#[derive(Debug, Default)]
pub struct ChannelOutbox {
    senders: Mutex<HashMap<String, mpsc::UnboundedSender<String>>>,
}

impl ChannelOutbox {
    fn register(&self, token: &str) -> mpsc::UnboundedReceiver<String> {
        let (tx, rx) = mpsc::unbounded_channel();
        self.senders.lock().unwrap_or_else(|e| e.into_inner()).insert(token.to_owned(), tx);
        rx
    }

    fn unregister(&self, token: &str) {
        self.senders.lock().unwrap_or_else(|e| e.into_inner()).remove(token);
    }
}

impl Outbox for ChannelOutbox {
    fn deliver(&self, session: &str, frame: &str) {
        if let Some(tx) = self.senders.lock().unwrap_or_else(|e| e.into_inner()).get(session) {
            let _ = tx.send(frame.to_owned());
        }
    }
}

#[derive(Clone)]
pub struct AppState {
    pub hub: Arc<Hub>,
    pub store: Arc<WorksheetStore>,
    pub backend: Arc<dyn TutorBackend>,
    pub grader: Arc<dyn Grade>,
    pub outbox: Arc<ChannelOutbox>,
    pub tutor_timeout: Duration,
    pub metrics: MetricsOptions,
    pub static_dir: Option<PathBuf>,
}

/// Opens the content store and the event log, recovers rooms, and wires
/// everything into shared state.
pub fn build_state(
    config: &Config,
    backend: Arc<dyn TutorBackend>,
    grader: Arc<dyn Grade>,
) -> anyhow::Result<AppState> {
    let store = Arc::new(WorksheetStore::open(&config.content_dir).context("opening content directory")?);
    std::fs::create_dir_all(&config.data_dir).context("creating data directory")?;
    let (file_store, scan) =
        FileStore::open(&config.data_dir.join(EVENT_LOG_FILE), config.fsync).context("opening event log")?;
    if let Some(t) = &scan.truncation {
        tracing::warn!(last_valid_seq = t.last_valid_seq, reason = %t.reason, "event log had a malformed tail; truncated");
    }
    let snapshots = SnapshotDir::new(config.data_dir.join(SNAPSHOT_DIR)).context("opening snapshot directory")?;
    let recovered = recover_with_snapshots(&scan.records, snapshots.load_all()?);
    if let Some(t) = &recovered.truncation {
        anyhow::bail!(
            "event log cannot be replayed past seq {}: {}; move the log aside or repair it",
            t.last_valid_seq,
            t.reason
        );
    }
    tracing::info!(rooms = recovered.state.rooms.len(), last_seq = recovered.last_seq, "recovered");

    let outbox = Arc::new(ChannelOutbox::default());
    let hub = Hub::new(
        config.hub_config()?,
        HubDeps {
            clock: Arc::new(SystemClock),
            worksheets: store.clone(),
            outbox: outbox.clone(),
            verifier: config.verifier(),
            snapshots: Some(snapshots),
        },
        Box::new(file_store),
        recovered,
    );
    Ok(AppState {
        hub: Arc::new(hub),
        store,
        backend,
        grader,
        outbox,
        tutor_timeout: config.tutor_timeout(),
        metrics: MetricsOptions {
            unlabelable_sections: config.unlabelable_sections(),
        },
        static_dir: config.static_dir.clone(),
    })
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/join", post(join))
        .route("/api/worksheets", get(list_worksheets))
        .route("/api/worksheets/{id}", get(get_worksheet).put(put_worksheet))
        .route("/api/metrics", get(metrics))
        .route("/ws", get(ws_upgrade))
        .fallback(static_file)
        .with_state(state)
}

/// Serves until ctrl-c.
pub async fn serve(config: Config, backend: Arc<dyn TutorBackend>, grader: Arc<dyn Grade>) -> anyhow::Result<()> {
    let state = build_state(&config, backend, grader)?;
    let listener = tokio::net::TcpListener::bind(&config.listen)
        .await
        .with_context(|| format!("binding {}", config.listen))?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

/// Binds an ephemeral port and serves in the background.
pub async fn spawn(state: AppState) -> anyhow::Result<SocketAddr> {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await?;
    let addr = listener.local_addr()?;
    tokio::spawn(async move {
        let _ = axum::serve(listener, router(state)).await;
    });
    Ok(addr)
}

#[derive(Serialize)]
struct ApiError {
    error: &'static str,
    message: String,
}

fn api_error(status: StatusCode, error: &'static str, message: impl ToString) -> Response {
    (
        status,
        Json(ApiError {
            error,
            message: message.to_string(),
        }),
    )
        .into_response()
}

#[derive(Deserialize)]
struct JoinRequest {
    email: String,
    #[serde(default)]
    group_number: Option<u32>,
}

async fn join(State(state): State<AppState>, Json(request): Json<JoinRequest>) -> Response {
    let hub = state.hub.clone();
    let result = tokio::task::spawn_blocking(move || hub.join(&request.email, request.group_number)).await;
    match result {
        Ok(Ok(response)) => Json(response).into_response(),
        Ok(Err(e)) => {
            let (status, code) = match &e {
                JoinError::InvalidEmail | JoinError::MissingGroup => (StatusCode::BAD_REQUEST, "invalid"),
                JoinError::UnknownGroup(_) => (StatusCode::NOT_FOUND, "unknown_group"),
                JoinError::RoomFull { .. } => (StatusCode::CONFLICT, "room_full"),
                JoinError::Rejected(_) => (StatusCode::FORBIDDEN, "rejected"),
                JoinError::NoWorksheet(_) => (StatusCode::SERVICE_UNAVAILABLE, "no_worksheet"),
                JoinError::Log(_) => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
            };
            api_error(status, code, e)
        }
        Err(e) => api_error(StatusCode::INTERNAL_SERVER_ERROR, "internal", e),
    }
}

fn bearer(headers: &HeaderMap) -> Option<&str> {
    headers
        .get(header::AUTHORIZATION)?
        .to_str()
        .ok()?
        .strip_prefix("Bearer ")
        .map(str::trim)
}

fn caller_role(state: &AppState, headers: &HeaderMap) -> Option<Role> {
    bearer(headers)
        .and_then(|t| state.hub.session_participant(t))
        .map(|p| p.role)
}

fn require_ta(state: &AppState, headers: &HeaderMap) -> Result<(), Response> {
    match caller_role(state, headers) {
        Some(Role::Ta) => Ok(()),
        Some(Role::Student) => Err(api_error(StatusCode::FORBIDDEN, "permission", "TAs only")),
        None => Err(api_error(StatusCode::UNAUTHORIZED, "unauthorized", "a TA session token is required")),
    }
}

#[derive(Serialize)]
struct WorksheetEntry {
    id: String,
    title: String,
    published: bool,
    problems: usize,
}

async fn list_worksheets(State(state): State<AppState>, headers: HeaderMap) -> Response {
    let is_ta = caller_role(&state, &headers) == Some(Role::Ta);
    let ids = match state.store.list() {
        Ok(ids) => ids,
        Err(e) => return api_error(StatusCode::INTERNAL_SERVER_ERROR, "internal", e),
    };
    let entries: Vec<WorksheetEntry> = ids
        .iter()
        .filter_map(|id| state.store.load(id).ok())
        .filter(|w| w.published || is_ta)
        .map(|w| WorksheetEntry {
            id: w.id.clone(),
            title: w.title.clone(),
            published: w.published,
            problems: w.problems.len(),
        })
        .collect();
    Json(entries).into_response()
}

#[derive(Deserialize)]
struct FormatQuery {
    #[serde(default)]
    format: Option<String>,
}

async fn get_worksheet(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(query): Query<FormatQuery>,
    headers: HeaderMap,
) -> Response {
    let worksheet = match state.store.load(&id) {
        Ok(w) => w,
        Err(StoreError::NotFound(_)) | Err(StoreError::InvalidId(_)) => {
            return api_error(StatusCode::NOT_FOUND, "not_found", format!("worksheet `{id}` not found"))
        }
        Err(e) => return api_error(StatusCode::INTERNAL_SERVER_ERROR, "internal", e),
    };
    if !worksheet.published && caller_role(&state, &headers) != Some(Role::Ta) {
        return api_error(StatusCode::NOT_FOUND, "not_found", format!("worksheet `{id}` not found"));
    }
    if query.format.as_deref() == Some("json") {
        return Json(&*worksheet).into_response();
    }
    (
        [(header::CONTENT_TYPE, "text/markdown; charset=utf-8")],
        export_worksheet(&worksheet),
    )
        .into_response()
}

async fn put_worksheet(State(state): State<AppState>, Path(id): Path<String>, headers: HeaderMap, body: Bytes) -> Response {
    if let Err(r) = require_ta(&state, &headers) {
        return r;
    }
    let Ok(text) = std::str::from_utf8(&body) else {
        return api_error(StatusCode::BAD_REQUEST, "invalid", "body must be UTF-8 markdown");
    };
    let worksheet = match import_worksheet(text) {
        Ok(w) => w,
        Err(errors) => {
            let lines: Vec<String> = errors.iter().map(|e| e.to_string()).collect();
            return (
                StatusCode::UNPROCESSABLE_ENTITY,
                Json(serde_json::json!({ "error": "parse", "errors": lines })),
            )
                .into_response();
        }
    };
    if worksheet.id != id {
        return api_error(
            StatusCode::BAD_REQUEST,
            "invalid",
            format!("front matter id `{}` does not match `{id}`", worksheet.id),
        );
    }
    match state.store.store(&worksheet) {
        Ok(()) => Json(worksheet).into_response(),
        Err(StoreError::InvalidId(_)) => api_error(StatusCode::BAD_REQUEST, "invalid", "invalid worksheet id"),
        Err(StoreError::Invalid(errors)) => {
            let lines: Vec<String> = errors.iter().map(|e| e.to_string()).collect();
            (
                StatusCode::UNPROCESSABLE_ENTITY,
                Json(serde_json::json!({ "error": "invalid", "errors": lines })),
            )
                .into_response()
        }
        Err(e) => api_error(StatusCode::INTERNAL_SERVER_ERROR, "internal", e),
    }
}

async fn metrics(State(state): State<AppState>, headers: HeaderMap) -> Response {
    if let Err(r) = require_ta(&state, &headers) {
        return r;
    }
    Json(state.hub.metrics(&state.metrics)).into_response()
}

#[derive(Deserialize)]
struct WsQuery {
    token: String,
}

async fn ws_upgrade(State(state): State<AppState>, Query(query): Query<WsQuery>, upgrade: WebSocketUpgrade) -> Response {
    if state.hub.session_participant(&query.token).is_none() {
        return api_error(StatusCode::UNAUTHORIZED, "unauthorized", "unknown session token");
    }
    upgrade.on_upgrade(move |socket| connection(state, query.token, socket))
}

async fn connection(state: AppState, token: String, socket: WebSocket) {
    let (mut sink, mut stream) = socket.split();
    let mut rx = state.outbox.register(&token);
    let (close_tx, close_rx) = oneshot::channel::<CloseFrame>();

    let writer = tokio::spawn(async move {
        while let Some(frame) = rx.recv().await {
            if sink.send(Message::Text(frame.into())).await.is_err() {
                return;
            }
        }
        let close = close_rx.await.ok();
        let _ = sink.send(Message::Close(close)).await;
    });

    if state.hub.connect(&token).is_err() {
        state.outbox.unregister(&token);
        let _ = writer.await;
        return;
    }

    let mut close_tx = Some(close_tx);
    while let Some(Ok(message)) = stream.next().await {
        let text = match message {
            Message::Text(t) => t.to_string(),
            Message::Binary(_) => {
                state.outbox.deliver(
                    &token,
                    &crate::server::protocol::encode_server(&crate::server::protocol::ServerMessage::error(
                        crate::server::protocol::ErrorCode::Malformed,
                        "frames must be text",
                        None,
                    )),
                );
                continue;
            }
            Message::Close(_) => break,
            Message::Ping(_) | Message::Pong(_) => continue,
        };
        let hub = state.hub.clone();
        let t = token.clone();
        let handled = tokio::task::spawn_blocking(move || hub.handle_frame(&t, &text)).await;
        match handled {
            Ok(Ok(effects)) => {
                for effect in effects {
                    tokio::spawn(run_effect(state.clone(), effect));
                }
            }
            Ok(Err(FrameError::Version(v))) => {
                if let Some(tx) = close_tx.take() {
                    let _ = tx.send(CloseFrame {
                        code: 1002,
                        reason: format!("unsupported protocol version {v:?}").into(),
                    });
                }
                break;
            }
            Ok(Err(FrameError::UnknownSession)) | Err(_) => break,
        }
    }

    state.hub.disconnect(&token);
    state.outbox.unregister(&token);
    drop(close_tx);
    let _ = writer.await;
}

/// Runs slow work off the async threads and reports back to the hub.
pub async fn run_effect(state: AppState, effect: Effect) {
    match effect {
        Effect::Tutor {
            room_id,
            ticket,
            context,
        } => {
            let backend = state.backend.clone();
            let call = tokio::task::spawn_blocking(move || backend.complete(&context));
            let reply = match tokio::time::timeout(state.tutor_timeout, call).await {
                Ok(Ok(reply)) => reply,
                Ok(Err(join)) => Err(BackendError::Transport(join.to_string())),
                Err(_) => Err(BackendError::Timeout),
            };
            let hub = state.hub.clone();
            let _ = tokio::task::spawn_blocking(move || hub.complete_tutor(&room_id, &ticket, reply)).await;
        }
        Effect::Grade {
            room_id,
            ticket,
            problem,
            solution,
        } => {
            let grader = state.grader.clone();
            let hub = state.hub.clone();
            let _ = tokio::task::spawn_blocking(move || {
                let outcomes = grader.grade(&problem, &solution);
                hub.complete_grading(&room_id, &ticket, outcomes);
            })
            .await;
        }
    }
}

fn content_type(path: &FsPath) -> &'static str {
    match path.extension().and_then(|e| e.to_str()) {
        Some("html") => "text/html; charset=utf-8",
        Some("js") | Some("mjs") => "text/javascript; charset=utf-8",
        Some("css") => "text/css; charset=utf-8",
        Some("json") => "application/json",
        Some("svg") => "image/svg+xml",
        Some("png") => "image/png",
        Some("ico") => "image/x-icon",
        Some("wasm") => "application/wasm",
        _ => "application/octet-stream",
    }
}

async fn static_file(State(state): State<AppState>, uri: Uri) -> Response {
    let Some(root) = &state.static_dir else {
        return api_error(StatusCode::NOT_FOUND, "not_found", "no such route");
    };
    let rel = uri.path().trim_start_matches('/');
    let rel = if rel.is_empty() { "index.html" } else { rel };
    if rel.split('/').any(|part| part == ".." || part.is_empty() || part.starts_with('.')) {
        return api_error(StatusCode::NOT_FOUND, "not_found", "no such file");
    }
    let path = root.join(rel);
    match tokio::fs::read(&path).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, content_type(&path))], bytes).into_response(),
        Err(_) => api_error(StatusCode::NOT_FOUND, "not_found", "no such file"),
    }
}
