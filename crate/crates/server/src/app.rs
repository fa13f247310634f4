//! Shared server state and the HTTP/websocket surface.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use fieldsync_core::diffsync::SyncPayload;
use fieldsync_core::document::{builtin_templates, DocId};
use fieldsync_core::engine::{DocumentEngine, EngineConfig, LockRequest, ServerFrame, ServiceError};
use fieldsync_core::lock::{LockError, MobileLock};
use fieldsync_core::store::Store;
use fieldsync_core::task::{Directory, MobileUser, TaskError, TaskSyncRequest};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Value};

use crate::actor::{lock_directory, DocHandle};

/// Reported when a request names no user.
const ANONYMOUS_COORDINATOR: &str = "coordinator";

/// An error as the wire sees it.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: Value,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        ApiError { status, body: json!({"error": code, "message": message.into()}) }
    }

    fn malformed(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "Malformed", message)
    }
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        let status = StatusCode::from_u16(e.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        let mut body = json!({"error": e.code(), "message": e.to_string()});
        if let Some(state) = e.lock_state() {
            body["state"] = json!(state);
        }
        ApiError { status, body }
    }
}

impl From<TaskError> for ApiError {
    fn from(e: TaskError) -> Self {
        ServiceError::from(e).into()
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn parse<T: DeserializeOwned>(body: &[u8]) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::malformed(e.to_string()))
}

struct Shared {
    docs: RwLock<HashMap<DocId, DocHandle>>,
    directory: Arc<Mutex<Directory>>,
    store: Option<Arc<Store>>,
    config: EngineConfig,
}

/// The running service. Cloning shares the same state.
#[derive(Clone)]
pub struct App {
    shared: Arc<Shared>,
}

impl App {
    /// A server without persistence.
    pub fn in_memory(config: EngineConfig) -> App {
        App {
            shared: Arc::new(Shared {
                docs: RwLock::new(HashMap::new()),
                directory: Arc::new(Mutex::new(Directory::new())),
                store: None,
                config,
            }),
        }
    }

    /// Loads every stored document and rebuilds the task directory from the
    /// logs. Must be called inside a tokio runtime.
    pub fn open(store: Store, config: EngineConfig) -> Result<App, ServiceError> {
        let store = Arc::new(store);
        let mut directory = Directory::new();
        for user in store.load_users()? {
            directory.restore_user(user);
        }
        let mut engines = Vec::new();
        for doc_id in store.list()? {
            let (engine, history) = DocumentEngine::open(&doc_id, store.clone(), config.clone())?;
            for record in &history {
                directory.observe(&doc_id, &record.command);
            }
            engines.push((doc_id, engine));
        }
        let directory = Arc::new(Mutex::new(directory));
        log::info!("loaded {} documents from {}", engines.len(), store.dir().display());
        let docs = engines
            .into_iter()
            .map(|(id, engine)| (id, DocHandle::spawn(engine, directory.clone())))
            .collect();
        Ok(App {
            shared: Arc::new(Shared { docs: RwLock::new(docs), directory, store: Some(store), config }),
        })
    }

    pub fn router(&self) -> Router {
        Router::new()
            .route("/templates", get(templates))
            .route("/users", post(register_user))
            .route("/docs", get(list_docs).post(create_doc))
            .route("/docs/{id}", get(get_doc))
            .route("/docs/{id}/sync", get(sync_socket).post(sync_once))
            .route("/docs/{id}/locks", post(acquire_lock))
            .route("/docs/{id}/presence", get(presence))
            .route("/locks/{id}", axum::routing::delete(revoke_lock))
            .route("/locks/{id}/dismiss", post(dismiss_lock))
            .route("/tasks", get(list_tasks))
            .route("/tasks/{id}/sync", post(sync_task))
            .route("/notifications", get(notifications))
            .with_state(self.clone())
    }

    fn doc(&self, doc_id: &str) -> Result<DocHandle, ServiceError> {
        read(&self.shared.docs)
            .get(doc_id)
            .cloned()
            .ok_or_else(|| ServiceError::UnknownDocument(doc_id.into()))
    }

    fn directory(&self) -> std::sync::MutexGuard<'_, Directory> {
        lock_directory(&self.shared.directory)
    }

    fn doc_of_lock(&self, lock_id: &str) -> Result<DocHandle, ServiceError> {
        let doc_id = self
            .directory()
            .task(lock_id)
            .map(|t| t.doc_id.clone())
            .map_err(|_| LockError::UnknownLock(lock_id.into()))?;
        self.doc(&doc_id)
    }

    /// Holds a document's command loop for `duration`, as a slow command
    /// would. Other documents keep running.
    pub fn stall(&self, doc_id: &str, duration: Duration) -> Result<(), ServiceError> {
        self.doc(doc_id)?.stall(duration);
        Ok(())
    }

    /// Snapshots every document and saves the user list.
    pub async fn shutdown(&self) -> Result<(), ServiceError> {
        let handles: Vec<DocHandle> = read(&self.shared.docs).values().cloned().collect();
        for handle in handles {
            handle.call(|ctx| ctx.engine.persist()).await??;
        }
        self.save_users()
    }

    /// Drops idle desktop sessions everywhere.
    pub async fn sweep_sessions(&self) {
        let handles: Vec<DocHandle> = read(&self.shared.docs).values().cloned().collect();
        for handle in handles {
            let _ = handle.call(|ctx| ctx.engine.gc_sessions(Utc::now())).await;
        }
    }

    fn save_users(&self) -> Result<(), ServiceError> {
        if let Some(store) = &self.shared.store {
            let users: Vec<MobileUser> = self.directory().users().cloned().collect();
            store.save_users(&users)?;
        }
        Ok(())
    }
}

fn read<T>(lock: &RwLock<T>) -> std::sync::RwLockReadGuard<'_, T> {
    lock.read().unwrap_or_else(|e| e.into_inner())
}

/// `Authorization: Bearer <user>` or `?user=<user>`.
fn caller(headers: &HeaderMap, query: &HashMap<String, String>) -> Option<String> {
    let bearer = headers
        .get(axum::http::header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .map(|v| v.trim().to_owned());
    bearer.or_else(|| query.get("user").cloned()).filter(|u| !u.is_empty())
}

fn require_caller(headers: &HeaderMap, query: &HashMap<String, String>) -> ApiResult<String> {
    caller(headers, query).ok_or_else(|| {
        ApiError::new(StatusCode::UNAUTHORIZED, "Unidentified", "give a bearer token or ?user=")
    })
}

async fn templates() -> Json<Value> {
    Json(json!(builtin_templates()))
}

#[derive(Deserialize)]
struct NewUser {
    user_id: String,
    display_name: String,
}

async fn register_user(State(app): State<App>, body: Bytes) -> ApiResult<(StatusCode, Json<MobileUser>)> {
    let new: NewUser = parse(&body)?;
    let user = app.directory().register_user(&new.user_id, &new.display_name)?.clone();
    app.save_users()?;
    Ok((StatusCode::CREATED, Json(user)))
}

async fn list_docs(State(app): State<App>) -> Json<Vec<DocId>> {
    let mut ids: Vec<DocId> = read(&app.shared.docs).keys().cloned().collect();
    ids.sort();
    Json(ids)
}

#[derive(Deserialize, Default)]
struct NewDoc {
    #[serde(default)]
    template: Option<String>,
}

async fn create_doc(State(app): State<App>, body: Bytes) -> ApiResult<(StatusCode, Json<Value>)> {
    let new: NewDoc = if body.iter().all(u8::is_ascii_whitespace) { NewDoc::default() } else { parse(&body)? };
    let doc_id = uuid::Uuid::new_v4().to_string();
    let shared = &app.shared;
    let (engine, _) =
        DocumentEngine::create(&doc_id, new.template.as_deref(), Utc::now(), shared.store.clone(), shared.config.clone())?;
    let handle = DocHandle::spawn(engine, shared.directory.clone());
    shared.docs.write().unwrap_or_else(|e| e.into_inner()).insert(doc_id.clone(), handle);
    Ok((StatusCode::CREATED, Json(json!({"doc_id": doc_id}))))
}

async fn get_doc(State(app): State<App>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let doc = app.doc(&id)?.call(|ctx| ctx.engine.document().clone()).await?;
    Ok(Json(json!(doc)))
}

/// Runs one inbound desktop frame through the document loop.
async fn run_sync(handle: &DocHandle, payload: SyncPayload) -> Result<ServerFrame, ServiceError> {
    handle
        .call(move |ctx| {
            let outcome = ctx.engine.handle_sync(&payload, Utc::now())?;
            if let Some(record) = &outcome.record {
                ctx.observe(record);
            }
            Ok(outcome.frame)
        })
        .await?
}

/// A frame that did not parse. If it names a session, that session is
/// restarted from the authoritative text; otherwise the client is told to
/// reconnect with a fresh one.
async fn reject_frame(handle: &DocHandle, raw: &[u8], error: String) -> Result<ServerFrame, ApiError> {
    let session = serde_json::from_slice::<Value>(raw)
        .ok()
        .and_then(|v| v.get("session").and_then(Value::as_str).map(str::to_owned));
    match session {
        Some(session) => Ok(handle
            .call(move |ctx| ctx.engine.protocol_reset(&session, Utc::now(), error))
            .await?),
        None => Err(ApiError {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            body: json!({
                "error": "ProtocolError",
                "message": error,
                "hint": "start again with a new session id and an empty shadow",
            }),
        }),
    }
}

async fn sync_once(State(app): State<App>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<ServerFrame>> {
    let handle = app.doc(&id)?;
    let frame = match serde_json::from_slice::<SyncPayload>(&body) {
        Ok(payload) => run_sync(&handle, payload).await?,
        Err(e) => reject_frame(&handle, &body, e.to_string()).await?,
    };
    Ok(Json(frame))
}

async fn sync_socket(State(app): State<App>, Path(id): Path<String>, ws: WebSocketUpgrade) -> ApiResult<Response> {
    let handle = app.doc(&id)?;
    Ok(ws.on_upgrade(move |socket| sync_loop(socket, handle)))
}

async fn sync_loop(mut socket: WebSocket, handle: DocHandle) {
    while let Some(Ok(message)) = socket.recv().await {
        let raw = match message {
            Message::Text(text) => Bytes::from(text.as_str().to_owned()),
            Message::Binary(bytes) => bytes,
            Message::Close(_) => break,
            _ => continue,
        };
        let reply = match serde_json::from_slice::<SyncPayload>(&raw) {
            Ok(payload) => run_sync(&handle, payload).await.map_err(ApiError::from),
            Err(e) => reject_frame(&handle, &raw, e.to_string()).await,
        };
        let text = match reply {
            Ok(frame) => serde_json::to_string(&frame),
            Err(e) => serde_json::to_string(&e.body),
        };
        let Ok(text) = text else { break };
        if socket.send(Message::Text(text.into())).await.is_err() {
            break;
        }
    }
}

async fn acquire_lock(State(app): State<App>, Path(id): Path<String>, body: Bytes) -> ApiResult<(StatusCode, Json<MobileLock>)> {
    let request: LockRequest = parse(&body)?;
    let handle = app.doc(&id)?;
    if app.directory().user(&request.owner).is_err() {
        return Err(ServiceError::from(LockError::UnknownOwner(request.owner)).into());
    }
    let lock_id = uuid::Uuid::new_v4().to_string();
    let lock = handle
        .call(move |ctx| {
            let (lock, record) = ctx.engine.acquire_lock(lock_id, &request, Utc::now())?;
            ctx.observe(&record);
            Ok::<_, ServiceError>(lock)
        })
        .await??;
    Ok((StatusCode::CREATED, Json(lock)))
}

async fn revoke_lock(
    State(app): State<App>,
    Path(id): Path<String>,
    Query(query): Query<HashMap<String, String>>,
    headers: HeaderMap,
) -> ApiResult<Json<MobileLock>> {
    let by = caller(&headers, &query).unwrap_or_else(|| ANONYMOUS_COORDINATOR.into());
    let lock = app
        .doc_of_lock(&id)?
        .call(move |ctx| {
            let record = ctx.engine.revoke_lock(&id, &by, Utc::now())?;
            ctx.observe(&record);
            Ok::<_, ServiceError>(ctx.engine.document().lock(&id)?.clone())
        })
        .await??;
    Ok(Json(lock))
}

async fn dismiss_lock(
    State(app): State<App>,
    Path(id): Path<String>,
    Query(query): Query<HashMap<String, String>>,
    headers: HeaderMap,
) -> ApiResult<Json<MobileLock>> {
    let by = require_caller(&headers, &query)?;
    let lock = app
        .doc_of_lock(&id)?
        .call(move |ctx| {
            let record = ctx.engine.dismiss_lock(&id, &by, Utc::now())?;
            ctx.observe(&record);
            Ok::<_, ServiceError>(ctx.engine.document().lock(&id)?.clone())
        })
        .await??;
    Ok(Json(lock))
}

async fn presence(State(app): State<App>, Path(id): Path<String>) -> ApiResult<Json<Vec<MobileUser>>> {
    app.doc(&id)?;
    Ok(Json(app.directory().presence(&id)))
}

async fn list_tasks(
    State(app): State<App>,
    Query(query): Query<HashMap<String, String>>,
    headers: HeaderMap,
) -> ApiResult<Json<Value>> {
    let user = require_caller(&headers, &query)?;
    let tasks = app.directory().list_tasks(&user)?;
    Ok(Json(json!(tasks)))
}

async fn notifications(
    State(app): State<App>,
    Query(query): Query<HashMap<String, String>>,
    headers: HeaderMap,
) -> ApiResult<Json<Value>> {
    let user = require_caller(&headers, &query)?;
    let since = match query.get("since") {
        Some(s) => Some(
            DateTime::parse_from_rfc3339(s)
                .map_err(|e| ApiError::malformed(format!("since: {e}")))?
                .with_timezone(&Utc),
        ),
        None => None,
    };
    let list = app.directory().poll_notifications(&user, since)?;
    Ok(Json(json!(list)))
}

async fn sync_task(
    State(app): State<App>,
    Path(id): Path<String>,
    Query(query): Query<HashMap<String, String>>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<Json<Value>> {
    let user = require_caller(&headers, &query)?;
    let mut raw: Value = parse(&body)?;
    match raw.get("task") {
        None => raw["task"] = json!(id),
        Some(task) if task.as_str() == Some(id.as_str()) => {}
        Some(_) => return Err(ApiError::malformed("body task does not match the path")),
    }
    let request: TaskSyncRequest = serde_json::from_value(raw).map_err(|e| ApiError::malformed(e.to_string()))?;
    app.directory().user(&user)?;
    let handle = {
        let directory = app.directory();
        let doc_id = directory.task(&id).map(|t| t.doc_id.clone())?;
        drop(directory);
        app.doc(&doc_id)?
    };
    let ack = handle
        .call(move |ctx| {
            let now = Utc::now();
            let (ack, record) = ctx.engine.sync_task(&user, &request, now)?;
            match record {
                Some(record) => ctx.observe(&record),
                None if request.notes.is_none() => ctx.directory().touch_user(&user, request.location, now)?,
                None => {}
            }
            Ok::<_, ServiceError>(ack)
        })
        .await??;
    Ok(Json(json!(ack)))
}
