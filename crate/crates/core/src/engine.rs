//! The authoritative state of one document and every operation on it.
//!
//! A [`DocumentEngine`] is meant to be driven by exactly one caller at a time
//! (the document's command loop). Each mutating method validates, appends a
//! [`CommandRecord`] to the store and only then changes memory, so a storage
//! failure leaves the engine as it was. The records are returned so the caller
//! can feed them to the task [`Directory`](crate::task::Directory).

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffsync::{InboundStatus, Role, SyncPayload, SyncSession};
use crate::document::{Command, CommandRecord, DocId, Document, DocumentError};
use crate::lock::{filter_edits, LockError, LockId, LockState, MobileLock, Palette, UserId};
use crate::store::{Store, StoreError};
use crate::task::{SyncAck, TaskError, TaskSyncRequest};
use crate::text::{compute_diff, DiffScript, TextError, DEFAULT_MAX_BYTES};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("unknown document {0}")]
    UnknownDocument(DocId),
    #[error("session {0} was replaced after a desync")]
    RetiredSession(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Lock(#[from] LockError),
    #[error(transparent)]
    Document(DocumentError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl From<DocumentError> for ServiceError {
    fn from(e: DocumentError) -> Self {
        match e {
            DocumentError::Lock(l) => ServiceError::Lock(l),
            other => ServiceError::Document(other),
        }
    }
}

impl From<TextError> for ServiceError {
    fn from(e: TextError) -> Self {
        ServiceError::Document(DocumentError::Text(e))
    }
}

impl ServiceError {
    /// HTTP status for this error.
    pub fn status(&self) -> u16 {
        match self {
            ServiceError::UnknownDocument(_)
            | ServiceError::Task(TaskError::UnknownUser(_) | TaskError::UnknownTask(_))
            | ServiceError::Lock(LockError::UnknownLock(_))
            | ServiceError::Store(StoreError::UnknownDocument(_)) => 404,
            ServiceError::Lock(LockError::NotOwner { .. }) => 403,
            ServiceError::Lock(
                LockError::OverlapsExistingLock { .. }
                | LockError::LockNotActive { .. }
                | LockError::PaletteExhausted,
            )
            | ServiceError::Task(TaskError::DuplicateUser(_))
            | ServiceError::RetiredSession(_) => 409,
            ServiceError::Store(_) => 503,
            _ => 422,
        }
    }

    /// Stable machine-readable name.
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::UnknownDocument(_) => "UnknownDocument",
            ServiceError::RetiredSession(_) => "RetiredSession",
            ServiceError::Protocol(_) => "ProtocolError",
            ServiceError::Task(TaskError::UnknownUser(_)) => "UnknownUser",
            ServiceError::Task(TaskError::UnknownTask(_)) => "UnknownTask",
            ServiceError::Task(TaskError::DuplicateUser(_)) => "DuplicateUser",
            ServiceError::Task(TaskError::InvalidLocation) => "InvalidLocation",
            ServiceError::Lock(e) => match e {
                LockError::OverlapsExistingLock { .. } => "OverlapsExistingLock",
                LockError::EmptySelection => "EmptySelection",
                LockError::UnknownOwner(_) => "UnknownOwner",
                LockError::RangeOutOfBounds { .. } => "RangeOutOfBounds",
                LockError::UnknownLock(_) => "UnknownLock",
                LockError::LockNotActive { .. } => "LockNotActive",
                LockError::NotOwner { .. } => "NotOwner",
                LockError::PaletteExhausted => "PaletteExhausted",
            },
            ServiceError::Document(e) => match e {
                DocumentError::UnknownTemplate(_) => "UnknownTemplate",
                DocumentError::TooLarge { .. } => "DocumentTooLarge",
                DocumentError::AlreadyCreated => "AlreadyCreated",
                DocumentError::Lock(_) => "LockError",
                DocumentError::Text(_) => "TextError",
            },
            ServiceError::Store(StoreError::UnknownDocument(_)) => "UnknownDocument",
            ServiceError::Store(StoreError::CorruptSnapshot { .. }) => "CorruptSnapshot",
            ServiceError::Store(_) => "StorageUnavailable",
        }
    }

    /// Lock state carried by `LockNotActive`, so mobile clients can stop.
    pub fn lock_state(&self) -> Option<LockState> {
        match self {
            ServiceError::Lock(LockError::LockNotActive { state }) => Some(*state),
            _ => None,
        }
    }
}

/// Tells a desktop client its session was replaced and hands it the
/// authoritative text to restart from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionReset {
    pub previous: String,
    pub session: String,
    pub text: String,
    pub reason: String,
}

/// A frame sent from the server to a desktop client.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ServerFrame {
    Reset { reset: SessionReset },
    Sync(SyncPayload),
}

#[derive(Debug, Clone)]
pub struct SyncOutcome {
    pub frame: ServerFrame,
    pub status: Option<InboundStatus>,
    /// Present when the client's edits changed the document.
    pub record: Option<CommandRecord>,
    /// The client changed text inside a lock and part of its edit was dropped.
    pub filtered: bool,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
pub struct LockRequest {
    pub start: usize,
    pub end: usize,
    pub description: String,
    pub owner: UserId,
}

#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub snapshot_every: u64,
    pub session_idle: Duration,
    pub palette: Palette,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            snapshot_every: 50,
            session_idle: Duration::minutes(30),
            palette: Palette::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct EngineStats {
    pub syncs: u64,
    pub rollbacks: u64,
    pub resets: u64,
    pub filtered_syncs: u64,
    /// Lock commits that actually changed the document.
    pub splices: u64,
    pub idempotent_replays: u64,
}

#[derive(Debug, Clone)]
struct ServerSession {
    sync: SyncSession,
    last_seen: DateTime<Utc>,
}

#[derive(Debug)]
pub struct DocumentEngine {
    doc: Document,
    sessions: BTreeMap<String, ServerSession>,
    retired: BTreeMap<String, DateTime<Utc>>,
    receipts: HashMap<(LockId, String), SyncAck>,
    store: Option<Arc<Store>>,
    config: EngineConfig,
    snapshot_rev: u64,
    stats: EngineStats,
}

impl DocumentEngine {
    /// Creates a new document, logging its CREATE record and writing the
    /// first snapshot.
    pub fn create(
        doc_id: &str,
        template_id: Option<&str>,
        now: DateTime<Utc>,
        store: Option<Arc<Store>>,
        config: EngineConfig,
    ) -> Result<(DocumentEngine, CommandRecord), ServiceError> {
        let command = Document::create_command(doc_id, template_id, now)?;
        let mut doc = Document::empty();
        doc.apply(&command)?;
        let record = CommandRecord { rev: 0, command };
        if let Some(store) = &store {
            if store.exists(doc_id) {
                return Err(DocumentError::AlreadyCreated.into());
            }
            store.append(doc_id, &record)?;
            store.persist(&doc)?;
        }
        Ok((DocumentEngine::from_parts(doc, store, config), record))
    }

    /// Loads a stored document. Returns its full history as well, for
    /// rebuilding derived state.
    pub fn open(
        doc_id: &str,
        store: Arc<Store>,
        config: EngineConfig,
    ) -> Result<(DocumentEngine, Vec<CommandRecord>), ServiceError> {
        let history = store.repair(doc_id)?;
        let doc = store.load(doc_id)?;
        let mut engine = DocumentEngine::from_parts(doc, Some(store), config);
        for record in &history.records {
            if let Command::TaskSync { task, idempotency_key, at, .. } = &record.command {
                engine.receipts.insert(
                    (task.clone(), idempotency_key.clone()),
                    SyncAck { server_time: *at, task_state: LockState::Active },
                );
            }
        }
        Ok((engine, history.records))
    }

    /// Wraps an existing document without persistence.
    pub fn in_memory(doc: Document, config: EngineConfig) -> DocumentEngine {
        DocumentEngine::from_parts(doc, None, config)
    }

    fn from_parts(doc: Document, store: Option<Arc<Store>>, config: EngineConfig) -> DocumentEngine {
        DocumentEngine {
            snapshot_rev: doc.revision,
            doc,
            sessions: BTreeMap::new(),
            retired: BTreeMap::new(),
            receipts: HashMap::new(),
            store,
            config,
            stats: EngineStats::default(),
        }
    }

    pub fn document(&self) -> &Document {
        &self.doc
    }

    pub fn doc_id(&self) -> &str {
        &self.doc.doc_id
    }

    pub fn stats(&self) -> &EngineStats {
        &self.stats
    }

    pub fn session_ids(&self) -> impl Iterator<Item = &str> {
        self.sessions.keys().map(String::as_str)
    }

    pub fn session(&self, session_id: &str) -> Option<&SyncSession> {
        self.sessions.get(session_id).map(|s| &s.sync)
    }

    /// True when no server session holds an unacknowledged text change.
    pub fn is_settled(&self) -> bool {
        self.sessions
            .values()
            .all(|s| s.sync.outbound().all(|e| e.is_keepalive()))
    }

    fn execute(&mut self, command: Command) -> Result<(CommandRecord, DiffScript), ServiceError> {
        let mut next = self.doc.clone();
        let change = next.apply(&command)?;
        let record = CommandRecord { rev: next.revision, command };
        if let Some(store) = &self.store {
            store.append(&self.doc.doc_id, &record)?;
        }
        self.doc = next;
        if self.doc.revision - self.snapshot_rev >= self.config.snapshot_every {
            if let Err(e) = self.persist() {
                log::warn!("{}: periodic snapshot failed: {e}", self.doc.doc_id);
            }
        }
        Ok((record, change))
    }

    /// Writes a snapshot of the current state.
    pub fn persist(&mut self) -> Result<(), ServiceError> {
        if let Some(store) = &self.store {
            store.persist(&self.doc)?;
            self.snapshot_rev = self.doc.revision;
        }
        Ok(())
    }

    /// Drops sessions idle for longer than the configured limit.
    pub fn gc_sessions(&mut self, now: DateTime<Utc>) {
        let idle = self.config.session_idle;
        self.sessions.retain(|_, s| now - s.last_seen <= idle);
        self.retired.retain(|_, at| now - *at <= idle);
    }

    /// One server-side sync cycle for a desktop payload: apply the client's
    /// edits, keep lock interiors intact, and answer with the edits that bring
    /// the client to the authoritative text.
    pub fn handle_sync(&mut self, payload: &SyncPayload, now: DateTime<Utc>) -> Result<SyncOutcome, ServiceError> {
        self.gc_sessions(now);
        if self.retired.contains_key(&payload.session) {
            return Err(ServiceError::RetiredSession(payload.session.clone()));
        }
        let mut session = match self.sessions.get(&payload.session) {
            Some(s) => s.sync.clone(),
            None => SyncSession::new(payload.session.clone(), Role::Server),
        };
        let live = self.doc.text.clone();
        let (merged, status) = match session.apply_inbound(payload, &live) {
            Ok(r) => r,
            Err(e) => return Ok(self.reset(&payload.session, now, e.to_string())),
        };
        if merged.len() > DEFAULT_MAX_BYTES {
            let e = DocumentError::TooLarge { size: merged.len(), limit: DEFAULT_MAX_BYTES };
            return Ok(self.reset(&payload.session, now, e.to_string()));
        }

        let mut record = None;
        let mut filtered = false;
        if merged != live {
            let change = compute_diff(&live, &merged)?;
            let allowed = filter_edits(&change, &self.doc.locks);
            filtered = allowed != change;
            if allowed.has_changes() {
                let command = Command::Sync { session: payload.session.clone(), script: allowed };
                record = Some(self.execute(command)?.0);
            }
        }
        let frame = session
            .prepare_outbound(&self.doc.text)
            .map_err(|e| ServiceError::Protocol(e.to_string()))?;

        self.stats.syncs += 1;
        self.stats.rollbacks += u64::from(status == InboundStatus::RolledBack);
        self.stats.filtered_syncs += u64::from(filtered);
        self.sessions.insert(payload.session.clone(), ServerSession { sync: session, last_seen: now });
        Ok(SyncOutcome {
            frame: ServerFrame::Sync(frame),
            status: Some(status),
            record,
            filtered,
        })
    }

    /// Replaces a session that can no longer be reconciled with a fresh one
    /// seeded from the document.
    fn reset(&mut self, previous: &str, now: DateTime<Utc>, reason: String) -> SyncOutcome {
        log::info!("{}: resetting session {previous}: {reason}", self.doc.doc_id);
        self.stats.resets += 1;
        let session = format!("{previous}~{}", self.stats.resets);
        self.sessions.remove(previous);
        self.retired.insert(previous.to_owned(), now);
        self.sessions.insert(
            session.clone(),
            ServerSession {
                sync: SyncSession::with_text(session.clone(), Role::Server, &self.doc.text),
                last_seen: now,
            },
        );
        SyncOutcome {
            frame: ServerFrame::Reset {
                reset: SessionReset {
                    previous: previous.to_owned(),
                    session,
                    text: self.doc.text.clone(),
                    reason,
                },
            },
            status: None,
            record: None,
            filtered: false,
        }
    }

    /// Reply for a payload that could not be parsed: a new session the
    /// client can restart from.
    pub fn protocol_reset(&mut self, session: &str, now: DateTime<Utc>, reason: String) -> ServerFrame {
        self.reset(session, now, reason).frame
    }

    /// Creates an ACTIVE lock. The caller has checked that the owner exists.
    pub fn acquire_lock(
        &mut self,
        lock_id: LockId,
        request: &LockRequest,
        now: DateTime<Utc>,
    ) -> Result<(MobileLock, CommandRecord), ServiceError> {
        let color = self.config.palette.assign(&self.doc.locks, &request.owner)?;
        let lock = MobileLock {
            id: lock_id,
            owner: request.owner.clone(),
            start: request.start,
            end: request.end,
            description: request.description.clone(),
            color,
            state: LockState::Active,
            created_at: now,
            last_sync_at: None,
        };
        let (record, _) = self.execute(Command::LockAcquire { lock: lock.clone() })?;
        Ok((lock, record))
    }

    pub fn revoke_lock(&mut self, lock_id: &str, by: &str, now: DateTime<Utc>) -> Result<CommandRecord, ServiceError> {
        let command = Command::LockRevoke { lock_id: lock_id.into(), by: by.into(), at: now };
        Ok(self.execute(command)?.0)
    }

    pub fn dismiss_lock(&mut self, lock_id: &str, by: &str, now: DateTime<Utc>) -> Result<CommandRecord, ServiceError> {
        let command = Command::LockDismiss { lock_id: lock_id.into(), by: by.into(), at: now };
        Ok(self.execute(command)?.0)
    }

    /// Replaces a lock's interior with `text` and returns the splice.
    pub fn commit_lock(
        &mut self,
        lock_id: &str,
        user: &str,
        text: &str,
        now: DateTime<Utc>,
    ) -> Result<(DiffScript, CommandRecord), ServiceError> {
        let command = Command::LockCommit {
            lock_id: lock_id.into(),
            user: user.into(),
            text: text.into(),
            at: now,
        };
        let (record, change) = self.execute(command)?;
        self.stats.splices += 1;
        Ok((change, record))
    }

    /// Mobile push. A repeated idempotency key returns the first answer and
    /// changes nothing; `notes: None` only checks the task is still live.
    pub fn sync_task(
        &mut self,
        user: &str,
        request: &TaskSyncRequest,
        now: DateTime<Utc>,
    ) -> Result<(SyncAck, Option<CommandRecord>), ServiceError> {
        if request.location.is_some_and(|l| !l.is_valid()) {
            return Err(TaskError::InvalidLocation.into());
        }
        let key = (request.task.clone(), request.idempotency_key.clone());
        if let Some(ack) = self.receipts.get(&key) {
            self.stats.idempotent_replays += 1;
            return Ok((ack.clone(), None));
        }
        let Some(notes) = &request.notes else {
            let lock = self.doc.lock(&request.task)?;
            if lock.owner != user {
                return Err(LockError::NotOwner { user: user.into() }.into());
            }
            if !lock.is_active() {
                return Err(LockError::LockNotActive { state: lock.state }.into());
            }
            return Ok((SyncAck { server_time: now, task_state: lock.state }, None));
        };
        let command = Command::TaskSync {
            task: request.task.clone(),
            user: user.into(),
            notes: notes.clone(),
            idempotency_key: request.idempotency_key.clone(),
            location: request.location,
            at: now,
        };
        let (record, _) = self.execute(command)?;
        self.stats.splices += 1;
        let ack = SyncAck { server_time: now, task_state: LockState::Active };
        self.receipts.insert(key, ack.clone());
        Ok((ack, Some(record)))
    }
}
