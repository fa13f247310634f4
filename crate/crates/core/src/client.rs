//! Client-side state: the desktop editor's sync session and the mobile
//! device's tasks, drafts and auto-sync timer.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Duration, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::diffsync::{InboundStatus, Role, SyncError, SyncPayload, SyncSession};
use crate::document::Coordinates;
use crate::engine::ServerFrame;
use crate::lock::{LockState, UserId};
use crate::task::{Notification, NotificationKind, SyncAck, Task, TaskId, TaskSyncRequest};

/// What a desktop client did with a server frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Received {
    Applied(InboundStatus),
    Reset,
    /// Frame for a session this client no longer uses, or one it could not
    /// apply.
    Ignored(String),
}

/// A desktop editor: the live text the user types into plus its sync session.
#[derive(Debug, Clone)]
pub struct DesktopClient {
    session: SyncSession,
    text: String,
}

impl DesktopClient {
    pub fn new(session_id: impl Into<String>) -> Self {
        DesktopClient {
            session: SyncSession::new(session_id, Role::Client),
            text: String::new(),
        }
    }

    pub fn session_id(&self) -> &str {
        self.session.id()
    }

    pub fn session(&self) -> &SyncSession {
        &self.session
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn char_len(&self) -> usize {
        self.text.chars().count()
    }

    pub fn set_text(&mut self, text: impl Into<String>) {
        self.text = text.into();
    }

    /// Inserts at a char offset, clamped to the text.
    pub fn insert(&mut self, pos: usize, s: &str) {
        let at = byte_offset(&self.text, pos);
        self.text.insert_str(at, s);
    }

    /// Deletes up to `len` chars starting at a char offset.
    pub fn delete(&mut self, pos: usize, len: usize) {
        let from = byte_offset(&self.text, pos);
        let to = byte_offset(&self.text, pos.saturating_add(len));
        self.text.replace_range(from..to, "");
    }

    /// Starts a sync cycle: the payload to send to the server.
    pub fn outbound(&mut self) -> Result<SyncPayload, SyncError> {
        self.session.prepare_outbound(&self.text)
    }

    pub fn receive(&mut self, frame: &ServerFrame) -> Received {
        match frame {
            ServerFrame::Reset { reset } => {
                if reset.previous != self.session.id() {
                    return Received::Ignored(format!("reset for {}", reset.previous));
                }
                self.session = SyncSession::with_text(reset.session.clone(), Role::Client, &reset.text);
                self.text = reset.text.clone();
                Received::Reset
            }
            ServerFrame::Sync(payload) => match self.session.apply_inbound(payload, &self.text) {
                Ok((text, status)) => {
                    self.text = text;
                    Received::Applied(status)
                }
                Err(e) => Received::Ignored(e.to_string()),
            },
        }
    }

    /// No text change is waiting for the server's acknowledgement.
    pub fn is_settled(&self) -> bool {
        self.session.outbound().all(|e| e.is_keepalive())
    }
}

fn byte_offset(s: &str, chars: usize) -> usize {
    s.char_indices().nth(chars).map_or(s.len(), |(i, _)| i)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransportError {
    #[error("network error: {0}")]
    Network(String),
    #[error("{code}: {message}")]
    Rejected {
        code: String,
        message: String,
        state: Option<LockState>,
    },
}

/// How a mobile session reaches the server.
pub trait TaskTransport {
    fn sync_task(&mut self, user: &str, request: &TaskSyncRequest) -> Result<SyncAck, TransportError>;
    fn list_tasks(&mut self, user: &str) -> Result<Vec<Task>, TransportError>;
    fn poll_notifications(
        &mut self,
        user: &str,
        since: Option<DateTime<Utc>>,
    ) -> Result<Vec<Notification>, TransportError>;
    fn dismiss(&mut self, user: &str, task_id: &str) -> Result<(), TransportError>;
}

/// Notes for one task as kept on the device.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Draft {
    pub task_id: TaskId,
    pub notes: String,
    pub version: u64,
    pub synced_version: u64,
    /// Random per draft; with the version it fixes the idempotency key.
    pub nonce: String,
    /// Set once the server reports the task closed; the notes are kept.
    pub terminal: Option<LockState>,
}

impl Draft {
    pub fn is_dirty(&self) -> bool {
        self.version > self.synced_version && self.terminal.is_none()
    }

    /// Same key for every retry of one draft version.
    pub fn idempotency_key(&self, user: &str) -> String {
        let digest = Sha256::digest(format!("{user}\n{}\n{}\n{}", self.task_id, self.nonce, self.version));
        let mut bytes = [0u8; 16];
        bytes.copy_from_slice(&digest[..16]);
        uuid::Builder::from_random_bytes(bytes).into_uuid().to_string()
    }
}

/// Durable storage for drafts. Writes complete before any network send.
pub trait DraftStore {
    fn load(&self) -> io::Result<BTreeMap<TaskId, Draft>>;
    fn save(&mut self, drafts: &BTreeMap<TaskId, Draft>) -> io::Result<()>;
}

/// Drafts in one JSON file, replaced atomically.
#[derive(Debug, Clone)]
pub struct FileDraftStore {
    path: PathBuf,
}

impl FileDraftStore {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        FileDraftStore { path: path.into() }
    }
}

impl DraftStore for FileDraftStore {
    fn load(&self) -> io::Result<BTreeMap<TaskId, Draft>> {
        match fs::read(&self.path) {
            Ok(bytes) => serde_json::from_slice(&bytes).map_err(io::Error::other),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(BTreeMap::new()),
            Err(e) => Err(e),
        }
    }

    fn save(&mut self, drafts: &BTreeMap<TaskId, Draft>) -> io::Result<()> {
        let tmp = self.path.with_extension("tmp");
        fs::write(&tmp, serde_json::to_vec(drafts).map_err(io::Error::other)?)?;
        fs::rename(tmp, &self.path)
    }
}

/// In-memory drafts that outlive any one session sharing the handle, which
/// stands in for device storage across an app restart.
#[derive(Debug, Clone, Default)]
pub struct MemoryDraftStore(Arc<Mutex<BTreeMap<TaskId, Draft>>>);

impl MemoryDraftStore {
    pub fn snapshot(&self) -> BTreeMap<TaskId, Draft> {
        self.0.lock().expect("draft store poisoned").clone()
    }
}

impl DraftStore for MemoryDraftStore {
    fn load(&self) -> io::Result<BTreeMap<TaskId, Draft>> {
        Ok(self.snapshot())
    }

    fn save(&mut self, drafts: &BTreeMap<TaskId, Draft>) -> io::Result<()> {
        *self.0.lock().expect("draft store poisoned") = drafts.clone();
        Ok(())
    }
}

pub const AUTO_SYNC_SECS: i64 = 300;

/// What one auto-sync tick did.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct TickReport {
    pub attempted: Vec<TaskId>,
    pub committed: Vec<TaskId>,
    pub failed: Vec<TaskId>,
    pub heartbeat: bool,
    pub refreshed: bool,
}

/// The mobile app for one user.
#[derive(Debug)]
pub struct MobileSession<S: DraftStore> {
    user: UserId,
    store: S,
    drafts: BTreeMap<TaskId, Draft>,
    tasks: Vec<Task>,
    inbox: Vec<Notification>,
    seen: BTreeSet<(TaskId, NotificationKind)>,
    newest_notification: Option<DateTime<Utc>>,
    last_attempt: DateTime<Utc>,
    interval: Duration,
    location: Option<Coordinates>,
    rng: ChaCha8Rng,
}

impl<S: DraftStore> MobileSession<S> {
    /// Starts a session at `now`, loading any drafts left by an earlier run.
    /// The first auto-sync comes one interval later.
    pub fn new(user: impl Into<UserId>, store: S, now: DateTime<Utc>, seed: u64) -> io::Result<Self> {
        let drafts = store.load()?;
        Ok(MobileSession {
            user: user.into(),
            store,
            drafts,
            tasks: Vec::new(),
            inbox: Vec::new(),
            seen: BTreeSet::new(),
            newest_notification: None,
            last_attempt: now,
            interval: Duration::seconds(AUTO_SYNC_SECS),
            location: None,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn with_interval(mut self, interval: Duration) -> Self {
        self.interval = interval;
        self
    }

    pub fn user(&self) -> &str {
        &self.user
    }

    pub fn set_location(&mut self, location: Option<Coordinates>) {
        self.location = location;
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn drafts(&self) -> &BTreeMap<TaskId, Draft> {
        &self.drafts
    }

    pub fn draft(&self, task_id: &str) -> Option<&Draft> {
        self.drafts.get(task_id)
    }

    pub fn last_attempt(&self) -> DateTime<Utc> {
        self.last_attempt
    }

    pub fn has_dirty_drafts(&self) -> bool {
        self.drafts.values().any(Draft::is_dirty)
    }

    /// Notifications received since the last call, each (task, kind) once.
    pub fn take_notifications(&mut self) -> Vec<Notification> {
        std::mem::take(&mut self.inbox)
    }

    /// Replaces the notes for a task. The draft is on disk when this returns.
    pub fn edit_draft(&mut self, task_id: &str, notes: &str) -> io::Result<()> {
        let nonce = self.rng.random::<u64>();
        let draft = self.drafts.entry(task_id.into()).or_insert_with(|| Draft {
            task_id: task_id.into(),
            notes: String::new(),
            version: 0,
            synced_version: 0,
            nonce: format!("{nonce:016x}"),
            terminal: None,
        });
        draft.notes = notes.into();
        draft.version += 1;
        self.store.save(&self.drafts)
    }

    /// Pushes one task's draft now, as the sync button does. A clean draft
    /// sends a location heartbeat instead.
    pub fn sync_now<T: TaskTransport>(&mut self, transport: &mut T, task_id: &str) -> Result<SyncAck, TransportError> {
        let (request, version) = match self.drafts.get(task_id).filter(|d| d.is_dirty()) {
            Some(d) => (
                TaskSyncRequest {
                    task: task_id.into(),
                    notes: Some(d.notes.clone()),
                    idempotency_key: d.idempotency_key(&self.user),
                    location: self.location,
                },
                Some(d.version),
            ),
            None => (
                TaskSyncRequest {
                    task: task_id.into(),
                    notes: None,
                    idempotency_key: format!("heartbeat-{:016x}", self.rng.random::<u64>()),
                    location: self.location,
                },
                None,
            ),
        };
        match transport.sync_task(&self.user, &request) {
            Ok(ack) => {
                if let (Some(version), Some(d)) = (version, self.drafts.get_mut(task_id)) {
                    d.synced_version = d.synced_version.max(version);
                    self.save();
                }
                Ok(ack)
            }
            Err(e) => {
                if let TransportError::Rejected { state: Some(state), .. } = &e {
                    if state.is_terminal() {
                        self.close_task(task_id, *state);
                    }
                }
                Err(e)
            }
        }
    }

    /// Auto-sync timer. Does nothing until a full interval has passed since
    /// the previous attempt; then pushes every dirty draft, sends a heartbeat
    /// if there was nothing to push, and refreshes tasks and notifications.
    /// Failures are logged and retried one interval later.
    pub fn auto_sync_tick<T: TaskTransport>(&mut self, transport: &mut T, now: DateTime<Utc>) -> Option<TickReport> {
        if now - self.last_attempt < self.interval {
            return None;
        }
        self.last_attempt = now;
        let mut report = TickReport::default();
        let dirty: Vec<TaskId> = self.drafts.values().filter(|d| d.is_dirty()).map(|d| d.task_id.clone()).collect();
        for task_id in dirty {
            report.attempted.push(task_id.clone());
            match self.sync_now(transport, &task_id) {
                Ok(_) => report.committed.push(task_id),
                Err(e) => {
                    log::info!("{}: auto-sync of {task_id} failed: {e}", self.user);
                    report.failed.push(task_id);
                }
            }
        }
        if report.attempted.is_empty() {
            let live = self.tasks.iter().find(|t| t.state == LockState::Active).map(|t| t.task_id.clone());
            if let Some(task_id) = live {
                report.heartbeat = self.sync_now(transport, &task_id).is_ok();
            }
        }
        match self.refresh(transport) {
            Ok(()) => report.refreshed = true,
            Err(e) => log::info!("{}: refresh failed: {e}", self.user),
        }
        Some(report)
    }

    /// Reloads the task list and picks up new notifications.
    pub fn refresh<T: TaskTransport>(&mut self, transport: &mut T) -> Result<(), TransportError> {
        // Re-read a second back: delivery is at-least-once and equal
        // timestamps must not be skipped; duplicates are dropped below.
        let since = self.newest_notification.map(|t| t - Duration::seconds(1));
        let notes = transport.poll_notifications(&self.user, since)?;
        let mut tasks = transport.list_tasks(&self.user)?;
        for n in notes {
            self.newest_notification = self.newest_notification.max(Some(n.issued_at));
            if self.seen.insert((n.task_id.clone(), n.kind)) {
                if n.kind == NotificationKind::Revoked {
                    self.close_task(&n.task_id, LockState::Revoked);
                }
                self.inbox.push(n);
            }
        }
        for task in &mut tasks {
            if let Some(d) = self.drafts.get(&task.task_id) {
                task.notes_draft = d.notes.clone();
            }
        }
        self.tasks = tasks;
        Ok(())
    }

    /// Dismisses a task; its draft is kept but never sent again.
    pub fn dismiss<T: TaskTransport>(&mut self, transport: &mut T, task_id: &str) -> Result<(), TransportError> {
        transport.dismiss(&self.user, task_id)?;
        self.close_task(task_id, LockState::Dismissed);
        Ok(())
    }

    fn close_task(&mut self, task_id: &str, state: LockState) {
        self.tasks.retain(|t| t.task_id != task_id);
        if let Some(d) = self.drafts.get_mut(task_id) {
            d.terminal.get_or_insert(state);
            self.save();
        }
    }

    fn save(&mut self) {
        if let Err(e) = self.store.save(&self.drafts) {
            log::warn!("{}: saving drafts failed: {e}", self.user);
        }
    }
}
