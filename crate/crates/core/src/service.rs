//! All documents plus the task directory behind one single-threaded handle.
//!
//! The network server runs each document on its own task; this type composes
//! the same [`DocumentEngine`]s sequentially for the simulator, the CLI's
//! offline commands and tests.

use std::collections::BTreeMap;
use std::sync::Arc;

use chrono::{DateTime, Utc};

use crate::client::{TaskTransport, TransportError};
use crate::diffsync::SyncPayload;
use crate::document::{CommandRecord, Document};
use crate::engine::{DocumentEngine, EngineConfig, LockRequest, ServiceError, SyncOutcome};
use crate::lock::{LockError, MobileLock};
use crate::store::Store;
use crate::task::{Directory, MobileUser, Notification, SyncAck, Task, TaskError, TaskSyncRequest};
use crate::text::DiffScript;

#[derive(Debug)]
pub struct Service {
    engines: BTreeMap<String, DocumentEngine>,
    directory: Directory,
    store: Option<Arc<Store>>,
    config: EngineConfig,
    next_id: u64,
    random_ids: bool,
}

impl Service {
    /// No persistence; ids are `doc-1`, `lock-1`, ... so runs are repeatable.
    pub fn in_memory() -> Service {
        Service {
            engines: BTreeMap::new(),
            directory: Directory::new(),
            store: None,
            config: EngineConfig::default(),
            next_id: 0,
            random_ids: false,
        }
    }

    /// Loads every document in `store` and rebuilds the task directory from
    /// their histories. New ids are random.
    pub fn open(store: Store, config: EngineConfig) -> Result<Service, ServiceError> {
        let store = Arc::new(store);
        let mut directory = Directory::new();
        for user in store.load_users()? {
            directory.restore_user(user);
        }
        let mut engines = BTreeMap::new();
        for doc_id in store.list()? {
            let (engine, history) = DocumentEngine::open(&doc_id, store.clone(), config.clone())?;
            for record in &history {
                directory.observe(&doc_id, &record.command);
            }
            engines.insert(doc_id, engine);
        }
        Ok(Service {
            engines,
            directory,
            store: Some(store),
            config,
            next_id: 0,
            random_ids: true,
        })
    }

    /// Switches to `doc-N` / `lock-N` ids, continuing after any such ids
    /// already present.
    pub fn with_sequential_ids(mut self) -> Service {
        let taken = self
            .engines
            .keys()
            .chain(self.directory.tasks().map(|t| &t.task_id))
            .filter_map(|id| id.rsplit_once('-').and_then(|(_, n)| n.parse::<u64>().ok()))
            .max()
            .unwrap_or(0);
        self.next_id = self.next_id.max(taken);
        self.random_ids = false;
        self
    }

    pub fn with_config(mut self, config: EngineConfig) -> Service {
        self.config = config;
        self
    }

    fn new_id(&mut self, prefix: &str) -> String {
        if self.random_ids {
            uuid::Uuid::new_v4().to_string()
        } else {
            self.next_id += 1;
            format!("{prefix}-{}", self.next_id)
        }
    }

    pub fn directory(&self) -> &Directory {
        &self.directory
    }

    pub fn doc_ids(&self) -> impl Iterator<Item = &str> {
        self.engines.keys().map(String::as_str)
    }

    pub fn engine(&self, doc_id: &str) -> Result<&DocumentEngine, ServiceError> {
        self.engines
            .get(doc_id)
            .ok_or_else(|| ServiceError::UnknownDocument(doc_id.into()))
    }

    fn engine_mut(&mut self, doc_id: &str) -> Result<&mut DocumentEngine, ServiceError> {
        self.engines
            .get_mut(doc_id)
            .ok_or_else(|| ServiceError::UnknownDocument(doc_id.into()))
    }

    pub fn document(&self, doc_id: &str) -> Result<&Document, ServiceError> {
        Ok(self.engine(doc_id)?.document())
    }

    fn observe(&mut self, doc_id: &str, record: &CommandRecord) {
        self.directory.observe(doc_id, &record.command);
    }

    fn save_users(&self) -> Result<(), ServiceError> {
        if let Some(store) = &self.store {
            let users: Vec<MobileUser> = self.directory.users().cloned().collect();
            store.save_users(&users)?;
        }
        Ok(())
    }

    pub fn register_user(&mut self, user_id: &str, display_name: &str) -> Result<MobileUser, ServiceError> {
        let user = self.directory.register_user(user_id, display_name)?.clone();
        self.save_users()?;
        Ok(user)
    }

    pub fn create_document(&mut self, template_id: Option<&str>, now: DateTime<Utc>) -> Result<Document, ServiceError> {
        let doc_id = self.new_id("doc");
        self.create_document_with_id(&doc_id, template_id, now)
    }

    pub fn create_document_with_id(
        &mut self,
        doc_id: &str,
        template_id: Option<&str>,
        now: DateTime<Utc>,
    ) -> Result<Document, ServiceError> {
        if self.engines.contains_key(doc_id) {
            return Err(crate::document::DocumentError::AlreadyCreated.into());
        }
        let (engine, _) = DocumentEngine::create(doc_id, template_id, now, self.store.clone(), self.config.clone())?;
        let doc = engine.document().clone();
        self.engines.insert(doc_id.into(), engine);
        Ok(doc)
    }

    pub fn handle_sync(&mut self, doc_id: &str, payload: &SyncPayload, now: DateTime<Utc>) -> Result<SyncOutcome, ServiceError> {
        let outcome = self.engine_mut(doc_id)?.handle_sync(payload, now)?;
        if let Some(record) = &outcome.record {
            self.observe(doc_id, record);
        }
        Ok(outcome)
    }

    pub fn acquire_lock(&mut self, doc_id: &str, request: &LockRequest, now: DateTime<Utc>) -> Result<MobileLock, ServiceError> {
        if self.directory.user(&request.owner).is_err() {
            return Err(LockError::UnknownOwner(request.owner.clone()).into());
        }
        let lock_id = self.new_id("lock");
        let (lock, record) = self.engine_mut(doc_id)?.acquire_lock(lock_id, request, now)?;
        self.observe(doc_id, &record);
        Ok(lock)
    }

    fn doc_of_lock(&self, lock_id: &str) -> Result<String, ServiceError> {
        self.directory
            .task(lock_id)
            .map(|t| t.doc_id.clone())
            .map_err(|_| LockError::UnknownLock(lock_id.into()).into())
    }

    pub fn revoke_lock(&mut self, lock_id: &str, by: &str, now: DateTime<Utc>) -> Result<MobileLock, ServiceError> {
        let doc_id = self.doc_of_lock(lock_id)?;
        let record = self.engine_mut(&doc_id)?.revoke_lock(lock_id, by, now)?;
        self.observe(&doc_id, &record);
        Ok(self.document(&doc_id)?.lock(lock_id)?.clone())
    }

    pub fn dismiss_lock(&mut self, lock_id: &str, by: &str, now: DateTime<Utc>) -> Result<MobileLock, ServiceError> {
        let doc_id = self.doc_of_lock(lock_id)?;
        let record = self.engine_mut(&doc_id)?.dismiss_lock(lock_id, by, now)?;
        self.observe(&doc_id, &record);
        Ok(self.document(&doc_id)?.lock(lock_id)?.clone())
    }

    pub fn commit_lock(&mut self, lock_id: &str, user: &str, text: &str, now: DateTime<Utc>) -> Result<DiffScript, ServiceError> {
        let doc_id = self.doc_of_lock(lock_id)?;
        let (change, record) = self.engine_mut(&doc_id)?.commit_lock(lock_id, user, text, now)?;
        self.observe(&doc_id, &record);
        Ok(change)
    }

    pub fn list_tasks(&self, user: &str) -> Result<Vec<Task>, ServiceError> {
        Ok(self.directory.list_tasks(user)?)
    }

    pub fn poll_notifications(&self, user: &str, since: Option<DateTime<Utc>>) -> Result<Vec<Notification>, ServiceError> {
        Ok(self.directory.poll_notifications(user, since)?)
    }

    pub fn presence(&self, doc_id: &str) -> Result<Vec<MobileUser>, ServiceError> {
        self.engine(doc_id)?;
        Ok(self.directory.presence(doc_id))
    }

    pub fn sync_task(&mut self, user: &str, request: &TaskSyncRequest, now: DateTime<Utc>) -> Result<SyncAck, ServiceError> {
        self.directory.user(user)?;
        let doc_id = self
            .directory
            .task(&request.task)
            .map(|t| t.doc_id.clone())
            .map_err(|_| TaskError::UnknownTask(request.task.clone()))?;
        let (ack, record) = self.engine_mut(&doc_id)?.sync_task(user, request, now)?;
        match record {
            Some(record) => self.observe(&doc_id, &record),
            None if request.notes.is_none() => self.directory.touch_user(user, request.location, now)?,
            None => {}
        }
        Ok(ack)
    }

    /// Drops idle desktop sessions on every document.
    pub fn gc_sessions(&mut self, now: DateTime<Utc>) {
        for engine in self.engines.values_mut() {
            engine.gc_sessions(now);
        }
    }

    /// Snapshots every document and saves the user list.
    pub fn shutdown(&mut self) -> Result<(), ServiceError> {
        for engine in self.engines.values_mut() {
            engine.persist()?;
        }
        self.save_users()
    }
}

/// Maps a service error to what a mobile client sees over the wire.
pub fn rejection(e: &ServiceError) -> TransportError {
    TransportError::Rejected {
        code: e.code().into(),
        message: e.to_string(),
        state: e.lock_state(),
    }
}

/// Calls straight into a [`Service`], at a fixed clock reading.
pub struct LocalTransport<'a> {
    pub service: &'a mut Service,
    pub now: DateTime<Utc>,
}

impl TaskTransport for LocalTransport<'_> {
    fn sync_task(&mut self, user: &str, request: &TaskSyncRequest) -> Result<SyncAck, TransportError> {
        self.service.sync_task(user, request, self.now).map_err(|e| rejection(&e))
    }

    fn list_tasks(&mut self, user: &str) -> Result<Vec<Task>, TransportError> {
        self.service.list_tasks(user).map_err(|e| rejection(&e))
    }

    fn poll_notifications(&mut self, user: &str, since: Option<DateTime<Utc>>) -> Result<Vec<Notification>, TransportError> {
        self.service.poll_notifications(user, since).map_err(|e| rejection(&e))
    }

    fn dismiss(&mut self, user: &str, task_id: &str) -> Result<(), TransportError> {
        self.service.dismiss_lock(task_id, user, self.now).map(|_| ()).map_err(|e| rejection(&e))
    }
}
