//! One command loop per document.
//!
//! Each document's [`DocumentEngine`] lives on its own tokio task and only
//! runs the jobs queued on its channel, one at a time and in arrival order.
//! Records produced by a job are fed to the shared task directory before the
//! next job starts, so the directory sees every document's commands in
//! revision order.

use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use fieldsync_core::document::CommandRecord;
use fieldsync_core::engine::{DocumentEngine, ServiceError};
use fieldsync_core::task::Directory;
use tokio::sync::{mpsc, oneshot};

/// What a job gets to work with.
pub struct DocContext {
    pub engine: DocumentEngine,
    directory: Arc<Mutex<Directory>>,
}

impl DocContext {
    pub fn directory(&self) -> MutexGuard<'_, Directory> {
        lock_directory(&self.directory)
    }

    pub fn observe(&self, record: &CommandRecord) {
        self.directory().observe(self.engine.doc_id(), &record.command);
    }
}

pub(crate) fn lock_directory(directory: &Mutex<Directory>) -> MutexGuard<'_, Directory> {
    // A panic while holding the lock cannot leave the directory half-updated
    // in a way later reads care about, so keep serving.
    directory.lock().unwrap_or_else(|e| e.into_inner())
}

type Job = Box<dyn FnOnce(&mut DocContext) + Send>;

enum Message {
    Run(Job),
    /// Test hook: hold the loop for a while, as a slow command would.
    Stall(Duration),
}

/// Cheap handle to a running document loop.
#[derive(Clone)]
pub struct DocHandle {
    tx: mpsc::UnboundedSender<Message>,
}

impl DocHandle {
    /// Starts the loop. Must be called inside a tokio runtime.
    pub fn spawn(engine: DocumentEngine, directory: Arc<Mutex<Directory>>) -> DocHandle {
        let (tx, mut rx) = mpsc::unbounded_channel();
        let mut ctx = DocContext { engine, directory };
        tokio::spawn(async move {
            while let Some(message) = rx.recv().await {
                match message {
                    Message::Run(job) => job(&mut ctx),
                    Message::Stall(d) => tokio::time::sleep(d).await,
                }
            }
        });
        DocHandle { tx }
    }

    /// Queues `f` behind every earlier job on this document and waits for
    /// its result.
    pub async fn call<R, F>(&self, f: F) -> Result<R, ServiceError>
    where
        R: Send + 'static,
        F: FnOnce(&mut DocContext) -> R + Send + 'static,
    {
        let (reply, rx) = oneshot::channel();
        let job: Job = Box::new(move |ctx| {
            let _ = reply.send(f(ctx));
        });
        let stopped = || ServiceError::Protocol("document loop stopped".into());
        self.tx.send(Message::Run(job)).map_err(|_| stopped())?;
        rx.await.map_err(|_| stopped())
    }

    pub fn stall(&self, duration: Duration) {
        let _ = self.tx.send(Message::Stall(duration));
    }
}
