//! Server-side view of mobile users, their tasks and notifications.
//!
//! A task is the mobile side of a lock; the [`Directory`] derives every task
//! and notification from the document commands it observes, so it can be
//! rebuilt from the history logs after a restart.

use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::document::{Command, Coordinates, DocId};
use crate::lock::{LockId, LockState, MobileLock, UserId};

pub type TaskId = LockId;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TaskError {
    #[error("unknown user {0}")]
    UnknownUser(UserId),
    #[error("unknown task {0}")]
    UnknownTask(TaskId),
    #[error("user {0} already exists")]
    DuplicateUser(UserId),
    #[error("coordinates out of range")]
    InvalidLocation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MobileUser {
    pub user_id: UserId,
    pub display_name: String,
    pub last_location: Option<Coordinates>,
    pub last_seen: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub task_id: TaskId,
    pub doc_id: DocId,
    pub owner: UserId,
    pub description: String,
    /// Only ever filled in on the mobile device; the server never sees
    /// unsynced notes.
    #[serde(default)]
    pub notes_draft: String,
    pub assigned_at: DateTime<Utc>,
    pub last_sync_at: Option<DateTime<Utc>>,
    pub state: LockState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum NotificationKind {
    Assigned,
    Revoked,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Notification {
    pub kind: NotificationKind,
    pub task_id: TaskId,
    pub description: String,
    pub issued_at: DateTime<Utc>,
}

/// Body of `POST /tasks/{id}/sync`. `notes: None` is a location heartbeat
/// that touches nothing in the document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSyncRequest {
    pub task: TaskId,
    pub notes: Option<String>,
    pub idempotency_key: String,
    #[serde(default)]
    pub location: Option<Coordinates>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncAck {
    pub server_time: DateTime<Utc>,
    pub task_state: LockState,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Directory {
    users: BTreeMap<UserId, MobileUser>,
    tasks: BTreeMap<TaskId, Task>,
    notifications: Vec<(UserId, Notification)>,
}

impl Directory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register_user(&mut self, user_id: &str, display_name: &str) -> Result<&MobileUser, TaskError> {
        if self.users.contains_key(user_id) {
            return Err(TaskError::DuplicateUser(user_id.into()));
        }
        Ok(self.users.entry(user_id.into()).or_insert(MobileUser {
            user_id: user_id.into(),
            display_name: display_name.into(),
            last_location: None,
            last_seen: None,
        }))
    }

    /// Restores a user record, e.g. from a saved user list.
    pub fn restore_user(&mut self, user: MobileUser) {
        self.users.insert(user.user_id.clone(), user);
    }

    pub fn user(&self, user_id: &str) -> Result<&MobileUser, TaskError> {
        self.users
            .get(user_id)
            .ok_or_else(|| TaskError::UnknownUser(user_id.into()))
    }

    pub fn users(&self) -> impl Iterator<Item = &MobileUser> {
        self.users.values()
    }

    pub fn task(&self, task_id: &str) -> Result<&Task, TaskError> {
        self.tasks
            .get(task_id)
            .ok_or_else(|| TaskError::UnknownTask(task_id.into()))
    }

    pub fn tasks(&self) -> impl Iterator<Item = &Task> {
        self.tasks.values()
    }

    /// Active tasks of `user`, newest first.
    pub fn list_tasks(&self, user_id: &str) -> Result<Vec<Task>, TaskError> {
        self.user(user_id)?;
        let mut tasks: Vec<Task> = self
            .tasks
            .values()
            .filter(|t| t.owner == user_id && t.state == LockState::Active)
            .cloned()
            .collect();
        tasks.sort_by(|a, b| b.assigned_at.cmp(&a.assigned_at).then(b.task_id.cmp(&a.task_id)));
        Ok(tasks)
    }

    /// Notifications for `user` issued strictly after `since`, oldest first.
    pub fn poll_notifications(
        &self,
        user_id: &str,
        since: Option<DateTime<Utc>>,
    ) -> Result<Vec<Notification>, TaskError> {
        self.user(user_id)?;
        let mut out: Vec<Notification> = self
            .notifications
            .iter()
            .filter(|(u, n)| u == user_id && since.is_none_or(|s| n.issued_at > s))
            .map(|(_, n)| n.clone())
            .collect();
        // Stable: equal timestamps keep issue order.
        out.sort_by_key(|n| n.issued_at);
        Ok(out)
    }

    /// Owners of the locks on `doc_id` with their last known whereabouts.
    pub fn presence(&self, doc_id: &str) -> Vec<MobileUser> {
        let mut owners: Vec<&UserId> = self
            .tasks
            .values()
            .filter(|t| t.doc_id == doc_id)
            .map(|t| &t.owner)
            .collect();
        owners.sort();
        owners.dedup();
        owners
            .into_iter()
            .filter_map(|u| self.users.get(u).cloned())
            .collect()
    }

    /// Records that `user` was heard from, optionally at a location.
    /// Timestamps only move forward.
    pub fn touch_user(
        &mut self,
        user_id: &str,
        location: Option<Coordinates>,
        at: DateTime<Utc>,
    ) -> Result<(), TaskError> {
        if location.is_some_and(|l| !l.is_valid()) {
            return Err(TaskError::InvalidLocation);
        }
        let user = self
            .users
            .get_mut(user_id)
            .ok_or_else(|| TaskError::UnknownUser(user_id.into()))?;
        if user.last_seen.is_none_or(|seen| at >= seen) {
            user.last_seen = Some(at);
            if location.is_some() {
                user.last_location = location;
            }
        }
        Ok(())
    }

    /// Updates tasks, notifications and presence for one applied command.
    pub fn observe(&mut self, doc_id: &str, command: &Command) {
        match command {
            Command::Create { .. } | Command::Sync { .. } => {}
            Command::LockAcquire { lock } => self.assign(doc_id, lock),
            Command::LockCommit { lock_id, user, at, .. } => self.synced(lock_id, user, None, *at),
            Command::TaskSync { task, user, location, at, .. } => self.synced(task, user, *location, *at),
            Command::LockRevoke { lock_id, at, .. } => {
                if let Some(task) = self.set_state(lock_id, LockState::Revoked) {
                    let note = Notification {
                        kind: NotificationKind::Revoked,
                        task_id: task.task_id.clone(),
                        description: task.description.clone(),
                        issued_at: *at,
                    };
                    self.notifications.push((task.owner.clone(), note));
                }
            }
            Command::LockDismiss { lock_id, .. } => {
                self.set_state(lock_id, LockState::Dismissed);
            }
        }
    }

    fn assign(&mut self, doc_id: &str, lock: &MobileLock) {
        if !self.users.contains_key(&lock.owner) {
            // Only reachable when rebuilding from logs without the user list.
            self.restore_user(MobileUser {
                user_id: lock.owner.clone(),
                display_name: lock.owner.clone(),
                last_location: None,
                last_seen: None,
            });
        }
        self.tasks.insert(
            lock.id.clone(),
            Task {
                task_id: lock.id.clone(),
                doc_id: doc_id.into(),
                owner: lock.owner.clone(),
                description: lock.description.clone(),
                notes_draft: String::new(),
                assigned_at: lock.created_at,
                last_sync_at: None,
                state: LockState::Active,
            },
        );
        self.notifications.push((
            lock.owner.clone(),
            Notification {
                kind: NotificationKind::Assigned,
                task_id: lock.id.clone(),
                description: lock.description.clone(),
                issued_at: lock.created_at,
            },
        ));
    }

    fn synced(&mut self, task_id: &str, user: &str, location: Option<Coordinates>, at: DateTime<Utc>) {
        if let Some(task) = self.tasks.get_mut(task_id) {
            if task.last_sync_at.is_none_or(|prev| at > prev) {
                task.last_sync_at = Some(at);
            }
        }
        let _ = self.touch_user(user, location, at);
    }

    fn set_state(&mut self, task_id: &str, state: LockState) -> Option<Task> {
        let task = self.tasks.get_mut(task_id)?;
        task.state = state;
        Some(task.clone())
    }
}
