//! Documents, sitrep templates and the command records that mutate them.
//!
//! Every change to a [`Document`] goes through [`Document::apply`] with a
//! [`Command`], both live and when a history log is replayed, so replay
//! reproduces the live state exactly.

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lock::{self, LockError, LockId, LockState, MobileLock, UserId};
use crate::text::{apply_strict, DiffScript, TextError, DEFAULT_MAX_BYTES};

pub type DocId = String;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DocumentError {
    #[error("unknown template {0}")]
    UnknownTemplate(String),
    #[error("document would grow to {size} bytes, over the {limit} byte limit")]
    TooLarge { size: usize, limit: usize },
    #[error("CREATE must be the first command of a document")]
    AlreadyCreated,
    #[error(transparent)]
    Lock(#[from] LockError),
    #[error(transparent)]
    Text(#[from] TextError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coordinates {
    pub lat: f64,
    pub lon: f64,
}

impl Coordinates {
    pub fn is_valid(&self) -> bool {
        (-90.0..=90.0).contains(&self.lat) && (-180.0..=180.0).contains(&self.lon)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: DocId,
    pub text: String,
    pub locks: Vec<MobileLock>,
    pub revision: u64,
    pub created_at: DateTime<Utc>,
    pub template_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Section {
    pub heading: String,
    pub placeholder: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SitrepTemplate {
    pub template_id: String,
    pub title: String,
    pub sections: Vec<Section>,
}

pub const SITREP_TEMPLATE_ID: &str = "sitrep-au";

const SITREP_HEADINGS: [&str; 11] = [
    "Report version number",
    "Date and time",
    "Type of incident",
    "Location of incident",
    "Contact details",
    "Casualties",
    "Situation and damage",
    "Actions in progress",
    "Assistance required",
    "Future intentions",
    "Prognosis",
];

impl SitrepTemplate {
    /// Text of a new document: `HEADING:\n<placeholder>\n\n` per section.
    pub fn render(&self) -> String {
        self.sections
            .iter()
            .map(|s| format!("{}:\n{}\n\n", s.heading, s.placeholder))
            .collect()
    }

    /// Headings must be non-empty and unique.
    pub fn is_valid(&self) -> bool {
        let mut seen = std::collections::HashSet::new();
        self.sections
            .iter()
            .all(|s| !s.heading.trim().is_empty() && seen.insert(s.heading.as_str()))
    }
}

pub fn builtin_templates() -> Vec<SitrepTemplate> {
    vec![SitrepTemplate {
        template_id: SITREP_TEMPLATE_ID.into(),
        title: "Situation report".into(),
        sections: SITREP_HEADINGS
            .iter()
            .map(|h| Section {
                heading: (*h).into(),
                placeholder: "TBD".into(),
            })
            .collect(),
    }]
}

pub fn find_template(template_id: &str) -> Option<SitrepTemplate> {
    builtin_templates()
        .into_iter()
        .find(|t| t.template_id == template_id)
}

/// Every document-mutating operation, as recorded in the history log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Command {
    Create {
        doc_id: DocId,
        template_id: Option<String>,
        created_at: DateTime<Utc>,
        text: String,
    },
    /// A desktop change, already filtered against locks.
    Sync { session: String, script: DiffScript },
    LockAcquire { lock: MobileLock },
    LockCommit {
        lock_id: LockId,
        user: UserId,
        text: String,
        at: DateTime<Utc>,
    },
    LockRevoke { lock_id: LockId, by: String, at: DateTime<Utc> },
    LockDismiss { lock_id: LockId, by: UserId, at: DateTime<Utc> },
    TaskSync {
        task: LockId,
        user: UserId,
        notes: String,
        idempotency_key: String,
        location: Option<Coordinates>,
        at: DateTime<Utc>,
    },
}

impl Command {
    pub fn kind(&self) -> &'static str {
        match self {
            Command::Create { .. } => "CREATE",
            Command::Sync { .. } => "SYNC",
            Command::LockAcquire { .. } => "LOCK_ACQUIRE",
            Command::LockCommit { .. } => "LOCK_COMMIT",
            Command::LockRevoke { .. } => "LOCK_REVOKE",
            Command::LockDismiss { .. } => "LOCK_DISMISS",
            Command::TaskSync { .. } => "TASK_SYNC",
        }
    }
}

/// A command stamped with the revision it produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandRecord {
    pub rev: u64,
    #[serde(flatten)]
    pub command: Command,
}

impl Document {
    /// A blank document before its CREATE command.
    pub fn empty() -> Self {
        Document {
            doc_id: String::new(),
            text: String::new(),
            locks: Vec::new(),
            revision: 0,
            created_at: DateTime::UNIX_EPOCH,
            template_id: None,
        }
    }

    /// The CREATE command for a new document.
    pub fn create_command(
        doc_id: impl Into<DocId>,
        template_id: Option<&str>,
        now: DateTime<Utc>,
    ) -> Result<Command, DocumentError> {
        let text = match template_id {
            Some(id) => find_template(id)
                .ok_or_else(|| DocumentError::UnknownTemplate(id.into()))?
                .render(),
            None => String::new(),
        };
        Ok(Command::Create {
            doc_id: doc_id.into(),
            template_id: template_id.map(str::to_owned),
            created_at: now,
            text,
        })
    }

    pub fn create(
        doc_id: impl Into<DocId>,
        template_id: Option<&str>,
        now: DateTime<Utc>,
    ) -> Result<Document, DocumentError> {
        let mut doc = Document::empty();
        doc.apply(&Document::create_command(doc_id, template_id, now)?)?;
        Ok(doc)
    }

    pub fn char_len(&self) -> usize {
        self.text.chars().count()
    }

    pub fn lock(&self, lock_id: &str) -> Result<&MobileLock, LockError> {
        self.locks
            .iter()
            .find(|l| l.id == lock_id)
            .ok_or_else(|| LockError::UnknownLock(lock_id.into()))
    }

    pub fn active_locks(&self) -> impl Iterator<Item = &MobileLock> {
        self.locks.iter().filter(|l| l.is_active())
    }

    /// Text currently inside a lock.
    pub fn lock_interior(&self, lock_id: &str) -> Result<String, LockError> {
        let lock = self.lock(lock_id)?;
        Ok(self.text.chars().skip(lock.start).take(lock.len()).collect())
    }

    /// Validates `command` without mutating the document.
    pub fn check(&self, command: &Command) -> Result<(), DocumentError> {
        self.clone().apply(command).map(|_| ())
    }

    /// Applies one command. CREATE leaves the revision at 0; every other
    /// command bumps it by one. Returns the text change the command made.
    ///
    /// On error the document is unchanged.
    pub fn apply(&mut self, command: &Command) -> Result<DiffScript, DocumentError> {
        let change = match command {
            Command::Create {
                doc_id,
                template_id,
                created_at,
                text,
            } => {
                if !self.doc_id.is_empty() || self.revision != 0 {
                    return Err(DocumentError::AlreadyCreated);
                }
                check_size(text)?;
                self.doc_id = doc_id.clone();
                self.template_id = template_id.clone();
                self.created_at = *created_at;
                self.text = text.clone();
                return Ok(DiffScript::splice("", 0, 0, text));
            }
            Command::Sync { script, .. } => {
                let text = apply_strict(&self.text, script)?;
                check_size(&text)?;
                self.text = text;
                lock::adjust_locks(&mut self.locks, script);
                script.clone()
            }
            Command::LockAcquire { lock } => {
                lock::validate_range(&self.locks, self.char_len(), lock.start, lock.end)?;
                self.locks.push(lock.clone());
                DiffScript::splice(&self.text, 0, 0, "")
            }
            Command::LockCommit { lock_id, user, text, at } => {
                self.splice_lock(lock_id, user, text, *at)?
            }
            Command::TaskSync { task, user, notes, at, .. } => {
                self.splice_lock(task, user, notes, *at)?
            }
            Command::LockRevoke { lock_id, .. } => {
                self.active_lock_mut(lock_id)?.state = LockState::Revoked;
                DiffScript::splice(&self.text, 0, 0, "")
            }
            Command::LockDismiss { lock_id, by, .. } => {
                let lock = self.active_lock_mut(lock_id)?;
                if &lock.owner != by {
                    return Err(LockError::NotOwner { user: by.clone() }.into());
                }
                lock.state = LockState::Dismissed;
                DiffScript::splice(&self.text, 0, 0, "")
            }
        };
        self.revision += 1;
        Ok(change)
    }

    fn active_lock_mut(&mut self, lock_id: &str) -> Result<&mut MobileLock, LockError> {
        let lock = self
            .locks
            .iter_mut()
            .find(|l| l.id == lock_id)
            .ok_or_else(|| LockError::UnknownLock(lock_id.into()))?;
        if !lock.is_active() {
            return Err(LockError::LockNotActive { state: lock.state });
        }
        Ok(lock)
    }

    fn splice_lock(
        &mut self,
        lock_id: &str,
        user: &str,
        replacement: &str,
        at: DateTime<Utc>,
    ) -> Result<DiffScript, DocumentError> {
        let lock = self.active_lock_mut(lock_id)?;
        if lock.owner != user {
            return Err(LockError::NotOwner { user: user.into() }.into());
        }
        let (start, end) = (lock.start, lock.end);
        let script = DiffScript::splice(&self.text, start, end, replacement);
        let text = apply_strict(&self.text, &script)?;
        check_size(&text)?;
        self.text = text;

        let idx = self.locks.iter().position(|l| l.id == lock_id).expect("lock exists");
        let mut committed = self.locks.remove(idx);
        lock::adjust_locks(&mut self.locks, &script);
        committed.end = start + replacement.chars().count();
        committed.last_sync_at = Some(committed.last_sync_at.map_or(at, |prev| prev.max(at)));
        self.locks.insert(idx, committed);
        Ok(script)
    }
}

fn check_size(text: &str) -> Result<(), DocumentError> {
    if text.len() > DEFAULT_MAX_BYTES {
        return Err(DocumentError::TooLarge {
            size: text.len(),
            limit: DEFAULT_MAX_BYTES,
        });
    }
    Ok(())
}
