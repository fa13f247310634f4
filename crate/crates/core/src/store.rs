//! On-disk persistence: one snapshot file and one append-only command log per
//! document.
//!
//! `<doc>.snapshot.json` holds the document fields plus a `checksum` (CRC32C
//! of the canonical serialization of the document). `<doc>.log.jsonl` holds one
//! [`CommandRecord`] per line. A document is loaded by reading the snapshot
//! and applying the log records newer than it.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use crc::{Crc, CRC_32_ISCSI};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::document::{CommandRecord, DocId, Document, DocumentError};
use crate::task::MobileUser;

const CRC32C: Crc<u32> = Crc::<u32>::new(&CRC_32_ISCSI);
const SNAPSHOT_SUFFIX: &str = ".snapshot.json";
const LOG_SUFFIX: &str = ".log.jsonl";
const USERS_FILE: &str = "users.json";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("storage unavailable: {0}")]
    StorageUnavailable(String),
    #[error("corrupt snapshot for {doc_id}: {reason}")]
    CorruptSnapshot { doc_id: DocId, reason: String },
    #[error("corrupt history for {doc_id} at line {line}: {reason}")]
    CorruptLog { doc_id: DocId, line: usize, reason: String },
    #[error("unknown document {0}")]
    UnknownDocument(DocId),
}

impl From<io::Error> for StoreError {
    fn from(e: io::Error) -> Self {
        StoreError::StorageUnavailable(e.to_string())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ReplayError {
    #[error("record {index} has rev {found}, expected {expected}")]
    RevisionGap { index: usize, expected: u64, found: u64 },
    #[error("record {index} (rev {rev}) failed to apply: {source}")]
    Apply {
        index: usize,
        rev: u64,
        #[source]
        source: DocumentError,
    },
}

/// Rebuilds a document from its history, starting from an empty document.
/// Pure: equal logs give byte-identical documents.
pub fn replay(records: &[CommandRecord]) -> Result<Document, ReplayError> {
    replay_onto(Document::empty(), records)
}

/// Applies `records` to `doc`, checking each record lands on its stated
/// revision.
pub fn replay_onto(mut doc: Document, records: &[CommandRecord]) -> Result<Document, ReplayError> {
    for (index, record) in records.iter().enumerate() {
        doc.apply(&record.command).map_err(|source| ReplayError::Apply {
            index,
            rev: record.rev,
            source,
        })?;
        if doc.revision != record.rev {
            return Err(ReplayError::RevisionGap {
                index,
                expected: doc.revision,
                found: record.rev,
            });
        }
    }
    Ok(doc)
}

/// Canonical bytes of a document, as covered by the snapshot checksum.
pub fn canonical_bytes(doc: &Document) -> Vec<u8> {
    serde_json::to_vec(doc).expect("documents always serialize")
}

pub fn checksum(doc: &Document) -> u32 {
    CRC32C.checksum(&canonical_bytes(doc))
}

#[derive(Serialize, Deserialize)]
struct SnapshotFile {
    #[serde(flatten)]
    doc: Document,
    checksum: u32,
}

/// Outcome of reading a log file.
#[derive(Debug, Clone, PartialEq)]
pub struct History {
    pub records: Vec<CommandRecord>,
    /// A final line without its newline that did not parse, i.e. a write cut
    /// short by a crash.
    pub torn_tail: bool,
    valid_len: u64,
}

#[derive(Debug)]
pub struct Store {
    dir: PathBuf,
    crash_before_rename: bool,
}

impl Store {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Store, StoreError> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        if !dir.is_dir() {
            return Err(StoreError::StorageUnavailable(format!("{} is not a directory", dir.display())));
        }
        Ok(Store { dir, crash_before_rename: false })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Test hook: make [`Store::persist`] stop after writing the temp file, as
    /// if the process died before the rename.
    pub fn set_crash_before_rename(&mut self, crash: bool) {
        self.crash_before_rename = crash;
    }

    fn file(&self, doc_id: &str, suffix: &str) -> Result<PathBuf, StoreError> {
        let ok = !doc_id.is_empty()
            && !doc_id.starts_with('.')
            && doc_id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c));
        if !ok {
            return Err(StoreError::UnknownDocument(doc_id.into()));
        }
        Ok(self.dir.join(format!("{doc_id}{suffix}")))
    }

    pub fn snapshot_path(&self, doc_id: &str) -> Result<PathBuf, StoreError> {
        self.file(doc_id, SNAPSHOT_SUFFIX)
    }

    pub fn log_path(&self, doc_id: &str) -> Result<PathBuf, StoreError> {
        self.file(doc_id, LOG_SUFFIX)
    }

    pub fn exists(&self, doc_id: &str) -> bool {
        self.snapshot_path(doc_id).map(|p| p.exists()).unwrap_or(false)
            || self.log_path(doc_id).map(|p| p.exists()).unwrap_or(false)
    }

    /// Documents with a snapshot or a log, sorted.
    pub fn list(&self) -> Result<Vec<DocId>, StoreError> {
        let mut ids: Vec<DocId> = fs::read_dir(&self.dir)?
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let name = e.file_name().into_string().ok()?;
                name.strip_suffix(SNAPSHOT_SUFFIX)
                    .or_else(|| name.strip_suffix(LOG_SUFFIX))
                    .map(str::to_owned)
            })
            .collect();
        ids.sort();
        ids.dedup();
        Ok(ids)
    }

    /// Writes the snapshot to a temp file, syncs it and renames it into place.
    pub fn persist(&self, doc: &Document) -> Result<(), StoreError> {
        let path = self.snapshot_path(&doc.doc_id)?;
        let tmp = path.with_extension("json.tmp");
        let body = serde_json::to_vec(&SnapshotFile {
            doc: doc.clone(),
            checksum: checksum(doc),
        })
        .expect("documents always serialize");
        {
            let mut f = File::create(&tmp)?;
            f.write_all(&body)?;
            f.sync_all()?;
        }
        if self.crash_before_rename {
            return Err(StoreError::StorageUnavailable("injected crash before rename".into()));
        }
        fs::rename(&tmp, &path)?;
        Ok(())
    }

    pub fn load_snapshot(&self, doc_id: &str) -> Result<Document, StoreError> {
        let path = self.snapshot_path(doc_id)?;
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return Err(StoreError::UnknownDocument(doc_id.into()))
            }
            Err(e) => return Err(e.into()),
        };
        let corrupt = |reason: String| StoreError::CorruptSnapshot { doc_id: doc_id.into(), reason };
        let file: SnapshotFile = serde_json::from_slice(&bytes).map_err(|e| corrupt(e.to_string()))?;
        let actual = checksum(&file.doc);
        if actual != file.checksum {
            return Err(corrupt(format!("checksum {actual:#010x}, stored {:#010x}", file.checksum)));
        }
        if file.doc.doc_id != doc_id {
            return Err(corrupt(format!("holds document {}", file.doc.doc_id)));
        }
        Ok(file.doc)
    }

    /// Saves the registered mobile users next to the documents.
    pub fn save_users(&self, users: &[MobileUser]) -> Result<(), StoreError> {
        let path = self.dir.join(USERS_FILE);
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(users).expect("users always serialize"))?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load_users(&self) -> Result<Vec<MobileUser>, StoreError> {
        match fs::read(self.dir.join(USERS_FILE)) {
            Ok(bytes) => serde_json::from_slice(&bytes).map_err(|e| StoreError::StorageUnavailable(format!("{USERS_FILE}: {e}"))),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(Vec::new()),
            Err(e) => Err(e.into()),
        }
    }

    pub fn append(&self, doc_id: &str, record: &CommandRecord) -> Result<(), StoreError> {
        let path = self.log_path(doc_id)?;
        let mut line = serde_json::to_vec(record).expect("records always serialize");
        line.push(b'\n');
        let mut f = OpenOptions::new().create(true).append(true).open(path)?;
        f.write_all(&line)?;
        f.flush()?;
        Ok(())
    }

    /// Reads the whole log. A torn final line is reported, not treated as
    /// corruption; a bad line anywhere else is.
    pub fn history(&self, doc_id: &str) -> Result<History, StoreError> {
        let path = self.log_path(doc_id)?;
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return Ok(History { records: Vec::new(), torn_tail: false, valid_len: 0 })
            }
            Err(e) => return Err(e.into()),
        };
        let mut records = Vec::new();
        let mut offset = 0usize;
        let mut line_no = 0usize;
        while offset < bytes.len() {
            line_no += 1;
            let rest = &bytes[offset..];
            let (line, complete) = match rest.iter().position(|&b| b == b'\n') {
                Some(n) => (&rest[..n], true),
                None => (rest, false),
            };
            match serde_json::from_slice::<CommandRecord>(line) {
                Ok(r) if complete => records.push(r),
                Ok(_) | Err(_) if !complete => {
                    return Ok(History { records, torn_tail: true, valid_len: offset as u64 })
                }
                Ok(_) => unreachable!(),
                Err(e) => {
                    return Err(StoreError::CorruptLog {
                        doc_id: doc_id.into(),
                        line: line_no,
                        reason: e.to_string(),
                    })
                }
            }
            offset += line.len() + 1;
        }
        Ok(History { records, torn_tail: false, valid_len: bytes.len() as u64 })
    }

    /// Cuts a torn final line off the log so later appends start clean.
    pub fn repair(&self, doc_id: &str) -> Result<History, StoreError> {
        let history = self.history(doc_id)?;
        if history.torn_tail {
            log::warn!("{doc_id}: discarding torn final log line");
            let f = OpenOptions::new().write(true).open(self.log_path(doc_id)?)?;
            f.set_len(history.valid_len)?;
            f.sync_all()?;
        }
        Ok(History { torn_tail: false, ..history })
    }

    /// Snapshot plus the log records newer than it. Without a snapshot the
    /// whole log is replayed.
    pub fn load(&self, doc_id: &str) -> Result<Document, StoreError> {
        let history = self.history(doc_id)?;
        let base = match self.load_snapshot(doc_id) {
            Ok(doc) => doc,
            Err(StoreError::UnknownDocument(_)) if !history.records.is_empty() => Document::empty(),
            Err(e) => return Err(e),
        };
        let newer: Vec<CommandRecord> = if base.doc_id.is_empty() {
            history.records
        } else {
            history.records.into_iter().filter(|r| r.rev > base.revision).collect()
        };
        replay_onto(base, &newer).map_err(|e| StoreError::CorruptLog {
            doc_id: doc_id.into(),
            line: 0,
            reason: e.to_string(),
        })
    }
}
