//! Mobile-owned region locks.
//!
//! A lock reserves a half-open char range `[start, end)` of a document for one
//! mobile user. Desktop edits touching the interior are filtered out, edits
//! elsewhere shift the range, and only the owner's commits replace the
//! interior.

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::{map_position_with, Bias, DiffScript, Op, OpKind};

pub type LockId = String;
pub type UserId = String;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LockError {
    #[error("range overlaps active lock {existing}")]
    OverlapsExistingLock { existing: LockId },
    #[error("selection is empty")]
    EmptySelection,
    #[error("unknown owner {0}")]
    UnknownOwner(UserId),
    #[error("range {start}..{end} is outside the document (length {len})")]
    RangeOutOfBounds { start: usize, end: usize, len: usize },
    #[error("unknown lock {0}")]
    UnknownLock(LockId),
    #[error("lock is {state:?}, not active")]
    LockNotActive { state: LockState },
    #[error("{user} does not own this lock")]
    NotOwner { user: UserId },
    #[error("every palette color is taken by another owner")]
    PaletteExhausted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LockState {
    Active,
    Dismissed,
    Revoked,
}

impl LockState {
    pub fn is_terminal(self) -> bool {
        self != LockState::Active
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MobileLock {
    pub id: LockId,
    pub owner: UserId,
    pub start: usize,
    pub end: usize,
    pub description: String,
    pub color: String,
    pub state: LockState,
    pub created_at: DateTime<Utc>,
    pub last_sync_at: Option<DateTime<Utc>>,
}

impl MobileLock {
    pub fn is_active(&self) -> bool {
        self.state == LockState::Active
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    fn interior_contains(&self, pos: usize) -> bool {
        self.start < pos && pos < self.end
    }

    fn overlaps(&self, start: usize, end: usize) -> bool {
        start < self.end && self.start < end
    }
}

/// Display colors handed out to lock owners, in assignment order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Palette(Vec<String>);

pub const DEFAULT_PALETTE: [&str; 12] = [
    "#e6194b", "#3cb44b", "#4363d8", "#f58231", "#911eb4", "#42d4f4", "#f032e6", "#bfef45",
    "#469990", "#9a6324", "#800000", "#000075",
];

impl Default for Palette {
    fn default() -> Self {
        Palette(DEFAULT_PALETTE.iter().map(|c| c.to_string()).collect())
    }
}

impl Palette {
    pub fn new(colors: Vec<String>) -> Self {
        Palette(colors)
    }

    pub fn colors(&self) -> &[String] {
        &self.0
    }

    /// The owner's existing color on this document, else the first color no
    /// other owner's active lock uses.
    pub fn assign(&self, locks: &[MobileLock], owner: &str) -> Result<String, LockError> {
        if let Some(own) = locks.iter().find(|l| l.is_active() && l.owner == owner) {
            return Ok(own.color.clone());
        }
        self.0
            .iter()
            .find(|c| !locks.iter().any(|l| l.is_active() && &l.color == *c))
            .cloned()
            .ok_or(LockError::PaletteExhausted)
    }
}

/// Checks a new lock request against the document and the existing locks.
pub fn validate_range(
    locks: &[MobileLock],
    text_len: usize,
    start: usize,
    end: usize,
) -> Result<(), LockError> {
    if end > text_len || start > end {
        return Err(LockError::RangeOutOfBounds { start, end, len: text_len });
    }
    if start == end {
        return Err(LockError::EmptySelection);
    }
    if let Some(existing) = locks.iter().find(|l| l.is_active() && l.overlaps(start, end)) {
        return Err(LockError::OverlapsExistingLock { existing: existing.id.clone() });
    }
    Ok(())
}

/// Removes the parts of a desktop script that would touch an active lock
/// interior.
///
/// Insertions strictly inside a lock are dropped. Deleted text inside a lock
/// is kept as EQUAL, so the result still applies strictly to the same base.
/// Insertions exactly at a lock boundary count as outside.
pub fn filter_edits(script: &DiffScript, locks: &[MobileLock]) -> DiffScript {
    let active: Vec<&MobileLock> = locks.iter().filter(|l| l.is_active() && !l.is_empty()).collect();
    if active.is_empty() {
        return script.clone();
    }
    let mut out = DiffScript::new();
    let mut src = 0usize;
    for op in script.ops() {
        match op.kind() {
            OpKind::Equal => {
                out.push(op.clone());
                src += op.len();
            }
            OpKind::Insert => {
                if !active.iter().any(|l| l.interior_contains(src)) {
                    out.push(op.clone());
                }
            }
            OpKind::Delete => {
                let chars: Vec<char> = op.text().chars().collect();
                let mut run_start = 0;
                let mut run_protected = protected(&active, src);
                for i in 1..=chars.len() {
                    let boundary = i == chars.len() || protected(&active, src + i) != run_protected;
                    if boundary {
                        let text: String = chars[run_start..i].iter().collect();
                        out.push(if run_protected { Op::equal(text) } else { Op::delete(text) });
                        if i < chars.len() {
                            run_start = i;
                            run_protected = !run_protected;
                        }
                    }
                }
                src += op.len();
            }
        }
    }
    out
}

fn protected(active: &[&MobileLock], pos: usize) -> bool {
    active.iter().any(|l| l.start <= pos && pos < l.end)
}

/// Moves active lock ranges through an (already filtered) script. Starts move
/// past text inserted at them and ends stay before it, so boundary inserts
/// land outside. Terminal locks keep their range, clamped to the new length.
pub fn adjust_locks(locks: &mut [MobileLock], script: &DiffScript) {
    let new_len = script.target_len();
    for lock in locks.iter_mut() {
        if lock.is_active() {
            let start = map_position_with(script, lock.start, Bias::Right).unwrap_or(new_len);
            let end = map_position_with(script, lock.end, Bias::Left).unwrap_or(new_len);
            lock.start = start;
            lock.end = end.max(start);
        } else {
            lock.end = lock.end.min(new_len);
            lock.start = lock.start.min(lock.end);
        }
    }
}

/// Active locks are pairwise disjoint and inside `text_len`.
pub fn check_invariants(locks: &[MobileLock], text_len: usize) -> bool {
    let mut active: Vec<&MobileLock> = locks.iter().filter(|l| l.is_active()).collect();
    active.sort_by_key(|l| (l.start, l.end));
    let bounded = locks.iter().all(|l| l.start <= l.end && l.end <= text_len);
    let disjoint = active.windows(2).all(|w| w[0].end <= w[1].start);
    bounded && disjoint
}
