//! Differential synchronization with guaranteed delivery.
//!
//! Each side of a connection keeps a [`SyncSession`]: a shadow of the text as
//! the peer last saw it, version counters for both directions, and a stack of
//! edits the peer has not acknowledged yet. Every outbound payload carries the
//! whole stack, so a lost payload is repaired by the next one; duplicates are
//! recognised by version.
//!
//! The server side additionally keeps a backup shadow: the shadow as it stood
//! before its oldest unacknowledged edit. When a client sends fresh edits while
//! still missing one of our changes, the client never saw our last response,
//! and the server rolls its shadow back before applying them.
//!
//! Keepalives are edits with an empty script. They never touch text, so they
//! are ignored when deciding whether two shadows still agree.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::{
    apply_fuzzy, apply_strict, compute_diff, to_patches, DiffScript, TextError,
    DEFAULT_CONTEXT_LEN, DEFAULT_FUZZY_WINDOW,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SyncError {
    #[error("payload for session {got} delivered to session {expected}")]
    SessionMismatch { expected: String, got: String },
    #[error("shadow diverged from peer at position {position}; session must be reinitialized")]
    ShadowDesync { position: usize },
    #[error(transparent)]
    Text(#[from] TextError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Role {
    Client,
    Server,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VersionedEdit {
    #[serde(rename = "v")]
    pub version: u64,
    pub script: DiffScript,
}

impl VersionedEdit {
    pub fn is_keepalive(&self) -> bool {
        self.script.is_empty()
    }
}

/// One frame of the sync protocol, in either direction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncPayload {
    pub session: String,
    #[serde(rename = "ack")]
    pub ack_version: u64,
    pub edits: Vec<VersionedEdit>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum InboundStatus {
    Applied,
    DuplicateOnly,
    RolledBack,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyncSession {
    session_id: String,
    role: Role,
    shadow: String,
    backup_shadow: String,
    /// Our version the backup shadow corresponds to.
    backup_version: u64,
    local_version: u64,
    remote_version: u64,
    outbound: VecDeque<VersionedEdit>,
}

impl SyncSession {
    pub fn new(session_id: impl Into<String>, role: Role) -> Self {
        SyncSession::with_text(session_id, role, "")
    }

    /// A session whose shadow already holds `text` on both sides.
    pub fn with_text(session_id: impl Into<String>, role: Role, text: &str) -> Self {
        SyncSession {
            session_id: session_id.into(),
            role,
            shadow: text.to_owned(),
            backup_shadow: text.to_owned(),
            backup_version: 0,
            local_version: 0,
            remote_version: 0,
            outbound: VecDeque::new(),
        }
    }

    pub fn id(&self) -> &str {
        &self.session_id
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn shadow(&self) -> &str {
        &self.shadow
    }

    pub fn backup_shadow(&self) -> &str {
        &self.backup_shadow
    }

    pub fn local_version(&self) -> u64 {
        self.local_version
    }

    pub fn remote_version(&self) -> u64 {
        self.remote_version
    }

    pub fn outbound(&self) -> impl Iterator<Item = &VersionedEdit> {
        self.outbound.iter()
    }

    /// Resets both shadows to `authoritative` with versions 0/0 and an empty
    /// stack.
    pub fn reinitialize(&mut self, authoritative: &str) {
        *self = SyncSession::with_text(std::mem::take(&mut self.session_id), self.role, authoritative);
    }

    /// Diffs `current_text` against the shadow, stacks the result and returns
    /// the whole unacknowledged stack.
    ///
    /// An unchanged text adds an empty keepalive edit, but only when the stack
    /// is otherwise empty.
    pub fn prepare_outbound(&mut self, current_text: &str) -> Result<SyncPayload, SyncError> {
        let script = compute_diff(&self.shadow, current_text)?;
        if script.has_changes() || self.outbound.is_empty() {
            if self.role == Role::Server {
                self.refresh_backup();
            }
            let script = if script.has_changes() { script } else { DiffScript::new() };
            self.outbound.push_back(VersionedEdit {
                version: self.local_version,
                script,
            });
            self.local_version += 1;
            self.shadow = current_text.to_owned();
        }
        Ok(self.payload())
    }

    /// The payload that would be sent now, without diffing.
    pub fn payload(&self) -> SyncPayload {
        SyncPayload {
            session: self.session_id.clone(),
            ack_version: self.remote_version,
            edits: self.outbound.iter().cloned().collect(),
        }
    }

    /// Applies a peer payload. Fresh edits go strictly onto the shadow and
    /// fuzzily onto `live_text`; the returned string is the new live text.
    ///
    /// On error the session is left untouched.
    pub fn apply_inbound(
        &mut self,
        payload: &SyncPayload,
        live_text: &str,
    ) -> Result<(String, InboundStatus), SyncError> {
        if payload.session != self.session_id {
            return Err(SyncError::SessionMismatch {
                expected: self.session_id.clone(),
                got: payload.session.clone(),
            });
        }
        let mut next = self.clone();
        let result = next.apply_inbound_inner(payload, live_text)?;
        *self = next;
        Ok(result)
    }

    fn apply_inbound_inner(
        &mut self,
        payload: &SyncPayload,
        live_text: &str,
    ) -> Result<(String, InboundStatus), SyncError> {
        self.acknowledge(payload.ack_version)?;

        let mut fresh: Vec<&VersionedEdit> = payload
            .edits
            .iter()
            .filter(|e| e.version >= self.remote_version)
            .collect();
        fresh.sort_by_key(|e| e.version);
        fresh.dedup_by_key(|e| e.version);
        if fresh.is_empty() {
            return Ok((live_text.to_owned(), InboundStatus::DuplicateOnly));
        }
        for (i, edit) in fresh.iter().enumerate() {
            if edit.version != self.remote_version + i as u64 {
                // A hole in the peer's stack: it has state we never saw.
                return Err(SyncError::ShadowDesync { position: 0 });
            }
        }

        // Our edits the peer had not seen when it produced these.
        let unseen_changes = self.outbound.iter().any(|e| !e.is_keepalive());
        let mut status = InboundStatus::Applied;
        if unseen_changes {
            match self.role {
                // Stale response: its edits were diffed against a shadow
                // without our latest change. The server rebuilds them.
                Role::Client => return Ok((live_text.to_owned(), InboundStatus::DuplicateOnly)),
                Role::Server => {
                    if fresh.iter().any(|e| !e.is_keepalive()) {
                        self.roll_back(payload.ack_version)?;
                        status = InboundStatus::RolledBack;
                    }
                }
            }
        }

        let mut live = live_text.to_owned();
        for edit in fresh {
            if !edit.is_keepalive() {
                self.shadow = apply_strict(&self.shadow, &edit.script).map_err(|e| match e {
                    TextError::BaseMismatch(position) => SyncError::ShadowDesync { position },
                    other => SyncError::Text(other),
                })?;
                let patches = to_patches(&edit.script, DEFAULT_CONTEXT_LEN);
                live = apply_fuzzy(&live, &patches, DEFAULT_FUZZY_WINDOW).0;
            }
            self.remote_version = edit.version + 1;
        }
        if self.role == Role::Server {
            self.refresh_backup();
        }
        Ok((live, status))
    }

    /// Drops stacked edits the peer has incorporated.
    fn acknowledge(&mut self, ack: u64) -> Result<(), SyncError> {
        while let Some(front) = self.outbound.front() {
            if front.version >= ack {
                break;
            }
            let edit = self.outbound.pop_front().expect("front exists");
            if self.role == Role::Server && self.backup_version == edit.version {
                if !edit.is_keepalive() {
                    self.backup_shadow = apply_strict(&self.backup_shadow, &edit.script)
                        .map_err(|_| SyncError::ShadowDesync { position: 0 })?;
                }
                self.backup_version += 1;
            }
        }
        Ok(())
    }

    /// Restores the shadow to what the peer saw at our version `ack`.
    fn roll_back(&mut self, ack: u64) -> Result<(), SyncError> {
        if self.backup_version != ack {
            return Err(SyncError::ShadowDesync { position: 0 });
        }
        self.shadow = self.backup_shadow.clone();
        self.local_version = ack;
        self.outbound.clear();
        Ok(())
    }

    /// Keeps the backup at the shadow preceding our oldest unacknowledged
    /// edit. Only possible while every stacked edit is a keepalive, since
    /// then the shadow text is unchanged since that point.
    fn refresh_backup(&mut self) {
        if self.outbound.iter().all(VersionedEdit::is_keepalive) {
            self.backup_shadow = self.shadow.clone();
            self.backup_version = self
                .outbound
                .front()
                .map_or(self.local_version, |e| e.version);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::Op;

    fn client() -> SyncSession {
        SyncSession::new("s1", Role::Client)
    }

    fn server() -> SyncSession {
        SyncSession::new("s1", Role::Server)
    }

    #[test]
    fn empty_keepalive_on_fresh_session() {
        let mut c = client();
        let p = c.prepare_outbound("").unwrap();
        assert_eq!(p.ack_version, 0);
        assert_eq!(p.edits, vec![VersionedEdit { version: 0, script: DiffScript::new() }]);
        assert_eq!(c.local_version(), 1);
    }

    #[test]
    fn first_edit_is_an_insert() {
        let mut c = client();
        let p = c.prepare_outbound("abc").unwrap();
        assert_eq!(p.edits.len(), 1);
        assert_eq!(p.edits[0].version, 0);
        assert_eq!(p.edits[0].script.ops(), &[Op::insert("abc")]);
        assert_eq!(c.shadow(), "abc");
    }

    #[test]
    fn unacknowledged_edits_stack_up() {
        let mut c = client();
        c.prepare_outbound("abc").unwrap();
        let p = c.prepare_outbound("abcd").unwrap();
        let versions: Vec<u64> = p.edits.iter().map(|e| e.version).collect();
        assert_eq!(versions, vec![0, 1]);
        // No change and a non-empty stack: nothing new is stacked.
        let p = c.prepare_outbound("abcd").unwrap();
        assert_eq!(p.edits.len(), 2);
        assert_eq!(c.local_version(), 2);
    }

    #[test]
    fn inbound_insert_then_duplicate() {
        let mut s = server();
        let payload = SyncPayload {
            session: "s1".into(),
            ack_version: 0,
            edits: vec![VersionedEdit { version: 0, script: DiffScript::canonical([Op::insert("abc")]) }],
        };
        let (text, status) = s.apply_inbound(&payload, "").unwrap();
        assert_eq!((text.as_str(), status), ("abc", InboundStatus::Applied));
        assert_eq!(s.remote_version(), 1);

        let before = s.clone();
        let (text, status) = s.apply_inbound(&payload, "abc").unwrap();
        assert_eq!((text.as_str(), status), ("abc", InboundStatus::DuplicateOnly));
        assert_eq!(s, before);
    }

    #[test]
    fn ack_discards_stacked_edits() {
        let mut c = client();
        c.prepare_outbound("abc").unwrap();
        c.prepare_outbound("abcd").unwrap();
        let ack = SyncPayload { session: "s1".into(), ack_version: 1, edits: vec![] };
        c.apply_inbound(&ack, "abcd").unwrap();
        assert_eq!(c.outbound().map(|e| e.version).collect::<Vec<_>>(), vec![1]);
    }

    #[test]
    fn session_mismatch_is_rejected() {
        let mut c = client();
        let p = SyncPayload { session: "other".into(), ack_version: 0, edits: vec![] };
        assert!(matches!(c.apply_inbound(&p, ""), Err(SyncError::SessionMismatch { .. })));
    }

    #[test]
    fn strict_failure_is_desync_and_leaves_state() {
        let mut s = server();
        let bad = SyncPayload {
            session: "s1".into(),
            ack_version: 0,
            edits: vec![VersionedEdit { version: 0, script: DiffScript::canonical([Op::equal("zz")]) }],
        };
        let before = s.clone();
        assert_eq!(s.apply_inbound(&bad, ""), Err(SyncError::ShadowDesync { position: 0 }));
        assert_eq!(s, before);
    }

    #[test]
    fn reinitialize_resets_everything() {
        let mut c = client();
        c.prepare_outbound("abc").unwrap();
        c.reinitialize("");
        assert_eq!((c.local_version(), c.remote_version()), (0, 0));
        assert_eq!(c.outbound().count(), 0);
        c.reinitialize("abc");
        assert_eq!(c.shadow(), "abc");
        assert_eq!(c.backup_shadow(), "abc");
        assert_eq!(c.id(), "s1");
    }

    /// Full cycle: client sends, server applies to `server_text`, replies.
    fn cycle(c: &mut SyncSession, ctext: &mut String, s: &mut SyncSession, stext: &mut String, drop_reply: bool) -> InboundStatus {
        let req = c.prepare_outbound(ctext).unwrap();
        let (t, status) = s.apply_inbound(&req, stext).unwrap();
        *stext = t;
        let resp = s.prepare_outbound(stext).unwrap();
        if !drop_reply {
            let (t, _) = c.apply_inbound(&resp, ctext).unwrap();
            *ctext = t;
        }
        status
    }

    #[test]
    fn lost_response_rolls_back_and_converges() {
        let (mut c, mut s) = (client(), server());
        let (mut ct, mut st) = (String::new(), String::from("X"));
        ct.push_str("abc");
        // Server's reply carrying "X" is lost.
        assert_eq!(cycle(&mut c, &mut ct, &mut s, &mut st, true), InboundStatus::Applied);
        assert_eq!(st, "abcX");
        ct.push('d');
        let status = cycle(&mut c, &mut ct, &mut s, &mut st, false);
        assert_eq!(status, InboundStatus::RolledBack);
        cycle(&mut c, &mut ct, &mut s, &mut st, false);
        assert_eq!(ct, st);
        assert_eq!(ct, "abcdX");
    }

    #[test]
    fn late_stale_response_is_ignored_by_client() {
        let (mut c, mut s) = (client(), server());
        let (mut ct, mut st) = (String::from("abc"), String::from("X"));
        let req = c.prepare_outbound(&ct).unwrap();
        st = s.apply_inbound(&req, &st).unwrap().0;
        let late = s.prepare_outbound(&st).unwrap();

        ct.push('d');
        let req2 = c.prepare_outbound(&ct).unwrap();
        // The old reply lands after the client already diffed again.
        let (t, status) = c.apply_inbound(&late, &ct).unwrap();
        assert_eq!(status, InboundStatus::DuplicateOnly);
        assert_eq!(t, ct);

        st = s.apply_inbound(&req2, &st).unwrap().0;
        let resp = s.prepare_outbound(&st).unwrap();
        ct = c.apply_inbound(&resp, &ct).unwrap().0;
        assert_eq!(ct, st);
    }
}
