//! Plain-text diffing, strict and fuzzy patching, and position mapping.
//!
//! All offsets in this module count Unicode scalar values (`char`s), never
//! bytes, so a range can never split a multi-byte character.

mod diff;
mod patch;
mod position;

use std::fmt;

use serde::de::{self, SeqAccess, Visitor};
use serde::ser::SerializeTuple;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub use diff::{compute_diff, DiffConfig, DEFAULT_COARSEN_ABOVE, DEFAULT_MAX_BYTES};
pub use patch::{apply_fuzzy, to_patches, Patch, DEFAULT_CONTEXT_LEN, DEFAULT_FUZZY_WINDOW};
pub use position::{map_position, map_position_with, Bias};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TextError {
    #[error("input of {size} bytes exceeds the {limit} byte document limit")]
    SizeLimitExceeded { size: usize, limit: usize },
    #[error("script does not match base text at position {0}")]
    BaseMismatch(usize),
    #[error("position {pos} is outside the source text (length {len})")]
    PositionOutOfRange { pos: usize, len: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Equal,
    Insert,
    Delete,
}

impl OpKind {
    fn symbol(self) -> &'static str {
        match self {
            OpKind::Equal => "=",
            OpKind::Insert => "+",
            OpKind::Delete => "-",
        }
    }

    fn from_symbol(s: &str) -> Option<Self> {
        match s {
            "=" => Some(OpKind::Equal),
            "+" => Some(OpKind::Insert),
            "-" => Some(OpKind::Delete),
            _ => None,
        }
    }
}

/// One step of an edit script. `len` caches the char count of `text`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Op {
    kind: OpKind,
    text: String,
    len: usize,
}

impl Op {
    pub fn new(kind: OpKind, text: impl Into<String>) -> Self {
        let text = text.into();
        let len = text.chars().count();
        Op { kind, text, len }
    }

    pub fn equal(text: impl Into<String>) -> Self {
        Op::new(OpKind::Equal, text)
    }

    pub fn insert(text: impl Into<String>) -> Self {
        Op::new(OpKind::Insert, text)
    }

    pub fn delete(text: impl Into<String>) -> Self {
        Op::new(OpKind::Delete, text)
    }

    pub fn kind(&self) -> OpKind {
        self.kind
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    /// Length in chars.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

impl Serialize for Op {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut tup = serializer.serialize_tuple(2)?;
        tup.serialize_element(self.kind.symbol())?;
        tup.serialize_element(&self.text)?;
        tup.end()
    }
}

impl<'de> Deserialize<'de> for Op {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct OpVisitor;

        impl<'de> Visitor<'de> for OpVisitor {
            type Value = Op;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str(r#"a ["=" | "+" | "-", text] pair"#)
            }

            fn visit_seq<A: SeqAccess<'de>>(self, mut seq: A) -> Result<Op, A::Error> {
                let sym: String = seq
                    .next_element()?
                    .ok_or_else(|| de::Error::invalid_length(0, &self))?;
                let text: String = seq
                    .next_element()?
                    .ok_or_else(|| de::Error::invalid_length(1, &self))?;
                if seq.next_element::<de::IgnoredAny>()?.is_some() {
                    return Err(de::Error::invalid_length(3, &self));
                }
                let kind = OpKind::from_symbol(&sym)
                    .ok_or_else(|| de::Error::invalid_value(de::Unexpected::Str(&sym), &self))?;
                Ok(Op::new(kind, text))
            }
        }

        deserializer.deserialize_tuple(2, OpVisitor)
    }
}

/// An ordered list of edit operations turning a source text into a target
/// text.
///
/// Scripts built through [`DiffScript::push`] or [`DiffScript::canonical`]
/// are kept canonical: no empty ops, no two adjacent ops of the same kind,
/// and within each change region deletions come before insertions.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DiffScript {
    ops: Vec<Op>,
}

impl DiffScript {
    pub fn new() -> Self {
        DiffScript::default()
    }

    /// Wraps ops verbatim, without canonicalising them.
    pub fn from_ops(ops: Vec<Op>) -> Self {
        DiffScript { ops }
    }

    /// Builds the canonical form of an arbitrary op sequence.
    pub fn canonical(ops: impl IntoIterator<Item = Op>) -> Self {
        let mut script = DiffScript::new();
        for op in ops {
            script.push(op);
        }
        script
    }

    /// Appends an op, keeping the script canonical.
    pub fn push(&mut self, op: Op) {
        if op.is_empty() {
            return;
        }
        match op.kind {
            OpKind::Equal => self.push_merged(op),
            OpKind::Delete => {
                // A deletion that follows insertions in the same change
                // region is moved in front of them.
                let n = self.ops.len();
                if n > 0 && self.ops[n - 1].kind == OpKind::Insert {
                    if n > 1 && self.ops[n - 2].kind == OpKind::Delete {
                        let prev = &mut self.ops[n - 2];
                        prev.text.push_str(&op.text);
                        prev.len += op.len;
                    } else {
                        self.ops.insert(n - 1, op);
                    }
                } else {
                    self.push_merged(op);
                }
            }
            OpKind::Insert => self.push_merged(op),
        }
    }

    fn push_merged(&mut self, op: Op) {
        match self.ops.last_mut() {
            Some(last) if last.kind == op.kind => {
                last.text.push_str(&op.text);
                last.len += op.len;
            }
            _ => self.ops.push(op),
        }
    }

    pub fn ops(&self) -> &[Op] {
        &self.ops
    }

    pub fn into_ops(self) -> Vec<Op> {
        self.ops
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// True when the script contains at least one insertion or deletion.
    pub fn has_changes(&self) -> bool {
        self.ops.iter().any(|op| op.kind != OpKind::Equal)
    }

    pub fn is_canonical(&self) -> bool {
        let no_empty = self.ops.iter().all(|op| !op.is_empty());
        let no_repeat = self.ops.windows(2).all(|w| w[0].kind != w[1].kind);
        let ordered = self
            .ops
            .windows(2)
            .all(|w| !(w[0].kind == OpKind::Insert && w[1].kind == OpKind::Delete));
        no_empty && no_repeat && ordered
    }

    /// Char length of the text this script consumes.
    pub fn source_len(&self) -> usize {
        self.ops
            .iter()
            .filter(|op| op.kind != OpKind::Insert)
            .map(Op::len)
            .sum()
    }

    /// Char length of the text this script produces.
    pub fn target_len(&self) -> usize {
        self.ops
            .iter()
            .filter(|op| op.kind != OpKind::Delete)
            .map(Op::len)
            .sum()
    }

    pub fn source_text(&self) -> String {
        self.ops
            .iter()
            .filter(|op| op.kind != OpKind::Insert)
            .map(Op::text)
            .collect()
    }

    pub fn target_text(&self) -> String {
        self.ops
            .iter()
            .filter(|op| op.kind != OpKind::Delete)
            .map(Op::text)
            .collect()
    }

    /// Total number of inserted plus deleted chars.
    pub fn edit_cost(&self) -> usize {
        self.ops
            .iter()
            .filter(|op| op.kind != OpKind::Equal)
            .map(Op::len)
            .sum()
    }

    /// Script replacing `[start, end)` of `base` with `replacement`.
    pub fn splice(base: &str, start: usize, end: usize, replacement: &str) -> DiffScript {
        let chars: Vec<char> = base.chars().collect();
        let end = end.min(chars.len());
        let start = start.min(end);
        DiffScript::canonical([
            Op::equal(chars[..start].iter().collect::<String>()),
            Op::delete(chars[start..end].iter().collect::<String>()),
            Op::insert(replacement),
            Op::equal(chars[end..].iter().collect::<String>()),
        ])
    }
}

impl FromIterator<Op> for DiffScript {
    fn from_iter<I: IntoIterator<Item = Op>>(iter: I) -> Self {
        DiffScript::canonical(iter)
    }
}

/// Applies `script` to `base`, requiring every EQUAL and DELETE op to match
/// the base exactly at the running cursor and the script to consume the whole
/// base.
pub fn apply_strict(base: &str, script: &DiffScript) -> Result<String, TextError> {
    let mut out = String::with_capacity(base.len());
    let mut rest = base.chars();
    let mut cursor = 0usize;
    for op in script.ops() {
        match op.kind {
            OpKind::Insert => out.push_str(&op.text),
            OpKind::Equal | OpKind::Delete => {
                for expected in op.text.chars() {
                    match rest.next() {
                        Some(actual) if actual == expected => {
                            if op.kind == OpKind::Equal {
                                out.push(actual);
                            }
                            cursor += 1;
                        }
                        _ => return Err(TextError::BaseMismatch(cursor)),
                    }
                }
            }
        }
    }
    if rest.next().is_some() {
        return Err(TextError::BaseMismatch(cursor));
    }
    Ok(out)
}
