use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{FaultProfile, SimError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ActorKind {
    Desktop,
    Mobile,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActorDecl {
    pub id: String,
    pub kind: ActorKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioHeader {
    pub actors: Vec<ActorDecl>,
    pub horizon_ms: u64,
    /// Desktop sync period.
    #[serde(default)]
    pub cadence_ms: Option<u64>,
    #[serde(default)]
    pub template: Option<String>,
    #[serde(default)]
    pub initial_text: Option<String>,
    /// Used when no profile is given on the command line.
    #[serde(default)]
    pub profile: Option<FaultProfile>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ActionKind {
    Edit,
    Sync,
    Assign,
    Commit,
    Dismiss,
    Revoke,
    ChannelDown,
    ChannelUp,
    Tick,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawStep {
    pub at: u64,
    pub actor: String,
    pub action: ActionKind,
    #[serde(default)]
    pub args: Value,
}

/// A desktop text edit. Offsets are chars in the editing client's text;
/// a missing `pos` means the end.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EditArgs {
    Insert { pos: Option<usize>, insert: String },
    Delete { pos: Option<usize>, delete: usize },
    /// One random insert or delete drawn from the actor's edit stream.
    Random { random: bool },
}

/// Which text a lock covers: explicit char offsets, or the `nth`
/// occurrence of `find` in the server text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RangeSpec {
    Offsets { start: usize, end: usize },
    Find {
        find: String,
        #[serde(default)]
        nth: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssignArgs {
    pub owner: String,
    pub label: String,
    #[serde(flatten)]
    pub range: RangeSpec,
    #[serde(default)]
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommitArgs {
    pub task: String,
    pub notes: String,
    /// Push immediately (the sync button) or only save the draft.
    #[serde(default = "yes")]
    pub sync: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskArgs {
    pub task: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    Edit(EditArgs),
    Sync,
    Assign(AssignArgs),
    Commit(CommitArgs),
    Dismiss(TaskArgs),
    Revoke(TaskArgs),
    ChannelDown,
    ChannelUp,
    Tick,
}

impl Action {
    pub fn is_edit(&self) -> bool {
        matches!(self, Action::Edit(_) | Action::Commit(_))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Step {
    pub at: u64,
    pub actor: String,
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub header: ScenarioHeader,
    pub steps: Vec<Step>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    header: ScenarioHeader,
    steps: Vec<RawStep>,
}

fn parse_args<T: for<'de> Deserialize<'de>>(index: usize, args: &Value) -> Result<T, SimError> {
    let args = if args.is_null() { Value::Object(Default::default()) } else { args.clone() };
    serde_json::from_value(args).map_err(|e| SimError::ScenarioParse(format!("step {index}: bad args: {e}")))
}

impl Scenario {
    pub fn parse(json: &str) -> Result<Scenario, SimError> {
        let raw: RawScenario = serde_json::from_str(json).map_err(|e| SimError::ScenarioParse(e.to_string()))?;
        Scenario::from_raw(raw.header, raw.steps)
    }

    pub fn from_raw(header: ScenarioHeader, raw_steps: Vec<RawStep>) -> Result<Scenario, SimError> {
        let bad = |msg: String| Err(SimError::ScenarioParse(msg));
        let mut ids = BTreeSet::new();
        for a in &header.actors {
            if a.id.is_empty() || !ids.insert(a.id.as_str()) {
                return bad(format!("duplicate or empty actor id {:?}", a.id));
            }
        }
        if header.cadence_ms == Some(0) {
            return bad("cadence_ms must be positive".into());
        }
        let kind_of = |id: &str| header.actors.iter().find(|a| a.id == id).map(|a| a.kind);
        let mut steps = Vec::with_capacity(raw_steps.len());
        let mut last = 0;
        for (i, raw) in raw_steps.into_iter().enumerate() {
            if raw.at < last {
                return bad(format!("step {i}: time {} goes backwards", raw.at));
            }
            last = raw.at;
            let Some(kind) = kind_of(&raw.actor) else {
                return bad(format!("step {i}: undeclared actor {}", raw.actor));
            };
            let action = match raw.action {
                ActionKind::Edit => Action::Edit(parse_args(i, &raw.args)?),
                ActionKind::Sync => Action::Sync,
                ActionKind::Assign => {
                    let args: AssignArgs = parse_args(i, &raw.args)?;
                    if kind_of(&args.owner) != Some(ActorKind::Mobile) {
                        return bad(format!("step {i}: owner {} is not a mobile actor", args.owner));
                    }
                    Action::Assign(args)
                }
                ActionKind::Commit => Action::Commit(parse_args(i, &raw.args)?),
                ActionKind::Dismiss => Action::Dismiss(parse_args(i, &raw.args)?),
                ActionKind::Revoke => Action::Revoke(parse_args(i, &raw.args)?),
                ActionKind::ChannelDown => Action::ChannelDown,
                ActionKind::ChannelUp => Action::ChannelUp,
                ActionKind::Tick => Action::Tick,
            };
            let allowed = match &action {
                Action::Edit(_) | Action::Sync | Action::Assign(_) | Action::Revoke(_) => kind == ActorKind::Desktop,
                Action::Commit(_) | Action::Dismiss(_) => kind == ActorKind::Mobile,
                Action::ChannelDown | Action::ChannelUp | Action::Tick => true,
            };
            if !allowed {
                return bad(format!("step {i}: {:?} is not a {kind:?} action", raw.action));
            }
            steps.push(Step { at: raw.at, actor: raw.actor, action });
        }
        Ok(Scenario { header, steps })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const OK: &str = r#"{
        "header": {"actors": [{"id": "d1", "kind": "DESKTOP"}, {"id": "m1", "kind": "MOBILE"}], "horizon_ms": 10000},
        "steps": [
            {"at": 0, "actor": "d1", "action": "EDIT", "args": {"insert": "abc"}},
            {"at": 5, "actor": "d1", "action": "EDIT", "args": {"pos": 1, "delete": 1}},
            {"at": 5, "actor": "d1", "action": "EDIT", "args": {"random": true}},
            {"at": 6, "actor": "d1", "action": "ASSIGN", "args": {"owner": "m1", "label": "t", "find": "ac"}},
            {"at": 7, "actor": "m1", "action": "COMMIT", "args": {"task": "t", "notes": "x"}},
            {"at": 8, "actor": "m1", "action": "CHANNEL_DOWN"},
            {"at": 9, "actor": "d1", "action": "SYNC"}
        ]
    }"#;

    #[test]
    fn parses_all_arg_shapes() {
        let s = Scenario::parse(OK).unwrap();
        assert_eq!(s.steps.len(), 7);
        assert_eq!(s.steps[1].action, Action::Edit(EditArgs::Delete { pos: Some(1), delete: 1 }));
        assert!(matches!(&s.steps[3].action, Action::Assign(a) if a.range == RangeSpec::Find { find: "ac".into(), nth: 0 }));
        assert!(matches!(&s.steps[4].action, Action::Commit(c) if c.sync));
    }

    #[test]
    fn rejects_malformed() {
        for bad in [
            "not json",
            r#"{"header": {"actors": [], "horizon_ms": 1}, "steps": [{"at": 0, "actor": "x", "action": "SYNC"}]}"#,
            r#"{"header": {"actors": [{"id": "d", "kind": "DESKTOP"}], "horizon_ms": 1}, "steps": [{"at": 5, "actor": "d", "action": "SYNC"}, {"at": 1, "actor": "d", "action": "SYNC"}]}"#,
            r#"{"header": {"actors": [{"id": "d", "kind": "DESKTOP"}], "horizon_ms": 1}, "steps": [{"at": 0, "actor": "d", "action": "COMMIT", "args": {"task": "t", "notes": ""}}]}"#,
            r#"{"header": {"actors": [{"id": "d", "kind": "DESKTOP"}], "horizon_ms": 1}, "steps": [{"at": 0, "actor": "d", "action": "JUMP"}]}"#,
        ] {
            assert!(matches!(Scenario::parse(bad), Err(SimError::ScenarioParse(_))), "{bad}");
        }
    }
}
