//! Python bindings: text diffing, the simulator, log replay and an in-process
//! workspace for scripting documents, locks and tasks.

use std::collections::HashMap;
use std::fmt::Display;

use chrono::{DateTime, Duration, Utc};
use fieldsync_core::client::DesktopClient;
use fieldsync_core::document::{builtin_templates, find_template};
use fieldsync_core::engine::{LockRequest, ServiceError};
use fieldsync_core::service::Service;
use fieldsync_core::sim::{run_scenario, Scenario, SIM_EPOCH_SECS};
use fieldsync_core::store::{replay as replay_records, Store};
use fieldsync_core::task::TaskSyncRequest;
use fieldsync_core::text::{apply_strict, compute_diff, DiffScript, Op, OpKind};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;

create_exception!(fieldsync, FieldsyncError, PyException, "A document, lock or task operation was refused.");

fn service_err(e: ServiceError) -> PyErr {
    FieldsyncError::new_err(format!("{}: {e}", e.code()))
}

fn value_err(e: impl Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_json(value: &impl serde::Serialize) -> String {
    serde_json::to_string(value).expect("serializable")
}

fn kind_name(kind: OpKind) -> &'static str {
    match kind {
        OpKind::Equal => "equal",
        OpKind::Insert => "insert",
        OpKind::Delete => "delete",
    }
}

/// Minimal char-level edit script from `old` to `new` as `(kind, text)` pairs.
#[pyfunction]
fn diff(old: &str, new: &str) -> PyResult<Vec<(String, String)>> {
    let script = compute_diff(old, new).map_err(value_err)?;
    Ok(script.ops().iter().map(|op| (kind_name(op.kind()).to_owned(), op.text().to_owned())).collect())
}

/// Number of inserted plus deleted chars in the minimal script.
#[pyfunction]
fn edit_cost(old: &str, new: &str) -> PyResult<usize> {
    Ok(compute_diff(old, new).map_err(value_err)?.edit_cost())
}

/// Applies `(kind, text)` pairs to `base`; fails unless they match exactly.
#[pyfunction]
fn apply_diff(base: &str, ops: Vec<(String, String)>) -> PyResult<String> {
    let ops = ops
        .into_iter()
        .map(|(kind, text)| match kind.as_str() {
            "equal" => Ok(Op::equal(text)),
            "insert" => Ok(Op::insert(text)),
            "delete" => Ok(Op::delete(text)),
            other => Err(value_err(format!("unknown op kind {other:?}"))),
        })
        .collect::<PyResult<Vec<Op>>>()?;
    apply_strict(base, &DiffScript::from_ops(ops)).map_err(value_err)
}

/// Built-in templates as JSON.
#[pyfunction]
fn templates() -> String {
    to_json(&builtin_templates())
}

#[pyfunction]
fn render_template(template_id: &str) -> PyResult<String> {
    find_template(template_id)
        .map(|t| t.render())
        .ok_or_else(|| value_err(format!("unknown template {template_id}")))
}

/// Runs a scenario (JSON text) and returns the transcript as JSON. Fault
/// settings given here override the scenario's own profile.
#[pyfunction]
#[pyo3(signature = (scenario, seed=None, loss=None, dup=None, reorder=None))]
fn simulate(
    py: Python<'_>,
    scenario: &str,
    seed: Option<u64>,
    loss: Option<f64>,
    dup: Option<f64>,
    reorder: Option<f64>,
) -> PyResult<String> {
    let scenario = Scenario::parse(scenario).map_err(value_err)?;
    let mut profile = scenario.header.profile.unwrap_or_default();
    profile.seed = seed.unwrap_or(profile.seed);
    profile.loss_prob = loss.unwrap_or(profile.loss_prob);
    profile.dup_prob = dup.unwrap_or(profile.dup_prob);
    profile.reorder_prob = reorder.unwrap_or(profile.reorder_prob);
    let transcript = py.detach(|| run_scenario(&scenario, &profile)).map_err(value_err)?;
    Ok(to_json(&transcript))
}

/// Rebuilds a stored document from its whole log, as JSON.
#[pyfunction]
fn replay(store: &str, doc_id: &str) -> PyResult<String> {
    let store = Store::open(store).map_err(value_err)?;
    let history = store.history(doc_id).map_err(value_err)?;
    Ok(to_json(&replay_records(&history.records).map_err(value_err)?))
}

/// Documents, users, locks and desktop sessions in this process, on a
/// virtual clock that only moves when told to.
#[pyclass]
struct Workspace {
    service: Service,
    desktops: HashMap<String, DesktopClient>,
    now: DateTime<Utc>,
}

#[pymethods]
impl Workspace {
    #[new]
    fn new() -> Self {
        Workspace {
            service: Service::in_memory(),
            desktops: HashMap::new(),
            now: DateTime::from_timestamp(SIM_EPOCH_SECS, 0).expect("valid epoch"),
        }
    }

    fn advance(&mut self, seconds: i64) {
        self.now += Duration::seconds(seconds);
    }

    fn register_user(&mut self, user_id: &str, display_name: &str) -> PyResult<()> {
        self.service.register_user(user_id, display_name).map_err(service_err)?;
        Ok(())
    }

    #[pyo3(signature = (template=None))]
    fn create_document(&mut self, template: Option<&str>) -> PyResult<String> {
        Ok(self.service.create_document(template, self.now).map_err(service_err)?.doc_id)
    }

    fn text(&self, doc_id: &str) -> PyResult<String> {
        Ok(self.service.document(doc_id).map_err(service_err)?.text.clone())
    }

    /// The document, locks included, as JSON.
    fn document(&self, doc_id: &str) -> PyResult<String> {
        Ok(to_json(self.service.document(doc_id).map_err(service_err)?))
    }

    /// Sets a desktop editor's text and runs one sync cycle. Returns the
    /// editor's text afterwards, with any edits to locked text undone.
    fn desktop_edit(&mut self, doc_id: &str, session: &str, text: &str) -> PyResult<String> {
        let fresh = !self.desktops.contains_key(session);
        let client = self.desktops.entry(session.to_owned()).or_insert_with(|| DesktopClient::new(session));
        if fresh {
            // First contact: load the document before editing it.
            let payload = client.outbound().map_err(value_err)?;
            let outcome = self.service.handle_sync(doc_id, &payload, self.now).map_err(service_err)?;
            client.receive(&outcome.frame);
        }
        client.set_text(text);
        let payload = client.outbound().map_err(value_err)?;
        let outcome = self.service.handle_sync(doc_id, &payload, self.now).map_err(service_err)?;
        client.receive(&outcome.frame);
        Ok(client.text().to_owned())
    }

    #[pyo3(signature = (doc_id, start, end, owner, description=""))]
    fn acquire_lock(&mut self, doc_id: &str, start: usize, end: usize, owner: &str, description: &str) -> PyResult<String> {
        let request = LockRequest { start, end, description: description.into(), owner: owner.into() };
        Ok(self.service.acquire_lock(doc_id, &request, self.now).map_err(service_err)?.id)
    }

    fn revoke_lock(&mut self, lock_id: &str) -> PyResult<()> {
        self.service.revoke_lock(lock_id, "coordinator", self.now).map_err(service_err)?;
        Ok(())
    }

    fn dismiss_lock(&mut self, lock_id: &str, user: &str) -> PyResult<()> {
        self.service.dismiss_lock(lock_id, user, self.now).map_err(service_err)?;
        Ok(())
    }

    /// Mobile push of `notes` into a task. Reusing a key changes nothing.
    fn push(&mut self, user: &str, task: &str, notes: &str, idempotency_key: &str) -> PyResult<String> {
        let request = TaskSyncRequest {
            task: task.into(),
            notes: Some(notes.into()),
            idempotency_key: idempotency_key.into(),
            location: None,
        };
        Ok(to_json(&self.service.sync_task(user, &request, self.now).map_err(service_err)?))
    }

    fn list_tasks(&self, user: &str) -> PyResult<String> {
        Ok(to_json(&self.service.list_tasks(user).map_err(service_err)?))
    }
}

#[pymodule]
fn fieldsync(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("FieldsyncError", m.py().get_type::<FieldsyncError>())?;
    m.add_class::<Workspace>()?;
    m.add_function(wrap_pyfunction!(diff, m)?)?;
    m.add_function(wrap_pyfunction!(edit_cost, m)?)?;
    m.add_function(wrap_pyfunction!(apply_diff, m)?)?;
    m.add_function(wrap_pyfunction!(templates, m)?)?;
    m.add_function(wrap_pyfunction!(render_template, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(replay, m)?)?;
    Ok(())
}
