use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, Duration, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use super::scenario::{Action, ActorKind, EditArgs, RangeSpec, Scenario, Step};
use super::{FaultProfile, SimError};
use crate::client::{
    Draft, DesktopClient, MemoryDraftStore, MobileSession, Received, TaskTransport, TransportError,
};
use crate::diffsync::{InboundStatus, SyncPayload};
use crate::engine::{LockRequest, ServerFrame, ServiceError};
use crate::lock::MobileLock;
use crate::service::{rejection, Service};
use crate::task::{Notification, SyncAck, Task, TaskSyncRequest};

/// Virtual time 0 is 2026-01-01T00:00:00Z.
pub const SIM_EPOCH_SECS: i64 = 1_767_225_600;
const DEFAULT_CADENCE_MS: u64 = 500;
const MOBILE_TIMER_MS: u64 = 1000;

#[derive(Debug, Clone, Serialize, PartialEq, Eq)]
pub struct LogEntry {
    pub t: u64,
    pub actor: String,
    pub event: String,
    #[serde(skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

#[derive(Debug, Clone, Default, Serialize, PartialEq, Eq)]
pub struct Metrics {
    pub edits: u64,
    pub frames_sent: u64,
    pub frames_dropped: u64,
    pub frames_duplicated: u64,
    pub frames_delivered: u64,
    pub frames_ignored: u64,
    pub resets: u64,
    pub rollbacks: u64,
    pub filtered_syncs: u64,
    pub mobile_requests: u64,
    pub mobile_failures: u64,
    pub mobile_duplicates: u64,
    pub sync_attempts: u64,
    /// Document-changing pushes per `task/idempotency-key`.
    pub splices_by_key: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct ServerSummary {
    pub doc_id: String,
    pub text: String,
    pub sha256: String,
    pub revision: u64,
    pub locks: Vec<MobileLock>,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
#[serde(untagged)]
pub enum ActorSummary {
    Desktop {
        kind: ActorKind,
        session: String,
        text: String,
        sha256: String,
    },
    Mobile {
        kind: ActorKind,
        tasks: Vec<String>,
        drafts: BTreeMap<String, Draft>,
        notifications: Vec<Notification>,
    },
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct Transcript {
    pub converged: bool,
    pub non_quiescent: bool,
    /// Start of the final stretch, after the last edit, during which every
    /// desktop text equalled the server text.
    pub convergence_time_ms: Option<u64>,
    pub last_edit_ms: u64,
    pub end_time_ms: u64,
    pub profile: FaultProfile,
    pub server: ServerSummary,
    pub actors: BTreeMap<String, ActorSummary>,
    pub metrics: Metrics,
    pub events: Vec<LogEntry>,
}

impl Transcript {
    /// Every desktop ended with the server's text.
    pub fn texts_identical(&self) -> bool {
        self.actors.values().all(|a| match a {
            ActorSummary::Desktop { text, .. } => *text == self.server.text,
            ActorSummary::Mobile { .. } => true,
        })
    }
}

pub fn sha256_hex(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[derive(Debug)]
enum Event {
    Step(usize),
    Cycle { actor: String, periodic: bool },
    ToServer { from: String, payload: SyncPayload },
    ToClient { to: String, frame: ServerFrame },
    MobileTimer(String),
}

struct DesktopSim {
    client: DesktopClient,
    edit_rng: ChaCha8Rng,
    tokens: u64,
}

struct MobileSim {
    session: MobileSession<MemoryDraftStore>,
    received: Vec<Notification>,
}

/// Mobile requests, subject to the same faults as desktop frames: the
/// request or the response may be lost and the request may run twice.
struct FaultyTransport<'a> {
    service: &'a mut Service,
    rng: &'a mut ChaCha8Rng,
    metrics: &'a mut Metrics,
    profile: FaultProfile,
    up: bool,
    now: DateTime<Utc>,
}

impl FaultyTransport<'_> {
    fn call<R>(
        &mut self,
        mut f: impl FnMut(&mut Service, &mut Metrics, DateTime<Utc>) -> Result<R, ServiceError>,
    ) -> Result<R, TransportError> {
        self.metrics.mobile_requests += 1;
        if !self.up {
            self.metrics.mobile_failures += 1;
            return Err(TransportError::Network("channel down".into()));
        }
        if self.rng.random::<f64>() < self.profile.loss_prob {
            self.metrics.mobile_failures += 1;
            return Err(TransportError::Network("request lost".into()));
        }
        let result = f(self.service, self.metrics, self.now);
        if self.rng.random::<f64>() < self.profile.dup_prob {
            self.metrics.mobile_duplicates += 1;
            let _ = f(self.service, self.metrics, self.now);
        }
        if self.rng.random::<f64>() < self.profile.loss_prob {
            self.metrics.mobile_failures += 1;
            return Err(TransportError::Network("response lost".into()));
        }
        result.map_err(|e| rejection(&e))
    }
}

fn splice_count(service: &Service) -> u64 {
    service.doc_ids().map(|d| service.engine(d).map_or(0, |e| e.stats().splices)).sum()
}

impl TaskTransport for FaultyTransport<'_> {
    fn sync_task(&mut self, user: &str, request: &TaskSyncRequest) -> Result<SyncAck, TransportError> {
        self.call(|svc, metrics, now| {
            let before = splice_count(svc);
            let result = svc.sync_task(user, request, now);
            let made = splice_count(svc) - before;
            if made > 0 {
                *metrics
                    .splices_by_key
                    .entry(format!("{}/{}", request.task, request.idempotency_key))
                    .or_default() += made;
            }
            result
        })
    }

    fn list_tasks(&mut self, user: &str) -> Result<Vec<Task>, TransportError> {
        self.call(|svc, _, _| svc.list_tasks(user))
    }

    fn poll_notifications(&mut self, user: &str, since: Option<DateTime<Utc>>) -> Result<Vec<Notification>, TransportError> {
        self.call(|svc, _, _| svc.poll_notifications(user, since))
    }

    fn dismiss(&mut self, user: &str, task_id: &str) -> Result<(), TransportError> {
        self.call(|svc, _, now| svc.dismiss_lock(task_id, user, now).map(|_| ()))
    }
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3))
}

/// A running simulation. Most callers want [`run_scenario`].
pub struct Simulation {
    steps: Vec<Step>,
    horizon_ms: u64,
    cadence_ms: u64,
    profile: FaultProfile,
    service: Service,
    doc_id: String,
    desktops: BTreeMap<String, DesktopSim>,
    mobiles: BTreeMap<String, MobileSim>,
    channel_down: BTreeSet<String>,
    labels: BTreeMap<String, String>,
    queue: BTreeMap<(u64, u64), Event>,
    seq: u64,
    now: u64,
    rng: ChaCha8Rng,
    steps_done: usize,
    last_edit_ms: u64,
    equal_since: Option<u64>,
    log: Vec<LogEntry>,
    metrics: Metrics,
}

pub fn run_scenario(scenario: &Scenario, profile: &FaultProfile) -> Result<Transcript, SimError> {
    Ok(Simulation::new(scenario, profile, Service::in_memory())?.run())
}

impl Simulation {
    /// Sets up the document and actors on `service`.
    pub fn new(scenario: &Scenario, profile: &FaultProfile, mut service: Service) -> Result<Simulation, SimError> {
        profile.validate()?;
        let header = &scenario.header;
        let t0 = virtual_time(0);
        for actor in header.actors.iter().filter(|a| a.kind == ActorKind::Mobile) {
            if service.directory().user(&actor.id).is_err() {
                service.register_user(&actor.id, &actor.id)?;
            }
        }
        let doc = service.create_document(header.template.as_deref(), t0)?;
        if let Some(text) = &header.initial_text {
            let mut seed = DesktopClient::new("seed");
            seed.set_text(text.clone());
            let payload = seed.outbound().map_err(|e| ServiceError::Protocol(e.to_string()))?;
            service.handle_sync(&doc.doc_id, &payload, t0)?;
        }

        let mut sim = Simulation {
            steps: scenario.steps.clone(),
            horizon_ms: header.horizon_ms,
            cadence_ms: header.cadence_ms.unwrap_or(DEFAULT_CADENCE_MS),
            profile: *profile,
            service,
            doc_id: doc.doc_id,
            desktops: BTreeMap::new(),
            mobiles: BTreeMap::new(),
            channel_down: BTreeSet::new(),
            labels: BTreeMap::new(),
            queue: BTreeMap::new(),
            seq: 0,
            now: 0,
            rng: ChaCha8Rng::seed_from_u64(profile.seed),
            steps_done: 0,
            last_edit_ms: 0,
            equal_since: None,
            log: Vec::new(),
            metrics: Metrics::default(),
        };
        let desktop_count = header.actors.iter().filter(|a| a.kind == ActorKind::Desktop).count() as u64;
        let mut desktop_index = 0;
        for actor in &header.actors {
            match actor.kind {
                ActorKind::Desktop => {
                    let offset = desktop_index * sim.cadence_ms / desktop_count.max(1);
                    desktop_index += 1;
                    sim.desktops.insert(
                        actor.id.clone(),
                        DesktopSim {
                            client: DesktopClient::new(actor.id.clone()),
                            edit_rng: ChaCha8Rng::seed_from_u64(profile.seed ^ fnv1a(&actor.id)),
                            tokens: 0,
                        },
                    );
                    sim.schedule(offset, Event::Cycle { actor: actor.id.clone(), periodic: true });
                }
                ActorKind::Mobile => {
                    let session = MobileSession::new(
                        actor.id.clone(),
                        MemoryDraftStore::default(),
                        t0,
                        profile.seed ^ fnv1a(&actor.id),
                    )
                    .expect("memory draft store never fails");
                    sim.mobiles.insert(actor.id.clone(), MobileSim { session, received: Vec::new() });
                    sim.schedule(MOBILE_TIMER_MS, Event::MobileTimer(actor.id.clone()));
                }
            }
        }
        for (i, step) in scenario.steps.iter().enumerate() {
            sim.schedule(step.at, Event::Step(i));
        }
        Ok(sim)
    }

    pub fn service(&self) -> &Service {
        &self.service
    }

    pub fn into_service(self) -> Service {
        self.service
    }

    pub fn doc_id(&self) -> &str {
        &self.doc_id
    }

    pub fn task_id(&self, label: &str) -> Option<&str> {
        self.labels.get(label).map(String::as_str)
    }

    pub fn desktop_text(&self, actor: &str) -> Option<&str> {
        self.desktops.get(actor).map(|d| d.client.text())
    }

    pub fn mobile(&self, actor: &str) -> Option<&MobileSession<MemoryDraftStore>> {
        self.mobiles.get(actor).map(|m| &m.session)
    }

    fn schedule(&mut self, at: u64, event: Event) {
        self.seq += 1;
        self.queue.insert((at, self.seq), event);
    }

    fn record(&mut self, actor: &str, event: &str, detail: impl Into<String>) {
        self.log.push(LogEntry { t: self.now, actor: actor.into(), event: event.into(), detail: detail.into() });
    }

    fn server_text(&self) -> &str {
        &self.service.document(&self.doc_id).expect("simulated document exists").text
    }

    /// Runs until everything has settled or the horizon passes.
    pub fn run(mut self) -> Transcript {
        let converged = self.run_until(self.horizon_ms);
        self.finish(converged)
    }

    /// Processes events up to virtual time `until` (capped at the horizon).
    /// Returns true once all steps are done and the system has settled.
    pub fn run_until(&mut self, until: u64) -> bool {
        let limit = until.min(self.horizon_ms);
        while let Some(entry) = self.queue.first_entry() {
            let (at, _) = *entry.key();
            if at > limit {
                break;
            }
            let event = entry.remove();
            self.now = at;
            self.handle(event);
            self.track_equality();
            if self.steps_done == self.steps.len() && self.is_quiescent() {
                return true;
            }
        }
        false
    }

    fn handle(&mut self, event: Event) {
        match event {
            Event::Step(i) => {
                let step = self.steps[i].clone();
                self.steps_done += 1;
                if step.action.is_edit() {
                    self.last_edit_ms = self.now;
                }
                self.perform(&step);
            }
            Event::Cycle { actor, periodic } => {
                self.cycle(&actor);
                if periodic {
                    self.schedule(self.now + self.cadence_ms, Event::Cycle { actor, periodic });
                }
            }
            Event::ToServer { from, payload } => self.deliver_to_server(&from, &payload),
            Event::ToClient { to, frame } => self.deliver_to_client(&to, &frame),
            Event::MobileTimer(actor) => {
                self.mobile_tick(&actor);
                self.schedule(self.now + MOBILE_TIMER_MS, Event::MobileTimer(actor));
            }
        }
    }

    fn perform(&mut self, step: &Step) {
        let actor = step.actor.as_str();
        match &step.action {
            Action::Edit(args) => self.edit(actor, args),
            Action::Sync => self.cycle(actor),
            Action::Assign(args) => {
                let text = self.server_text().to_owned();
                let range = match &args.range {
                    RangeSpec::Offsets { start, end } => Some((*start, *end)),
                    RangeSpec::Find { find, nth } => text.match_indices(find.as_str()).nth(*nth).map(|(b, _)| {
                        let start = text[..b].chars().count();
                        (start, start + find.chars().count())
                    }),
                };
                let Some((start, end)) = range else {
                    self.record(actor, "ASSIGN_FAILED", format!("{}: range not found", args.label));
                    return;
                };
                let request = LockRequest {
                    start,
                    end,
                    description: args.description.clone(),
                    owner: args.owner.clone(),
                };
                match self.service.acquire_lock(&self.doc_id, &request, virtual_time(self.now)) {
                    Ok(lock) => {
                        self.record(actor, "ASSIGN", format!("{} -> {} [{start},{end})", args.label, lock.id));
                        self.labels.insert(args.label.clone(), lock.id);
                    }
                    Err(e) => self.record(actor, "ASSIGN_FAILED", format!("{}: {e}", args.label)),
                }
            }
            Action::Revoke(args) => {
                let Some(task) = self.labels.get(&args.task).cloned() else {
                    return self.record(actor, "REVOKE_FAILED", format!("unknown task {}", args.task));
                };
                match self.service.revoke_lock(&task, actor, virtual_time(self.now)) {
                    Ok(_) => self.record(actor, "REVOKE", task),
                    Err(e) => self.record(actor, "REVOKE_FAILED", e.to_string()),
                }
            }
            Action::Commit(args) => {
                let Some(task) = self.labels.get(&args.task).cloned() else {
                    return self.record(actor, "COMMIT_FAILED", format!("unknown task {}", args.task));
                };
                self.metrics.edits += 1;
                let mobile = self.mobiles.get_mut(actor).expect("validated mobile actor");
                mobile.session.edit_draft(&task, &args.notes).expect("memory draft store never fails");
                self.record(actor, "DRAFT", format!("{task}: {:?}", args.notes));
                if args.sync {
                    self.metrics.sync_attempts += 1;
                    let result = self.with_transport(actor, |session, t| session.sync_now(t, &task));
                    match result {
                        Ok(_) => self.record(actor, "PUSH", task),
                        Err(e) => self.record(actor, "PUSH_FAILED", format!("{task}: {e}")),
                    }
                }
            }
            Action::Dismiss(args) => {
                let Some(task) = self.labels.get(&args.task).cloned() else {
                    return self.record(actor, "DISMISS_FAILED", format!("unknown task {}", args.task));
                };
                match self.with_transport(actor, |session, t| session.dismiss(t, &task)) {
                    Ok(()) => self.record(actor, "DISMISS", task),
                    Err(e) => self.record(actor, "DISMISS_FAILED", format!("{task}: {e}")),
                }
            }
            Action::ChannelDown => {
                self.channel_down.insert(actor.into());
                self.record(actor, "CHANNEL_DOWN", "");
            }
            Action::ChannelUp => {
                self.channel_down.remove(actor);
                self.record(actor, "CHANNEL_UP", "");
            }
            Action::Tick => {
                if self.desktops.contains_key(actor) {
                    self.cycle(actor);
                } else {
                    self.mobile_tick(actor);
                }
            }
        }
    }

    fn edit(&mut self, actor: &str, args: &EditArgs) {
        self.metrics.edits += 1;
        let desk = self.desktops.get_mut(actor).expect("validated desktop actor");
        let len = desk.client.char_len();
        let detail = match args {
            EditArgs::Insert { pos, insert } => {
                let at = pos.unwrap_or(len).min(len);
                desk.client.insert(at, insert);
                format!("+{at} {insert:?}")
            }
            EditArgs::Delete { pos, delete } => {
                let at = pos.unwrap_or(len.saturating_sub(*delete)).min(len);
                desk.client.delete(at, *delete);
                format!("-{at} {delete}")
            }
            EditArgs::Random { .. } => {
                if len == 0 || desk.edit_rng.random::<f64>() < 0.65 {
                    let at = desk.edit_rng.random_range(0..=len);
                    desk.tokens += 1;
                    let token = format!("<{actor}.{}>", desk.tokens);
                    desk.client.insert(at, &token);
                    format!("+{at} {token:?}")
                } else {
                    let at = desk.edit_rng.random_range(0..len);
                    let n = desk.edit_rng.random_range(1..=3);
                    desk.client.delete(at, n);
                    format!("-{at} {n}")
                }
            }
        };
        self.record(actor, "EDIT", detail);
    }

    fn cycle(&mut self, actor: &str) {
        let Some(desk) = self.desktops.get_mut(actor) else { return };
        match desk.client.outbound() {
            Ok(payload) => {
                let edits = payload.edits.len();
                self.record(actor, "SEND", format!("ack {} edits {edits}", payload.ack_version));
                let from = actor.to_owned();
                self.transmit(actor, |_| Event::ToServer { from: from.clone(), payload: payload.clone() });
            }
            Err(e) => self.record(actor, "CLIENT_ERROR", e.to_string()),
        }
    }

    /// Pushes a frame through the fault model.
    fn transmit(&mut self, actor: &str, make: impl Fn(usize) -> Event) {
        self.metrics.frames_sent += 1;
        if self.channel_down.contains(actor) {
            self.metrics.frames_dropped += 1;
            return self.record(actor, "DROP", "channel down");
        }
        if self.rng.random::<f64>() < self.profile.loss_prob {
            self.metrics.frames_dropped += 1;
            return self.record(actor, "DROP", "lost");
        }
        let copies = if self.rng.random::<f64>() < self.profile.dup_prob { 2 } else { 1 };
        if copies == 2 {
            self.metrics.frames_duplicated += 1;
            self.record(actor, "DUP", "");
        }
        for copy in 0..copies {
            let delay = self.latency();
            self.schedule(self.now + delay, make(copy));
        }
    }

    fn latency(&mut self) -> u64 {
        let base = self.rng.random_range(self.profile.latency_min_ms..=self.profile.latency_max_ms);
        let extra = if self.rng.random::<f64>() < self.profile.reorder_prob {
            self.rng.random_range(0..=FaultProfile::REORDER_SPREAD_MS)
        } else {
            0
        };
        base + extra
    }

    fn deliver_to_server(&mut self, from: &str, payload: &SyncPayload) {
        if self.channel_down.contains(from) {
            self.metrics.frames_dropped += 1;
            return self.record(from, "DROP", "channel down");
        }
        self.metrics.frames_delivered += 1;
        match self.service.handle_sync(&self.doc_id, payload, virtual_time(self.now)) {
            Ok(outcome) => {
                if outcome.status == Some(InboundStatus::RolledBack) {
                    self.metrics.rollbacks += 1;
                }
                if outcome.filtered {
                    self.metrics.filtered_syncs += 1;
                    self.record("server", "FILTERED", from);
                }
                if let ServerFrame::Reset { reset } = &outcome.frame {
                    self.metrics.resets += 1;
                    self.record("server", "RESET", format!("{} -> {}: {}", reset.previous, reset.session, reset.reason));
                }
                let to = from.to_owned();
                let frame = outcome.frame;
                self.transmit(from, |_| Event::ToClient { to: to.clone(), frame: frame.clone() });
            }
            Err(e) => {
                self.metrics.frames_ignored += 1;
                self.record("server", "REJECT", format!("{from}: {e}"));
            }
        }
    }

    fn deliver_to_client(&mut self, to: &str, frame: &ServerFrame) {
        if self.channel_down.contains(to) {
            self.metrics.frames_dropped += 1;
            return self.record(to, "DROP", "channel down");
        }
        self.metrics.frames_delivered += 1;
        let Some(desk) = self.desktops.get_mut(to) else { return };
        match desk.client.receive(frame) {
            Received::Applied(status) => self.record(to, "RECV", format!("{status:?}")),
            Received::Reset => self.record(to, "RECV", "reset"),
            Received::Ignored(why) => {
                self.metrics.frames_ignored += 1;
                self.record(to, "IGNORED", why);
            }
        }
    }

    fn with_transport<R>(
        &mut self,
        actor: &str,
        f: impl FnOnce(&mut MobileSession<MemoryDraftStore>, &mut FaultyTransport<'_>) -> R,
    ) -> R {
        let up = !self.channel_down.contains(actor);
        let mobile = self.mobiles.get_mut(actor).expect("validated mobile actor");
        let mut transport = FaultyTransport {
            service: &mut self.service,
            rng: &mut self.rng,
            metrics: &mut self.metrics,
            profile: self.profile,
            up,
            now: virtual_time(self.now),
        };
        let result = f(&mut mobile.session, &mut transport);
        let fresh = mobile.session.take_notifications();
        mobile.received.extend(fresh);
        result
    }

    fn mobile_tick(&mut self, actor: &str) {
        let now = virtual_time(self.now);
        let Some(report) = self.with_transport(actor, |session, t| session.auto_sync_tick(t, now)) else {
            return;
        };
        self.metrics.sync_attempts += report.attempted.len() as u64;
        let detail = serde_json::to_string(&report).expect("report serializes");
        self.record(actor, "AUTO_SYNC", detail);
    }

    fn track_equality(&mut self) {
        let server = self.server_text();
        let equal = self.desktops.values().all(|d| d.client.text() == server);
        match (equal, self.equal_since) {
            (true, None) => self.equal_since = Some(self.now),
            (false, _) => self.equal_since = None,
            _ => {}
        }
    }

    fn is_quiescent(&self) -> bool {
        let server = self.server_text();
        let engine = self.service.engine(&self.doc_id).expect("simulated document exists");
        self.desktops.values().all(|d| d.client.text() == server && d.client.is_settled())
            && engine.is_settled()
            && self.mobiles.values().all(|m| !m.session.has_dirty_drafts())
    }

    fn finish(self, converged: bool) -> Transcript {
        let doc = self.service.document(&self.doc_id).expect("simulated document exists").clone();
        let mut actors = BTreeMap::new();
        for (id, d) in &self.desktops {
            actors.insert(
                id.clone(),
                ActorSummary::Desktop {
                    kind: ActorKind::Desktop,
                    session: d.client.session_id().into(),
                    text: d.client.text().into(),
                    sha256: sha256_hex(d.client.text()),
                },
            );
        }
        for (id, m) in &self.mobiles {
            actors.insert(
                id.clone(),
                ActorSummary::Mobile {
                    kind: ActorKind::Mobile,
                    tasks: m.session.tasks().iter().map(|t| t.task_id.clone()).collect(),
                    drafts: m.session.drafts().clone(),
                    notifications: m.received.clone(),
                },
            );
        }
        let convergence_time_ms = if converged {
            self.equal_since.map(|t| t.max(self.last_edit_ms))
        } else {
            None
        };
        Transcript {
            converged,
            non_quiescent: !converged,
            convergence_time_ms,
            last_edit_ms: self.last_edit_ms,
            end_time_ms: self.now,
            profile: self.profile,
            server: ServerSummary {
                sha256: sha256_hex(&doc.text),
                doc_id: doc.doc_id,
                text: doc.text,
                revision: doc.revision,
                locks: doc.locks,
            },
            actors,
            metrics: self.metrics,
            events: self.log,
        }
    }
}

fn virtual_time(ms: u64) -> DateTime<Utc> {
    DateTime::from_timestamp(SIM_EPOCH_SECS, 0).expect("valid epoch") + Duration::milliseconds(ms as i64)
}
