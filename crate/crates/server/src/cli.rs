//! Command-line entry points.
//!
//! Exit codes: 0 success or converged, 1 domain failure, 2 usage or parse
//! error.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use fieldsync_core::client::{DesktopClient, DraftStore, FileDraftStore, MemoryDraftStore, MobileSession, Received};
use fieldsync_core::document::{builtin_templates, Coordinates, Document};
use fieldsync_core::engine::EngineConfig;
use fieldsync_core::lock::{MobileLock, Palette};
use fieldsync_core::sim::{run_scenario, EditArgs, FaultProfile, Scenario, SimError, Transcript};
use fieldsync_core::store::{canonical_bytes, checksum, replay, Store};
use serde::Serialize;
use serde_json::json;
use thiserror::Error;

use crate::app::App;
use crate::remote::Remote;

#[derive(Debug, Parser)]
#[command(name = "fieldsync", version, about = "Collaborative situation reports for desktop and field users")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the server.
    Serve(ServeArgs),
    /// Drive a scripted desktop or mobile client against a server.
    Client(ClientArgs),
    /// Run a scenario in the network simulator.
    Simulate(SimulateArgs),
    /// Rebuild a document from its log and check it against the snapshot.
    Replay(ReplayArgs),
    /// List the built-in report templates.
    Templates(TemplatesArgs),
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: String,
    #[arg(long, default_value = "./data")]
    pub store: PathBuf,
    /// JSON array of lock colors, replacing the built-in palette.
    #[arg(long)]
    pub palette: Option<PathBuf>,
    /// Snapshot after this many revisions.
    #[arg(long, default_value_t = 50)]
    pub snapshot_every: u64,
}

#[derive(Debug, Args)]
pub struct ClientArgs {
    #[arg(long, default_value = "http://127.0.0.1:8080")]
    pub server: String,
    /// Document to edit. Without it a new one is created (desktop mode).
    #[arg(long)]
    pub doc: Option<String>,
    /// Template for a newly created document.
    #[arg(long)]
    pub template: Option<String>,
    /// Act as this mobile user instead of a desktop editor.
    #[arg(long)]
    pub user: Option<String>,
    /// Register the mobile user first, with this display name.
    #[arg(long)]
    pub register: Option<String>,
    /// Task to push notes to (mobile).
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long)]
    pub notes: Option<String>,
    /// "lat,lon" sent with the push.
    #[arg(long)]
    pub location: Option<String>,
    /// Task to dismiss (mobile).
    #[arg(long)]
    pub dismiss: Option<String>,
    /// File keeping mobile drafts across runs.
    #[arg(long)]
    pub drafts: Option<PathBuf>,
    /// Text to insert (desktop).
    #[arg(long)]
    pub insert: Option<String>,
    /// Chars to delete (desktop).
    #[arg(long)]
    pub delete: Option<usize>,
    /// Char offset for --insert/--delete; the end when omitted.
    #[arg(long)]
    pub at: Option<usize>,
    /// JSON array of edits, one per sync cycle: {"insert": s, "pos"?: n} or
    /// {"delete": n, "pos"?: n}.
    #[arg(long)]
    pub script: Option<PathBuf>,
    /// Extra sync cycles after the scripted edits.
    #[arg(long, default_value_t = 1)]
    pub cycles: u32,
    #[arg(long, default_value_t = 500)]
    pub cadence_ms: u64,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub scenario: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub loss: Option<f64>,
    #[arg(long)]
    pub dup: Option<f64>,
    #[arg(long)]
    pub reorder: Option<f64>,
    #[arg(long)]
    pub latency_min: Option<u64>,
    #[arg(long)]
    pub latency_max: Option<u64>,
    /// Desktop sync period, overriding the scenario's.
    #[arg(long)]
    pub cadence_ms: Option<u64>,
    /// Print the full transcript as JSON.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[arg(long, default_value = "./data")]
    pub store: PathBuf,
    #[arg(long)]
    pub doc: String,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct TemplatesArgs {
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failed(_) => 1,
        }
    }
}

fn failed(e: impl std::fmt::Display) -> CliError {
    CliError::Failed(e.to_string())
}

pub fn run(cli: Cli) -> ExitCode {
    let result = match cli.command {
        Command::Serve(args) => serve(args),
        Command::Client(args) => client(args),
        Command::Simulate(args) => simulate(args),
        Command::Replay(args) => replay_cmd(args),
        Command::Templates(args) => templates(args),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn print_json(value: &impl Serialize) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn serve(args: ServeArgs) -> Result<u8, CliError> {
    let mut config = EngineConfig { snapshot_every: args.snapshot_every.max(1), ..EngineConfig::default() };
    if let Some(path) = &args.palette {
        let raw = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let colors: Vec<String> =
            serde_json::from_str(&raw).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        if colors.is_empty() {
            return Err(CliError::Usage("palette is empty".into()));
        }
        config.palette = Palette::new(colors);
    }
    let addr: SocketAddr = args.bind.parse().map_err(|e| CliError::Usage(format!("--bind {}: {e}", args.bind)))?;
    let runtime = tokio::runtime::Runtime::new().map_err(failed)?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| CliError::Failed(format!("BindFailure: {addr}: {e}")))?;
        let store = Store::open(&args.store).map_err(|e| CliError::Failed(format!("StorageUnavailable: {e}")))?;
        let app = App::open(store, config).map_err(failed)?;
        eprintln!("serving on http://{} (store {})", listener.local_addr().map_err(failed)?, args.store.display());
        crate::serve(listener, app, shutdown_signal()).await.map_err(failed)?;
        Ok(0)
    })
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {}
        _ = term => {}
    }
    log::info!("shutting down");
}

fn client(args: ClientArgs) -> Result<u8, CliError> {
    match args.user.clone() {
        Some(user) => match &args.drafts {
            Some(path) => mobile_client(&args, &user, FileDraftStore::new(path)),
            None => mobile_client(&args, &user, MemoryDraftStore::default()),
        },
        None => desktop_client(&args),
    }
}

fn read_script(path: &Path) -> Result<Vec<EditArgs>, CliError> {
    let raw = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let edits: Vec<EditArgs> = serde_json::from_str(&raw).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    if edits.iter().any(|e| matches!(e, EditArgs::Random { .. })) {
        return Err(CliError::Usage("random edits are only for the simulator".into()));
    }
    Ok(edits)
}

fn apply_edit(client: &mut DesktopClient, edit: &EditArgs) {
    match edit {
        EditArgs::Insert { pos, insert } => client.insert(pos.unwrap_or(client.char_len()), insert),
        EditArgs::Delete { pos, delete } => {
            let pos = pos.unwrap_or(client.char_len().saturating_sub(*delete));
            client.delete(pos, *delete)
        }
        EditArgs::Random { .. } => {}
    }
}

fn desktop_client(args: &ClientArgs) -> Result<u8, CliError> {
    let remote = Remote::new(&args.server);
    let doc_id = match &args.doc {
        Some(id) => id.clone(),
        None => remote.create_doc(args.template.as_deref()).map_err(failed)?,
    };
    let mut edits = match &args.script {
        Some(path) => read_script(path)?,
        None => Vec::new(),
    };
    if let Some(insert) = &args.insert {
        edits.push(EditArgs::Insert { pos: args.at, insert: insert.clone() });
    }
    if let Some(delete) = args.delete {
        edits.push(EditArgs::Delete { pos: args.at, delete });
    }

    let mut client = DesktopClient::new(uuid::Uuid::new_v4().to_string());
    let cycle = |client: &mut DesktopClient| -> Result<(), CliError> {
        let payload = client.outbound().map_err(failed)?;
        let frame = remote.sync(&doc_id, &payload).map_err(failed)?;
        match client.receive(&frame) {
            Received::Ignored(why) => log::warn!("frame ignored: {why}"),
            Received::Reset => log::warn!("session restarted as {}", client.session_id()),
            Received::Applied(_) => {}
        }
        Ok(())
    };
    let pause = Duration::from_millis(args.cadence_ms);
    // Load the document before editing it.
    cycle(&mut client)?;
    for edit in &edits {
        std::thread::sleep(pause);
        apply_edit(&mut client, edit);
        cycle(&mut client)?;
    }
    let mut extra = 0;
    while extra < args.cycles || !client.is_settled() {
        std::thread::sleep(pause);
        cycle(&mut client)?;
        extra += 1;
        if extra > args.cycles + 20 {
            return Err(CliError::Failed("edits still unacknowledged after 20 extra cycles".into()));
        }
    }
    let doc = remote.document(&doc_id).map_err(failed)?;
    let converged = doc.text == client.text();
    if args.json {
        print_json(&json!({
            "doc_id": doc_id,
            "session": client.session_id(),
            "revision": doc.revision,
            "converged": converged,
            "text": client.text(),
        }));
    } else {
        println!("doc {doc_id} rev {} session {}", doc.revision, client.session_id());
        print!("{}", client.text());
        if !client.text().ends_with('\n') {
            println!();
        }
    }
    Ok(if converged { 0 } else { 1 })
}

fn parse_location(raw: &str) -> Result<Coordinates, CliError> {
    let bad = || CliError::Usage(format!("--location {raw}: expected lat,lon"));
    let (lat, lon) = raw.split_once(',').ok_or_else(bad)?;
    let location = Coordinates {
        lat: lat.trim().parse().map_err(|_| bad())?,
        lon: lon.trim().parse().map_err(|_| bad())?,
    };
    if !location.is_valid() {
        return Err(bad());
    }
    Ok(location)
}

fn mobile_client<S: DraftStore>(args: &ClientArgs, user: &str, store: S) -> Result<u8, CliError> {
    let mut remote = Remote::new(&args.server);
    if let Some(name) = &args.register {
        remote.register_user(user, name).map_err(failed)?;
    }
    let seed = uuid::Uuid::new_v4().as_u64_pair().0;
    let mut session = MobileSession::new(user, store, chrono::Utc::now(), seed).map_err(failed)?;
    if let Some(location) = &args.location {
        session.set_location(Some(parse_location(location)?));
    }
    session.refresh(&mut remote).map_err(failed)?;
    let mut ack = None;
    if let Some(task) = &args.task {
        if let Some(notes) = &args.notes {
            session.edit_draft(task, notes).map_err(failed)?;
        }
        ack = Some(session.sync_now(&mut remote, task).map_err(failed)?);
    }
    if let Some(task) = &args.dismiss {
        session.dismiss(&mut remote, task).map_err(failed)?;
    }
    session.refresh(&mut remote).map_err(failed)?;
    let notifications = session.take_notifications();
    if args.json {
        print_json(&json!({
            "user": user,
            "ack": ack,
            "tasks": session.tasks(),
            "notifications": notifications,
        }));
    } else {
        if let Some(ack) = ack {
            println!("synced at {} (task {:?})", ack.server_time, ack.task_state);
        }
        println!("{:<38} {:<22} description", "task", "assigned");
        for t in session.tasks() {
            println!("{:<38} {:<22} {}", t.task_id, t.assigned_at.format("%Y-%m-%d %H:%M:%S"), t.description);
        }
        for n in notifications {
            println!("notification {:?} {} {}", n.kind, n.task_id, n.description);
        }
    }
    Ok(0)
}

fn simulate(args: SimulateArgs) -> Result<u8, CliError> {
    let raw = std::fs::read_to_string(&args.scenario)
        .map_err(|e| CliError::Usage(format!("{}: {e}", args.scenario.display())))?;
    let mut scenario = Scenario::parse(&raw).map_err(|e| CliError::Usage(e.to_string()))?;
    if let Some(cadence) = args.cadence_ms {
        if cadence == 0 {
            return Err(CliError::Usage("--cadence-ms must be positive".into()));
        }
        scenario.header.cadence_ms = Some(cadence);
    }
    let mut profile = scenario.header.profile.unwrap_or_default();
    profile.seed = args.seed.unwrap_or(profile.seed);
    profile.loss_prob = args.loss.unwrap_or(profile.loss_prob);
    profile.dup_prob = args.dup.unwrap_or(profile.dup_prob);
    profile.reorder_prob = args.reorder.unwrap_or(profile.reorder_prob);
    profile.latency_min_ms = args.latency_min.unwrap_or(profile.latency_min_ms);
    profile.latency_max_ms = args.latency_max.unwrap_or(profile.latency_max_ms);
    let transcript = run_scenario(&scenario, &profile).map_err(|e| match e {
        SimError::ScenarioParse(_) | SimError::InvalidProfile(_) => CliError::Usage(e.to_string()),
        SimError::Service(_) => failed(e),
    })?;
    if args.json {
        print_json(&transcript);
    } else {
        print_summary(&transcript, &profile);
    }
    if !transcript.converged {
        eprintln!("NonQuiescent: still unsettled at the {} ms horizon", scenario.header.horizon_ms);
        return Ok(1);
    }
    if !transcript.texts_identical() {
        eprintln!("DIVERGED: desktop texts differ from the server");
        return Ok(1);
    }
    Ok(0)
}

fn print_summary(t: &Transcript, profile: &FaultProfile) {
    let m = &t.metrics;
    println!(
        "profile      loss {} dup {} reorder {} latency {}-{} ms seed {}",
        profile.loss_prob, profile.dup_prob, profile.reorder_prob, profile.latency_min_ms, profile.latency_max_ms, profile.seed
    );
    println!("converged    {}", if t.converged && t.texts_identical() { "yes" } else { "no" });
    match t.convergence_time_ms {
        Some(ms) => println!("convergence  {ms} ms (last edit {} ms)", t.last_edit_ms),
        None => println!("convergence  none (last edit {} ms)", t.last_edit_ms),
    }
    println!("end          {} ms", t.end_time_ms);
    println!("server       rev {} sha256 {}", t.server.revision, t.server.sha256);
    for (id, actor) in &t.actors {
        match actor {
            fieldsync_core::sim::ActorSummary::Desktop { sha256, .. } => println!("{id:<12} desktop sha256 {sha256}"),
            fieldsync_core::sim::ActorSummary::Mobile { tasks, .. } => {
                println!("{id:<12} mobile  {} active tasks", tasks.len())
            }
        }
    }
    println!(
        "frames       sent {} delivered {} dropped {} duplicated {} ignored {}",
        m.frames_sent, m.frames_delivered, m.frames_dropped, m.frames_duplicated, m.frames_ignored
    );
    println!(
        "sync         rollbacks {} resets {} filtered {} mobile requests {} failures {}",
        m.rollbacks, m.resets, m.filtered_syncs, m.mobile_requests, m.mobile_failures
    );
}

#[derive(Serialize)]
struct ReplayReport<'a> {
    doc_id: &'a str,
    status: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    reason: Option<String>,
    records: usize,
    torn_tail: bool,
    snapshot_revision: u64,
    revision: u64,
    checksum: u32,
    text: &'a str,
    locks: &'a [MobileLock],
}

fn replay_cmd(args: ReplayArgs) -> Result<u8, CliError> {
    let store = Store::open(&args.store).map_err(failed)?;
    if !store.exists(&args.doc) {
        return Err(CliError::Failed(format!("UnknownDocument: {}", args.doc)));
    }
    let snapshot = store.load_snapshot(&args.doc).map_err(failed)?;
    let history = store.history(&args.doc).map_err(failed)?;
    let (doc, divergence) = match replay(&history.records) {
        Ok(doc) => {
            let divergence = check_against_snapshot(&doc, &snapshot, &history.records);
            (doc, divergence)
        }
        Err(e) => (snapshot.clone(), Some(e.to_string())),
    };
    let report = ReplayReport {
        doc_id: &args.doc,
        status: if divergence.is_some() { "DIVERGED" } else { "OK" },
        reason: divergence.clone(),
        records: history.records.len(),
        torn_tail: history.torn_tail,
        snapshot_revision: snapshot.revision,
        revision: doc.revision,
        checksum: checksum(&doc),
        text: &doc.text,
        locks: &doc.locks,
    };
    if args.json {
        print_json(&report);
    } else {
        print_replay(&report);
    }
    Ok(if divergence.is_some() { 1 } else { 0 })
}

/// Why the replayed document disagrees with the snapshot, if it does.
fn check_against_snapshot(
    replayed: &Document,
    snapshot: &Document,
    records: &[fieldsync_core::document::CommandRecord],
) -> Option<String> {
    if replayed.revision < snapshot.revision {
        return Some(format!(
            "log ends at revision {} but the snapshot is at {}",
            replayed.revision, snapshot.revision
        ));
    }
    let at_snapshot = if replayed.revision == snapshot.revision {
        replayed.clone()
    } else {
        let prefix: Vec<_> = records.iter().filter(|r| r.rev <= snapshot.revision).cloned().collect();
        match replay(&prefix) {
            Ok(doc) => doc,
            Err(e) => return Some(e.to_string()),
        }
    };
    (canonical_bytes(&at_snapshot) != canonical_bytes(snapshot))
        .then(|| format!("replayed state at revision {} differs from the snapshot", snapshot.revision))
}

fn print_replay(r: &ReplayReport) {
    println!("{} {} rev {} ({} records, snapshot rev {})", r.status, r.doc_id, r.revision, r.records, r.snapshot_revision);
    if let Some(reason) = &r.reason {
        println!("reason: {reason}");
    }
    if r.torn_tail {
        println!("note: the last log line is incomplete and was skipped");
    }
    println!("---");
    print!("{}", r.text);
    if !r.text.is_empty() && !r.text.ends_with('\n') {
        println!();
    }
    println!("---");
    println!("{:<38} {:<12} {:<10} {:>7} {:>7} {:<8} description", "lock", "owner", "state", "start", "end", "color");
    for l in r.locks {
        println!(
            "{:<38} {:<12} {:<10} {:>7} {:>7} {:<8} {}",
            l.id,
            l.owner,
            format!("{:?}", l.state).to_uppercase(),
            l.start,
            l.end,
            l.color,
            l.description
        );
    }
}

fn templates(args: TemplatesArgs) -> Result<u8, CliError> {
    let all = builtin_templates();
    if args.json {
        print_json(&all);
    } else {
        for t in all {
            println!("{}  {}", t.template_id, t.title);
            for s in &t.sections {
                println!("    {}", s.heading);
            }
        }
    }
    Ok(0)
}
