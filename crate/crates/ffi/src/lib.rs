//! C ABI over the tutorhub core.
//!
//! Conventions:
//! - Every fallible function returns a [`TutorhubStatus`]. On failure,
//!   `tutorhub_last_error()` describes the problem for the calling thread.
//! - Structured values cross the boundary as UTF-8 JSON strings, in the same
//!   shapes the WebSocket protocol and the worksheet JSON export use.
//! - Strings returned through `char **` out-parameters are owned by the
//!   caller and must be released with `tutorhub_string_free`.
//! - Handles are opaque and must be released with their `_free` function.
//!   A handle may be used from any thread but not from two at once.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::sync::Arc;

use serde::Deserialize;

use tutorhub::clock::{Clock, SystemClock, VirtualClock};
use tutorhub::cms::{export_worksheet, import_worksheet};
use tutorhub::grader::echo_script::InProcess;
use tutorhub::model::{render_solution, Problem, Worksheet};
use tutorhub::server::events::{MemoryStore, Recovery};
use tutorhub::server::hub::{FrameError, Hub, HubConfig, HubDeps, JoinError, QueueOutbox};
use tutorhub::sync::{AppliedOp, ClientReplica, DocumentState, EditOp, OpKind, Snapshot};
use tutorhub::tutor::ScriptedMock;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TutorhubStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// A JSON argument did not match the expected shape.
    InvalidJson = 3,
    /// Worksheet markdown failed to parse or validate.
    Parse = 4,
    /// An edit could not be applied (range, version or sequence error).
    Sync = 5,
    NotFound = 6,
    /// A join was refused (room full, unknown group, bad email).
    Rejected = 7,
    /// A frame used another protocol version; close the connection.
    ProtocolVersion = 8,
    /// A Rust panic was caught at the boundary.
    Panic = 9,
}

/// Opaque client-side replica of one problem document.
pub struct TutorhubReplica {
    inner: ClientReplica,
}

/// Opaque in-process hub with an in-memory event log. Tutor requests are
/// answered by the scripted mock and grading runs in process, both inline.
pub struct TutorhubHub {
    hub: Hub,
    outbox: Arc<QueueOutbox>,
    store: MemoryStore,
    clock: Option<Arc<VirtualClock>>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: impl Into<String>) {
    let message = message.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(message).expect("nul bytes removed"));
}

struct Failure(TutorhubStatus, String);

impl Failure {
    fn new(status: TutorhubStatus, message: impl ToString) -> Self {
        Failure(status, message.to_string())
    }
}

type Result<T> = std::result::Result<T, Failure>;

/// Runs `body`, turning failures and panics into a status plus last error.
fn guard(body: impl FnOnce() -> Result<()>) -> TutorhubStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            set_error("");
            TutorhubStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(panic) => {
            let message = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| (*s).to_owned()))
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {message}"));
            TutorhubStatus::Panic
        }
    }
}

unsafe fn text<'a>(ptr: *const c_char, name: &str) -> Result<&'a str> {
    if ptr.is_null() {
        return Err(Failure::new(TutorhubStatus::NullArgument, format!("`{name}` is null")));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| Failure::new(TutorhubStatus::InvalidUtf8, format!("`{name}` is not UTF-8")))
}

unsafe fn json<T: for<'de> Deserialize<'de>>(ptr: *const c_char, name: &str) -> Result<T> {
    serde_json::from_str(text(ptr, name)?).map_err(|e| Failure::new(TutorhubStatus::InvalidJson, format!("`{name}`: {e}")))
}

unsafe fn handle<'a, T>(ptr: *mut T, name: &str) -> Result<&'a mut T> {
    ptr.as_mut()
        .ok_or_else(|| Failure::new(TutorhubStatus::NullArgument, format!("`{name}` is null")))
}

fn out_ptr<T>(out: *mut T, name: &str) -> Result<()> {
    if out.is_null() {
        return Err(Failure::new(TutorhubStatus::NullArgument, format!("`{name}` is null")));
    }
    Ok(())
}

fn owned(s: String) -> *mut c_char {
    CString::new(s.replace('\0', "\u{fffd}")).expect("nul bytes removed").into_raw()
}

unsafe fn write_string(out: *mut *mut c_char, value: String) {
    *out = owned(value);
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("core types serialize")
}

fn sync_failure(e: tutorhub::sync::SyncError) -> Failure {
    Failure::new(TutorhubStatus::Sync, e)
}

// ---- strings and errors ----

/// Message for the last failed call on this thread; empty after a success.
/// Valid until the next tutorhub call on the same thread. Never null.
#[no_mangle]
pub extern "C" fn tutorhub_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Frees a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn tutorhub_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Library version, static storage.
#[no_mangle]
pub extern "C" fn tutorhub_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// WebSocket protocol version spoken by the hub.
#[no_mangle]
pub extern "C" fn tutorhub_protocol_version() -> u64 {
    tutorhub::server::protocol::PROTOCOL_VERSION
}

// ---- worksheets ----

/// Parses worksheet markdown into worksheet JSON. On `Parse`, the last
/// error lists every problem, one per line.
///
/// # Safety
/// `markdown` must be a NUL-terminated string; `json_out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tutorhub_worksheet_import(markdown: *const c_char, json_out: *mut *mut c_char) -> TutorhubStatus {
    guard(|| {
        out_ptr(json_out, "json_out")?;
        let worksheet = import_worksheet(text(markdown, "markdown")?).map_err(|errors| {
            let lines: Vec<String> = errors.iter().map(|e| e.to_string()).collect();
            Failure::new(TutorhubStatus::Parse, lines.join("\n"))
        })?;
        write_string(json_out, to_json(&worksheet));
        Ok(())
    })
}

/// Renders worksheet JSON as canonical markdown.
///
/// # Safety
/// `worksheet_json` must be a NUL-terminated string; `markdown_out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tutorhub_worksheet_export(
    worksheet_json: *const c_char,
    markdown_out: *mut *mut c_char,
) -> TutorhubStatus {
    guard(|| {
        out_ptr(markdown_out, "markdown_out")?;
        let worksheet: Worksheet = json(worksheet_json, "worksheet_json")?;
        write_string(markdown_out, export_worksheet(&worksheet));
        Ok(())
    })
}

/// Substitutes blank texts (a JSON object of blank id to text) into a
/// problem's starter code.
///
/// # Safety
/// Both inputs must be NUL-terminated strings; `solution_out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tutorhub_render_solution(
    problem_json: *const c_char,
    blanks_json: *const c_char,
    solution_out: *mut *mut c_char,
) -> TutorhubStatus {
    guard(|| {
        out_ptr(solution_out, "solution_out")?;
        let problem: Problem = json(problem_json, "problem_json")?;
        let blanks: BTreeMap<String, String> = json(blanks_json, "blanks_json")?;
        let mut doc = DocumentState::new(&problem);
        for (id, value) in blanks {
            match doc.blanks.get_mut(&id) {
                Some(slot) => *slot = value,
                None => return Err(Failure::new(TutorhubStatus::NotFound, format!("unknown blank `{id}`"))),
            }
        }
        let solution = render_solution(&problem, &doc).map_err(|e| Failure::new(TutorhubStatus::InvalidJson, e))?;
        write_string(solution_out, solution);
        Ok(())
    })
}

// ---- operational transformation ----

/// Rewrites `op` so it applies after `against` (both EditOp JSON).
///
/// # Safety
/// Both inputs must be NUL-terminated strings; `op_out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tutorhub_transform(
    op_json: *const c_char,
    against_json: *const c_char,
    op_out: *mut *mut c_char,
) -> TutorhubStatus {
    guard(|| {
        out_ptr(op_out, "op_out")?;
        let op: EditOp = json(op_json, "op_json")?;
        let against: EditOp = json(against_json, "against_json")?;
        write_string(op_out, to_json(&tutorhub::sync::transform(&op, &against)));
        Ok(())
    })
}

/// Creates a replica from the client id and snapshot a `Snapshot` or
/// `Welcome`/`RoomState` frame carried.
///
/// # Safety
/// Inputs must be NUL-terminated strings; `replica_out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tutorhub_replica_new(
    client_id: *const c_char,
    snapshot_json: *const c_char,
    replica_out: *mut *mut TutorhubReplica,
) -> TutorhubStatus {
    guard(|| {
        out_ptr(replica_out, "replica_out")?;
        let client_id = text(client_id, "client_id")?;
        let snapshot: Snapshot = json(snapshot_json, "snapshot_json")?;
        let replica = Box::new(TutorhubReplica {
            inner: ClientReplica::new(client_id, &snapshot),
        });
        *replica_out = Box::into_raw(replica);
        Ok(())
    })
}

/// # Safety
/// `replica` must come from `tutorhub_replica_new` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn tutorhub_replica_free(replica: *mut TutorhubReplica) {
    if !replica.is_null() {
        drop(Box::from_raw(replica));
    }
}

/// Applies a local edit (`{"insert":{"pos":0,"text":"x"}}` or
/// `{"delete":{"pos":0,"len":1}}`). Writes the EditOp JSON to send now, or
/// null when an earlier op is still unacknowledged.
///
/// # Safety
/// Pointers must be valid; `op_out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tutorhub_replica_local_edit(
    replica: *mut TutorhubReplica,
    blank_id: *const c_char,
    kind_json: *const c_char,
    op_out: *mut *mut c_char,
) -> TutorhubStatus {
    guard(|| {
        out_ptr(op_out, "op_out")?;
        *op_out = ptr::null_mut();
        let replica = handle(replica, "replica")?;
        let blank_id = text(blank_id, "blank_id")?;
        let kind: OpKind = json(kind_json, "kind_json")?;
        if let Some(op) = replica.inner.local_edit(blank_id, kind).map_err(sync_failure)? {
            write_string(op_out, to_json(&op));
        }
        Ok(())
    })
}

/// Applies a server `AppliedOp` (the `applied` field of an `Op` frame).
/// Writes the next EditOp to send, or null.
///
/// On `Sync` the replica is out of step: request a `Snapshot` and rebuild it.
///
/// # Safety
/// Pointers must be valid; `op_out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tutorhub_replica_receive(
    replica: *mut TutorhubReplica,
    applied_json: *const c_char,
    op_out: *mut *mut c_char,
) -> TutorhubStatus {
    guard(|| {
        out_ptr(op_out, "op_out")?;
        *op_out = ptr::null_mut();
        let replica = handle(replica, "replica")?;
        let applied: AppliedOp = json(applied_json, "applied_json")?;
        if let Some(op) = replica.inner.receive(&applied).map_err(sync_failure)? {
            write_string(op_out, to_json(&op));
        }
        Ok(())
    })
}

/// Current text of one blank.
///
/// # Safety
/// Pointers must be valid; `text_out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tutorhub_replica_text(
    replica: *mut TutorhubReplica,
    blank_id: *const c_char,
    text_out: *mut *mut c_char,
) -> TutorhubStatus {
    guard(|| {
        out_ptr(text_out, "text_out")?;
        let replica = handle(replica, "replica")?;
        let blank_id = text(blank_id, "blank_id")?;
        let value = replica
            .inner
            .text(blank_id)
            .ok_or_else(|| Failure::new(TutorhubStatus::NotFound, format!("unknown blank `{blank_id}`")))?;
        write_string(text_out, value.to_owned());
        Ok(())
    })
}

/// All blank texts as a JSON object.
///
/// # Safety
/// Pointers must be valid; `blanks_out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tutorhub_replica_blanks(replica: *mut TutorhubReplica, blanks_out: *mut *mut c_char) -> TutorhubStatus {
    guard(|| {
        out_ptr(blanks_out, "blanks_out")?;
        let replica = handle(replica, "replica")?;
        write_string(blanks_out, to_json(replica.inner.blanks()));
        Ok(())
    })
}

/// Server version the replica has caught up to, and its unacknowledged op
/// count. Either out-pointer may be null.
///
/// # Safety
/// `replica` must be valid.
#[no_mangle]
pub unsafe extern "C" fn tutorhub_replica_state(
    replica: *mut TutorhubReplica,
    version_out: *mut u64,
    pending_out: *mut u64,
) -> TutorhubStatus {
    guard(|| {
        let replica = handle(replica, "replica")?;
        if !version_out.is_null() {
            *version_out = replica.inner.version();
        }
        if !pending_out.is_null() {
            *pending_out = replica.inner.pending_ops() as u64;
        }
        Ok(())
    })
}

// ---- embedded hub ----

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct HubOptions {
    #[serde(default)]
    groups: Vec<u32>,
    #[serde(default)]
    max_group_size: Option<usize>,
    #[serde(default)]
    ta_allowlist: Vec<String>,
    #[serde(default)]
    max_turns: Option<usize>,
    /// Start a virtual clock at this Unix time in ms instead of using the
    /// system clock.
    #[serde(default)]
    virtual_time_ms: Option<u64>,
}

/// Creates a hub serving one worksheet (markdown). `options_json` may be
/// null or an object with `groups`, `max_group_size`, `ta_allowlist`,
/// `max_turns` and `virtual_time_ms`.
///
/// # Safety
/// `worksheet_markdown` must be a NUL-terminated string; `hub_out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tutorhub_hub_new(
    worksheet_markdown: *const c_char,
    options_json: *const c_char,
    hub_out: *mut *mut TutorhubHub,
) -> TutorhubStatus {
    guard(|| {
        out_ptr(hub_out, "hub_out")?;
        let worksheet = import_worksheet(text(worksheet_markdown, "worksheet_markdown")?).map_err(|errors| {
            let lines: Vec<String> = errors.iter().map(|e| e.to_string()).collect();
            Failure::new(TutorhubStatus::Parse, lines.join("\n"))
        })?;
        let options: HubOptions = if options_json.is_null() {
            serde_json::from_str("{}").expect("empty options")
        } else {
            json(options_json, "options_json")?
        };
        let mut config = HubConfig::new(worksheet.id.clone());
        config.groups = options.groups.into_iter().collect();
        if let Some(max) = options.max_group_size {
            if max == 0 {
                return Err(Failure::new(TutorhubStatus::InvalidJson, "max_group_size must be positive"));
            }
            config.max_group_size = max;
        }
        config.ta_allowlist = options.ta_allowlist.iter().map(|e| e.trim().to_lowercase()).collect::<BTreeSet<_>>();
        if let Some(turns) = options.max_turns {
            config.context.max_turns = turns;
        }
        let virtual_clock = options.virtual_time_ms.map(|t| Arc::new(VirtualClock::new(t)));
        let clock: Arc<dyn Clock> = match &virtual_clock {
            Some(c) => c.clone(),
            None => Arc::new(SystemClock),
        };
        let outbox = Arc::new(QueueOutbox::new());
        let store = MemoryStore::new();
        let worksheets: BTreeMap<String, Arc<Worksheet>> = BTreeMap::from([(worksheet.id.clone(), Arc::new(worksheet))]);
        let hub = Hub::new(
            config,
            HubDeps {
                clock,
                worksheets: Arc::new(worksheets),
                outbox: outbox.clone(),
                verifier: None,
                snapshots: None,
            },
            Box::new(store.clone()),
            Recovery::default(),
        );
        *hub_out = Box::into_raw(Box::new(TutorhubHub {
            hub,
            outbox,
            store,
            clock: virtual_clock,
        }));
        Ok(())
    })
}

/// # Safety
/// `hub` must come from `tutorhub_hub_new` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn tutorhub_hub_free(hub: *mut TutorhubHub) {
    if !hub.is_null() {
        drop(Box::from_raw(hub));
    }
}

/// Signs a participant in. `group_number` < 0 means none (TAs only).
/// Writes the join response JSON (`token`, `participant`, `room_id`,
/// `worksheet_id`). Refusals return `Rejected` or `NotFound`.
///
/// # Safety
/// Pointers must be valid; `response_out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tutorhub_hub_join(
    hub: *mut TutorhubHub,
    email: *const c_char,
    group_number: i64,
    response_out: *mut *mut c_char,
) -> TutorhubStatus {
    guard(|| {
        out_ptr(response_out, "response_out")?;
        let hub = handle(hub, "hub")?;
        let email = text(email, "email")?;
        let group = if group_number < 0 {
            None
        } else {
            Some(u32::try_from(group_number).map_err(|_| Failure::new(TutorhubStatus::Rejected, "group number too large"))?)
        };
        let response = hub.hub.join(email, group).map_err(|e| {
            let status = match e {
                JoinError::NoWorksheet(_) => TutorhubStatus::NotFound,
                _ => TutorhubStatus::Rejected,
            };
            Failure::new(status, e)
        })?;
        write_string(response_out, to_json(&response));
        Ok(())
    })
}

/// Attaches a connection for `token`; queues Welcome and RoomState frames.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn tutorhub_hub_connect(hub: *mut TutorhubHub, token: *const c_char) -> TutorhubStatus {
    guard(|| {
        let hub = handle(hub, "hub")?;
        hub.hub
            .connect(text(token, "token")?)
            .map_err(|e| Failure::new(TutorhubStatus::NotFound, e))
    })
}

/// Detaches the connection; the session stays valid.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn tutorhub_hub_disconnect(hub: *mut TutorhubHub, token: *const c_char) -> TutorhubStatus {
    guard(|| {
        let hub = handle(hub, "hub")?;
        hub.hub.disconnect(text(token, "token")?);
        Ok(())
    })
}

/// Handles one client frame. Rejections are queued as Error frames and
/// still return `Ok`; `ProtocolVersion` and `NotFound` (unknown session)
/// mean the connection should be closed. Tutor and grader work requested
/// by the frame completes before this returns.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn tutorhub_hub_handle_frame(
    hub: *mut TutorhubHub,
    token: *const c_char,
    frame: *const c_char,
) -> TutorhubStatus {
    guard(|| {
        let hub = handle(hub, "hub")?;
        let effects = hub
            .hub
            .handle_frame(text(token, "token")?, text(frame, "frame")?)
            .map_err(|e| match e {
                FrameError::Version(_) => Failure::new(TutorhubStatus::ProtocolVersion, e),
                FrameError::UnknownSession => Failure::new(TutorhubStatus::NotFound, e),
            })?;
        let backend = ScriptedMock::default();
        for effect in effects {
            hub.hub.run_effect(effect, &backend, &InProcess);
        }
        Ok(())
    })
}

/// Removes and returns the frames queued for `token` as a JSON array of
/// frame strings, oldest first.
///
/// # Safety
/// Pointers must be valid; `frames_out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tutorhub_hub_poll(
    hub: *mut TutorhubHub,
    token: *const c_char,
    frames_out: *mut *mut c_char,
) -> TutorhubStatus {
    guard(|| {
        out_ptr(frames_out, "frames_out")?;
        let hub = handle(hub, "hub")?;
        let frames = hub.outbox.take_for(text(token, "token")?);
        write_string(frames_out, to_json(&frames));
        Ok(())
    })
}

/// TA room list in priority order, as JSON.
///
/// # Safety
/// Pointers must be valid; `rooms_out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tutorhub_hub_list_rooms(hub: *mut TutorhubHub, rooms_out: *mut *mut c_char) -> TutorhubStatus {
    guard(|| {
        out_ptr(rooms_out, "rooms_out")?;
        let hub = handle(hub, "hub")?;
        write_string(rooms_out, to_json(&hub.hub.list_rooms()));
        Ok(())
    })
}

/// The event log so far, as JSON lines.
///
/// # Safety
/// Pointers must be valid; `log_out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tutorhub_hub_event_log(hub: *mut TutorhubHub, log_out: *mut *mut c_char) -> TutorhubStatus {
    guard(|| {
        out_ptr(log_out, "log_out")?;
        let hub = handle(hub, "hub")?;
        write_string(log_out, String::from_utf8_lossy(&hub.store.bytes()).into_owned());
        Ok(())
    })
}

/// Moves a virtual clock forward. `NotFound` when the hub uses the system
/// clock.
///
/// # Safety
/// `hub` must be valid.
#[no_mangle]
pub unsafe extern "C" fn tutorhub_hub_advance_clock(hub: *mut TutorhubHub, ms: u64) -> TutorhubStatus {
    guard(|| {
        let hub = handle(hub, "hub")?;
        let clock = hub
            .clock
            .as_ref()
            .ok_or_else(|| Failure::new(TutorhubStatus::NotFound, "hub was created without virtual_time_ms"))?;
        clock.advance_by(ms);
        Ok(())
    })
}
