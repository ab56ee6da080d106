//! Transport-independent server core.
//!
//! The hub owns sessions and rooms. Each room sits behind its own mutex,
//! which makes it the single logical owner of that room's state; the event
//! log has its own lock and is always taken after a room lock. Every state
//! change is appended to the log and only then applied and broadcast.
//!
//! Slow work (tutor replies, grading) is not done here: handlers return an
//! [`Effect`] and the driver reports the outcome back through
//! [`Hub::complete_tutor`] or [`Hub::complete_grading`].

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard, RwLock};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::clock::Clock;
use crate::cms::WorksheetSource;
use crate::console::{check_review, metrics_summary, sort_summaries, summarize, MetricsOptions, MetricsReport};
use crate::grader::Grade;
use crate::model::{
    render_solution, Author, Channel, ChatMessage, GraderResult, Participant, Problem, Role, SessionRoom,
    TestOutcome, Timestamp, Worksheet, DEFAULT_MAX_GROUP_SIZE,
};
use crate::server::events::{
    apply_to_room, EventBody, EventLog, EventRecord, EventStore, Recovery, RoomSnapshot, SnapshotDir,
};
use crate::server::protocol::{
    decode_client, encode_server, ClientMessage, DecodeError, ErrorCode, RoomView, ServerMessage, PROTOCOL_VERSION,
};
use crate::sync::{EditOp, Prepared, ReorderBuffer, SyncError, DEFAULT_REORDER_WINDOW};
use crate::tutor::{assemble_context, check_label, BackendError, ContextPolicy, TutorBackend, TutorContext, UNAVAILABLE_NOTICE};

/// Delivers encoded frames to connected sessions. Called with the room lock
/// held, so per-room order is preserved; implementations must not block.
pub trait Outbox: Send + Sync {
    fn deliver(&self, session: &str, frame: &str);
}

/// Optional deployment hook consulted on every join.
pub trait JoinVerifier: Send + Sync {
    fn verify(&self, email: &str, group_number: Option<u32>) -> Result<(), String>;
}

#[derive(Clone, Debug)]
pub struct HubConfig {
    pub active_worksheet: String,
    /// Registered group numbers; empty accepts any.
    pub groups: BTreeSet<u32>,
    pub max_group_size: usize,
    /// Lowercased TA emails.
    pub ta_allowlist: BTreeSet<String>,
    pub context: ContextPolicy,
    pub reorder_window: usize,
    /// Write a room snapshot every this many events in that room; 0 disables.
    pub snapshot_every: u64,
    /// Issue `t1`, `t2`, ... instead of random tokens.
    pub sequential_tokens: bool,
}

impl HubConfig {
    pub fn new(active_worksheet: impl Into<String>) -> Self {
        HubConfig {
            active_worksheet: active_worksheet.into(),
            groups: BTreeSet::new(),
            max_group_size: DEFAULT_MAX_GROUP_SIZE,
            ta_allowlist: BTreeSet::new(),
            context: ContextPolicy::default(),
            reorder_window: DEFAULT_REORDER_WINDOW,
            snapshot_every: 0,
            sequential_tokens: false,
        }
    }
}

pub struct HubDeps {
    pub clock: Arc<dyn Clock>,
    pub worksheets: Arc<dyn WorksheetSource>,
    pub outbox: Arc<dyn Outbox>,
    pub verifier: Option<Arc<dyn JoinVerifier>>,
    pub snapshots: Option<SnapshotDir>,
}

#[derive(Debug, Error)]
pub enum JoinError {
    #[error("a valid email address is required")]
    InvalidEmail,
    #[error("a group number is required")]
    MissingGroup,
    #[error("group {0} is not registered")]
    UnknownGroup(u32),
    #[error("room {room_id} is full ({max} students)")]
    RoomFull { room_id: String, max: usize },
    #[error("worksheet `{0}` is not available")]
    NoWorksheet(String),
    #[error("join rejected: {0}")]
    Rejected(String),
    #[error("event log write failed: {0}")]
    Log(String),
}

#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct JoinResponse {
    pub token: String,
    pub participant: Participant,
    pub room_id: Option<String>,
    pub worksheet_id: String,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FrameError {
    #[error("unknown session")]
    UnknownSession,
    #[error("protocol version mismatch (got {0:?}, want {PROTOCOL_VERSION})")]
    Version(Option<u64>),
}

/// Slow work requested by a handler.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Effect {
    Tutor {
        room_id: String,
        ticket: String,
        context: TutorContext,
    },
    Grade {
        room_id: String,
        ticket: String,
        problem: Problem,
        solution: String,
    },
}

#[derive(Clone, Debug)]
struct Session {
    participant: Participant,
    /// Bound room for students, watched room for TAs.
    room_id: Option<String>,
    /// Latest issued client id; earlier ones stay valid for other problems.
    client_id: String,
    client_ids: BTreeSet<String>,
    connected: bool,
}

struct RoomEngine {
    room: SessionRoom,
    worksheet: Arc<Worksheet>,
    reorder: ReorderBuffer,
    subscribers: BTreeSet<String>,
    tutor_ticket: Option<String>,
    grading: Option<(String, String)>,
    since_snapshot: u64,
}

struct Reject(ErrorCode, String);

impl Reject {
    fn new(code: ErrorCode, message: impl ToString) -> Self {
        Reject(code, message.to_string())
    }
}

type Handled = Result<Vec<Effect>, Reject>;

/// Stable participant id derived from the normalized email.
pub fn participant_id(email: &str) -> String {
    let digest = Sha256::digest(email.trim().to_lowercase().as_bytes());
    let hex: String = digest[..8].iter().map(|b| format!("{b:02x}")).collect();
    format!("p-{hex}")
}

pub fn room_id_for(worksheet_id: &str, group_number: u32) -> String {
    format!("{worksheet_id}-g{group_number}")
}

fn valid_email(email: &str) -> bool {
    let email = email.trim();
    match email.split_once('@') {
        Some((local, domain)) => !local.is_empty() && !domain.is_empty() && !email.contains(char::is_whitespace),
        None => false,
    }
}

pub struct Hub {
    config: HubConfig,
    active_worksheet: RwLock<String>,
    clock: Arc<dyn Clock>,
    worksheets: Arc<dyn WorksheetSource>,
    outbox: Arc<dyn Outbox>,
    verifier: Option<Arc<dyn JoinVerifier>>,
    snapshots: Option<SnapshotDir>,
    log: Mutex<EventLog>,
    rooms: RwLock<BTreeMap<String, Arc<Mutex<RoomEngine>>>>,
    sessions: Mutex<BTreeMap<String, Session>>,
    ta_listeners: Mutex<BTreeSet<String>>,
    boot: u64,
    counter: AtomicU64,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

impl Hub {
    /// Builds a hub over recovered state. `store` receives new records.
    pub fn new(config: HubConfig, deps: HubDeps, store: Box<dyn EventStore>, recovered: Recovery) -> Self {
        let boot = recovered.last_seq;
        let log = EventLog::new(store, deps.clock.clone(), recovered.last_seq, recovered.last_at);
        let mut rooms = BTreeMap::new();
        for (id, room) in recovered.state.rooms {
            let worksheet = recovered
                .state
                .worksheets
                .get(&id)
                .cloned()
                .expect("every recovered room has its worksheet");
            rooms.insert(
                id,
                Arc::new(Mutex::new(RoomEngine {
                    room,
                    worksheet,
                    reorder: ReorderBuffer::new(config.reorder_window),
                    subscribers: BTreeSet::new(),
                    tutor_ticket: None,
                    grading: None,
                    since_snapshot: 0,
                })),
            );
        }
        Hub {
            active_worksheet: RwLock::new(config.active_worksheet.clone()),
            config,
            clock: deps.clock,
            worksheets: deps.worksheets,
            outbox: deps.outbox,
            verifier: deps.verifier,
            snapshots: deps.snapshots,
            log: Mutex::new(log),
            rooms: RwLock::new(rooms),
            sessions: Mutex::new(BTreeMap::new()),
            ta_listeners: Mutex::new(BTreeSet::new()),
            boot,
            counter: AtomicU64::new(0),
        }
    }

    pub fn config(&self) -> &HubConfig {
        &self.config
    }

    pub fn now(&self) -> Timestamp {
        self.clock.now_ms()
    }

    pub fn active_worksheet(&self) -> String {
        self.active_worksheet.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    /// New joins go to rooms for this worksheet; existing rooms are kept.
    pub fn set_active_worksheet(&self, id: &str) {
        *self.active_worksheet.write().unwrap_or_else(|e| e.into_inner()) = id.to_owned();
    }

    fn next_id(&self, prefix: &str) -> String {
        let n = self.counter.fetch_add(1, Ordering::SeqCst) + 1;
        format!("{prefix}{}.{n}", self.boot)
    }

    fn new_token(&self) -> String {
        if self.config.sequential_tokens {
            let n = self.counter.fetch_add(1, Ordering::SeqCst) + 1;
            format!("t{n}")
        } else {
            uuid::Uuid::new_v4().simple().to_string()
        }
    }

    fn room(&self, room_id: &str) -> Option<Arc<Mutex<RoomEngine>>> {
        self.rooms.read().unwrap_or_else(|e| e.into_inner()).get(room_id).cloned()
    }

    fn session(&self, token: &str) -> Option<Session> {
        lock(&self.sessions).get(token).cloned()
    }

    pub fn is_ta(&self, email: &str) -> bool {
        self.config.ta_allowlist.contains(&email.trim().to_lowercase())
    }

    /// Role of a live session, if any.
    pub fn session_participant(&self, token: &str) -> Option<Participant> {
        self.session(token).map(|s| s.participant)
    }

    // ---- write path ----

    fn commit(
        &self,
        engine: &mut RoomEngine,
        make: impl FnOnce(u64, Timestamp) -> EventBody,
    ) -> Result<EventRecord, Reject> {
        let record = lock(&self.log)
            .append(&engine.room.id, make)
            .map_err(|e| Reject::new(ErrorCode::Internal, format!("event log write failed: {e}")))?;
        if let Err(e) = apply_to_room(&mut engine.room, &record) {
            tracing::error!(seq = record.seq, error = %e, "logged event failed to apply");
            return Err(Reject::new(ErrorCode::Internal, e));
        }
        engine.since_snapshot += 1;
        if self.config.snapshot_every > 0 && engine.since_snapshot >= self.config.snapshot_every {
            if let Some(dir) = &self.snapshots {
                let snapshot = RoomSnapshot {
                    seq: record.seq,
                    room: engine.room.clone(),
                    worksheet: (*engine.worksheet).clone(),
                };
                match dir.write(&snapshot) {
                    Ok(()) => engine.since_snapshot = 0,
                    Err(e) => tracing::warn!(room = %engine.room.id, error = %e, "snapshot write failed"),
                }
            }
        }
        Ok(record)
    }

    fn send(&self, token: &str, message: &ServerMessage) {
        self.outbox.deliver(token, &encode_server(message));
    }

    fn broadcast(&self, engine: &RoomEngine, message: &ServerMessage) {
        let frame = encode_server(message);
        for token in &engine.subscribers {
            self.outbox.deliver(token, &frame);
        }
    }

    fn notify_tas(&self, engine: &RoomEngine) {
        let frame = encode_server(&ServerMessage::RoomUpdate {
            summary: summarize(&engine.room),
        });
        for token in lock(&self.ta_listeners).iter() {
            self.outbox.deliver(token, &frame);
        }
    }

    // ---- sessions ----

    /// Signs a participant in and binds them to their group's room,
    /// creating it on first use.
    pub fn join(&self, email: &str, group_number: Option<u32>) -> Result<JoinResponse, JoinError> {
        if !valid_email(email) {
            return Err(JoinError::InvalidEmail);
        }
        let email = email.trim().to_lowercase();
        let role = if self.is_ta(&email) { Role::Ta } else { Role::Student };
        if role == Role::Student && group_number.is_none() {
            return Err(JoinError::MissingGroup);
        }
        if let Some(g) = group_number {
            if !self.config.groups.is_empty() && !self.config.groups.contains(&g) {
                return Err(JoinError::UnknownGroup(g));
            }
        }
        if let Some(verifier) = &self.verifier {
            verifier.verify(&email, group_number).map_err(JoinError::Rejected)?;
        }
        let participant = Participant {
            id: participant_id(&email),
            display_name: email.split('@').next().unwrap_or_default().to_owned(),
            email,
            role,
        };
        let worksheet_id = self.active_worksheet();

        let room_id = match group_number {
            None => None,
            Some(g) => Some(self.enter_room(&participant, g, &worksheet_id)?),
        };

        let token = self.new_token();
        let client_id = self.next_id("c");
        lock(&self.sessions).insert(
            token.clone(),
            Session {
                participant: participant.clone(),
                room_id: room_id.clone(),
                client_ids: BTreeSet::from([client_id.clone()]),
                client_id,
                connected: false,
            },
        );
        Ok(JoinResponse {
            token,
            participant,
            room_id,
            worksheet_id,
        })
    }

    fn enter_room(&self, participant: &Participant, group: u32, worksheet_id: &str) -> Result<String, JoinError> {
        let room_id = room_id_for(worksheet_id, group);
        let log_err = |r: Reject| JoinError::Log(r.1);

        let existing = self.room(&room_id);
        let engine = match existing {
            Some(engine) => engine,
            None => {
                let worksheet = self
                    .worksheets
                    .worksheet(worksheet_id)
                    .filter(|w| w.published && !w.problems.is_empty())
                    .ok_or_else(|| JoinError::NoWorksheet(worksheet_id.to_owned()))?;
                let mut rooms = self.rooms.write().unwrap_or_else(|e| e.into_inner());
                if let Some(engine) = rooms.get(&room_id) {
                    engine.clone()
                } else {
                    let record = lock(&self.log)
                        .append(&room_id, |_, _| EventBody::Join {
                            participant: participant.clone(),
                            group_number: group,
                            worksheet: Some((*worksheet).clone()),
                        })
                        .map_err(|e| JoinError::Log(e.to_string()))?;
                    let room = crate::server::events::create_room(&record).map_err(|e| JoinError::Log(e.to_string()))?;
                    let engine = Arc::new(Mutex::new(RoomEngine {
                        room,
                        worksheet,
                        reorder: ReorderBuffer::new(self.config.reorder_window),
                        subscribers: BTreeSet::new(),
                        tutor_ticket: None,
                        grading: None,
                        since_snapshot: 1,
                    }));
                    rooms.insert(room_id.clone(), engine.clone());
                    drop(rooms);
                    let guard = lock(&engine);
                    self.notify_tas(&guard);
                    return Ok(room_id);
                }
            }
        };

        let mut guard = lock(&engine);
        if participant.role == Role::Ta || guard.room.member(&participant.id).is_some() {
            return Ok(room_id);
        }
        if guard.room.members.len() >= self.config.max_group_size {
            return Err(JoinError::RoomFull {
                room_id,
                max: self.config.max_group_size,
            });
        }
        self.commit(&mut guard, |_, _| EventBody::Join {
            participant: participant.clone(),
            group_number: group,
            worksheet: None,
        })
        .map_err(log_err)?;
        let members = ServerMessage::Members {
            room_id: room_id.clone(),
            members: guard.room.members.clone(),
        };
        self.broadcast(&guard, &members);
        self.notify_tas(&guard);
        Ok(room_id)
    }

    /// Attaches a transport to a session: sends Welcome and the current room
    /// state, and subscribes to room broadcasts.
    pub fn connect(&self, token: &str) -> Result<(), FrameError> {
        let session = {
            let mut sessions = lock(&self.sessions);
            let session = sessions.get_mut(token).ok_or(FrameError::UnknownSession)?;
            session.connected = true;
            session.client_id = self.next_id("c");
            session.client_ids.insert(session.client_id.clone());
            session.clone()
        };
        if session.participant.role == Role::Ta {
            lock(&self.ta_listeners).insert(token.to_owned());
        }
        self.send(
            token,
            &ServerMessage::Welcome {
                participant: session.participant.clone(),
                room_id: session.room_id.clone(),
                client_id: session.client_id.clone(),
                protocol: PROTOCOL_VERSION,
            },
        );
        if let Some(engine) = session.room_id.as_deref().and_then(|id| self.room(id)) {
            let mut guard = lock(&engine);
            guard.subscribers.insert(token.to_owned());
            self.send(
                token,
                &ServerMessage::RoomState {
                    room: RoomView::of(&guard.room),
                },
            );
        }
        Ok(())
    }

    /// Detaches the transport. The session stays valid for reconnects.
    pub fn disconnect(&self, token: &str) {
        let session = {
            let mut sessions = lock(&self.sessions);
            match sessions.get_mut(token) {
                Some(s) => {
                    s.connected = false;
                    s.clone()
                }
                None => return,
            }
        };
        lock(&self.ta_listeners).remove(token);
        if let Some(engine) = session.room_id.as_deref().and_then(|id| self.room(id)) {
            lock(&engine).subscribers.remove(token);
        }
    }

    // ---- frames ----

    /// Handles one text frame. Errors mean the connection must be closed;
    /// everything else is answered with frames through the outbox.
    pub fn handle_frame(&self, token: &str, text: &str) -> Result<Vec<Effect>, FrameError> {
        if self.session(token).is_none() {
            return Err(FrameError::UnknownSession);
        }
        match decode_client(text) {
            Ok(message) => self.handle_message(token, message),
            Err(DecodeError::Version(v)) => Err(FrameError::Version(v)),
            Err(DecodeError::UnknownKind(kind)) => {
                self.send(
                    token,
                    &ServerMessage::error(ErrorCode::UnknownKind, format!("unknown kind `{kind}`"), Some(&kind)),
                );
                Ok(Vec::new())
            }
            Err(DecodeError::Malformed(detail)) => {
                self.send(token, &ServerMessage::error(ErrorCode::Malformed, detail, None));
                Ok(Vec::new())
            }
        }
    }

    pub fn handle_message(&self, token: &str, message: ClientMessage) -> Result<Vec<Effect>, FrameError> {
        let session = self.session(token).ok_or(FrameError::UnknownSession)?;
        let kind = message.kind();
        let result = match message {
            ClientMessage::Edit(op) => self.on_edit(&session, op),
            ClientMessage::Snapshot { problem_id } => self.on_snapshot(token, &session, &problem_id),
            ClientMessage::SelectProblem { problem_id } => self.on_select(&session, &problem_id),
            ClientMessage::Ask { body } => self.on_ask(&session, &body),
            ClientMessage::Label { message_id, label } => self.on_label(&session, &message_id, label),
            ClientMessage::CheckAnswer { problem_id } => self.on_check(&session, problem_id),
            ClientMessage::Review {
                room_id,
                message_id,
                action,
            } => self.on_review(&session, room_id, &message_id, action),
            ClientMessage::TaChat { room_id, body } => self.on_ta_chat(&session, room_id, &body),
            ClientMessage::ListRooms {} => self.on_list(token, &session),
            ClientMessage::Watch { room_id } => self.on_watch(token, &session, &room_id),
            ClientMessage::RoomState { room_id } => self.on_room_state(token, &session, room_id),
            ClientMessage::Leave {} => self.on_leave(token, &session),
        };
        match result {
            Ok(effects) => Ok(effects),
            Err(Reject(code, text)) => {
                self.send(token, &ServerMessage::error(code, text, Some(kind)));
                Ok(Vec::new())
            }
        }
    }

    fn student_room(&self, session: &Session) -> Result<Arc<Mutex<RoomEngine>>, Reject> {
        if session.participant.role != Role::Student {
            return Err(Reject::new(ErrorCode::Permission, "students only"));
        }
        let room_id = session
            .room_id
            .as_deref()
            .ok_or_else(|| Reject::new(ErrorCode::Permission, "not in a room"))?;
        self.room(room_id)
            .ok_or_else(|| Reject::new(ErrorCode::NotFound, format!("room `{room_id}` not found")))
    }

    fn require_member(engine: &RoomEngine, session: &Session) -> Result<(), Reject> {
        if engine.room.member(&session.participant.id).is_none() {
            return Err(Reject::new(ErrorCode::Permission, "not a member of this room"));
        }
        Ok(())
    }

    fn ta_room(&self, session: &Session, room_id: Option<String>) -> Result<Arc<Mutex<RoomEngine>>, Reject> {
        if session.participant.role != Role::Ta {
            return Err(Reject::new(ErrorCode::Permission, "TAs only"));
        }
        let room_id = room_id
            .or_else(|| session.room_id.clone())
            .ok_or_else(|| Reject::new(ErrorCode::Invalid, "room_id required"))?;
        self.room(&room_id)
            .ok_or_else(|| Reject::new(ErrorCode::NotFound, format!("room `{room_id}` not found")))
    }

    fn on_edit(&self, session: &Session, op: EditOp) -> Handled {
        let engine = self.student_room(session)?;
        let mut guard = lock(&engine);
        Self::require_member(&guard, session)?;
        if !session.client_ids.contains(&op.client_id) {
            return Err(Reject::new(ErrorCode::Invalid, "client_id does not belong to this session"));
        }
        let problem_id = op.problem_id.clone();
        let client_id = op.client_id.clone();
        let engine_ref = &mut *guard;
        let doc = engine_ref
            .room
            .docs
            .get(&problem_id)
            .ok_or_else(|| Reject::new(ErrorCode::NotFound, format!("unknown problem `{problem_id}`")))?;
        let ready = engine_ref.reorder.offer(doc, op).map_err(|e| sync_reject(&e))?;
        for op in ready {
            let prepared = guard.room.docs[&problem_id].prepare(&op);
            match prepared {
                Ok(Prepared::Duplicate) => {}
                Ok(Prepared::Apply(applied)) => {
                    let record = self.commit(&mut guard, |_, _| EventBody::Edit { applied })?;
                    if let EventBody::Edit { applied } = record.body {
                        let message = ServerMessage::Op {
                            room_id: guard.room.id.clone(),
                            applied,
                        };
                        self.broadcast(&guard, &message);
                    }
                }
                Err(e) => {
                    guard.reorder.discard(&problem_id, &client_id);
                    return Err(sync_reject(&e));
                }
            }
        }
        Ok(Vec::new())
    }

    fn on_snapshot(&self, token: &str, session: &Session, problem_id: &str) -> Handled {
        let room_id = session
            .room_id
            .clone()
            .ok_or_else(|| Reject::new(ErrorCode::Permission, "not in a room"))?;
        let engine = self
            .room(&room_id)
            .ok_or_else(|| Reject::new(ErrorCode::NotFound, "room not found"))?;
        let client_id = self.next_id("c");
        {
            let mut sessions = lock(&self.sessions);
            if let Some(s) = sessions.get_mut(token) {
                s.client_id = client_id.clone();
                s.client_ids.insert(client_id.clone());
            }
        }
        let mut guard = lock(&engine);
        guard.reorder.discard(problem_id, &session.client_id);
        let snapshot = guard
            .room
            .docs
            .get(problem_id)
            .map(|d| d.snapshot())
            .ok_or_else(|| Reject::new(ErrorCode::NotFound, format!("unknown problem `{problem_id}`")))?;
        self.send(
            token,
            &ServerMessage::Snapshot {
                room_id,
                client_id,
                snapshot,
            },
        );
        Ok(Vec::new())
    }

    fn on_select(&self, session: &Session, problem_id: &str) -> Handled {
        let engine = self.student_room(session)?;
        let mut guard = lock(&engine);
        Self::require_member(&guard, session)?;
        if !guard.room.docs.contains_key(problem_id) {
            return Err(Reject::new(ErrorCode::NotFound, format!("unknown problem `{problem_id}`")));
        }
        self.commit(&mut guard, |_, _| EventBody::SelectProblem {
            problem_id: problem_id.to_owned(),
            participant_id: session.participant.id.clone(),
        })?;
        let message = ServerMessage::ProblemSelected {
            room_id: guard.room.id.clone(),
            problem_id: problem_id.to_owned(),
            by: session.participant.id.clone(),
        };
        self.broadcast(&guard, &message);
        self.notify_tas(&guard);
        Ok(Vec::new())
    }

    fn on_ask(&self, session: &Session, body: &str) -> Handled {
        let engine = self.student_room(session)?;
        let mut guard = lock(&engine);
        Self::require_member(&guard, session)?;
        if body.trim().is_empty() {
            return Err(Reject::new(ErrorCode::Invalid, "question must not be empty"));
        }
        if guard.tutor_ticket.is_some() {
            return Err(Reject::new(ErrorCode::Busy, "the tutor is still answering this group"));
        }
        let author = Author::Student(session.participant.id.clone());
        let record = self.commit(&mut guard, |seq, at| EventBody::ChatStudent {
            message: ChatMessage::new(format!("m{seq}"), Channel::AiTutor, author, body.to_owned(), at),
        })?;
        let EventBody::ChatStudent { message } = record.body else {
            unreachable!("committed a ChatStudent event")
        };
        let ticket = message.id.clone();
        self.broadcast(
            &guard,
            &ServerMessage::Chat {
                room_id: guard.room.id.clone(),
                message,
            },
        );
        self.notify_tas(&guard);
        let context = assemble_context(&guard.room, &guard.worksheet, &self.config.context)
            .map_err(|e| Reject::new(ErrorCode::Internal, e))?;
        guard.tutor_ticket = Some(ticket.clone());
        Ok(vec![Effect::Tutor {
            room_id: guard.room.id.clone(),
            ticket,
            context,
        }])
    }

    /// Records the tutor's reply, or a notice when the backend failed, and
    /// releases the room's in-flight slot. Stale tickets are ignored.
    pub fn complete_tutor(&self, room_id: &str, ticket: &str, reply: Result<String, BackendError>) {
        let Some(engine) = self.room(room_id) else { return };
        let mut guard = lock(&engine);
        if guard.tutor_ticket.as_deref() != Some(ticket) {
            return;
        }
        guard.tutor_ticket = None;
        let (author, body) = match reply {
            Ok(text) if !text.trim().is_empty() => (Author::Ai, text),
            Ok(_) => (Author::System, UNAVAILABLE_NOTICE.to_owned()),
            Err(e) => {
                tracing::warn!(room = room_id, error = %e, "tutor backend failed");
                (Author::System, UNAVAILABLE_NOTICE.to_owned())
            }
        };
        let Ok(record) = self.commit(&mut guard, |seq, at| EventBody::ChatAi {
            message: ChatMessage::new(format!("m{seq}"), Channel::AiTutor, author, body, at),
        }) else {
            return;
        };
        if let EventBody::ChatAi { message } = record.body {
            self.broadcast(
                &guard,
                &ServerMessage::Chat {
                    room_id: room_id.to_owned(),
                    message,
                },
            );
        }
        self.notify_tas(&guard);
    }

    fn on_label(&self, session: &Session, message_id: &str, label: crate::model::StudentFeedbackLabel) -> Handled {
        let engine = self.student_room(session)?;
        let mut guard = lock(&engine);
        check_label(&guard.room, &session.participant.id, message_id).map_err(|e| match e {
            crate::tutor::TutorError::UnknownMessage(_) => Reject::new(ErrorCode::NotFound, e),
            crate::tutor::TutorError::NotMember(_) => Reject::new(ErrorCode::Permission, e),
            _ => Reject::new(ErrorCode::Invalid, e),
        })?;
        self.commit(&mut guard, |_, _| EventBody::StudentLabel {
            message_id: message_id.to_owned(),
            participant_id: session.participant.id.clone(),
            label,
        })?;
        let message = guard.room.ai_message(message_id).cloned().expect("label target exists");
        self.broadcast(
            &guard,
            &ServerMessage::Chat {
                room_id: guard.room.id.clone(),
                message,
            },
        );
        Ok(Vec::new())
    }

    fn on_check(&self, session: &Session, problem_id: Option<String>) -> Handled {
        let engine = self.student_room(session)?;
        let mut guard = lock(&engine);
        Self::require_member(&guard, session)?;
        if guard.grading.is_some() {
            return Err(Reject::new(ErrorCode::Busy, "a grader run is already in progress"));
        }
        let problem_id = problem_id.unwrap_or_else(|| guard.room.selected_problem.clone());
        let problem = guard
            .worksheet
            .problem(&problem_id)
            .cloned()
            .ok_or_else(|| Reject::new(ErrorCode::NotFound, format!("unknown problem `{problem_id}`")))?;
        let doc = &guard.room.docs[&problem.id];
        let solution = render_solution(&problem, doc).map_err(|e| Reject::new(ErrorCode::Internal, e))?;
        let ticket = self.next_id("g");
        guard.grading = Some((ticket.clone(), problem.id.clone()));
        Ok(vec![Effect::Grade {
            room_id: guard.room.id.clone(),
            ticket,
            problem,
            solution,
        }])
    }

    /// Logs and broadcasts a finished grader run. Stale tickets are ignored.
    pub fn complete_grading(&self, room_id: &str, ticket: &str, outcomes: Vec<TestOutcome>) {
        let Some(engine) = self.room(room_id) else { return };
        let mut guard = lock(&engine);
        let problem_id = match &guard.grading {
            Some((t, p)) if t == ticket => p.clone(),
            _ => return,
        };
        guard.grading = None;
        let Ok(record) = self.commit(&mut guard, |seq, at| EventBody::GraderRun {
            result: GraderResult::new(format!("r{seq}"), problem_id, outcomes, at),
        }) else {
            return;
        };
        if let EventBody::GraderRun { result } = record.body {
            self.broadcast(
                &guard,
                &ServerMessage::GraderResult {
                    room_id: room_id.to_owned(),
                    result,
                },
            );
        }
        self.notify_tas(&guard);
    }

    fn on_review(
        &self,
        session: &Session,
        room_id: Option<String>,
        message_id: &str,
        action: crate::console::ReviewAction,
    ) -> Handled {
        let engine = self.ta_room(session, room_id)?;
        let mut guard = lock(&engine);
        let message = guard
            .room
            .ai_message(message_id)
            .ok_or_else(|| Reject::new(ErrorCode::NotFound, format!("message `{message_id}` not found")))?;
        check_review(message, &action).map_err(|e| match e {
            crate::console::ConsoleError::InvalidTransition { .. } => Reject::new(ErrorCode::InvalidTransition, e),
            _ => Reject::new(ErrorCode::Invalid, e),
        })?;
        self.commit(&mut guard, |_, _| EventBody::TaReview {
            message_id: message_id.to_owned(),
            ta_id: session.participant.id.clone(),
            action,
        })?;
        let message = guard.room.ai_message(message_id).cloned().expect("review target exists");
        self.broadcast(
            &guard,
            &ServerMessage::Chat {
                room_id: guard.room.id.clone(),
                message,
            },
        );
        self.notify_tas(&guard);
        Ok(Vec::new())
    }

    fn on_ta_chat(&self, session: &Session, room_id: Option<String>, body: &str) -> Handled {
        if body.trim().is_empty() {
            return Err(Reject::new(ErrorCode::Invalid, "message must not be empty"));
        }
        let engine = match session.participant.role {
            Role::Ta => self.ta_room(session, room_id)?,
            Role::Student => {
                if room_id.is_some() && room_id != session.room_id {
                    return Err(Reject::new(ErrorCode::Permission, "students may only chat in their own room"));
                }
                self.student_room(session)?
            }
        };
        let mut guard = lock(&engine);
        let author = match session.participant.role {
            Role::Ta => Author::Ta(session.participant.id.clone()),
            Role::Student => {
                Self::require_member(&guard, session)?;
                Author::Student(session.participant.id.clone())
            }
        };
        let record = self.commit(&mut guard, |seq, at| {
            let message = ChatMessage::new(format!("m{seq}"), Channel::TaChat, author.clone(), body.to_owned(), at);
            match author {
                Author::Ta(_) => EventBody::ChatTa { message },
                _ => EventBody::ChatStudent { message },
            }
        })?;
        let message = match record.body {
            EventBody::ChatTa { message } | EventBody::ChatStudent { message } => message,
            _ => unreachable!("committed a chat event"),
        };
        self.broadcast(
            &guard,
            &ServerMessage::Chat {
                room_id: guard.room.id.clone(),
                message,
            },
        );
        self.notify_tas(&guard);
        Ok(Vec::new())
    }

    fn on_list(&self, token: &str, session: &Session) -> Handled {
        if session.participant.role != Role::Ta {
            return Err(Reject::new(ErrorCode::Permission, "TAs only"));
        }
        let rooms = self.list_rooms();
        self.send(token, &ServerMessage::RoomList { rooms });
        Ok(Vec::new())
    }

    /// All rooms in TA priority order.
    pub fn list_rooms(&self) -> Vec<crate::console::RoomSummary> {
        let engines: Vec<_> = self.rooms.read().unwrap_or_else(|e| e.into_inner()).values().cloned().collect();
        let mut out: Vec<_> = engines.iter().map(|e| summarize(&lock(e).room)).collect();
        sort_summaries(&mut out);
        out
    }

    fn on_watch(&self, token: &str, session: &Session, room_id: &str) -> Handled {
        if session.participant.role != Role::Ta {
            return Err(Reject::new(ErrorCode::Permission, "TAs only"));
        }
        let engine = self
            .room(room_id)
            .ok_or_else(|| Reject::new(ErrorCode::NotFound, format!("room `{room_id}` not found")))?;
        let previous = {
            let mut sessions = lock(&self.sessions);
            let s = sessions.get_mut(token).ok_or_else(|| Reject::new(ErrorCode::Internal, "session vanished"))?;
            s.room_id.replace(room_id.to_owned())
        };
        if let Some(prev) = previous.filter(|p| p != room_id).and_then(|p| self.room(&p)) {
            lock(&prev).subscribers.remove(token);
        }
        let mut guard = lock(&engine);
        guard.subscribers.insert(token.to_owned());
        self.send(
            token,
            &ServerMessage::RoomState {
                room: RoomView::of(&guard.room),
            },
        );
        Ok(Vec::new())
    }

    fn on_room_state(&self, token: &str, session: &Session, room_id: Option<String>) -> Handled {
        let engine = match session.participant.role {
            Role::Ta => self.ta_room(session, room_id)?,
            Role::Student => {
                if room_id.is_some() && room_id != session.room_id {
                    return Err(Reject::new(ErrorCode::Permission, "students may only view their own room"));
                }
                self.student_room(session)?
            }
        };
        let guard = lock(&engine);
        self.send(
            token,
            &ServerMessage::RoomState {
                room: RoomView::of(&guard.room),
            },
        );
        Ok(Vec::new())
    }

    fn on_leave(&self, token: &str, session: &Session) -> Handled {
        let engine = self.student_room(session)?;
        let mut guard = lock(&engine);
        Self::require_member(&guard, session)?;
        self.commit(&mut guard, |_, _| EventBody::Leave {
            participant_id: session.participant.id.clone(),
        })?;
        guard.subscribers.remove(token);
        let message = ServerMessage::Members {
            room_id: guard.room.id.clone(),
            members: guard.room.members.clone(),
        };
        self.broadcast(&guard, &message);
        self.notify_tas(&guard);
        drop(guard);
        if let Some(s) = lock(&self.sessions).get_mut(token) {
            s.room_id = None;
        }
        Ok(Vec::new())
    }

    // ---- reads ----

    pub fn metrics(&self, options: &MetricsOptions) -> MetricsReport {
        let engines: Vec<_> = self.rooms.read().unwrap_or_else(|e| e.into_inner()).values().cloned().collect();
        let guards: Vec<_> = engines.iter().map(|e| lock(e)).collect();
        metrics_summary(guards.iter().map(|g| &g.room), options)
    }

    /// Deep copy of every room.
    pub fn rooms_snapshot(&self) -> BTreeMap<String, SessionRoom> {
        let engines: Vec<_> = self.rooms.read().unwrap_or_else(|e| e.into_inner()).values().cloned().collect();
        engines
            .iter()
            .map(|e| {
                let g = lock(e);
                (g.room.id.clone(), g.room.clone())
            })
            .collect()
    }

    pub fn room_state(&self, room_id: &str) -> Option<SessionRoom> {
        self.room(room_id).map(|e| lock(&e).room.clone())
    }

    pub fn last_seq(&self) -> u64 {
        lock(&self.log).last_seq()
    }

    // ---- inline effect execution ----

    /// Runs an effect on the calling thread and reports the result.
    pub fn run_effect(&self, effect: Effect, backend: &dyn TutorBackend, grader: &dyn Grade) {
        match effect {
            Effect::Tutor {
                room_id,
                ticket,
                context,
            } => {
                let reply = backend.complete(&context);
                self.complete_tutor(&room_id, &ticket, reply);
            }
            Effect::Grade {
                room_id,
                ticket,
                problem,
                solution,
            } => {
                let outcomes = grader.grade(&problem, &solution);
                self.complete_grading(&room_id, &ticket, outcomes);
            }
        }
    }
}

fn sync_reject(e: &SyncError) -> Reject {
    let code = match e {
        SyncError::OutOfRange { .. } | SyncError::VersionGap { .. } => ErrorCode::OutOfRange,
        SyncError::ResyncRequired(_) => ErrorCode::ResyncRequired,
        SyncError::UnknownBlank(_) | SyncError::UnknownProblem(_) => ErrorCode::NotFound,
        SyncError::FutureBase { .. } | SyncError::OutOfOrder { .. } | SyncError::InvalidOp(_) => ErrorCode::Invalid,
    };
    Reject::new(code, e)
}

/// Collects frames per session; used by the simulator, tests and the FFI.
#[derive(Debug, Default)]
pub struct QueueOutbox {
    frames: Mutex<Vec<(String, String)>>,
}

impl QueueOutbox {
    pub fn new() -> Self {
        QueueOutbox::default()
    }

    /// Removes and returns everything delivered so far, in order.
    pub fn drain(&self) -> Vec<(String, String)> {
        std::mem::take(&mut *lock(&self.frames))
    }

    /// Removes and returns the frames for one session.
    pub fn take_for(&self, session: &str) -> Vec<String> {
        let mut frames = lock(&self.frames);
        let (mine, rest): (Vec<_>, Vec<_>) = frames.drain(..).partition(|(s, _)| s == session);
        *frames = rest;
        mine.into_iter().map(|(_, f)| f).collect()
    }
}

impl Outbox for QueueOutbox {
    fn deliver(&self, session: &str, frame: &str) {
        lock(&self.frames).push((session.to_owned(), frame.to_owned()));
    }
}
