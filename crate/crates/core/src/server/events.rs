//! Append-only event log, the single mutation path for rooms, and crash
//! recovery by replay.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Clock;
use crate::console::{apply_review, ConsoleError, ReviewAction};
use crate::model::{
    Author, Channel, ChatMessage, GraderResult, Participant, Role, SessionRoom, StudentFeedbackLabel, Timestamp,
    Worksheet,
};
use crate::sync::{AppliedOp, SyncError};
use crate::tutor::{label_message, TutorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EventKind {
    Join,
    Leave,
    Edit,
    ChatStudent,
    #[serde(rename = "ChatAI")]
    ChatAi,
    #[serde(rename = "ChatTA")]
    ChatTa,
    GraderRun,
    StudentLabel,
    #[serde(rename = "TAReview")]
    TaReview,
    SelectProblem,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload")]
pub enum EventBody {
    /// The join that creates a room pins the worksheet it was created with.
    Join {
        participant: Participant,
        group_number: u32,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        worksheet: Option<Worksheet>,
    },
    Leave {
        participant_id: String,
    },
    Edit {
        applied: AppliedOp,
    },
    ChatStudent {
        message: ChatMessage,
    },
    #[serde(rename = "ChatAI")]
    ChatAi {
        message: ChatMessage,
    },
    #[serde(rename = "ChatTA")]
    ChatTa {
        message: ChatMessage,
    },
    GraderRun {
        result: GraderResult,
    },
    StudentLabel {
        message_id: String,
        participant_id: String,
        label: StudentFeedbackLabel,
    },
    #[serde(rename = "TAReview")]
    TaReview {
        message_id: String,
        ta_id: String,
        action: ReviewAction,
    },
    SelectProblem {
        problem_id: String,
        participant_id: String,
    },
}

impl EventBody {
    pub fn kind(&self) -> EventKind {
        match self {
            EventBody::Join { .. } => EventKind::Join,
            EventBody::Leave { .. } => EventKind::Leave,
            EventBody::Edit { .. } => EventKind::Edit,
            EventBody::ChatStudent { .. } => EventKind::ChatStudent,
            EventBody::ChatAi { .. } => EventKind::ChatAi,
            EventBody::ChatTa { .. } => EventKind::ChatTa,
            EventBody::GraderRun { .. } => EventKind::GraderRun,
            EventBody::StudentLabel { .. } => EventKind::StudentLabel,
            EventBody::TaReview { .. } => EventKind::TaReview,
            EventBody::SelectProblem { .. } => EventKind::SelectProblem,
        }
    }
}

/// One line of the log.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventRecord {
    pub seq: u64,
    pub room_id: String,
    pub at: Timestamp,
    #[serde(flatten)]
    pub body: EventBody,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ApplyError {
    #[error("room `{0}` does not exist and the event does not create it")]
    UnknownRoom(String),
    #[error("room `{0}` already exists")]
    RoomExists(String),
    #[error("worksheet has no problems")]
    EmptyWorksheet,
    #[error("unknown problem `{0}`")]
    UnknownProblem(String),
    #[error("`{0}` is not a member")]
    NotMember(String),
    #[error("message author or channel does not match the event kind")]
    WrongAuthor,
    #[error("duplicate message id `{0}`")]
    DuplicateMessage(String),
    #[error(transparent)]
    Sync(#[from] SyncError),
    #[error(transparent)]
    Console(#[from] ConsoleError),
    #[error(transparent)]
    Tutor(#[from] TutorError),
}

fn push_message(list: &mut Vec<ChatMessage>, message: &ChatMessage) -> Result<(), ApplyError> {
    if list.iter().any(|m| m.id == message.id) {
        return Err(ApplyError::DuplicateMessage(message.id.clone()));
    }
    list.push(message.clone());
    Ok(())
}

/// Creates a room from its first event.
pub fn create_room(record: &EventRecord) -> Result<SessionRoom, ApplyError> {
    match &record.body {
        EventBody::Join {
            group_number,
            worksheet: Some(worksheet),
            ..
        } => {
            if worksheet.problems.is_empty() {
                return Err(ApplyError::EmptyWorksheet);
            }
            let mut room = SessionRoom::new(record.room_id.clone(), *group_number, worksheet, record.at);
            apply_to_room(&mut room, record)?;
            Ok(room)
        }
        _ => Err(ApplyError::UnknownRoom(record.room_id.clone())),
    }
}

/// Applies one event to an existing room. Validation happens before any
/// mutation, so a rejected event leaves the room untouched.
pub fn apply_to_room(room: &mut SessionRoom, record: &EventRecord) -> Result<(), ApplyError> {
    match &record.body {
        EventBody::Join { participant, .. } => {
            if participant.role == Role::Student && room.member(&participant.id).is_none() {
                room.members.push(participant.clone());
            }
        }
        EventBody::Leave { participant_id } => {
            if room.member(participant_id).is_none() {
                return Err(ApplyError::NotMember(participant_id.clone()));
            }
            room.members.retain(|m| &m.id != participant_id);
        }
        EventBody::Edit { applied } => {
            let doc = room
                .docs
                .get_mut(&applied.op.problem_id)
                .ok_or_else(|| ApplyError::UnknownProblem(applied.op.problem_id.clone()))?;
            doc.commit(applied.clone())?;
        }
        EventBody::ChatStudent { message } => {
            if !matches!(message.author, Author::Student(_)) {
                return Err(ApplyError::WrongAuthor);
            }
            match message.channel {
                Channel::AiTutor => push_message(&mut room.ai_chat, message)?,
                Channel::TaChat => push_message(&mut room.ta_chat, message)?,
            }
        }
        EventBody::ChatAi { message } => {
            if !matches!(message.author, Author::Ai | Author::System) || message.channel != Channel::AiTutor {
                return Err(ApplyError::WrongAuthor);
            }
            push_message(&mut room.ai_chat, message)?;
            if message.author.is_ai() {
                room.unreviewed_count += 1;
            }
        }
        EventBody::ChatTa { message } => {
            if !matches!(message.author, Author::Ta(_)) || message.channel != Channel::TaChat {
                return Err(ApplyError::WrongAuthor);
            }
            push_message(&mut room.ta_chat, message)?;
        }
        EventBody::GraderRun { result } => {
            if !room.docs.contains_key(&result.problem_id) {
                return Err(ApplyError::UnknownProblem(result.problem_id.clone()));
            }
            room.grader_history.push(result.clone());
        }
        EventBody::StudentLabel {
            message_id,
            participant_id,
            label,
        } => {
            label_message(room, participant_id, message_id, *label)?;
        }
        EventBody::TaReview { message_id, action, .. } => {
            apply_review(room, message_id, action)?;
        }
        EventBody::SelectProblem { problem_id, .. } => {
            if !room.docs.contains_key(problem_id) {
                return Err(ApplyError::UnknownProblem(problem_id.clone()));
            }
            room.selected_problem = problem_id.clone();
        }
    }
    room.last_activity = room.last_activity.max(record.at);
    Ok(())
}

/// Rooms keyed by id, each with the worksheet it was created from.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RoomSet {
    pub rooms: BTreeMap<String, SessionRoom>,
    pub worksheets: BTreeMap<String, Arc<Worksheet>>,
}

impl RoomSet {
    pub fn apply(&mut self, record: &EventRecord) -> Result<(), ApplyError> {
        match self.rooms.get_mut(&record.room_id) {
            Some(room) => {
                if let EventBody::Join { worksheet: Some(_), .. } = &record.body {
                    return Err(ApplyError::RoomExists(record.room_id.clone()));
                }
                apply_to_room(room, record)
            }
            None => {
                let room = create_room(record)?;
                if let EventBody::Join {
                    worksheet: Some(w), ..
                } = &record.body
                {
                    self.worksheets.insert(record.room_id.clone(), Arc::new(w.clone()));
                }
                self.rooms.insert(record.room_id.clone(), room);
                Ok(())
            }
        }
    }
}

/// Where replay stopped early.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Truncation {
    /// Last record that was accepted, 0 if none.
    pub last_valid_seq: u64,
    /// Byte offset just past the last accepted line, when reading a file.
    pub byte_offset: Option<u64>,
    pub reason: String,
}

#[derive(Clone, Debug, Default)]
pub struct LogScan {
    pub records: Vec<EventRecord>,
    /// Length of the well-formed prefix.
    pub valid_len: u64,
    pub truncation: Option<Truncation>,
}

/// Parses a log, stopping at the first line that is not a well-formed record
/// with a larger seq than its predecessor.
pub fn scan_log(bytes: &[u8]) -> LogScan {
    let mut scan = LogScan::default();
    let mut offset = 0usize;
    let mut last_seq = 0u64;
    while offset < bytes.len() {
        let rest = &bytes[offset..];
        let (line, consumed) = match rest.iter().position(|b| *b == b'\n') {
            Some(i) => (&rest[..i], i + 1),
            None => (rest, rest.len()),
        };
        let stop = |reason: String| Truncation {
            last_valid_seq: last_seq,
            byte_offset: Some(offset as u64),
            reason,
        };
        let record = match serde_json::from_slice::<EventRecord>(line) {
            Ok(r) => r,
            Err(e) => {
                scan.truncation = Some(stop(format!("line {}: {e}", scan.records.len() + 1)));
                break;
            }
        };
        if record.seq <= last_seq {
            scan.truncation = Some(stop(format!("seq {} does not follow {last_seq}", record.seq)));
            break;
        }
        last_seq = record.seq;
        offset += consumed;
        scan.records.push(record);
    }
    scan.valid_len = offset as u64;
    scan
}

/// Rebuilt state after replay.
#[derive(Clone, Debug, Default)]
pub struct Recovery {
    pub state: RoomSet,
    pub last_seq: u64,
    pub last_at: Timestamp,
    pub truncation: Option<Truncation>,
}

/// Per-room checkpoint written alongside the log.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoomSnapshot {
    /// Seq of the last event reflected in `room`.
    pub seq: u64,
    pub room: SessionRoom,
    pub worksheet: Worksheet,
}

/// Replays `records` in order. Stops at the first record that cannot be
/// applied and reports it.
pub fn recover(records: &[EventRecord]) -> Recovery {
    recover_from(RoomSet::default(), &BTreeMap::new(), records)
}

/// Like [`recover`], starting each room from its snapshot when one exists.
/// Snapshots newer than the log are ignored.
pub fn recover_with_snapshots(records: &[EventRecord], snapshots: Vec<RoomSnapshot>) -> Recovery {
    let log_end = records.last().map_or(0, |r| r.seq);
    let mut base = RoomSet::default();
    let mut from = BTreeMap::new();
    for snap in snapshots {
        if snap.seq > log_end {
            continue;
        }
        from.insert(snap.room.id.clone(), snap.seq);
        base.worksheets.insert(snap.room.id.clone(), Arc::new(snap.worksheet));
        base.rooms.insert(snap.room.id.clone(), snap.room);
    }
    recover_from(base, &from, records)
}

fn recover_from(mut state: RoomSet, skip_through: &BTreeMap<String, u64>, records: &[EventRecord]) -> Recovery {
    let mut last_seq = 0;
    let mut last_at = 0;
    let mut truncation = None;
    for record in records {
        let covered = skip_through.get(&record.room_id).is_some_and(|s| record.seq <= *s);
        if !covered {
            if let Err(e) = state.apply(record) {
                truncation = Some(Truncation {
                    last_valid_seq: last_seq,
                    byte_offset: None,
                    reason: format!("seq {}: {e}", record.seq),
                });
                break;
            }
        }
        last_seq = record.seq;
        last_at = last_at.max(record.at);
    }
    Recovery {
        state,
        last_seq,
        last_at,
        truncation,
    }
}

/// Durable sink for serialized records, one JSON line each.
pub trait EventStore: Send {
    fn append_line(&mut self, line: &str) -> io::Result<()>;
}

/// In-memory store whose contents stay readable after the log is dropped.
#[derive(Clone, Debug, Default)]
pub struct MemoryStore {
    lines: Arc<Mutex<Vec<String>>>,
}

impl MemoryStore {
    pub fn new() -> Self {
        MemoryStore::default()
    }

    pub fn records(&self) -> Vec<EventRecord> {
        self.lines
            .lock()
            .expect("memory store poisoned")
            .iter()
            .map(|l| serde_json::from_str(l).expect("memory store holds valid records"))
            .collect()
    }

    pub fn bytes(&self) -> Vec<u8> {
        let lines = self.lines.lock().expect("memory store poisoned");
        let mut out = Vec::new();
        for l in lines.iter() {
            out.extend_from_slice(l.as_bytes());
            out.push(b'\n');
        }
        out
    }

    pub fn len(&self) -> usize {
        self.lines.lock().expect("memory store poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl EventStore for MemoryStore {
    fn append_line(&mut self, line: &str) -> io::Result<()> {
        self.lines.lock().expect("memory store poisoned").push(line.to_owned());
        Ok(())
    }
}

/// Append-only JSONL file.
#[derive(Debug)]
pub struct FileStore {
    file: File,
    sync: bool,
}

impl FileStore {
    /// Opens `path`, cutting off any malformed tail first. Returns the store
    /// and the scan of the surviving prefix.
    pub fn open(path: &Path, sync: bool) -> io::Result<(FileStore, LogScan)> {
        let bytes = match std::fs::read(path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e),
        };
        let scan = scan_log(&bytes);
        let mut file = OpenOptions::new().create(true).append(true).read(true).open(path)?;
        if scan.valid_len < bytes.len() as u64 {
            file.set_len(scan.valid_len)?;
        }
        if scan.valid_len > 0 && bytes[scan.valid_len as usize - 1] != b'\n' {
            file.write_all(b"\n")?;
        }
        Ok((FileStore { file, sync }, scan))
    }
}

impl EventStore for FileStore {
    fn append_line(&mut self, line: &str) -> io::Result<()> {
        let mut buf = Vec::with_capacity(line.len() + 1);
        buf.extend_from_slice(line.as_bytes());
        buf.push(b'\n');
        self.file.write_all(&buf)?;
        if self.sync {
            self.file.sync_data()?;
        } else {
            self.file.flush()?;
        }
        Ok(())
    }
}

/// Assigns seq and timestamp, then writes the record before returning it.
pub struct EventLog {
    store: Box<dyn EventStore>,
    clock: Arc<dyn Clock>,
    next_seq: u64,
    last_at: Timestamp,
}

impl EventLog {
    pub fn new(store: Box<dyn EventStore>, clock: Arc<dyn Clock>, last_seq: u64, last_at: Timestamp) -> Self {
        EventLog {
            store,
            clock,
            next_seq: last_seq + 1,
            last_at,
        }
    }

    pub fn last_seq(&self) -> u64 {
        self.next_seq - 1
    }

    /// `make` receives the seq so ids derived from it are unique.
    pub fn append(&mut self, room_id: &str, make: impl FnOnce(u64, Timestamp) -> EventBody) -> io::Result<EventRecord> {
        let at = self.clock.now_ms().max(self.last_at);
        let seq = self.next_seq;
        let record = EventRecord {
            seq,
            room_id: room_id.to_owned(),
            at,
            body: make(seq, at),
        };
        let line = serde_json::to_string(&record).map_err(io::Error::other)?;
        self.store.append_line(&line)?;
        self.next_seq += 1;
        self.last_at = at;
        Ok(record)
    }
}

/// Writes per-room snapshots as `<dir>/<room_id>.json`.
#[derive(Clone, Debug)]
pub struct SnapshotDir {
    dir: PathBuf,
}

impl SnapshotDir {
    pub fn new(dir: impl Into<PathBuf>) -> io::Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(SnapshotDir { dir })
    }

    pub fn write(&self, snapshot: &RoomSnapshot) -> io::Result<()> {
        let name = format!("{}.json", sanitize(&snapshot.room.id));
        let tmp = self.dir.join(format!(".{name}.tmp"));
        std::fs::write(&tmp, serde_json::to_vec(snapshot).map_err(io::Error::other)?)?;
        std::fs::rename(tmp, self.dir.join(name))
    }

    /// Unreadable snapshot files are skipped; the log covers them.
    pub fn load_all(&self) -> io::Result<Vec<RoomSnapshot>> {
        let mut out = Vec::new();
        let mut entries: Vec<_> = std::fs::read_dir(&self.dir)?.filter_map(Result::ok).collect();
        entries.sort_by_key(|e| e.file_name());
        for entry in entries {
            let path = entry.path();
            if path.extension().is_some_and(|e| e == "json") {
                if let Ok(snap) = std::fs::read(&path).and_then(|b| serde_json::from_slice(&b).map_err(io::Error::other)) {
                    out.push(snap);
                }
            }
        }
        Ok(out)
    }
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::VirtualClock;
    use crate::model::{BlankRegion, Problem};
    use crate::sync::{EditOp, OpKind};

    fn worksheet() -> Worksheet {
        Worksheet {
            id: "w".into(),
            title: "W".into(),
            published: true,
            problems: vec![Problem {
                id: "p".into(),
                title: "P".into(),
                prompt_markdown: String::new(),
                language_tag: "echo-script".into(),
                starter_code: "print {{blank:b}}".into(),
                blanks: vec![BlankRegion {
                    id: "b".into(),
                    placeholder: String::new(),
                    initial_text: "abc".into(),
                }],
                tests: vec![],
            }],
        }
    }

    fn student(id: &str) -> Participant {
        Participant {
            id: id.into(),
            email: format!("{id}@u.edu"),
            role: Role::Student,
            display_name: id.into(),
        }
    }

    fn sample_log() -> (MemoryStore, Vec<EventRecord>) {
        let store = MemoryStore::new();
        let mut log = EventLog::new(Box::new(store.clone()), Arc::new(VirtualClock::new(1000)), 0, 0);
        let mut out = vec![];
        out.push(
            log.append("g1", |_, _| EventBody::Join {
                participant: student("s1"),
                group_number: 1,
                worksheet: Some(worksheet()),
            })
            .unwrap(),
        );
        out.push(
            log.append("g1", |_, _| EventBody::Edit {
                applied: AppliedOp {
                    version: 1,
                    op: EditOp {
                        client_id: "c".into(),
                        client_seq: 1,
                        problem_id: "p".into(),
                        blank_id: "b".into(),
                        kind: OpKind::Insert { pos: 3, text: "d".into() },
                        base_version: 0,
                    },
                },
            })
            .unwrap(),
        );
        out.push(
            log.append("g1", |seq, at| EventBody::ChatAi {
                message: ChatMessage::new(format!("m{seq}"), Channel::AiTutor, Author::Ai, "hint".into(), at),
            })
            .unwrap(),
        );
        (store, out)
    }

    #[test]
    fn record_wire_shape() {
        let (store, records) = sample_log();
        let line = String::from_utf8(store.bytes()).unwrap();
        let first: serde_json::Value = serde_json::from_str(line.lines().nth(1).unwrap()).unwrap();
        assert_eq!(first["kind"], "Edit");
        assert_eq!(first["seq"], 2);
        assert_eq!(first["payload"]["applied"]["version"], 1);
        assert_eq!(store.records(), records);
        assert_eq!(records[2].body.kind(), EventKind::ChatAi);
        assert!(line.lines().nth(2).unwrap().contains("\"kind\":\"ChatAI\""));
    }

    #[test]
    fn empty_log_recovers_nothing() {
        let r = recover(&[]);
        assert!(r.state.rooms.is_empty());
        assert_eq!(r.last_seq, 0);
        assert!(scan_log(b"").truncation.is_none());
    }

    #[test]
    fn replay_rebuilds_room() {
        let (_, records) = sample_log();
        let r = recover(&records);
        let room = &r.state.rooms["g1"];
        assert_eq!(room.docs["p"].text("b"), Some("abcd"));
        assert_eq!(room.unreviewed_count, 1);
        assert_eq!(room.members.len(), 1);
        assert_eq!(r.last_seq, 3);
        assert!(r.truncation.is_none());
    }

    #[test]
    fn truncated_tail_stops_at_previous_record() {
        let (store, _) = sample_log();
        let bytes = store.bytes();
        let cut = bytes.len() - 10;
        let scan = scan_log(&bytes[..cut]);
        assert_eq!(scan.records.len(), 2);
        let t = scan.truncation.unwrap();
        assert_eq!(t.last_valid_seq, 2);
        assert_eq!(t.byte_offset, Some(scan.valid_len));
        let r = recover(&scan.records);
        assert_eq!(r.state.rooms["g1"].docs["p"].text("b"), Some("abcd"));
    }

    #[test]
    fn semantic_corruption_is_reported() {
        let (_, mut records) = sample_log();
        if let EventBody::Edit { applied } = &mut records[1].body {
            applied.version = 7;
        }
        let r = recover(&records);
        let t = r.truncation.unwrap();
        assert_eq!(t.last_valid_seq, 1);
        assert!(t.reason.starts_with("seq 2"));
        assert_eq!(r.state.rooms["g1"].docs["p"].text("b"), Some("abc"));
    }

    #[test]
    fn file_store_cuts_torn_tail_and_appends() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.jsonl");
        let (_, records) = sample_log();
        let mut text = String::new();
        for r in &records {
            text.push_str(&serde_json::to_string(r).unwrap());
            text.push('\n');
        }
        text.push_str("{\"seq\":4,\"room_");
        std::fs::write(&path, &text).unwrap();
        let (store, scan) = FileStore::open(&path, false).unwrap();
        assert_eq!(scan.records.len(), 3);
        let mut log = EventLog::new(Box::new(store), Arc::new(VirtualClock::new(5000)), 3, 1000);
        log.append("g1", |_, _| EventBody::Leave {
            participant_id: "s1".into(),
        })
        .unwrap();
        let again = scan_log(&std::fs::read(&path).unwrap());
        assert!(again.truncation.is_none());
        assert_eq!(again.records.len(), 4);
        assert!(recover(&again.records).state.rooms["g1"].members.is_empty());
    }

    #[test]
    fn snapshots_skip_covered_events() {
        let (_, records) = sample_log();
        let full = recover(&records);
        let partial = recover(&records[..2]);
        let snap = RoomSnapshot {
            seq: 2,
            room: partial.state.rooms["g1"].clone(),
            worksheet: worksheet(),
        };
        let dir = tempfile::tempdir().unwrap();
        let sd = SnapshotDir::new(dir.path()).unwrap();
        sd.write(&snap).unwrap();
        let loaded = sd.load_all().unwrap();
        let r = recover_with_snapshots(&records, loaded);
        assert_eq!(r.state.rooms, full.state.rooms);
        let stale = RoomSnapshot { seq: 99, ..snap };
        assert_eq!(recover_with_snapshots(&records, vec![stale]).state.rooms, full.state.rooms);
    }

    #[test]
    fn rejected_event_leaves_room_untouched() {
        let (_, records) = sample_log();
        let mut state = recover(&records).state;
        let before = state.clone();
        let bad = EventRecord {
            seq: 9,
            room_id: "g1".into(),
            at: 5,
            body: EventBody::StudentLabel {
                message_id: "m3".into(),
                participant_id: "nobody".into(),
                label: StudentFeedbackLabel::Helpful,
            },
        };
        assert!(state.apply(&bad).is_err());
        assert_eq!(state, before);
    }
}
