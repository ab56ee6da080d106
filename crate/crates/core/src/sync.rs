//! Server-serialized operational transformation over blank regions.
//!
//! The server is the single transformation authority for a room: every
//! accepted [`EditOp`] is transformed against the ops the sender had not yet
//! seen, assigned the next `server_version`, and broadcast. Clients follow the
//! one-op-in-flight discipline of [`ClientReplica`], so an op only ever needs
//! transforming against other clients' ops.
//!
//! Positions and lengths count Unicode scalar values, not bytes.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Problem;

/// Ops a single client may have parked out of order before it must resync.
pub const DEFAULT_REORDER_WINDOW: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Insert { pos: usize, text: String },
    Delete { pos: usize, len: usize },
}

impl OpKind {
    pub fn is_noop(&self) -> bool {
        match self {
            OpKind::Insert { text, .. } => text.is_empty(),
            OpKind::Delete { len, .. } => *len == 0,
        }
    }

    fn noop_at(pos: usize) -> OpKind {
        OpKind::Insert {
            pos,
            text: String::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditOp {
    pub client_id: String,
    /// Contiguous per (client, problem), starting at 1.
    pub client_seq: u64,
    pub problem_id: String,
    pub blank_id: String,
    pub kind: OpKind,
    pub base_version: u64,
}

impl EditOp {
    /// Client-authored ops may not be no-ops; transformed ops may.
    pub fn check_client_op(&self) -> Result<(), SyncError> {
        match &self.kind {
            OpKind::Insert { text, .. } if text.is_empty() => Err(SyncError::InvalidOp("insert text must be non-empty")),
            OpKind::Delete { len: 0, .. } => Err(SyncError::InvalidOp("delete length must be at least 1")),
            _ if self.client_seq == 0 => Err(SyncError::InvalidOp("client_seq starts at 1")),
            _ => Ok(()),
        }
    }

    /// What the server accepts: a queued op rebased over a concurrent delete
    /// may arrive as an empty insert and still has to advance its sequence.
    pub fn check_wire_op(&self) -> Result<(), SyncError> {
        match &self.kind {
            OpKind::Delete { len: 0, .. } => Err(SyncError::InvalidOp("delete length must be at least 1")),
            _ if self.client_seq == 0 => Err(SyncError::InvalidOp("client_seq starts at 1")),
            _ => Ok(()),
        }
    }

    fn same_region(&self, other: &EditOp) -> bool {
        self.problem_id == other.problem_id && self.blank_id == other.blank_id
    }

    /// Total order for insert/insert ties: the smaller client id goes first.
    fn wins_tie_over(&self, other: &EditOp) -> bool {
        (&self.client_id, self.client_seq) < (&other.client_id, other.client_seq)
    }
}

/// An op as the server applied it, tagged with the version it produced.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppliedOp {
    pub version: u64,
    pub op: EditOp,
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum SyncError {
    #[error("unknown blank `{0}`")]
    UnknownBlank(String),
    #[error("unknown problem `{0}`")]
    UnknownProblem(String),
    #[error("position out of range for blank `{blank_id}` (length {len})")]
    OutOfRange { blank_id: String, len: usize },
    #[error("base_version {base} is ahead of server version {server}")]
    FutureBase { base: u64, server: u64 },
    #[error("out of order: expected client_seq {expected}, got {got}")]
    OutOfOrder { expected: u64, got: u64 },
    #[error("reorder window exhausted for client `{0}`; resync required")]
    ResyncRequired(String),
    #[error("expected version {expected}, got {got}; resync required")]
    VersionGap { expected: u64, got: u64 },
    #[error("invalid op: {0}")]
    InvalidOp(&'static str),
}

fn char_len(s: &str) -> usize {
    s.chars().count()
}

fn byte_index(s: &str, char_pos: usize) -> Option<usize> {
    if char_pos == 0 {
        return Some(0);
    }
    s.char_indices()
        .map(|(i, _)| i)
        .chain(std::iter::once(s.len()))
        .nth(char_pos)
}

/// Applies one primitive to `text` in place.
pub fn apply_kind(text: &mut String, blank_id: &str, kind: &OpKind) -> Result<(), SyncError> {
    let out_of_range = || SyncError::OutOfRange {
        blank_id: blank_id.to_owned(),
        len: char_len(text),
    };
    match kind {
        OpKind::Insert { pos, text: ins } => {
            let at = byte_index(text, *pos).ok_or_else(out_of_range)?;
            text.insert_str(at, ins);
        }
        OpKind::Delete { pos, len } => {
            let start = byte_index(text, *pos).ok_or_else(out_of_range)?;
            let end = byte_index(text, pos + len).ok_or_else(out_of_range)?;
            text.replace_range(start..end, "");
        }
    }
    Ok(())
}

/// Rewrites `op` so that applying `against` first and then the result
/// preserves `op`'s intent.
///
/// An insert strictly inside a concurrently deleted span is absorbed by the
/// delete, on both sides of the pair, so the two orders converge.
pub fn transform(op: &EditOp, against: &EditOp) -> EditOp {
    if !op.same_region(against) {
        return op.clone();
    }
    let kind = match (&op.kind, &against.kind) {
        (OpKind::Insert { pos, text }, OpKind::Insert { pos: other, text: other_text }) => {
            let shift = *other < *pos || (*other == *pos && against.wins_tie_over(op));
            OpKind::Insert {
                pos: if shift { pos + char_len(other_text) } else { *pos },
                text: text.clone(),
            }
        }
        (OpKind::Insert { pos, text }, OpKind::Delete { pos: del, len }) => {
            if *pos <= *del {
                op.kind.clone()
            } else if *pos >= del + len {
                OpKind::Insert {
                    pos: pos - len,
                    text: text.clone(),
                }
            } else {
                OpKind::noop_at(*del)
            }
        }
        (OpKind::Delete { pos, len }, OpKind::Insert { pos: ins, text }) => {
            let ins_len = char_len(text);
            if *ins <= *pos {
                OpKind::Delete {
                    pos: pos + ins_len,
                    len: *len,
                }
            } else if *ins >= pos + len {
                op.kind.clone()
            } else {
                OpKind::Delete {
                    pos: *pos,
                    len: len + ins_len,
                }
            }
        }
        (OpKind::Delete { pos, len }, OpKind::Delete { pos: del, len: del_len }) => {
            let map = |x: usize| {
                if x <= *del {
                    x
                } else if x >= del + del_len {
                    x - del_len
                } else {
                    *del
                }
            };
            let start = map(*pos);
            let end = map(pos + len);
            if end == start {
                OpKind::noop_at(start)
            } else {
                OpKind::Delete { pos: start, len: end - start }
            }
        }
    };
    EditOp { kind, ..op.clone() }
}

/// Point-in-time copy of one problem's blank texts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Snapshot {
    pub problem_id: String,
    pub version: u64,
    pub blanks: BTreeMap<String, String>,
}

/// Outcome of preparing an incoming op against the current document.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Prepared {
    /// Already applied; nothing to log or broadcast.
    Duplicate,
    Apply(AppliedOp),
}

/// Converged text of one problem's blanks plus the server-ordered op log.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentState {
    pub problem_id: String,
    pub blanks: BTreeMap<String, String>,
    pub server_version: u64,
    pub applied_ops: Vec<AppliedOp>,
    /// Highest applied client_seq per client.
    pub seen: BTreeMap<String, u64>,
}

impl DocumentState {
    pub fn new(problem: &Problem) -> Self {
        DocumentState {
            problem_id: problem.id.clone(),
            blanks: problem
                .blanks
                .iter()
                .map(|b| (b.id.clone(), b.initial_text.clone()))
                .collect(),
            server_version: 0,
            applied_ops: Vec::new(),
            seen: BTreeMap::new(),
        }
    }

    pub fn text(&self, blank_id: &str) -> Option<&str> {
        self.blanks.get(blank_id).map(String::as_str)
    }

    pub fn seen(&self, client_id: &str) -> u64 {
        self.seen.get(client_id).copied().unwrap_or(0)
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            problem_id: self.problem_id.clone(),
            version: self.server_version,
            blanks: self.blanks.clone(),
        }
    }

    /// Validates and transforms `op` without mutating the document, so the
    /// result can be made durable before it is committed.
    pub fn prepare(&self, op: &EditOp) -> Result<Prepared, SyncError> {
        let seen = self.seen(&op.client_id);
        if op.client_seq <= seen {
            return Ok(Prepared::Duplicate);
        }
        if op.client_seq != seen + 1 {
            return Err(SyncError::OutOfOrder {
                expected: seen + 1,
                got: op.client_seq,
            });
        }
        op.check_wire_op()?;
        let text = self
            .blanks
            .get(&op.blank_id)
            .ok_or_else(|| SyncError::UnknownBlank(op.blank_id.clone()))?;
        if op.base_version > self.server_version {
            return Err(SyncError::FutureBase {
                base: op.base_version,
                server: self.server_version,
            });
        }
        let concurrent = &self.applied_ops[op.base_version as usize..];
        let transformed = concurrent.iter().fold(op.clone(), |acc, a| transform(&acc, &a.op));
        let mut probe = text.clone();
        apply_kind(&mut probe, &op.blank_id, &transformed.kind)?;
        Ok(Prepared::Apply(AppliedOp {
            version: self.server_version + 1,
            op: EditOp {
                base_version: self.server_version,
                ..transformed
            },
        }))
    }

    /// Applies an op produced by [`DocumentState::prepare`] (or read back
    /// from the event log).
    pub fn commit(&mut self, applied: AppliedOp) -> Result<(), SyncError> {
        if applied.version != self.server_version + 1 {
            return Err(SyncError::VersionGap {
                expected: self.server_version + 1,
                got: applied.version,
            });
        }
        let op = &applied.op;
        let text = self
            .blanks
            .get_mut(&op.blank_id)
            .ok_or_else(|| SyncError::UnknownBlank(op.blank_id.clone()))?;
        apply_kind(text, &op.blank_id, &op.kind)?;
        self.server_version = applied.version;
        let seen = self.seen.entry(op.client_id.clone()).or_insert(0);
        *seen = (*seen).max(op.client_seq);
        self.applied_ops.push(applied);
        Ok(())
    }

    /// Prepare and commit in one step. Returns the broadcast op, or `None`
    /// for a duplicate delivery.
    pub fn integrate(&mut self, op: &EditOp) -> Result<Option<AppliedOp>, SyncError> {
        match self.prepare(op)? {
            Prepared::Duplicate => Ok(None),
            Prepared::Apply(applied) => {
                self.commit(applied.clone())?;
                Ok(Some(applied))
            }
        }
    }
}

/// Parks ops that arrive ahead of their client's next expected sequence
/// number and releases them in order.
#[derive(Clone, Debug, Default)]
pub struct ReorderBuffer {
    window: usize,
    pending: BTreeMap<(String, String), BTreeMap<u64, EditOp>>,
}

impl ReorderBuffer {
    pub fn new(window: usize) -> Self {
        ReorderBuffer {
            window,
            pending: BTreeMap::new(),
        }
    }

    /// Ops now ready to integrate, in client order. Duplicates yield nothing.
    pub fn offer(&mut self, doc: &DocumentState, op: EditOp) -> Result<Vec<EditOp>, SyncError> {
        let seen = doc.seen(&op.client_id);
        if op.client_seq <= seen {
            return Ok(Vec::new());
        }
        let key = (op.problem_id.clone(), op.client_id.clone());
        if op.client_seq > seen + 1 {
            let parked = self.pending.entry(key).or_default();
            if !parked.contains_key(&op.client_seq) && parked.len() >= self.window {
                self.pending.remove(&(op.problem_id.clone(), op.client_id.clone()));
                return Err(SyncError::ResyncRequired(op.client_id));
            }
            parked.insert(op.client_seq, op);
            return Ok(Vec::new());
        }
        let mut ready = vec![op];
        if let Some(parked) = self.pending.get_mut(&key) {
            let mut next = seen + 2;
            while let Some(op) = parked.remove(&next) {
                ready.push(op);
                next += 1;
            }
            parked.retain(|seq, _| *seq > next);
            if parked.is_empty() {
                self.pending.remove(&key);
            }
        }
        Ok(ready)
    }

    pub fn discard(&mut self, problem_id: &str, client_id: &str) {
        self.pending.remove(&(problem_id.to_owned(), client_id.to_owned()));
    }

    pub fn parked(&self, problem_id: &str, client_id: &str) -> usize {
        self.pending
            .get(&(problem_id.to_owned(), client_id.to_owned()))
            .map_or(0, BTreeMap::len)
    }
}

/// Client-side replica of one problem's document.
///
/// Local edits apply immediately. At most one op is in flight; later edits
/// wait in a queue and are rebased over every incoming remote op, so each op
/// is sent against a server version that already includes the client's
/// previous op.
#[derive(Clone, Debug)]
pub struct ClientReplica {
    client_id: String,
    problem_id: String,
    blanks: BTreeMap<String, String>,
    version: u64,
    next_seq: u64,
    in_flight: Option<EditOp>,
    queue: VecDeque<EditOp>,
}

impl ClientReplica {
    pub fn new(client_id: impl Into<String>, snapshot: &Snapshot) -> Self {
        ClientReplica {
            client_id: client_id.into(),
            problem_id: snapshot.problem_id.clone(),
            blanks: snapshot.blanks.clone(),
            version: snapshot.version,
            next_seq: 1,
            in_flight: None,
            queue: VecDeque::new(),
        }
    }

    pub fn client_id(&self) -> &str {
        &self.client_id
    }

    pub fn problem_id(&self) -> &str {
        &self.problem_id
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn text(&self, blank_id: &str) -> Option<&str> {
        self.blanks.get(blank_id).map(String::as_str)
    }

    pub fn blanks(&self) -> &BTreeMap<String, String> {
        &self.blanks
    }

    /// No unacknowledged local ops.
    pub fn is_idle(&self) -> bool {
        self.in_flight.is_none() && self.queue.is_empty()
    }

    /// Sequence number the next local edit will carry.
    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    pub fn pending_ops(&self) -> usize {
        usize::from(self.in_flight.is_some()) + self.queue.len()
    }

    /// Applies a local edit; returns the op to send now, if any.
    pub fn local_edit(&mut self, blank_id: &str, kind: OpKind) -> Result<Option<EditOp>, SyncError> {
        let text = self
            .blanks
            .get_mut(blank_id)
            .ok_or_else(|| SyncError::UnknownBlank(blank_id.to_owned()))?;
        let op = EditOp {
            client_id: self.client_id.clone(),
            client_seq: self.next_seq,
            problem_id: self.problem_id.clone(),
            blank_id: blank_id.to_owned(),
            kind,
            base_version: self.version,
        };
        op.check_client_op()?;
        apply_kind(text, blank_id, &op.kind)?;
        self.next_seq += 1;
        if self.in_flight.is_none() {
            self.in_flight = Some(op.clone());
            Ok(Some(op))
        } else {
            self.queue.push_back(op);
            Ok(None)
        }
    }

    /// Handles a server broadcast; returns the next op to send when the
    /// broadcast acknowledges the one in flight.
    pub fn receive(&mut self, applied: &AppliedOp) -> Result<Option<EditOp>, SyncError> {
        if applied.version != self.version + 1 {
            return Err(SyncError::VersionGap {
                expected: self.version + 1,
                got: applied.version,
            });
        }
        let own = self
            .in_flight
            .as_ref()
            .is_some_and(|f| f.client_id == applied.op.client_id && f.client_seq == applied.op.client_seq);
        self.version = applied.version;
        if own {
            self.in_flight = self.queue.pop_front().map(|mut next| {
                next.base_version = self.version;
                next
            });
            return Ok(self.in_flight.clone());
        }

        let mut incoming = applied.op.clone();
        if let Some(flight) = self.in_flight.as_mut() {
            let rebased = transform(flight, &incoming);
            incoming = transform(&incoming, flight);
            *flight = rebased;
        }
        for queued in self.queue.iter_mut() {
            let rebased = transform(queued, &incoming);
            incoming = transform(&incoming, queued);
            *queued = rebased;
        }
        let text = self
            .blanks
            .get_mut(&incoming.blank_id)
            .ok_or_else(|| SyncError::UnknownBlank(incoming.blank_id.clone()))?;
        apply_kind(text, &incoming.blank_id, &incoming.kind)?;
        Ok(None)
    }
}
