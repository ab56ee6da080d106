//! Shared domain types: worksheets and their scaffolded problems, participants,
//! chat messages with both feedback taxonomies, grader results and the live
//! per-group [`SessionRoom`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sync::DocumentState;

/// Milliseconds since the Unix epoch, always assigned by the server.
pub type Timestamp = u64;

/// Default cap on students per group.
pub const DEFAULT_MAX_GROUP_SIZE: usize = 7;

pub const BLANK_MARKER_OPEN: &str = "{{blank:";
pub const BLANK_MARKER_CLOSE: &str = "}}";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Worksheet {
    pub id: String,
    pub title: String,
    pub problems: Vec<Problem>,
    pub published: bool,
}

impl Worksheet {
    pub fn problem(&self, problem_id: &str) -> Option<&Problem> {
        self.problems.iter().find(|p| p.id == problem_id)
    }

    /// Problem-level rules plus the worksheet rules (non-empty when
    /// published, unique problem ids).
    pub fn validate(&self) -> Vec<ValidationError> {
        let mut errors = Vec::new();
        if self.id.trim().is_empty() {
            errors.push(ValidationError::new("worksheet.id", "must not be empty"));
        }
        if self.published && self.problems.is_empty() {
            errors.push(ValidationError::new(
                "worksheet.problems",
                "a published worksheet needs at least one problem",
            ));
        }
        let mut seen = BTreeSet::new();
        for problem in &self.problems {
            if !seen.insert(problem.id.as_str()) {
                errors.push(ValidationError::new(
                    "worksheet.problems",
                    format!("duplicate problem id `{}`", problem.id),
                ));
            }
            errors.extend(validate_problem(problem));
        }
        errors
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Problem {
    pub id: String,
    /// Heading text shown in the question selector.
    pub title: String,
    pub prompt_markdown: String,
    pub language_tag: String,
    /// Fixed scaffold; the only editable spans are `{{blank:ID}}` markers.
    pub starter_code: String,
    pub blanks: Vec<BlankRegion>,
    pub tests: Vec<TestCase>,
}

impl Problem {
    pub fn blank(&self, blank_id: &str) -> Option<&BlankRegion> {
        self.blanks.iter().find(|b| b.id == blank_id)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlankRegion {
    pub id: String,
    pub placeholder: String,
    pub initial_text: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestCase {
    pub id: String,
    /// Appended to the rendered solution (after a newline) before running.
    pub program_suffix: String,
    pub expected_stdout: String,
    pub timeout_ms: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Role {
    Student,
    #[serde(rename = "TA")]
    Ta,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Participant {
    pub id: String,
    pub email: String,
    pub role: Role,
    pub display_name: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Channel {
    #[serde(rename = "AITutor")]
    AiTutor,
    #[serde(rename = "TAChat")]
    TaChat,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", content = "id")]
pub enum Author {
    Student(String),
    #[serde(rename = "AI")]
    Ai,
    #[serde(rename = "TA")]
    Ta(String),
    /// Service notices such as "tutor unavailable"; never reviewed or labeled.
    System,
}

impl Author {
    pub fn is_ai(&self) -> bool {
        matches!(self, Author::Ai)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum StudentFeedbackLabel {
    Helpful,
    Unhelpful,
    TooMuchHelp,
    Incorrect,
}

impl StudentFeedbackLabel {
    pub const ALL: [StudentFeedbackLabel; 4] = [
        StudentFeedbackLabel::Helpful,
        StudentFeedbackLabel::Unhelpful,
        StudentFeedbackLabel::TooMuchHelp,
        StudentFeedbackLabel::Incorrect,
    ];
}

impl fmt::Display for StudentFeedbackLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ReviewState {
    #[default]
    Unreviewed,
    Read,
    Endorsed,
    Edited,
}

impl ReviewState {
    pub const REVIEWED: [ReviewState; 3] = [ReviewState::Read, ReviewState::Endorsed, ReviewState::Edited];

    pub fn can_transition_to(self, next: ReviewState) -> bool {
        use ReviewState::*;
        matches!(
            (self, next),
            (Unreviewed, Read | Endorsed | Edited) | (Read, Endorsed | Edited) | (Endorsed, Edited)
        )
    }
}

impl fmt::Display for ReviewState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelEntry {
    pub participant_id: String,
    pub label: StudentFeedbackLabel,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub id: String,
    pub channel: Channel,
    pub author: Author,
    pub body: String,
    pub created_at: Timestamp,
    #[serde(default)]
    pub student_labels: Vec<LabelEntry>,
    #[serde(default)]
    pub review: ReviewState,
    /// Bodies replaced by TA edits, oldest first.
    #[serde(default)]
    pub revisions: Vec<String>,
}

impl ChatMessage {
    pub fn new(id: String, channel: Channel, author: Author, body: String, created_at: Timestamp) -> Self {
        ChatMessage {
            id,
            channel,
            author,
            body,
            created_at,
            student_labels: Vec::new(),
            review: ReviewState::Unreviewed,
            revisions: Vec::new(),
        }
    }

    pub fn label_of(&self, participant_id: &str) -> Option<StudentFeedbackLabel> {
        self.student_labels
            .iter()
            .find(|l| l.participant_id == participant_id)
            .map(|l| l.label)
    }

    /// Insert-or-replace one participant's label.
    pub fn set_label(&mut self, participant_id: &str, label: StudentFeedbackLabel) {
        match self.student_labels.iter_mut().find(|l| l.participant_id == participant_id) {
            Some(entry) => entry.label = label,
            None => self.student_labels.push(LabelEntry {
                participant_id: participant_id.to_owned(),
                label,
            }),
        }
    }

    /// Body as first written, before any TA edit.
    pub fn original_body(&self) -> &str {
        self.revisions.first().map(String::as_str).unwrap_or(&self.body)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TestStatus {
    Pass,
    Fail,
    Error,
    Timeout,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestOutcome {
    pub test_id: String,
    pub status: TestStatus,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraderResult {
    pub id: String,
    pub problem_id: String,
    pub outcomes: Vec<TestOutcome>,
    pub overall_pass: bool,
    pub ran_at: Timestamp,
}

impl GraderResult {
    pub fn new(id: String, problem_id: String, outcomes: Vec<TestOutcome>, ran_at: Timestamp) -> Self {
        let overall_pass = outcomes.iter().all(|o| o.status == TestStatus::Pass);
        GraderResult {
            id,
            problem_id,
            outcomes,
            overall_pass,
            ran_at,
        }
    }
}

/// One group's live session.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionRoom {
    pub id: String,
    pub group_number: u32,
    pub worksheet_id: String,
    /// Students only; TAs watch rooms without occupying a seat.
    pub members: Vec<Participant>,
    /// One document per problem, kept for the room lifetime.
    pub docs: BTreeMap<String, DocumentState>,
    pub selected_problem: String,
    pub ai_chat: Vec<ChatMessage>,
    pub ta_chat: Vec<ChatMessage>,
    pub grader_history: Vec<GraderResult>,
    pub unreviewed_count: u32,
    pub last_activity: Timestamp,
}

impl SessionRoom {
    /// A fresh room with one document per problem at its initial texts.
    /// The worksheet must contain at least one problem.
    pub fn new(id: String, group_number: u32, worksheet: &Worksheet, created_at: Timestamp) -> Self {
        let docs = worksheet
            .problems
            .iter()
            .map(|p| (p.id.clone(), DocumentState::new(p)))
            .collect();
        SessionRoom {
            id,
            group_number,
            worksheet_id: worksheet.id.clone(),
            members: Vec::new(),
            docs,
            selected_problem: worksheet.problems.first().map(|p| p.id.clone()).unwrap_or_default(),
            ai_chat: Vec::new(),
            ta_chat: Vec::new(),
            grader_history: Vec::new(),
            unreviewed_count: 0,
            last_activity: created_at,
        }
    }

    pub fn member(&self, participant_id: &str) -> Option<&Participant> {
        self.members.iter().find(|m| m.id == participant_id)
    }

    pub fn ai_message(&self, message_id: &str) -> Option<&ChatMessage> {
        self.ai_chat.iter().find(|m| m.id == message_id)
    }

    pub fn ai_message_mut(&mut self, message_id: &str) -> Option<&mut ChatMessage> {
        self.ai_chat.iter_mut().find(|m| m.id == message_id)
    }

    pub fn find_message(&self, message_id: &str) -> Option<&ChatMessage> {
        self.ai_chat
            .iter()
            .chain(self.ta_chat.iter())
            .find(|m| m.id == message_id)
    }

    /// Unreviewed AI messages counted from the transcript, independent of
    /// the maintained counter.
    pub fn recount_unreviewed(&self) -> u32 {
        self.ai_chat
            .iter()
            .filter(|m| m.author.is_ai() && m.review == ReviewState::Unreviewed)
            .count() as u32
    }

    pub fn latest_grader_result(&self, problem_id: &str) -> Option<&GraderResult> {
        self.grader_history.iter().rev().find(|r| r.problem_id == problem_id)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize, Error)]
#[error("{field}: {rule}")]
pub struct ValidationError {
    pub field: String,
    pub rule: String,
}

impl ValidationError {
    pub fn new(field: impl Into<String>, rule: impl Into<String>) -> Self {
        ValidationError {
            field: field.into(),
            rule: rule.into(),
        }
    }
}

/// A `{{blank:ID}}` occurrence in starter code, with its byte range.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlankMarker {
    pub id: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum MarkerError {
    #[error("unterminated blank marker at byte {0}")]
    Unterminated(usize),
    #[error("blank marker at byte {0} has an invalid id `{1}`")]
    InvalidId(usize, String),
}

pub fn is_valid_blank_id(id: &str) -> bool {
    !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

/// Blank markers of `starter` in order of appearance.
pub fn blank_markers(starter: &str) -> Result<Vec<BlankMarker>, MarkerError> {
    let mut markers = Vec::new();
    let mut offset = 0;
    while let Some(found) = starter[offset..].find(BLANK_MARKER_OPEN) {
        let start = offset + found;
        let id_start = start + BLANK_MARKER_OPEN.len();
        let close = starter[id_start..]
            .find(BLANK_MARKER_CLOSE)
            .ok_or(MarkerError::Unterminated(start))?;
        let id = &starter[id_start..id_start + close];
        if !is_valid_blank_id(id) {
            return Err(MarkerError::InvalidId(start, id.to_owned()));
        }
        let end = id_start + close + BLANK_MARKER_CLOSE.len();
        markers.push(BlankMarker {
            id: id.to_owned(),
            start,
            end,
        });
        offset = end;
    }
    Ok(markers)
}

/// All violated Problem invariants; empty when the problem is well formed.
pub fn validate_problem(problem: &Problem) -> Vec<ValidationError> {
    let field = |name: &str| format!("problem `{}`.{name}", problem.id);
    let mut errors = Vec::new();

    if problem.id.trim().is_empty() {
        errors.push(ValidationError::new("problem.id", "must not be empty"));
    }
    if problem.language_tag.trim().is_empty() {
        errors.push(ValidationError::new(field("language_tag"), "must not be empty"));
    }

    let mut ids = BTreeSet::new();
    for blank in &problem.blanks {
        if !is_valid_blank_id(&blank.id) {
            errors.push(ValidationError::new(
                field("blanks"),
                format!("blank id `{}` must be non-empty and use only [A-Za-z0-9_-]", blank.id),
            ));
        }
        if !ids.insert(blank.id.as_str()) {
            errors.push(ValidationError::new(
                field("blanks"),
                format!("duplicate blank id `{}`", blank.id),
            ));
        }
    }

    match blank_markers(&problem.starter_code) {
        Err(e) => errors.push(ValidationError::new(field("starter_code"), e.to_string())),
        Ok(markers) => {
            if markers.len() != problem.blanks.len() {
                errors.push(ValidationError::new(
                    field("blanks"),
                    format!(
                        "starter_code has {} blank marker(s) but {} blank region(s) are declared",
                        markers.len(),
                        problem.blanks.len()
                    ),
                ));
            } else if let Some((marker, blank)) = markers
                .iter()
                .zip(&problem.blanks)
                .find(|(m, b)| m.id != b.id)
            {
                errors.push(ValidationError::new(
                    field("blanks"),
                    format!(
                        "blank regions must follow marker order: marker `{}` paired with region `{}`",
                        marker.id, blank.id
                    ),
                ));
            }
        }
    }

    let mut test_ids = BTreeSet::new();
    for test in &problem.tests {
        if test.id.trim().is_empty() {
            errors.push(ValidationError::new(field("tests"), "test id must not be empty"));
        }
        if !test_ids.insert(test.id.as_str()) {
            errors.push(ValidationError::new(
                field("tests"),
                format!("duplicate test id `{}`", test.id),
            ));
        }
        if test.timeout_ms < 1 {
            errors.push(ValidationError::new(
                field("tests"),
                format!("test `{}` timeout_ms must be at least 1", test.id),
            ));
        }
    }
    errors
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum RenderError {
    #[error("document has no text for blank `{0}`")]
    MissingBlank(String),
    #[error(transparent)]
    Marker(#[from] MarkerError),
}

/// Starter code with every blank marker replaced by that blank's current
/// text; everything else is copied byte for byte.
pub fn render_solution(problem: &Problem, doc: &DocumentState) -> Result<String, RenderError> {
    let markers = blank_markers(&problem.starter_code)?;
    let starter = &problem.starter_code;
    let mut out = String::with_capacity(starter.len());
    let mut cursor = 0;
    for marker in markers {
        let text = doc
            .text(&marker.id)
            .ok_or_else(|| RenderError::MissingBlank(marker.id.clone()))?;
        out.push_str(&starter[cursor..marker.start]);
        out.push_str(text);
        cursor = marker.end;
    }
    out.push_str(&starter[cursor..]);
    Ok(out)
}
