//! Fixture replay: scripted sections pushed through the hub's frame
//! dispatch, then compared against the fixture's expected metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::clock::VirtualClock;
use crate::console::{MetricsOptions, MetricsReport, ReviewAction};
use crate::grader::echo_script::InProcess;
use crate::model::{ReviewState, StudentFeedbackLabel, Worksheet};
use crate::server::events::{MemoryStore, Recovery};
use crate::server::hub::{Hub, HubConfig, HubDeps, QueueOutbox};
use crate::server::protocol::{decode_server, encode_client, ClientMessage, ServerMessage};
use crate::tutor::ScriptedMock;

use super::run::SIM_EPOCH_MS;
use super::scenario::ReviewKind;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fixture {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub sections: Vec<FixtureSection>,
    pub expected: Expected,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureSection {
    /// Becomes the section's worksheet id.
    pub id: String,
    #[serde(default = "yes")]
    pub labels_enabled: bool,
    pub groups: Vec<FixtureGroup>,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureGroup {
    pub group: u32,
    pub students: u32,
    #[serde(default)]
    pub script: Vec<Step>,
}

/// One scripted action. Students are numbered from 0 within the group;
/// `ai` indexes the group's AI replies in order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "do", rename_all = "snake_case", deny_unknown_fields)]
pub enum Step {
    Ask {
        student: u32,
        #[serde(default = "one")]
        count: u32,
    },
    Label {
        student: u32,
        ai: usize,
        label: StudentFeedbackLabel,
    },
    Review {
        ai: usize,
        action: ReviewKind,
        #[serde(default)]
        body: Option<String>,
    },
    TaChat {
        body: String,
    },
    StudentTaChat {
        student: u32,
        body: String,
    },
    Check {
        student: u32,
    },
}

fn one() -> u32 {
    1
}

/// Expected overall metrics. Counts are exact; fractions, when given, must
/// match the recomputed ratio to 1e-9.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expected {
    pub sessions: u64,
    pub ai_messages: u64,
    pub labelable_ai_messages: u64,
    pub labeled_messages: u64,
    pub labels: BTreeMap<StudentFeedbackLabel, u64>,
    pub reviewed_messages: u64,
    pub reviews: BTreeMap<ReviewState, u64>,
    pub sessions_with_ta_chat: u64,
    #[serde(default)]
    pub reviewed_fraction: Option<f64>,
    #[serde(default)]
    pub label_rate: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mismatch {
    pub field: String,
    pub expected: String,
    pub actual: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayOutcome {
    pub fixture: String,
    pub events_logged: u64,
    pub metrics: MetricsReport,
    pub mismatches: Vec<Mismatch>,
    /// Error frames the hub sent while replaying; a well-formed fixture has none.
    pub rejected: Vec<String>,
    pub passed: bool,
}

impl ReplayOutcome {
    pub fn summary(&self) -> String {
        let o = &self.metrics.overall;
        let mut out = format!(
            "fixture {}: {} sessions, {} AI messages, {} labeled, {} reviewed ({:.4})\n",
            self.fixture, o.sessions, o.ai_messages, o.labeled_messages, o.reviewed_messages, o.reviewed_fraction
        );
        for m in &self.mismatches {
            out.push_str(&format!("MISMATCH {}: expected {}, got {}\n", m.field, m.expected, m.actual));
        }
        for r in &self.rejected {
            out.push_str(&format!("REJECTED {r}\n"));
        }
        out.push_str(if self.passed { "PASS\n" } else { "FAIL\n" });
        out
    }
}

#[derive(Debug, thiserror::Error)]
pub enum FixtureError {
    #[error("cannot read {0}: {1}")]
    Io(String, std::io::Error),
    #[error("malformed fixture: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid fixture: {0}")]
    Invalid(String),
}

impl Fixture {
    pub fn parse(text: &str) -> Result<Self, FixtureError> {
        let fixture: Fixture = serde_json::from_str(text)?;
        fixture.validate()?;
        Ok(fixture)
    }

    pub fn load(path: &Path) -> Result<Self, FixtureError> {
        let text = std::fs::read_to_string(path).map_err(|e| FixtureError::Io(path.display().to_string(), e))?;
        Fixture::parse(&text)
    }

    /// Structural checks that do not need a hub: unique ids, students in
    /// range, AI references to replies that exist by then.
    pub fn validate(&self) -> Result<(), FixtureError> {
        let invalid = |m: String| Err(FixtureError::Invalid(m));
        let mut sections = BTreeSet::new();
        for section in &self.sections {
            if section.id.trim().is_empty() || !sections.insert(&section.id) {
                return invalid(format!("section id `{}` is empty or repeated", section.id));
            }
            let mut groups = BTreeSet::new();
            for group in &section.groups {
                let at = format!("{} group {}", section.id, group.group);
                if !groups.insert(group.group) {
                    return invalid(format!("{at}: repeated group"));
                }
                if group.students == 0 || group.students as usize > crate::model::DEFAULT_MAX_GROUP_SIZE {
                    return invalid(format!("{at}: students must be 1..={}", crate::model::DEFAULT_MAX_GROUP_SIZE));
                }
                let mut replies = 0usize;
                for (i, step) in group.script.iter().enumerate() {
                    let student_ok = |s: u32| s < group.students;
                    let ok = match step {
                        Step::Ask { student, count } => {
                            replies += *count as usize;
                            student_ok(*student)
                        }
                        Step::Label { student, ai, .. } => student_ok(*student) && *ai < replies && section.labels_enabled,
                        Step::Review { ai, .. } => *ai < replies,
                        Step::StudentTaChat { student, .. } | Step::Check { student } => student_ok(*student),
                        Step::TaChat { .. } => true,
                    };
                    if !ok {
                        return invalid(format!("{at}: step {i} refers to a missing student or reply, or labels a section without labels"));
                    }
                }
            }
        }
        Ok(())
    }
}

const TA_EMAIL: &str = "ta@fixture.test";

fn section_worksheet(id: &str) -> Worksheet {
    let mut w = super::demo_worksheet();
    w.id = id.to_owned();
    w.title = id.to_owned();
    w
}

struct Driver {
    hub: Hub,
    outbox: Arc<QueueOutbox>,
    clock: Arc<VirtualClock>,
    backend: ScriptedMock,
    ta_token: String,
    rejected: Vec<String>,
}

impl Driver {
    fn frame(&mut self, token: &str, message: &ClientMessage, context: &str) {
        self.clock.advance_by(1_000);
        let effects = self.hub.handle_frame(token, &encode_client(message)).unwrap_or_else(|e| {
            self.rejected.push(format!("{context}: {e}"));
            Vec::new()
        });
        for effect in effects {
            self.clock.advance_by(1_000);
            self.hub.run_effect(effect, &self.backend, &InProcess);
        }
        for (_, frame) in self.outbox.drain() {
            if let Ok(ServerMessage::Error { code, message, .. }) = decode_server(&frame) {
                self.rejected.push(format!("{context}: {code:?}: {message}"));
            }
        }
    }
}

/// Replays every section and compares the overall metrics with the
/// fixture's expectations.
pub fn replay_fixture(fixture: &Fixture) -> ReplayOutcome {
    let worksheets: BTreeMap<String, Arc<Worksheet>> = fixture
        .sections
        .iter()
        .map(|s| (s.id.clone(), Arc::new(section_worksheet(&s.id))))
        .collect();
    let first = fixture.sections.first().map(|s| s.id.clone()).unwrap_or_else(|| "none".into());
    let mut config = HubConfig::new(first);
    config.ta_allowlist = BTreeSet::from([TA_EMAIL.to_owned()]);
    config.sequential_tokens = true;
    let clock = Arc::new(VirtualClock::new(SIM_EPOCH_MS));
    let outbox = Arc::new(QueueOutbox::new());
    let hub = Hub::new(
        config,
        HubDeps {
            clock: clock.clone(),
            worksheets: Arc::new(worksheets),
            outbox: outbox.clone(),
            verifier: None,
            snapshots: None,
        },
        Box::new(MemoryStore::new()),
        Recovery::default(),
    );
    let ta_token = hub.join(TA_EMAIL, None).expect("TA join").token;
    let mut driver = Driver {
        hub,
        outbox,
        clock,
        backend: ScriptedMock::default(),
        ta_token,
        rejected: Vec::new(),
    };

    let mut question = 0u64;
    for section in &fixture.sections {
        driver.hub.set_active_worksheet(&section.id);
        for group in &section.groups {
            let at = format!("{} group {}", section.id, group.group);
            let mut students = Vec::new();
            let mut room_id = String::new();
            for k in 0..group.students {
                let email = format!("{}-g{}-s{k}@fixture.test", section.id, group.group);
                match driver.hub.join(&email, Some(group.group)) {
                    Ok(joined) => {
                        room_id = joined.room_id.unwrap_or_default();
                        students.push(joined.token);
                    }
                    Err(e) => driver.rejected.push(format!("{at}: join {email}: {e}")),
                }
            }
            if students.len() != group.students as usize {
                continue;
            }
            let mut replies: Vec<String> = Vec::new();
            for (i, step) in group.script.iter().enumerate() {
                let context = format!("{at} step {i}");
                let student = |s: &u32| students[*s as usize].clone();
                match step {
                    Step::Ask { student: s, count } => {
                        for _ in 0..*count {
                            question += 1;
                            let body = format!("question {question}: what should this blank contain?");
                            driver.frame(&student(s), &ClientMessage::Ask { body }, &context);
                            replies.push(format!("m{}", driver.hub.last_seq()));
                        }
                    }
                    Step::Label { student: s, ai, label } => {
                        let message = ClientMessage::Label {
                            message_id: replies[*ai].clone(),
                            label: *label,
                        };
                        driver.frame(&student(s), &message, &context);
                    }
                    Step::Review { ai, action, body } => {
                        let action = match action {
                            ReviewKind::Read => ReviewAction::Read,
                            ReviewKind::Endorse => ReviewAction::Endorse,
                            ReviewKind::Edit => ReviewAction::Edit {
                                new_body: body.clone().unwrap_or_else(|| "Edited by the TA.".into()),
                            },
                        };
                        let message = ClientMessage::Review {
                            room_id: Some(room_id.clone()),
                            message_id: replies[*ai].clone(),
                            action,
                        };
                        let ta = driver.ta_token.clone();
                        driver.frame(&ta, &message, &context);
                    }
                    Step::TaChat { body } => {
                        let message = ClientMessage::TaChat {
                            room_id: Some(room_id.clone()),
                            body: body.clone(),
                        };
                        let ta = driver.ta_token.clone();
                        driver.frame(&ta, &message, &context);
                    }
                    Step::StudentTaChat { student: s, body } => {
                        let message = ClientMessage::TaChat {
                            room_id: None,
                            body: body.clone(),
                        };
                        driver.frame(&student(s), &message, &context);
                    }
                    Step::Check { student: s } => {
                        driver.frame(&student(s), &ClientMessage::CheckAnswer { problem_id: None }, &context);
                    }
                }
            }
        }
    }

    let options = MetricsOptions {
        unlabelable_sections: fixture
            .sections
            .iter()
            .filter(|s| !s.labels_enabled)
            .map(|s| s.id.clone())
            .collect(),
    };
    let metrics = driver.hub.metrics(&options);
    let mismatches = compare(&fixture.expected, &metrics);
    let passed = mismatches.is_empty() && driver.rejected.is_empty();
    ReplayOutcome {
        fixture: fixture.name.clone(),
        events_logged: driver.hub.last_seq(),
        metrics,
        mismatches,
        rejected: driver.rejected,
        passed,
    }
}

fn compare(expected: &Expected, metrics: &MetricsReport) -> Vec<Mismatch> {
    let o = &metrics.overall;
    let mut out = Vec::new();
    let mut check = |field: &str, e: String, a: String| {
        if e != a {
            out.push(Mismatch {
                field: field.to_owned(),
                expected: e,
                actual: a,
            });
        }
    };
    check("sessions", expected.sessions.to_string(), o.sessions.to_string());
    check("ai_messages", expected.ai_messages.to_string(), o.ai_messages.to_string());
    check(
        "labelable_ai_messages",
        expected.labelable_ai_messages.to_string(),
        o.labelable_ai_messages.to_string(),
    );
    check("labeled_messages", expected.labeled_messages.to_string(), o.labeled_messages.to_string());
    check("reviewed_messages", expected.reviewed_messages.to_string(), o.reviewed_messages.to_string());
    check(
        "sessions_with_ta_chat",
        expected.sessions_with_ta_chat.to_string(),
        o.sessions_with_ta_chat.to_string(),
    );
    for label in StudentFeedbackLabel::ALL {
        let e = expected.labels.get(&label).copied().unwrap_or(0);
        let a = o.labels.get(&label).copied().unwrap_or(0);
        check(&format!("labels.{label}"), e.to_string(), a.to_string());
    }
    for state in ReviewState::REVIEWED {
        let e = expected.reviews.get(&state).copied().unwrap_or(0);
        let a = o.reviews.get(&state).copied().unwrap_or(0);
        check(&format!("reviews.{state}"), e.to_string(), a.to_string());
    }
    for (field, e, a) in [
        ("reviewed_fraction", expected.reviewed_fraction, o.reviewed_fraction),
        ("label_rate", expected.label_rate, o.label_rate),
    ] {
        if let Some(e) = e {
            if (e - a).abs() > 1e-9 {
                check(field, format!("{e}"), format!("{a}"));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Fixture {
        Fixture::parse(
            r#"{
              "name": "tiny",
              "sections": [{"id": "w1", "groups": [{"group": 1, "students": 2, "script": [
                {"do": "ask", "student": 0, "count": 3},
                {"do": "label", "student": 0, "ai": 0, "label": "Helpful"},
                {"do": "label", "student": 1, "ai": 0, "label": "Incorrect"},
                {"do": "label", "student": 1, "ai": 2, "label": "TooMuchHelp"},
                {"do": "review", "ai": 1, "action": "Read"},
                {"do": "review", "ai": 1, "action": "Edit", "body": "better"},
                {"do": "ta_chat", "body": "hi"},
                {"do": "student_ta_chat", "student": 1, "body": "hello"}
              ]}]}],
              "expected": {"sessions": 1, "ai_messages": 3, "labelable_ai_messages": 3, "labeled_messages": 2,
                "labels": {"Helpful": 1, "Incorrect": 1, "TooMuchHelp": 1},
                "reviewed_messages": 1, "reviews": {"Edited": 1}, "sessions_with_ta_chat": 1,
                "reviewed_fraction": 0.3333333333333333}
            }"#,
        )
        .unwrap()
    }

    #[test]
    fn tiny_fixture_replays() {
        let outcome = replay_fixture(&tiny());
        assert!(outcome.passed, "{}", outcome.summary());
        assert_eq!(outcome.metrics.overall.ta_chat_messages, 2);
    }

    #[test]
    fn mismatch_is_reported() {
        let mut f = tiny();
        f.expected.labels.insert(StudentFeedbackLabel::Helpful, 2);
        let outcome = replay_fixture(&f);
        assert!(!outcome.passed);
        assert_eq!(outcome.mismatches.len(), 1);
        assert_eq!(outcome.mismatches[0].field, "labels.Helpful");
    }

    #[test]
    fn hub_rejections_fail_the_replay() {
        let mut f = tiny();
        // Edited is terminal, so a second edit is refused by the hub.
        f.sections[0].groups[0].script.push(Step::Review {
            ai: 1,
            action: ReviewKind::Read,
            body: None,
        });
        let outcome = replay_fixture(&f);
        assert!(!outcome.passed);
        assert_eq!(outcome.rejected.len(), 1, "{:?}", outcome.rejected);
    }

    #[test]
    fn empty_fixture_has_zero_tallies() {
        let f = Fixture::parse(r#"{"name": "empty", "sections": [], "expected": {"sessions": 0, "ai_messages": 0, "labelable_ai_messages": 0, "labeled_messages": 0, "labels": {}, "reviewed_messages": 0, "reviews": {}, "sessions_with_ta_chat": 0}}"#).unwrap();
        let outcome = replay_fixture(&f);
        assert!(outcome.passed, "{}", outcome.summary());
        assert!(outcome.metrics.overall.labels.values().all(|n| *n == 0));
    }

    #[test]
    fn validation_catches_bad_references() {
        let bad = r#"{"name": "x", "sections": [{"id": "w", "groups": [{"group": 1, "students": 1, "script": [{"do": "label", "student": 0, "ai": 0, "label": "Helpful"}]}]}], "expected": {"sessions": 0, "ai_messages": 0, "labelable_ai_messages": 0, "labeled_messages": 0, "labels": {}, "reviewed_messages": 0, "reviews": {}, "sessions_with_ta_chat": 0}}"#;
        assert!(matches!(Fixture::parse(bad), Err(FixtureError::Invalid(_))));
        let unknown = bad.replace("\"label\", \"student\"", "\"dance\", \"student\"");
        assert!(matches!(Fixture::parse(&unknown), Err(FixtureError::Parse(_))));
    }
}
