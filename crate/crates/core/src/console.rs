//! TA console: room prioritization, message review and usage metrics.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    Author, Channel, ChatMessage, Participant, ReviewState, Role, SessionRoom, StudentFeedbackLabel, Timestamp,
};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConsoleError {
    #[error("only TAs may use the console")]
    NotTa,
    #[error("message `{0}` not found")]
    UnknownMessage(String),
    #[error("only AI tutor messages can be reviewed")]
    NotAiMessage,
    #[error("cannot move a message from {from} to {to}")]
    InvalidTransition { from: ReviewState, to: ReviewState },
    #[error("message body must not be empty")]
    EmptyBody,
}

/// What a TA does to an AI message.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum ReviewAction {
    Read,
    Endorse,
    Edit { new_body: String },
}

impl ReviewAction {
    pub fn target(&self) -> ReviewState {
        match self {
            ReviewAction::Read => ReviewState::Read,
            ReviewAction::Endorse => ReviewState::Endorsed,
            ReviewAction::Edit { .. } => ReviewState::Edited,
        }
    }
}

/// One row of the TA room list.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoomSummary {
    pub room_id: String,
    pub group_number: u32,
    pub worksheet_id: String,
    pub unreviewed_count: u32,
    pub last_activity: Timestamp,
    pub member_count: usize,
    pub selected_problem: String,
    /// Overall result of the latest grader run, if any.
    pub last_grader_pass: Option<bool>,
}

pub fn summarize(room: &SessionRoom) -> RoomSummary {
    RoomSummary {
        room_id: room.id.clone(),
        group_number: room.group_number,
        worksheet_id: room.worksheet_id.clone(),
        unreviewed_count: room.unreviewed_count,
        last_activity: room.last_activity,
        member_count: room.members.len(),
        selected_problem: room.selected_problem.clone(),
        last_grader_pass: room.grader_history.last().map(|r| r.overall_pass),
    }
}

/// Rooms with unread AI messages first, then most recent activity, then id.
pub fn room_order(a: &RoomSummary, b: &RoomSummary) -> Ordering {
    (b.unreviewed_count > 0)
        .cmp(&(a.unreviewed_count > 0))
        .then(b.last_activity.cmp(&a.last_activity))
        .then_with(|| a.room_id.cmp(&b.room_id))
}

pub fn sort_summaries(rooms: &mut [RoomSummary]) {
    rooms.sort_by(room_order);
}

pub fn list_rooms<'a>(
    ta: &Participant,
    rooms: impl IntoIterator<Item = &'a SessionRoom>,
) -> Result<Vec<RoomSummary>, ConsoleError> {
    require_ta(ta)?;
    let mut out: Vec<RoomSummary> = rooms.into_iter().map(summarize).collect();
    sort_summaries(&mut out);
    Ok(out)
}

fn require_ta(p: &Participant) -> Result<(), ConsoleError> {
    if p.role == Role::Ta {
        Ok(())
    } else {
        Err(ConsoleError::NotTa)
    }
}

/// Validates a review against the message's current state.
pub fn check_review(message: &ChatMessage, action: &ReviewAction) -> Result<(), ConsoleError> {
    if !message.author.is_ai() {
        return Err(ConsoleError::NotAiMessage);
    }
    if let ReviewAction::Edit { new_body } = action {
        if new_body.trim().is_empty() {
            return Err(ConsoleError::EmptyBody);
        }
    }
    let to = action.target();
    if !message.review.can_transition_to(to) {
        return Err(ConsoleError::InvalidTransition {
            from: message.review,
            to,
        });
    }
    Ok(())
}

/// Applies a review to the room, keeping the unread counter in step.
pub fn apply_review(room: &mut SessionRoom, message_id: &str, action: &ReviewAction) -> Result<ChatMessage, ConsoleError> {
    let message = room
        .ai_message_mut(message_id)
        .ok_or_else(|| ConsoleError::UnknownMessage(message_id.to_owned()))?;
    check_review(message, action)?;
    let was_unread = message.review == ReviewState::Unreviewed;
    if let ReviewAction::Edit { new_body } = action {
        let old = std::mem::replace(&mut message.body, new_body.clone());
        message.revisions.push(old);
    }
    message.review = action.target();
    let updated = message.clone();
    if was_unread {
        room.unreviewed_count = room.unreviewed_count.saturating_sub(1);
    }
    Ok(updated)
}

pub fn review_message(
    ta: &Participant,
    room: &mut SessionRoom,
    message_id: &str,
    action: &ReviewAction,
) -> Result<ChatMessage, ConsoleError> {
    require_ta(ta)?;
    apply_review(room, message_id, action)
}

/// Builds a TA chat message; the caller assigns id and time.
pub fn ta_chat_message(ta: &Participant, id: String, body: &str, at: Timestamp) -> Result<ChatMessage, ConsoleError> {
    require_ta(ta)?;
    if body.trim().is_empty() {
        return Err(ConsoleError::EmptyBody);
    }
    Ok(ChatMessage::new(id, Channel::TaChat, Author::Ta(ta.id.clone()), body.to_owned(), at))
}

pub fn ta_send_chat(
    ta: &Participant,
    room: &mut SessionRoom,
    id: String,
    body: &str,
    at: Timestamp,
) -> Result<ChatMessage, ConsoleError> {
    let message = ta_chat_message(ta, id, body, at)?;
    room.ta_chat.push(message.clone());
    room.last_activity = room.last_activity.max(at);
    Ok(message)
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricsOptions {
    /// Sections (worksheet ids) where labeling was not offered; their AI
    /// messages are excluded from the label rate denominator.
    #[serde(default)]
    pub unlabelable_sections: BTreeSet<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuestionStats {
    pub groups: usize,
    pub total: u64,
    pub mean: f64,
    pub median: f64,
    /// Questions asked → number of groups that asked that many.
    pub histogram: BTreeMap<u64, u64>,
}

impl QuestionStats {
    fn from_counts(mut counts: Vec<u64>) -> Self {
        counts.sort_unstable();
        let groups = counts.len();
        let total: u64 = counts.iter().sum();
        let mean = if groups == 0 { 0.0 } else { total as f64 / groups as f64 };
        let median = match groups {
            0 => 0.0,
            n if n % 2 == 1 => counts[n / 2] as f64,
            n => (counts[n / 2 - 1] + counts[n / 2]) as f64 / 2.0,
        };
        let mut histogram = BTreeMap::new();
        for c in &counts {
            *histogram.entry(*c).or_default() += 1;
        }
        QuestionStats {
            groups,
            total,
            mean,
            median,
            histogram,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SectionMetrics {
    pub section: String,
    pub sessions: usize,
    pub student_questions: QuestionStats,
    pub ai_messages: u64,
    pub labelable_ai_messages: u64,
    pub labeled_messages: u64,
    pub labels: BTreeMap<StudentFeedbackLabel, u64>,
    pub label_rate: f64,
    pub reviews: BTreeMap<ReviewState, u64>,
    pub reviewed_messages: u64,
    pub reviewed_fraction: f64,
    pub ta_chat_messages: u64,
    pub sessions_with_ta_chat: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub sections: Vec<SectionMetrics>,
    pub overall: SectionMetrics,
}

fn ratio(n: u64, d: u64) -> f64 {
    if d == 0 {
        0.0
    } else {
        n as f64 / d as f64
    }
}

fn section_metrics(section: &str, rooms: &[&SessionRoom], opts: &MetricsOptions) -> SectionMetrics {
    let mut labels: BTreeMap<StudentFeedbackLabel, u64> = StudentFeedbackLabel::ALL.iter().map(|l| (*l, 0)).collect();
    let mut reviews: BTreeMap<ReviewState, u64> = ReviewState::REVIEWED.iter().map(|s| (*s, 0)).collect();
    let mut question_counts = Vec::with_capacity(rooms.len());
    let (mut ai, mut labelable, mut labeled, mut reviewed, mut ta_msgs, mut with_ta) = (0u64, 0u64, 0u64, 0u64, 0u64, 0usize);

    for room in rooms {
        let mut questions = 0u64;
        for m in &room.ai_chat {
            match m.author {
                Author::Student(_) => questions += 1,
                Author::Ai => {
                    ai += 1;
                    if !opts.unlabelable_sections.contains(&room.worksheet_id) {
                        labelable += 1;
                    }
                    if !m.student_labels.is_empty() {
                        labeled += 1;
                    }
                    for l in &m.student_labels {
                        *labels.entry(l.label).or_default() += 1;
                    }
                    if m.review != ReviewState::Unreviewed {
                        reviewed += 1;
                        *reviews.entry(m.review).or_default() += 1;
                    }
                }
                Author::Ta(_) | Author::System => {}
            }
        }
        question_counts.push(questions);
        ta_msgs += room.ta_chat.len() as u64;
        if !room.ta_chat.is_empty() {
            with_ta += 1;
        }
    }

    SectionMetrics {
        section: section.to_owned(),
        sessions: rooms.len(),
        student_questions: QuestionStats::from_counts(question_counts),
        ai_messages: ai,
        labelable_ai_messages: labelable,
        labeled_messages: labeled,
        labels,
        label_rate: ratio(labeled, labelable),
        reviews,
        reviewed_messages: reviewed,
        reviewed_fraction: ratio(reviewed, ai),
        ta_chat_messages: ta_msgs,
        sessions_with_ta_chat: with_ta,
    }
}

/// Usage metrics per section and overall. Each room is one session.
pub fn metrics_summary<'a>(rooms: impl IntoIterator<Item = &'a SessionRoom>, opts: &MetricsOptions) -> MetricsReport {
    let all: Vec<&SessionRoom> = rooms.into_iter().collect();
    let mut by_section: BTreeMap<&str, Vec<&SessionRoom>> = BTreeMap::new();
    for room in &all {
        by_section.entry(room.worksheet_id.as_str()).or_default().push(room);
    }
    MetricsReport {
        sections: by_section
            .iter()
            .map(|(section, rooms)| section_metrics(section, rooms, opts))
            .collect(),
        overall: section_metrics("all", &all, opts),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Worksheet;

    fn ta() -> Participant {
        Participant {
            id: "ta".into(),
            email: "ta@u.edu".into(),
            role: Role::Ta,
            display_name: "TA".into(),
        }
    }

    fn empty_room(id: &str, unread: u32, last: Timestamp) -> SessionRoom {
        let w = Worksheet {
            id: "w".into(),
            title: "W".into(),
            problems: vec![],
            published: true,
        };
        let mut r = SessionRoom::new(id.into(), 1, &w, last);
        r.unreviewed_count = unread;
        r
    }

    #[test]
    fn ordering_example() {
        let rooms = [
            empty_room("A", 0, 100),
            empty_room("B", 2, 50),
            empty_room("C", 1, 200),
            empty_room("D", 0, 300),
        ];
        let order: Vec<_> = list_rooms(&ta(), rooms.iter()).unwrap().into_iter().map(|s| s.room_id).collect();
        assert_eq!(order, ["C", "B", "D", "A"]);
    }

    #[test]
    fn students_cannot_list() {
        let mut p = ta();
        p.role = Role::Student;
        assert_eq!(list_rooms(&p, std::iter::empty()), Err(ConsoleError::NotTa));
    }

    fn room_with_ai() -> SessionRoom {
        let mut r = empty_room("r", 0, 0);
        r.ai_chat.push(ChatMessage::new("q".into(), Channel::AiTutor, Author::Student("s".into()), "?".into(), 1));
        r.ai_chat.push(ChatMessage::new("a".into(), Channel::AiTutor, Author::Ai, "hint".into(), 2));
        r.unreviewed_count = 1;
        r
    }

    #[test]
    fn review_transitions() {
        let mut r = room_with_ai();
        review_message(&ta(), &mut r, "a", &ReviewAction::Endorse).unwrap();
        assert_eq!(r.unreviewed_count, 0);
        assert_eq!(
            review_message(&ta(), &mut r, "a", &ReviewAction::Read),
            Err(ConsoleError::InvalidTransition {
                from: ReviewState::Endorsed,
                to: ReviewState::Read
            })
        );
        let m = review_message(&ta(), &mut r, "a", &ReviewAction::Edit { new_body: "better".into() }).unwrap();
        assert_eq!(m.body, "better");
        assert_eq!(m.original_body(), "hint");
        assert_eq!(r.unreviewed_count, 0);
        assert_eq!(r.recount_unreviewed(), 0);
        assert_eq!(
            review_message(&ta(), &mut r, "q", &ReviewAction::Read),
            Err(ConsoleError::NotAiMessage)
        );
    }

    #[test]
    fn edited_is_terminal() {
        let mut r = room_with_ai();
        review_message(&ta(), &mut r, "a", &ReviewAction::Edit { new_body: "v2".into() }).unwrap();
        let again = review_message(&ta(), &mut r, "a", &ReviewAction::Edit { new_body: "v3".into() });
        assert!(matches!(again, Err(ConsoleError::InvalidTransition { .. })));
        assert_eq!(r.ai_chat[1].revisions, ["hint"]);
        assert_eq!(r.ai_chat[1].body, "v2");
    }

    #[test]
    fn ta_chat_lands_in_ta_channel() {
        let mut r = room_with_ai();
        let m = ta_send_chat(&ta(), &mut r, "t".into(), "hello", 9).unwrap();
        assert_eq!(m.channel, Channel::TaChat);
        assert_eq!(r.ta_chat.len(), 1);
        assert_eq!(r.ai_chat.len(), 2);
        assert_eq!(r.unreviewed_count, 1);
    }

    #[test]
    fn median_and_histogram() {
        let s = QuestionStats::from_counts(vec![3, 1, 4, 1]);
        assert_eq!(s.median, 2.0);
        assert_eq!(s.mean, 2.25);
        assert_eq!(s.histogram, BTreeMap::from([(1, 2), (3, 1), (4, 1)]));
    }
}
