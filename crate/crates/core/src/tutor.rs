//! AI tutor gateway: per-query context assembly, pluggable backends, and the
//! student feedback labels on AI replies.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{
    render_solution, Author, GraderResult, RenderError, SessionRoom, StudentFeedbackLabel, TestStatus, Worksheet,
};

/// Shipped hint-only policy; deployments may point `prompt_file` elsewhere.
pub const DEFAULT_SYSTEM_PROMPT: &str = include_str!("../config/system_prompt.txt");
pub const DEFAULT_MAX_TURNS: usize = 20;
pub const DEFAULT_BACKEND_TIMEOUT: Duration = Duration::from_secs(60);
/// Detail lines kept per test in the grader summary.
pub const GRADER_DETAIL_LINES: usize = 20;
/// Body of the notice appended when the backend fails.
pub const UNAVAILABLE_NOTICE: &str = "The tutor is unavailable right now. Please try again in a moment.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Speaker {
    Student,
    #[serde(rename = "AI")]
    Ai,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub body: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TutorContext {
    pub system_prompt: String,
    pub turns: Vec<Turn>,
    pub question_block: String,
    pub solution_block: String,
    /// Present only once the group has graded the selected problem.
    pub grader_block: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContextPolicy {
    pub system_prompt: String,
    pub max_turns: usize,
}

impl Default for ContextPolicy {
    fn default() -> Self {
        ContextPolicy {
            system_prompt: DEFAULT_SYSTEM_PROMPT.to_owned(),
            max_turns: DEFAULT_MAX_TURNS,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TutorError {
    #[error("problem `{0}` is not part of the worksheet")]
    UnknownProblem(String),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error("message `{0}` not found")]
    UnknownMessage(String),
    #[error("only AI tutor messages can be labeled")]
    NotAiMessage,
    #[error("`{0}` is not a student in this room")]
    NotMember(String),
}

/// Pass/fail per test, then up to [`GRADER_DETAIL_LINES`] lines of detail
/// for each test that did not pass.
pub fn summarize_grader(result: &GraderResult) -> String {
    let passed = result.outcomes.iter().filter(|o| o.status == TestStatus::Pass).count();
    let mut out = format!("{passed}/{} tests passed", result.outcomes.len());
    for outcome in &result.outcomes {
        let status = match outcome.status {
            TestStatus::Pass => "PASS",
            TestStatus::Fail => "FAIL",
            TestStatus::Error => "ERROR",
            TestStatus::Timeout => "TIMEOUT",
        };
        out.push_str(&format!("\n- {}: {status}", outcome.test_id));
        if outcome.status != TestStatus::Pass {
            for line in outcome.detail.lines().take(GRADER_DETAIL_LINES) {
                out.push_str("\n    ");
                out.push_str(line);
            }
        }
    }
    out
}

/// Builds the backend request context from the room's current state.
pub fn assemble_context(
    room: &SessionRoom,
    worksheet: &Worksheet,
    policy: &ContextPolicy,
) -> Result<TutorContext, TutorError> {
    let problem = worksheet
        .problem(&room.selected_problem)
        .ok_or_else(|| TutorError::UnknownProblem(room.selected_problem.clone()))?;
    let doc = room
        .docs
        .get(&problem.id)
        .ok_or_else(|| TutorError::UnknownProblem(problem.id.clone()))?;

    let question_block = format!(
        "## {}\n\n{}\n\nStarter code ({}):\n```{}\n{}\n```",
        problem.title, problem.prompt_markdown, problem.language_tag, problem.language_tag, problem.starter_code
    );
    let solution_block = render_solution(problem, doc)?;
    let grader_block = room.latest_grader_result(&problem.id).map(summarize_grader);

    let all: Vec<Turn> = room
        .ai_chat
        .iter()
        .filter_map(|m| match m.author {
            Author::Student(_) => Some(Turn {
                speaker: Speaker::Student,
                body: m.body.clone(),
            }),
            Author::Ai => Some(Turn {
                speaker: Speaker::Ai,
                body: m.body.clone(),
            }),
            Author::Ta(_) | Author::System => None,
        })
        .collect();
    let skip = all.len().saturating_sub(policy.max_turns);

    Ok(TutorContext {
        system_prompt: policy.system_prompt.clone(),
        turns: all.into_iter().skip(skip).collect(),
        question_block,
        solution_block,
        grader_block,
    })
}

/// Checks the label preconditions without touching the room.
pub fn check_label(room: &SessionRoom, student_id: &str, message_id: &str) -> Result<(), TutorError> {
    if room.member(student_id).is_none() {
        return Err(TutorError::NotMember(student_id.to_owned()));
    }
    match room.find_message(message_id) {
        None => Err(TutorError::UnknownMessage(message_id.to_owned())),
        Some(m) if !m.author.is_ai() => Err(TutorError::NotAiMessage),
        Some(_) => Ok(()),
    }
}

/// Inserts or replaces the student's label on an AI message.
pub fn label_message(
    room: &mut SessionRoom,
    student_id: &str,
    message_id: &str,
    label: StudentFeedbackLabel,
) -> Result<crate::model::ChatMessage, TutorError> {
    check_label(room, student_id, message_id)?;
    let message = room
        .ai_message_mut(message_id)
        .ok_or_else(|| TutorError::UnknownMessage(message_id.to_owned()))?;
    message.set_label(student_id, label);
    Ok(message.clone())
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BackendError {
    #[error("tutor backend timed out")]
    Timeout,
    #[error("tutor backend returned HTTP {0}")]
    Status(u16),
    #[error("tutor backend transport error: {0}")]
    Transport(String),
    #[error("tutor backend response malformed: {0}")]
    Malformed(String),
}

/// Produces one AI reply for an assembled context.
pub trait TutorBackend: Send + Sync {
    fn id(&self) -> &str;
    fn complete(&self, context: &TutorContext) -> Result<String, BackendError>;
}

/// Deterministic backend: the reply is picked by hashing the latest student
/// turn, so identical transcripts always get identical replies.
#[derive(Clone, Debug)]
pub struct ScriptedMock {
    replies: Vec<String>,
}

impl Default for ScriptedMock {
    fn default() -> Self {
        ScriptedMock::new(
            [
                "What do you expect the function to return for the smallest input? Try tracing it by hand.",
                "Look at the failing test: which line of your solution produces that value?",
                "You're close. What happens to your loop variable on the last iteration?",
                "Which case have you not handled yet? Think about an empty input.",
                "Try printing the intermediate value right before the return statement. What do you see?",
                "What does each blank need to evaluate to for the first test to pass?",
            ]
            .map(String::from)
            .to_vec(),
        )
    }
}

impl ScriptedMock {
    pub fn new(replies: Vec<String>) -> Self {
        assert!(!replies.is_empty(), "scripted mock needs at least one reply");
        ScriptedMock { replies }
    }

    fn key(context: &TutorContext) -> u64 {
        let last = context
            .turns
            .iter()
            .rev()
            .find(|t| t.speaker == Speaker::Student)
            .map_or("", |t| t.body.as_str());
        let digest = Sha256::digest(last.as_bytes());
        u64::from_be_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
    }
}

impl TutorBackend for ScriptedMock {
    fn id(&self) -> &str {
        "scripted-mock"
    }

    fn complete(&self, context: &TutorContext) -> Result<String, BackendError> {
        let index = (Self::key(context) % self.replies.len() as u64) as usize;
        Ok(self.replies[index].clone())
    }
}

/// Chat-completions style HTTP backend.
///
/// Retries timeouts, transport errors and 5xx responses with exponential
/// backoff. The blocking client is built per call so it never lives inside
/// an async runtime.
#[derive(Clone, Debug)]
pub struct HttpBackend {
    pub endpoint: String,
    pub model: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    pub max_retries: u32,
    pub backoff: Duration,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatRequestMessage>,
}

#[derive(Serialize)]
struct ChatRequestMessage {
    role: &'static str,
    content: String,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatResponseMessage,
}

#[derive(Deserialize)]
struct ChatResponseMessage {
    content: String,
}

impl HttpBackend {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>, api_key: Option<String>) -> Self {
        HttpBackend {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key,
            timeout: DEFAULT_BACKEND_TIMEOUT,
            max_retries: 2,
            backoff: Duration::from_millis(500),
        }
    }

    /// Request body sent to the endpoint.
    pub fn request_body(&self, context: &TutorContext) -> serde_json::Value {
        let mut grounding = format!(
            "# Question the group is solving\n{}\n\n# The group's current solution\n```\n{}\n```",
            context.question_block, context.solution_block
        );
        if let Some(grader) = &context.grader_block {
            grounding.push_str(&format!("\n\n# Latest autograder result\n{grader}"));
        }
        let mut messages = vec![
            ChatRequestMessage {
                role: "system",
                content: context.system_prompt.clone(),
            },
            ChatRequestMessage {
                role: "system",
                content: grounding,
            },
        ];
        messages.extend(context.turns.iter().map(|t| ChatRequestMessage {
            role: match t.speaker {
                Speaker::Student => "user",
                Speaker::Ai => "assistant",
            },
            content: t.body.clone(),
        }));
        serde_json::to_value(ChatRequest {
            model: &self.model,
            messages,
        })
        .expect("request serializes")
    }

    fn attempt(&self, client: &reqwest::blocking::Client, body: &serde_json::Value) -> Result<String, (bool, BackendError)> {
        let mut request = client.post(&self.endpoint).json(body);
        if let Some(key) = &self.api_key {
            request = request.bearer_auth(key);
        }
        let response = request.send().map_err(|e| {
            if e.is_timeout() {
                (true, BackendError::Timeout)
            } else {
                (true, BackendError::Transport(e.to_string()))
            }
        })?;
        let status = response.status();
        if !status.is_success() {
            return Err((status.is_server_error(), BackendError::Status(status.as_u16())));
        }
        let parsed: ChatResponse = response
            .json()
            .map_err(|e| (false, BackendError::Malformed(e.to_string())))?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or((false, BackendError::Malformed("no choices".into())))
    }
}

impl TutorBackend for HttpBackend {
    fn id(&self) -> &str {
        "http-chat-completions"
    }

    fn complete(&self, context: &TutorContext) -> Result<String, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(self.timeout)
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let body = self.request_body(context);
        let mut attempt = 0;
        loop {
            match self.attempt(&client, &body) {
                Ok(reply) => return Ok(reply),
                Err((retryable, e)) if !retryable || attempt >= self.max_retries => return Err(e),
                Err(_) => {
                    std::thread::sleep(self.backoff * 2u32.pow(attempt));
                    attempt += 1;
                }
            }
        }
    }
}
