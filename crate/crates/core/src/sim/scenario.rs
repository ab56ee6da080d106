//! Scenario files (TOML). Every field has a default, so an empty file runs
//! one 80-minute section of 15 groups of 7.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::model::StudentFeedbackLabel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ReviewKind {
    Read,
    Endorse,
    Edit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub groups: u32,
    pub students_per_group: u32,
    pub duration_minutes: f64,
    /// Worksheet markdown; the bundled demo worksheet when unset.
    pub worksheet: Option<PathBuf>,
    pub questions: Questions,
    pub edits: Edits,
    pub grader: GraderRuns,
    pub labels: Labels,
    pub ta: TaBot,
    pub network: Network,
    pub reconnects: Reconnects,
    /// Pre-split TA chat: students answer TA messages in the AI window.
    pub shared_ta_window: bool,
    pub expect: Expect,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            name: "section".into(),
            groups: 15,
            students_per_group: 7,
            duration_minutes: 80.0,
            worksheet: None,
            questions: Questions::default(),
            edits: Edits::default(),
            grader: GraderRuns::default(),
            labels: Labels::default(),
            ta: TaBot::default(),
            network: Network::default(),
            reconnects: Reconnects::default(),
            shared_ta_window: false,
            expect: Expect::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Questions {
    /// Poisson mean of AI questions per group.
    pub mean_per_group: f64,
    /// Tutor latency range, virtual milliseconds.
    pub tutor_latency_ms: [u64; 2],
    /// Wait before retrying a question rejected as busy.
    pub busy_retry_ms: [u64; 2],
}

impl Default for Questions {
    fn default() -> Self {
        Questions {
            mean_per_group: 5.87,
            tutor_latency_ms: [1500, 4000],
            busy_retry_ms: [5000, 15000],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Edits {
    /// Poisson mean of edits per student.
    pub mean_per_student: f64,
    /// Poisson mean of problem switches per group.
    pub switches_per_group: f64,
}

impl Default for Edits {
    fn default() -> Self {
        Edits {
            mean_per_student: 40.0,
            switches_per_group: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraderRuns {
    pub mean_per_group: f64,
    pub latency_ms: [u64; 2],
}

impl Default for GraderRuns {
    fn default() -> Self {
        GraderRuns {
            mean_per_group: 4.0,
            latency_ms: [300, 1000],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Labels {
    /// Chance that a given student labels a given AI reply.
    pub probability: f64,
    /// Relative weights of the four labels.
    pub weights: BTreeMap<StudentFeedbackLabel, f64>,
    /// Exact tallies to emit instead of sampling: the first AI replies are
    /// labeled until every quota is used up.
    pub quota: Option<BTreeMap<StudentFeedbackLabel, u64>>,
    pub delay_ms: [u64; 2],
}

impl Default for Labels {
    fn default() -> Self {
        Labels {
            probability: 0.01,
            weights: BTreeMap::from([
                (StudentFeedbackLabel::Helpful, 156.0),
                (StudentFeedbackLabel::Unhelpful, 129.0),
                (StudentFeedbackLabel::TooMuchHelp, 39.0),
                (StudentFeedbackLabel::Incorrect, 42.0),
            ]),
            quota: None,
            delay_ms: [2000, 20000],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaBot {
    pub enabled: bool,
    pub poll_interval_ms: u64,
    /// Chance of reviewing each unreviewed AI reply in the watched room.
    pub review_probability: f64,
    pub action_weights: BTreeMap<ReviewKind, f64>,
    /// Chance of writing in the TA channel on each room visit.
    pub chat_probability: f64,
    /// Chance that a student answers a TA message.
    pub followup_probability: f64,
}

impl Default for TaBot {
    fn default() -> Self {
        TaBot {
            enabled: true,
            poll_interval_ms: 45_000,
            review_probability: 0.5,
            action_weights: BTreeMap::from([
                (ReviewKind::Read, 423.0),
                (ReviewKind::Endorse, 188.0),
                (ReviewKind::Edit, 3.0),
            ]),
            chat_probability: 0.1,
            followup_probability: 0.6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Network {
    /// One-way latency range per frame; each link stays FIFO.
    pub latency_ms: [u64; 2],
}

impl Default for Network {
    fn default() -> Self {
        Network { latency_ms: [5, 150] }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Reconnects {
    /// Chance that a student drops its connection once during the section.
    pub probability: f64,
    pub offline_ms: [u64; 2],
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Expect {
    /// Target mean AI questions per group and the allowed deviation.
    pub question_mean: Option<f64>,
    pub question_tolerance: Option<f64>,
    /// Exact label tallies.
    pub labels: Option<BTreeMap<StudentFeedbackLabel, u64>>,
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid scenario: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

fn check_range(name: &str, r: [u64; 2]) -> Result<(), ScenarioError> {
    if r[0] > r[1] {
        return Err(ScenarioError::Invalid(format!("{name}: min {} exceeds max {}", r[0], r[1])));
    }
    Ok(())
}

fn check_prob(name: &str, p: f64) -> Result<(), ScenarioError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(ScenarioError::Invalid(format!("{name} must be within [0, 1]")));
    }
    Ok(())
}

fn check_weights<K>(name: &str, w: &BTreeMap<K, f64>) -> Result<(), ScenarioError> {
    if w.values().any(|v| !v.is_finite() || *v < 0.0) || w.values().sum::<f64>() <= 0.0 {
        return Err(ScenarioError::Invalid(format!("{name} needs non-negative weights with a positive sum")));
    }
    Ok(())
}

impl Scenario {
    /// Parses TOML. Relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, ScenarioError> {
        let mut scenario: Scenario = toml::from_str(text)?;
        if let Some(ws) = scenario.worksheet.as_mut() {
            if ws.is_relative() {
                *ws = base.join(&*ws);
            }
        }
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.to_owned(),
            source,
        })?;
        Scenario::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.groups == 0 || self.students_per_group == 0 {
            return Err(ScenarioError::Invalid("groups and students_per_group must be positive".into()));
        }
        if self.duration_minutes.is_nan() || self.duration_minutes <= 0.0 {
            return Err(ScenarioError::Invalid("duration_minutes must be positive".into()));
        }
        for (name, mean) in [
            ("questions.mean_per_group", self.questions.mean_per_group),
            ("edits.mean_per_student", self.edits.mean_per_student),
            ("edits.switches_per_group", self.edits.switches_per_group),
            ("grader.mean_per_group", self.grader.mean_per_group),
        ] {
            if !mean.is_finite() || mean < 0.0 {
                return Err(ScenarioError::Invalid(format!("{name} must be a non-negative number")));
            }
        }
        check_range("questions.tutor_latency_ms", self.questions.tutor_latency_ms)?;
        check_range("questions.busy_retry_ms", self.questions.busy_retry_ms)?;
        check_range("grader.latency_ms", self.grader.latency_ms)?;
        check_range("labels.delay_ms", self.labels.delay_ms)?;
        check_range("network.latency_ms", self.network.latency_ms)?;
        check_range("reconnects.offline_ms", self.reconnects.offline_ms)?;
        check_prob("labels.probability", self.labels.probability)?;
        check_prob("ta.review_probability", self.ta.review_probability)?;
        check_prob("ta.chat_probability", self.ta.chat_probability)?;
        check_prob("ta.followup_probability", self.ta.followup_probability)?;
        check_prob("reconnects.probability", self.reconnects.probability)?;
        check_weights("labels.weights", &self.labels.weights)?;
        check_weights("ta.action_weights", &self.ta.action_weights)?;
        if self.ta.enabled && self.ta.poll_interval_ms == 0 {
            return Err(ScenarioError::Invalid("ta.poll_interval_ms must be positive".into()));
        }
        if self.students_per_group as usize > crate::model::DEFAULT_MAX_GROUP_SIZE {
            return Err(ScenarioError::Invalid(format!(
                "students_per_group exceeds the room capacity of {}",
                crate::model::DEFAULT_MAX_GROUP_SIZE
            )));
        }
        Ok(())
    }

    pub fn duration_ms(&self) -> u64 {
        (self.duration_minutes * 60_000.0).round() as u64
    }
}
