use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::console::MetricsReport;
use crate::model::{ReviewState, StudentFeedbackLabel};
use crate::sync::{AppliedOp, Snapshot};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Percentiles {
    pub count: u64,
    pub p50: u64,
    pub p90: u64,
    pub p99: u64,
    pub max: u64,
}

impl Percentiles {
    /// Nearest-rank percentiles.
    pub fn of(samples: &[u64]) -> Self {
        if samples.is_empty() {
            return Percentiles::default();
        }
        let mut sorted = samples.to_vec();
        sorted.sort_unstable();
        let rank = |p: f64| {
            let k = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
            sorted[k.clamp(1, sorted.len()) - 1]
        };
        Percentiles {
            count: sorted.len() as u64,
            p50: rank(50.0),
            p90: rank(90.0),
            p99: rank(99.0),
            max: *sorted.last().expect("non-empty"),
        }
    }
}

/// A replica that disagrees with the server at the end of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub room_id: String,
    pub participant_id: String,
    pub problem_id: String,
    pub server: Snapshot,
    pub replica: Snapshot,
    pub pending_ops: usize,
    pub op_log: Vec<AppliedOp>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Convergence {
    pub replicas_checked: u64,
    pub converged: bool,
    pub divergences: Vec<Divergence>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        Check {
            name: name.to_owned(),
            passed,
            detail: detail.into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaFollowups {
    /// Student answers to TA messages.
    pub followups: u64,
    /// AI replies generated by those answers; zero unless the TA window is shared.
    pub ai_replies: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub scenario: String,
    pub seed: u64,
    pub virtual_time: bool,
    pub groups: u32,
    pub students: u32,
    pub sim_duration_ms: u64,
    pub steps: u64,
    pub events_logged: u64,
    pub frames_to_server: u64,
    pub frames_to_clients: u64,
    pub questions_per_group: BTreeMap<String, u64>,
    pub question_mean: f64,
    pub busy_rejections: u64,
    pub labels: BTreeMap<StudentFeedbackLabel, u64>,
    pub reviews: BTreeMap<ReviewState, u64>,
    pub error_frames: BTreeMap<String, u64>,
    pub resyncs: u64,
    pub reconnects: u64,
    pub latency_ms: BTreeMap<String, Percentiles>,
    pub ta_followups: TaFollowups,
    pub convergence: Convergence,
    pub metrics: MetricsReport,
    pub checks: Vec<Check>,
    pub passed: bool,
}

impl SimReport {
    /// One line per check plus the headline numbers.
    pub fn summary(&self) -> String {
        let mut out = format!(
            "scenario {} seed {}: {} groups, {} students, {} events, mean questions/group {:.3}\n",
            self.scenario, self.seed, self.groups, self.students, self.events_logged, self.question_mean
        );
        for check in &self.checks {
            let mark = if check.passed { "PASS" } else { "FAIL" };
            out.push_str(&format!("{mark} {}: {}\n", check.name, check.detail));
        }
        out
    }
}
