//! Discrete-event driver: bot students and a bot TA talk to an in-process
//! [`Hub`] through encoded frames with per-link FIFO latency.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, WeightedIndex};

use crate::clock::{Clock, SystemClock, VirtualClock};
use crate::cms::WorksheetSource;
use crate::console::{room_order, MetricsOptions, ReviewAction};
use crate::grader::Grade;
use crate::model::{render_solution, Author, Channel, ChatMessage, ReviewState, StudentFeedbackLabel, Worksheet};
use crate::server::events::{recover, MemoryStore, Recovery};
use crate::server::hub::{Effect, Hub, HubConfig, HubDeps, QueueOutbox};
use crate::server::protocol::{decode_server, encode_client, ClientMessage, ErrorCode, RoomView, ServerMessage};
use crate::sync::{ClientReplica, OpKind};
use crate::tutor::ScriptedMock;

use super::report::{Check, Convergence, Divergence, Percentiles, SimReport, TaFollowups};
use super::scenario::{ReviewKind, Scenario};

/// Virtual start time: 2026-01-01T00:00:00Z.
pub const SIM_EPOCH_MS: u64 = 1_767_225_600_000;

const TA_EMAIL: &str = "ta@sim.test";
const ARRIVAL_WINDOW_MS: u64 = 60_000;
const NOT_READY_RETRY_MS: u64 = 1_000;
const INSERT_ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyz ";

#[derive(Clone, Debug)]
pub struct SimOptions {
    pub seed: u64,
    /// Run on the virtual clock as fast as possible; otherwise pace against
    /// the wall clock.
    pub virtual_time: bool,
}

impl SimOptions {
    pub fn virtual_time(seed: u64) -> Self {
        SimOptions {
            seed,
            virtual_time: true,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("worksheet: {0}")]
    Worksheet(String),
    #[error("join failed for {email}: {reason}")]
    Join { email: String, reason: String },
}

#[derive(Clone, Debug)]
enum Act {
    Connect,
    Disconnect,
    Edit,
    Ask { followup: bool },
    Check,
    Switch,
    Label { message_id: String, label: StudentFeedbackLabel },
    Followup,
    TaPoll,
    Review { room_id: String, message_id: String, kind: ReviewKind },
    TaChat { room_id: String },
}

#[derive(Debug)]
enum Event {
    ToServer { agent: usize, epoch: u64, frame: String },
    ToClient { agent: usize, epoch: u64, frame: String },
    Effect(Effect),
    Act { agent: usize, act: Act },
}

#[derive(Default)]
struct StudentBot {
    room_id: String,
    client_id: String,
    replicas: BTreeMap<String, ClientReplica>,
    resyncing: BTreeSet<String>,
    selected: String,
    ready: bool,
    /// Ask sent, acceptance not yet seen.
    ask_sent: Option<(u64, bool)>,
    /// Own question accepted: (question seq, sent at, followup).
    awaiting_reply: Option<(u64, u64, bool)>,
    check_sent: Option<u64>,
    edit_started: BTreeMap<(String, String, u64), u64>,
    seen: BTreeSet<String>,
}

#[derive(Default)]
struct TaState {
    visited: BTreeMap<String, u64>,
    scheduled: BTreeSet<String>,
    order_violations: u64,
    lists: u64,
}

enum BotRole {
    Student(Box<StudentBot>),
    Ta(TaState),
}

struct Agent {
    token: String,
    participant_id: String,
    epoch: u64,
    online: bool,
    role: BotRole,
}

/// One simulated section.
pub struct Simulation {
    scenario: Scenario,
    options: SimOptions,
    worksheet: Arc<Worksheet>,
    hub: Arc<Hub>,
    outbox: Arc<QueueOutbox>,
    clock: Arc<VirtualClock>,
    store: MemoryStore,
    grader: Arc<dyn Grade>,
    backend: ScriptedMock,
    rng: ChaCha8Rng,
    queue: BTreeMap<(u64, u64), Event>,
    seq: u64,
    now: u64,
    link_free: BTreeMap<(usize, bool), u64>,
    agents: Vec<Agent>,
    by_token: BTreeMap<String, usize>,
    wall_start: Instant,
    // tallies
    steps: u64,
    frames_to_server: u64,
    frames_to_clients: u64,
    busy: u64,
    resyncs: u64,
    reconnects: u64,
    errors: BTreeMap<String, u64>,
    latency: BTreeMap<String, Vec<u64>>,
    tutor_in_flight: BTreeSet<String>,
    single_flight_violations: u64,
    context_mismatches: u64,
    label_quota: Option<BTreeMap<StudentFeedbackLabel, u64>>,
    decided: BTreeSet<String>,
    followups: TaFollowups,
    planned_questions: u64,
}

fn poisson(rng: &mut ChaCha8Rng, mean: f64) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).map(|d| d.sample(rng) as u64).unwrap_or(0)
}

fn between(rng: &mut ChaCha8Rng, range: [u64; 2]) -> u64 {
    rng.gen_range(range[0]..=range[1])
}

fn message_seq(id: &str) -> u64 {
    id.trim_start_matches(|c: char| !c.is_ascii_digit()).parse().unwrap_or(0)
}

impl Simulation {
    pub fn new(scenario: Scenario, options: SimOptions, grader: Arc<dyn Grade>) -> Result<Self, SimError> {
        let worksheet = match &scenario.worksheet {
            None => super::demo_worksheet(),
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| SimError::Worksheet(format!("{}: {e}", path.display())))?;
                crate::cms::import_worksheet(&text).map_err(|errs| {
                    SimError::Worksheet(errs.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("; "))
                })?
            }
        };
        if !worksheet.published || worksheet.problems.is_empty() {
            return Err(SimError::Worksheet("the worksheet must be published and have problems".into()));
        }
        let worksheet = Arc::new(worksheet);

        let clock = Arc::new(VirtualClock::new(SIM_EPOCH_MS));
        let hub_clock: Arc<dyn Clock> = if options.virtual_time { clock.clone() } else { Arc::new(SystemClock) };
        let outbox = Arc::new(QueueOutbox::new());
        let store = MemoryStore::new();
        let mut config = HubConfig::new(worksheet.id.clone());
        config.groups = (1..=scenario.groups).collect();
        config.ta_allowlist = BTreeSet::from([TA_EMAIL.to_owned()]);
        config.sequential_tokens = true;
        let sources: BTreeMap<String, Arc<Worksheet>> = BTreeMap::from([(worksheet.id.clone(), worksheet.clone())]);
        let sources: Arc<dyn WorksheetSource> = Arc::new(sources);
        let hub = Arc::new(Hub::new(
            config,
            HubDeps {
                clock: hub_clock,
                worksheets: sources,
                outbox: outbox.clone(),
                verifier: None,
                snapshots: None,
            },
            Box::new(store.clone()),
            Recovery::default(),
        ));

        let mut sim = Simulation {
            rng: ChaCha8Rng::seed_from_u64(options.seed),
            label_quota: scenario.labels.quota.clone(),
            scenario,
            options,
            worksheet,
            hub,
            outbox,
            clock,
            store,
            grader,
            backend: ScriptedMock::default(),
            queue: BTreeMap::new(),
            seq: 0,
            now: SIM_EPOCH_MS,
            link_free: BTreeMap::new(),
            agents: Vec::new(),
            by_token: BTreeMap::new(),
            wall_start: Instant::now(),
            steps: 0,
            frames_to_server: 0,
            frames_to_clients: 0,
            busy: 0,
            resyncs: 0,
            reconnects: 0,
            errors: BTreeMap::new(),
            latency: BTreeMap::new(),
            tutor_in_flight: BTreeSet::new(),
            single_flight_violations: 0,
            context_mismatches: 0,
            decided: BTreeSet::new(),
            followups: TaFollowups::default(),
            planned_questions: 0,
        };
        sim.populate()?;
        Ok(sim)
    }

    fn populate(&mut self) -> Result<(), SimError> {
        let s = self.scenario.clone();
        let end = SIM_EPOCH_MS + s.duration_ms();
        let start = SIM_EPOCH_MS + ARRIVAL_WINDOW_MS;
        let span = |rng: &mut ChaCha8Rng| rng.gen_range(start..end.max(start + 1));

        for group in 1..=s.groups {
            let mut members = Vec::new();
            for k in 1..=s.students_per_group {
                let email = format!("s{group}-{k}@sim.test");
                let joined = self.hub.join(&email, Some(group)).map_err(|e| SimError::Join {
                    email: email.clone(),
                    reason: e.to_string(),
                })?;
                let index = self.agents.len();
                self.by_token.insert(joined.token.clone(), index);
                self.agents.push(Agent {
                    token: joined.token,
                    participant_id: joined.participant.id,
                    epoch: 0,
                    online: false,
                    role: BotRole::Student(Box::new(StudentBot {
                        room_id: joined.room_id.unwrap_or_default(),
                        ..StudentBot::default()
                    })),
                });
                members.push(index);

                let at = SIM_EPOCH_MS + self.rng.gen_range(0..ARRIVAL_WINDOW_MS);
                self.schedule(at, Event::Act { agent: index, act: Act::Connect });
                for _ in 0..poisson(&mut self.rng, s.edits.mean_per_student) {
                    let at = span(&mut self.rng);
                    self.schedule(at, Event::Act { agent: index, act: Act::Edit });
                }
                if self.rng.gen_bool(s.reconnects.probability) {
                    let latest = end.saturating_sub(s.reconnects.offline_ms[1]).max(start + 1);
                    let at = self.rng.gen_range(start..latest);
                    self.schedule(at, Event::Act { agent: index, act: Act::Disconnect });
                }
            }
            let group_acts = [
                (s.questions.mean_per_group, Act::Ask { followup: false }),
                (s.grader.mean_per_group, Act::Check),
                (s.edits.switches_per_group, Act::Switch),
            ];
            for (mean, act) in group_acts {
                let n = poisson(&mut self.rng, mean);
                if matches!(act, Act::Ask { .. }) {
                    self.planned_questions += n;
                }
                for _ in 0..n {
                    let agent = *members.choose(&mut self.rng).expect("groups have students");
                    let at = span(&mut self.rng);
                    self.schedule(at, Event::Act { agent, act: act.clone() });
                }
            }
        }

        if s.ta.enabled {
            let joined = self.hub.join(TA_EMAIL, None).map_err(|e| SimError::Join {
                email: TA_EMAIL.into(),
                reason: e.to_string(),
            })?;
            let index = self.agents.len();
            self.by_token.insert(joined.token.clone(), index);
            self.agents.push(Agent {
                token: joined.token,
                participant_id: joined.participant.id,
                epoch: 0,
                online: false,
                role: BotRole::Ta(TaState::default()),
            });
            self.schedule(SIM_EPOCH_MS, Event::Act { agent: index, act: Act::Connect });
            let mut at = SIM_EPOCH_MS + s.ta.poll_interval_ms;
            while at < end {
                self.schedule(at, Event::Act { agent: index, act: Act::TaPoll });
                at += s.ta.poll_interval_ms;
            }
        }
        Ok(())
    }

    fn schedule(&mut self, at: u64, event: Event) {
        self.seq += 1;
        self.queue.insert((at, self.seq), event);
    }

    /// Delivery time on a FIFO link.
    fn link_time(&mut self, agent: usize, to_server: bool) -> u64 {
        let latency = between(&mut self.rng, self.scenario.network.latency_ms);
        let free = self.link_free.entry((agent, to_server)).or_insert(0);
        let at = (self.now + latency).max(*free);
        *free = at;
        at
    }

    fn send(&mut self, agent: usize, message: &ClientMessage) {
        let at = self.link_time(agent, true);
        let epoch = self.agents[agent].epoch;
        self.schedule(
            at,
            Event::ToServer {
                agent,
                epoch,
                frame: encode_client(message),
            },
        );
    }

    fn flush_outbox(&mut self) {
        for (token, frame) in self.outbox.drain() {
            let Some(&agent) = self.by_token.get(&token) else { continue };
            let at = self.link_time(agent, false);
            let epoch = self.agents[agent].epoch;
            self.schedule(at, Event::ToClient { agent, epoch, frame });
        }
    }

    fn schedule_effects(&mut self, effects: Vec<Effect>) {
        for effect in effects {
            let delay = match &effect {
                Effect::Tutor { room_id, context, .. } => {
                    if !self.tutor_in_flight.insert(room_id.clone()) {
                        self.single_flight_violations += 1;
                    }
                    let expected = self.hub.room_state(room_id).and_then(|room| {
                        let problem = self.worksheet.problem(&room.selected_problem)?;
                        render_solution(problem, &room.docs[&problem.id]).ok()
                    });
                    if expected.as_deref() != Some(context.solution_block.as_str()) {
                        self.context_mismatches += 1;
                    }
                    between(&mut self.rng, self.scenario.questions.tutor_latency_ms)
                }
                Effect::Grade { .. } => between(&mut self.rng, self.scenario.grader.latency_ms),
            };
            let at = self.now + delay;
            self.schedule(at, Event::Effect(effect));
        }
    }

    pub fn hub(&self) -> &Arc<Hub> {
        &self.hub
    }

    pub fn store(&self) -> &MemoryStore {
        &self.store
    }

    pub fn is_finished(&self) -> bool {
        self.queue.is_empty()
    }

    /// Processes one event; false once the queue is empty.
    pub fn step(&mut self) -> bool {
        let Some(((at, _), event)) = self.queue.pop_first() else {
            return false;
        };
        self.now = self.now.max(at);
        self.clock.advance_to(self.now);
        if !self.options.virtual_time {
            let due = self.wall_start + Duration::from_millis(self.now - SIM_EPOCH_MS);
            if let Some(wait) = due.checked_duration_since(Instant::now()) {
                std::thread::sleep(wait);
            }
        }
        self.steps += 1;
        match event {
            Event::ToServer { agent, epoch, frame } => {
                if self.agents[agent].epoch == epoch && self.agents[agent].online {
                    self.frames_to_server += 1;
                    let token = self.agents[agent].token.clone();
                    if let Ok(effects) = self.hub.handle_frame(&token, &frame) {
                        self.schedule_effects(effects);
                    }
                    self.flush_outbox();
                }
            }
            Event::ToClient { agent, epoch, frame } => {
                if self.agents[agent].epoch == epoch && self.agents[agent].online {
                    self.frames_to_clients += 1;
                    if let Ok(message) = decode_server(&frame) {
                        self.on_frame(agent, message);
                    }
                }
            }
            Event::Effect(effect) => {
                if let Effect::Tutor { room_id, .. } = &effect {
                    self.tutor_in_flight.remove(room_id);
                }
                let grader = self.grader.clone();
                self.hub.run_effect(effect, &self.backend, grader.as_ref());
                self.flush_outbox();
            }
            Event::Act { agent, act } => self.on_act(agent, act),
        }
        true
    }

    /// Runs at most `limit` more steps.
    pub fn run_steps(&mut self, limit: u64) {
        for _ in 0..limit {
            if !self.step() {
                break;
            }
        }
    }

    /// Runs to completion and reports.
    pub fn run(mut self) -> SimReport {
        while self.step() {}
        self.report()
    }

    fn student(&mut self, agent: usize) -> &mut StudentBot {
        match &mut self.agents[agent].role {
            BotRole::Student(bot) => bot,
            BotRole::Ta(_) => unreachable!("agent {agent} is the TA"),
        }
    }

    fn retry(&mut self, agent: usize, act: Act, delay: u64) {
        let at = self.now + delay;
        self.schedule(at, Event::Act { agent, act });
    }

    fn on_act(&mut self, agent: usize, act: Act) {
        let is_student = matches!(self.agents[agent].role, BotRole::Student(_));
        match act {
            Act::Connect => {
                let a = &mut self.agents[agent];
                a.online = true;
                let token = a.token.clone();
                let _ = self.hub.connect(&token);
                self.flush_outbox();
            }
            Act::Disconnect => {
                if !self.agents[agent].online {
                    return;
                }
                self.reconnects += 1;
                let token = self.agents[agent].token.clone();
                self.hub.disconnect(&token);
                let a = &mut self.agents[agent];
                a.online = false;
                a.epoch += 1;
                let lost_ask = if let BotRole::Student(bot) = &mut a.role {
                    let room_id = std::mem::take(&mut bot.room_id);
                    let lost = bot.ask_sent.take();
                    **bot = StudentBot {
                        room_id,
                        ..StudentBot::default()
                    };
                    lost
                } else {
                    None
                };
                let offline = between(&mut self.rng, self.scenario.reconnects.offline_ms);
                self.retry(agent, Act::Connect, offline.max(1));
                if let Some((_, followup)) = lost_ask {
                    self.retry(agent, Act::Ask { followup }, offline + NOT_READY_RETRY_MS);
                }
            }
            _ if is_student && !(self.agents[agent].online && self.student(agent).ready) => {
                self.retry(agent, act, NOT_READY_RETRY_MS);
            }
            Act::Edit => self.do_edit(agent),
            Act::Ask { followup } => {
                if self.student(agent).ask_sent.is_some() {
                    let delay = between(&mut self.rng, self.scenario.questions.busy_retry_ms);
                    self.retry(agent, Act::Ask { followup }, delay);
                    return;
                }
                let n = self.seq;
                let body = if followup {
                    format!("replying to the TA: thanks, we will try that ({n})")
                } else {
                    format!("question {n}: why does our output not match the expected output?")
                };
                let now = self.now;
                self.student(agent).ask_sent = Some((now, followup));
                self.send(agent, &ClientMessage::Ask { body });
            }
            Act::Check => {
                let now = self.now;
                self.student(agent).check_sent = Some(now);
                self.send(agent, &ClientMessage::CheckAnswer { problem_id: None });
            }
            Act::Switch => {
                let current = self.student(agent).selected.clone();
                let others: Vec<String> = self
                    .worksheet
                    .problems
                    .iter()
                    .map(|p| p.id.clone())
                    .filter(|p| *p != current)
                    .collect();
                if let Some(problem_id) = others.choose(&mut self.rng).cloned() {
                    self.send(agent, &ClientMessage::SelectProblem { problem_id });
                }
            }
            Act::Label { message_id, label } => {
                self.send(agent, &ClientMessage::Label { message_id, label });
            }
            Act::Followup => {
                if self.scenario.shared_ta_window {
                    self.planned_questions += 1;
                    self.on_act(agent, Act::Ask { followup: true });
                } else {
                    self.followups.followups += 1;
                    self.send(
                        agent,
                        &ClientMessage::TaChat {
                            room_id: None,
                            body: "thanks, we will try that".into(),
                        },
                    );
                }
            }
            _ if !self.agents[agent].online => self.retry(agent, act, NOT_READY_RETRY_MS),
            Act::TaPoll => self.send(agent, &ClientMessage::ListRooms {}),
            Act::Review {
                room_id,
                message_id,
                kind,
            } => {
                let action = match kind {
                    ReviewKind::Read => ReviewAction::Read,
                    ReviewKind::Endorse => ReviewAction::Endorse,
                    ReviewKind::Edit => {
                        let original = self
                            .hub
                            .room_state(&room_id)
                            .and_then(|r| r.ai_message(&message_id).map(|m| m.body.clone()))
                            .unwrap_or_default();
                        ReviewAction::Edit {
                            new_body: format!("{original}\n\n(TA note: check the second test case first.)"),
                        }
                    }
                };
                self.send(
                    agent,
                    &ClientMessage::Review {
                        room_id: Some(room_id),
                        message_id,
                        action,
                    },
                );
            }
            Act::TaChat { room_id } => self.send(
                agent,
                &ClientMessage::TaChat {
                    room_id: Some(room_id),
                    body: "How is it going? Ping me here if you are stuck.".into(),
                },
            ),
        }
    }

    fn do_edit(&mut self, agent: usize) {
        let now = self.now;
        let insert_roll: bool = self.rng.gen_bool(0.5);
        let bot = match &mut self.agents[agent].role {
            BotRole::Student(bot) => bot,
            BotRole::Ta(_) => return,
        };
        let problem_id = bot.selected.clone();
        if bot.resyncing.contains(&problem_id) {
            return;
        }
        let Some(replica) = bot.replicas.get_mut(&problem_id) else { return };
        let blanks: Vec<String> = replica.blanks().keys().cloned().collect();
        let Some(blank_id) = blanks.choose(&mut self.rng).cloned() else { return };
        let len = replica.text(&blank_id).map_or(0, |t| t.chars().count());
        let kind = if len == 0 || insert_roll {
            let n = self.rng.gen_range(1..=3);
            let text: String = (0..n)
                .map(|_| INSERT_ALPHABET[self.rng.gen_range(0..INSERT_ALPHABET.len())] as char)
                .collect();
            OpKind::Insert {
                pos: self.rng.gen_range(0..=len),
                text,
            }
        } else {
            let pos = self.rng.gen_range(0..len);
            let max = (len - pos).min(3);
            OpKind::Delete {
                pos,
                len: self.rng.gen_range(1..=max),
            }
        };
        let key = (problem_id.clone(), replica.client_id().to_owned(), replica.next_seq());
        match replica.local_edit(&blank_id, kind) {
            Ok(to_send) => {
                bot.edit_started.insert(key, now);
                if let Some(op) = to_send {
                    self.send(agent, &ClientMessage::Edit(op));
                }
            }
            Err(e) => *self.errors.entry(format!("local_edit: {e}")).or_default() += 1,
        }
    }

    fn request_resync(&mut self, agent: usize, problem_id: &str) {
        self.resyncs += 1;
        self.student(agent).resyncing.insert(problem_id.to_owned());
        self.send(
            agent,
            &ClientMessage::Snapshot {
                problem_id: problem_id.to_owned(),
            },
        );
    }

    fn count_error(&mut self, code: ErrorCode, request: Option<&str>) {
        let code = serde_json::to_value(code)
            .ok()
            .and_then(|v| v.as_str().map(str::to_owned))
            .unwrap_or_default();
        *self.errors.entry(format!("{}:{code}", request.unwrap_or("-"))).or_default() += 1;
    }

    fn record_latency(&mut self, name: &str, ms: u64) {
        self.latency.entry(name.to_owned()).or_default().push(ms);
    }

    fn on_frame(&mut self, agent: usize, message: ServerMessage) {
        if matches!(self.agents[agent].role, BotRole::Ta(_)) {
            self.on_ta_frame(agent, message);
            return;
        }
        let now = self.now;
        match message {
            ServerMessage::Welcome { client_id, .. } => self.student(agent).client_id = client_id,
            ServerMessage::RoomState { room } => self.load_room(agent, room),
            ServerMessage::Op { applied, .. } => {
                let bot = self.student(agent);
                let problem_id = applied.op.problem_id.clone();
                if bot.resyncing.contains(&problem_id) {
                    return;
                }
                let key = (problem_id.clone(), applied.op.client_id.clone(), applied.op.client_seq);
                let started = bot.edit_started.remove(&key);
                let Some(replica) = bot.replicas.get_mut(&problem_id) else { return };
                match replica.receive(&applied) {
                    Ok(next) => {
                        if let Some(t) = started {
                            self.record_latency("edit_ack", now - t);
                        }
                        if let Some(op) = next {
                            self.send(agent, &ClientMessage::Edit(op));
                        }
                    }
                    Err(e) => {
                        *self.errors.entry(format!("replica: {e}")).or_default() += 1;
                        self.request_resync(agent, &problem_id);
                    }
                }
            }
            ServerMessage::Snapshot { client_id, snapshot, .. } => {
                let bot = self.student(agent);
                bot.resyncing.remove(&snapshot.problem_id);
                bot.replicas
                    .insert(snapshot.problem_id.clone(), ClientReplica::new(client_id.clone(), &snapshot));
                bot.client_id = client_id;
            }
            ServerMessage::ProblemSelected { problem_id, .. } => self.student(agent).selected = problem_id,
            ServerMessage::Chat { message, .. } => self.on_chat(agent, message),
            ServerMessage::GraderResult { .. } => {
                if let Some(t) = self.student(agent).check_sent.take() {
                    self.record_latency("check_to_result", now - t);
                }
            }
            ServerMessage::Error { code, request, .. } => {
                self.count_error(code, request.as_deref());
                match (code, request.as_deref()) {
                    (ErrorCode::Busy, Some("Ask")) => {
                        self.busy += 1;
                        if let Some((_, followup)) = self.student(agent).ask_sent.take() {
                            let delay = between(&mut self.rng, self.scenario.questions.busy_retry_ms);
                            self.retry(agent, Act::Ask { followup }, delay);
                        }
                    }
                    (ErrorCode::Busy, Some("CheckAnswer")) => {
                        self.busy += 1;
                        self.student(agent).check_sent = None;
                    }
                    (_, Some("Edit")) => {
                        let problems: Vec<String> = self.student(agent).replicas.keys().cloned().collect();
                        for p in problems {
                            self.request_resync(agent, &p);
                        }
                    }
                    _ => {}
                }
            }
            ServerMessage::Members { .. } | ServerMessage::RoomList { .. } | ServerMessage::RoomUpdate { .. } => {}
        }
    }

    fn load_room(&mut self, agent: usize, room: RoomView) {
        let bot = self.student(agent);
        let client_id = bot.client_id.clone();
        bot.replicas = room
            .docs
            .values()
            .map(|snap| (snap.problem_id.clone(), ClientReplica::new(client_id.clone(), snap)))
            .collect();
        bot.resyncing.clear();
        bot.selected = room.selected_problem.clone();
        bot.seen = room.ai_chat.iter().chain(room.ta_chat.iter()).map(|m| m.id.clone()).collect();
        bot.ready = true;
    }

    fn on_chat(&mut self, agent: usize, message: ChatMessage) {
        let now = self.now;
        let me = self.agents[agent].participant_id.clone();
        let bot = self.student(agent);
        if !bot.seen.insert(message.id.clone()) {
            return;
        }
        let seq = message_seq(&message.id);
        match (&message.channel, &message.author) {
            (Channel::AiTutor, Author::Student(id)) if *id == me => {
                if let Some((sent_at, followup)) = bot.ask_sent.take() {
                    bot.awaiting_reply = Some((seq, sent_at, followup));
                }
            }
            (Channel::AiTutor, Author::Ai | Author::System) => {
                if let Some((q, sent_at, followup)) = bot.awaiting_reply {
                    if seq > q {
                        bot.awaiting_reply = None;
                        self.record_latency("ask_to_reply", now - sent_at);
                        if followup {
                            self.followups.followups += 1;
                            if message.author.is_ai() {
                                self.followups.ai_replies += 1;
                            }
                        }
                    }
                }
                if message.author.is_ai() {
                    self.maybe_label(agent, &message.id);
                }
            }
            (Channel::TaChat, Author::Ta(_)) => {
                if self.decided.insert(message.id.clone()) && self.rng.gen_bool(self.scenario.ta.followup_probability) {
                    let delay = self.rng.gen_range(5_000..30_000);
                    self.retry(agent, Act::Followup, delay);
                }
            }
            _ => {}
        }
    }

    fn maybe_label(&mut self, agent: usize, message_id: &str) {
        let label = if let Some(quota) = self.label_quota.as_mut() {
            if !self.decided.insert(message_id.to_owned()) {
                return;
            }
            let remaining: Vec<(StudentFeedbackLabel, u64)> = quota.iter().filter(|(_, n)| **n > 0).map(|(l, n)| (*l, *n)).collect();
            if remaining.is_empty() {
                return;
            }
            let dist = WeightedIndex::new(remaining.iter().map(|(_, n)| *n)).expect("positive weights");
            let label = remaining[dist.sample(&mut self.rng)].0;
            *quota.get_mut(&label).expect("present") -= 1;
            label
        } else {
            if !self.rng.gen_bool(self.scenario.labels.probability) {
                return;
            }
            let weights: Vec<(StudentFeedbackLabel, f64)> = self.scenario.labels.weights.iter().map(|(l, w)| (*l, *w)).collect();
            let dist = WeightedIndex::new(weights.iter().map(|(_, w)| *w)).expect("validated weights");
            weights[dist.sample(&mut self.rng)].0
        };
        let delay = between(&mut self.rng, self.scenario.labels.delay_ms);
        self.retry(
            agent,
            Act::Label {
                message_id: message_id.to_owned(),
                label,
            },
            delay,
        );
    }

    fn on_ta_frame(&mut self, agent: usize, message: ServerMessage) {
        let end = SIM_EPOCH_MS + self.scenario.duration_ms();
        match message {
            ServerMessage::RoomList { rooms } => {
                let BotRole::Ta(ta) = &mut self.agents[agent].role else { return };
                ta.lists += 1;
                if rooms.windows(2).any(|w| room_order(&w[0], &w[1]) == std::cmp::Ordering::Greater) {
                    ta.order_violations += 1;
                }
                let pick = rooms
                    .iter()
                    .find(|r| r.unreviewed_count > 0 && ta.visited.get(&r.room_id).is_none_or(|v| r.last_activity > *v));
                if let Some(room) = pick {
                    ta.visited.insert(room.room_id.clone(), room.last_activity);
                    let room_id = room.room_id.clone();
                    self.send(agent, &ClientMessage::Watch { room_id });
                }
            }
            ServerMessage::RoomState { room } if self.now < end => {
                let candidates: Vec<String> = room
                    .ai_chat
                    .iter()
                    .filter(|m| m.author.is_ai() && m.review == ReviewState::Unreviewed)
                    .map(|m| m.id.clone())
                    .collect();
                let weights: Vec<(ReviewKind, f64)> = self.scenario.ta.action_weights.iter().map(|(k, w)| (*k, *w)).collect();
                let dist = WeightedIndex::new(weights.iter().map(|(_, w)| *w)).expect("validated weights");
                let mut delay = 0;
                for message_id in candidates {
                    let BotRole::Ta(ta) = &self.agents[agent].role else { return };
                    if ta.scheduled.contains(&message_id) || !self.rng.gen_bool(self.scenario.ta.review_probability) {
                        continue;
                    }
                    if let BotRole::Ta(ta) = &mut self.agents[agent].role {
                        ta.scheduled.insert(message_id.clone());
                    }
                    delay += self.rng.gen_range(2_000..10_000);
                    let kind = weights[dist.sample(&mut self.rng)].0;
                    self.retry(
                        agent,
                        Act::Review {
                            room_id: room.id.clone(),
                            message_id,
                            kind,
                        },
                        delay,
                    );
                }
                if self.rng.gen_bool(self.scenario.ta.chat_probability) {
                    delay += self.rng.gen_range(2_000..10_000);
                    self.retry(agent, Act::TaChat { room_id: room.id.clone() }, delay);
                }
            }
            ServerMessage::Error { code, request, .. } => {
                self.count_error(code, request.as_deref());
            }
            _ => {}
        }
    }

    fn convergence(&self) -> Convergence {
        let rooms = self.hub.rooms_snapshot();
        let mut result = Convergence {
            converged: true,
            ..Convergence::default()
        };
        for agent in &self.agents {
            let BotRole::Student(bot) = &agent.role else { continue };
            let Some(room) = rooms.get(&bot.room_id) else { continue };
            for (problem_id, doc) in &room.docs {
                result.replicas_checked += 1;
                let server = doc.snapshot();
                let replica = bot.replicas.get(problem_id);
                let same = replica.is_some_and(|r| r.is_idle() && r.version() == server.version && r.blanks() == &server.blanks);
                if !same {
                    result.converged = false;
                    result.divergences.push(Divergence {
                        room_id: room.id.clone(),
                        participant_id: agent.participant_id.clone(),
                        problem_id: problem_id.clone(),
                        replica: crate::sync::Snapshot {
                            problem_id: problem_id.clone(),
                            version: replica.map_or(0, |r| r.version()),
                            blanks: replica.map(|r| r.blanks().clone()).unwrap_or_default(),
                        },
                        server,
                        pending_ops: replica.map_or(0, |r| r.pending_ops()),
                        op_log: doc.applied_ops.clone(),
                    });
                }
            }
        }
        result
    }

    /// Builds the report for the state reached so far.
    pub fn report(&self) -> SimReport {
        let rooms = self.hub.rooms_snapshot();
        let metrics = self.hub.metrics(&MetricsOptions::default());
        let questions_per_group: BTreeMap<String, u64> = rooms
            .values()
            .map(|r| {
                let n = r.ai_chat.iter().filter(|m| matches!(m.author, Author::Student(_))).count() as u64;
                (r.id.clone(), n)
            })
            .collect();
        let question_mean = if questions_per_group.is_empty() {
            0.0
        } else {
            questions_per_group.values().sum::<u64>() as f64 / questions_per_group.len() as f64
        };
        let convergence = self.convergence();
        let recovered = recover(&self.store.records());
        let ta = self.agents.iter().find_map(|a| match &a.role {
            BotRole::Ta(ta) => Some(ta),
            _ => None,
        });

        let mut checks = vec![
            Check::new(
                "convergence",
                convergence.converged,
                format!("{} replicas, {} diverged", convergence.replicas_checked, convergence.divergences.len()),
            ),
            Check::new(
                "single_flight",
                self.single_flight_violations == 0,
                format!("{} overlapping tutor calls", self.single_flight_violations),
            ),
            Check::new(
                "context_fidelity",
                self.context_mismatches == 0,
                format!("{} contexts differed from the rendered solution", self.context_mismatches),
            ),
            Check::new(
                "recovery",
                recovered.truncation.is_none() && recovered.state.rooms == rooms,
                format!("replayed {} events", recovered.last_seq),
            ),
            Check::new(
                "unreviewed_counter",
                rooms.values().all(|r| r.unreviewed_count == r.recount_unreviewed()),
                "maintained counter equals recount",
            ),
        ];
        let asked: u64 = questions_per_group.values().sum();
        checks.push(Check::new(
            "questions_delivered",
            asked == self.planned_questions,
            format!("{asked} of {} planned questions reached the tutor", self.planned_questions),
        ));
        if let Some(ta) = ta {
            checks.push(Check::new(
                "ta_priority_order",
                ta.order_violations == 0,
                format!("{} room lists, {} out of order", ta.lists, ta.order_violations),
            ));
        }
        if let Some(target) = self.scenario.expect.question_mean {
            let tolerance = self.scenario.expect.question_tolerance.unwrap_or(0.5);
            checks.push(Check::new(
                "question_mean",
                (question_mean - target).abs() <= tolerance,
                format!("{question_mean:.3} vs {target} ± {tolerance} over {} groups", questions_per_group.len()),
            ));
        }
        if let Some(expected) = &self.scenario.expect.labels {
            let actual = &metrics.overall.labels;
            let ok = StudentFeedbackLabel::ALL
                .iter()
                .all(|l| actual.get(l).copied().unwrap_or(0) == expected.get(l).copied().unwrap_or(0));
            checks.push(Check::new("labels", ok, format!("{actual:?} vs {expected:?}")));
        }
        if self.scenario.shared_ta_window {
            checks.push(Check::new(
                "shared_window_followups",
                true,
                format!(
                    "{} follow-ups to TA messages produced {} AI replies",
                    self.followups.followups, self.followups.ai_replies
                ),
            ));
        } else {
            checks.push(Check::new(
                "ta_followups_stay_human",
                self.followups.ai_replies == 0,
                format!("{} follow-ups, {} AI replies", self.followups.followups, self.followups.ai_replies),
            ));
        }
        let passed = checks.iter().all(|c| c.passed);

        SimReport {
            scenario: self.scenario.name.clone(),
            seed: self.options.seed,
            virtual_time: self.options.virtual_time,
            groups: self.scenario.groups,
            students: self.scenario.groups * self.scenario.students_per_group,
            sim_duration_ms: self.now - SIM_EPOCH_MS,
            steps: self.steps,
            events_logged: self.hub.last_seq(),
            frames_to_server: self.frames_to_server,
            frames_to_clients: self.frames_to_clients,
            questions_per_group,
            question_mean,
            busy_rejections: self.busy,
            labels: metrics.overall.labels.clone(),
            reviews: metrics.overall.reviews.clone(),
            error_frames: self.errors.clone(),
            resyncs: self.resyncs,
            reconnects: self.reconnects,
            latency_ms: self.latency.iter().map(|(k, v)| (k.clone(), Percentiles::of(v))).collect(),
            ta_followups: self.followups.clone(),
            convergence,
            metrics,
            checks,
            passed,
        }
    }
}

/// Runs a scenario to completion.
pub fn run_scenario(scenario: Scenario, options: SimOptions, grader: Arc<dyn Grade>) -> Result<SimReport, SimError> {
    Ok(Simulation::new(scenario, options, grader)?.run())
}
