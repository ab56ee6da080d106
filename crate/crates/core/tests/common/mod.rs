#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use tutorhub::clock::VirtualClock;
use tutorhub::model::Worksheet;
use tutorhub::server::events::{MemoryStore, Recovery};
use tutorhub::server::hub::{Effect, Hub, HubConfig, HubDeps, QueueOutbox};
use tutorhub::server::protocol::{decode_server, encode_client, ClientMessage, ServerMessage};

pub const TA: &str = "ta@example.edu";
pub const START: u64 = 1_767_225_600_000;

pub struct TestHub {
    pub hub: Hub,
    pub outbox: Arc<QueueOutbox>,
    pub clock: Arc<VirtualClock>,
    pub store: MemoryStore,
}

pub fn demo_hub(configure: impl FnOnce(&mut HubConfig)) -> TestHub {
    hub_with(tutorhub::sim::demo_worksheet(), configure)
}

pub fn hub_with(worksheet: Worksheet, configure: impl FnOnce(&mut HubConfig)) -> TestHub {
    let mut config = HubConfig::new(worksheet.id.clone());
    config.ta_allowlist = BTreeSet::from([TA.to_owned()]);
    config.sequential_tokens = true;
    configure(&mut config);
    let clock = Arc::new(VirtualClock::new(START));
    let outbox = Arc::new(QueueOutbox::new());
    let store = MemoryStore::new();
    let worksheets: BTreeMap<String, Arc<Worksheet>> = BTreeMap::from([(worksheet.id.clone(), Arc::new(worksheet))]);
    let hub = Hub::new(
        config,
        HubDeps {
            clock: clock.clone(),
            worksheets: Arc::new(worksheets),
            outbox: outbox.clone(),
            verifier: None,
            snapshots: None,
        },
        Box::new(store.clone()),
        Recovery::default(),
    );
    TestHub {
        hub,
        outbox,
        clock,
        store,
    }
}

impl TestHub {
    /// Sends one frame and returns the effects it requested.
    pub fn send(&self, token: &str, message: &ClientMessage) -> Vec<Effect> {
        self.hub.handle_frame(token, &encode_client(message)).expect("session is valid")
    }

    /// Frames delivered to `token` since the last call, decoded.
    pub fn received(&self, token: &str) -> Vec<ServerMessage> {
        self.outbox
            .take_for(token)
            .iter()
            .map(|f| decode_server(f).expect("server frames decode"))
            .collect()
    }

    pub fn errors(&self, token: &str) -> Vec<ServerMessage> {
        self.received(token)
            .into_iter()
            .filter(|m| matches!(m, ServerMessage::Error { .. }))
            .collect()
    }
}

impl TestHub {
    /// Joins and connects a participant, discarding the greeting frames.
    pub fn enter(&self, email: &str, group: Option<u32>) -> String {
        let token = self.hub.join(email, group).expect("join").token;
        self.hub.connect(&token).expect("connect");
        self.received(&token);
        token
    }

    /// Asks and lets the tutor answer; returns the AI message id.
    pub fn ask_and_answer(&self, token: &str, body: &str) -> String {
        let effects = self.send(token, &ClientMessage::Ask { body: body.into() });
        assert_eq!(effects.len(), 1, "ask should request the tutor");
        for effect in effects {
            self.hub.run_effect(
                effect,
                &tutorhub::tutor::ScriptedMock::default(),
                &tutorhub::grader::echo_script::InProcess,
            );
        }
        let room = self.hub.rooms_snapshot().into_values().find(|r| r.ai_chat.iter().any(|m| m.body == body)).expect("room");
        room.ai_chat.last().expect("reply").id.clone()
    }
}

pub fn error_code(message: &ServerMessage) -> Option<tutorhub::server::protocol::ErrorCode> {
    match message {
        ServerMessage::Error { code, .. } => Some(*code),
        _ => None,
    }
}
