//! WebSocket frames: `{"v": 1, "kind": ..., "body": {...}}`, one JSON
//! object per text message.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::console::{ReviewAction, RoomSummary};
use crate::model::{ChatMessage, GraderResult, Participant, SessionRoom, StudentFeedbackLabel, Timestamp};
use crate::sync::{AppliedOp, EditOp, Snapshot};

pub const PROTOCOL_VERSION: u64 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "body")]
pub enum ClientMessage {
    Edit(EditOp),
    /// Requests a fresh snapshot and a new client id for resync.
    Snapshot {
        problem_id: String,
    },
    SelectProblem {
        problem_id: String,
    },
    Ask {
        body: String,
    },
    Label {
        message_id: String,
        label: StudentFeedbackLabel,
    },
    CheckAnswer {
        #[serde(default)]
        problem_id: Option<String>,
    },
    Review {
        #[serde(default)]
        room_id: Option<String>,
        message_id: String,
        action: ReviewAction,
    },
    #[serde(rename = "TAChat")]
    TaChat {
        #[serde(default)]
        room_id: Option<String>,
        body: String,
    },
    ListRooms {},
    Watch {
        room_id: String,
    },
    RoomState {
        #[serde(default)]
        room_id: Option<String>,
    },
    Leave {},
}

impl ClientMessage {
    pub fn kind(&self) -> &'static str {
        match self {
            ClientMessage::Edit(_) => "Edit",
            ClientMessage::Snapshot { .. } => "Snapshot",
            ClientMessage::SelectProblem { .. } => "SelectProblem",
            ClientMessage::Ask { .. } => "Ask",
            ClientMessage::Label { .. } => "Label",
            ClientMessage::CheckAnswer { .. } => "CheckAnswer",
            ClientMessage::Review { .. } => "Review",
            ClientMessage::TaChat { .. } => "TAChat",
            ClientMessage::ListRooms {} => "ListRooms",
            ClientMessage::Watch { .. } => "Watch",
            ClientMessage::RoomState { .. } => "RoomState",
            ClientMessage::Leave {} => "Leave",
        }
    }
}

pub const CLIENT_KINDS: [&str; 12] = [
    "Edit",
    "Snapshot",
    "SelectProblem",
    "Ask",
    "Label",
    "CheckAnswer",
    "Review",
    "TAChat",
    "ListRooms",
    "Watch",
    "RoomState",
    "Leave",
];

/// A room as shown to a client: documents as snapshots, no op history.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoomView {
    pub id: String,
    pub group_number: u32,
    pub worksheet_id: String,
    pub members: Vec<Participant>,
    pub selected_problem: String,
    pub docs: BTreeMap<String, Snapshot>,
    pub ai_chat: Vec<ChatMessage>,
    pub ta_chat: Vec<ChatMessage>,
    pub grader_history: Vec<GraderResult>,
    pub unreviewed_count: u32,
    pub last_activity: Timestamp,
}

impl RoomView {
    pub fn of(room: &SessionRoom) -> Self {
        RoomView {
            id: room.id.clone(),
            group_number: room.group_number,
            worksheet_id: room.worksheet_id.clone(),
            members: room.members.clone(),
            selected_problem: room.selected_problem.clone(),
            docs: room.docs.iter().map(|(k, d)| (k.clone(), d.snapshot())).collect(),
            ai_chat: room.ai_chat.clone(),
            ta_chat: room.ta_chat.clone(),
            grader_history: room.grader_history.clone(),
            unreviewed_count: room.unreviewed_count,
            last_activity: room.last_activity,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    Malformed,
    UnknownKind,
    Permission,
    Busy,
    NotFound,
    InvalidTransition,
    OutOfRange,
    ResyncRequired,
    Invalid,
    Internal,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "body")]
pub enum ServerMessage {
    Welcome {
        participant: Participant,
        room_id: Option<String>,
        client_id: String,
        protocol: u64,
    },
    RoomState {
        room: RoomView,
    },
    Op {
        room_id: String,
        applied: AppliedOp,
    },
    Snapshot {
        room_id: String,
        client_id: String,
        snapshot: Snapshot,
    },
    /// A new message, or a changed one (label, review, edit).
    Chat {
        room_id: String,
        message: ChatMessage,
    },
    GraderResult {
        room_id: String,
        result: GraderResult,
    },
    ProblemSelected {
        room_id: String,
        problem_id: String,
        by: String,
    },
    Members {
        room_id: String,
        members: Vec<Participant>,
    },
    RoomList {
        rooms: Vec<RoomSummary>,
    },
    RoomUpdate {
        summary: RoomSummary,
    },
    Error {
        code: ErrorCode,
        message: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        request: Option<String>,
    },
}

impl ServerMessage {
    pub fn error(code: ErrorCode, message: impl Into<String>, request: Option<&str>) -> Self {
        ServerMessage::Error {
            code,
            message: message.into(),
            request: request.map(str::to_owned),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DecodeError {
    /// The connection must be closed.
    Version(Option<u64>),
    UnknownKind(String),
    Malformed(String),
}

fn envelope(value: Value) -> Result<(String, Value), DecodeError> {
    let Value::Object(mut map) = value else {
        return Err(DecodeError::Malformed("frame must be a JSON object".into()));
    };
    let v = map.remove("v").and_then(|v| v.as_u64());
    if v != Some(PROTOCOL_VERSION) {
        return Err(DecodeError::Version(v));
    }
    let kind = match map.remove("kind") {
        Some(Value::String(k)) => k,
        _ => return Err(DecodeError::Malformed("missing `kind`".into())),
    };
    let body = match map.remove("body") {
        None | Some(Value::Null) => Value::Object(Default::default()),
        Some(b) => b,
    };
    Ok((kind, body))
}

fn wrap<T: Serialize>(message: &T) -> String {
    let mut value = serde_json::to_value(message).expect("messages serialize");
    if let Value::Object(map) = &mut value {
        map.insert("v".into(), PROTOCOL_VERSION.into());
    }
    value.to_string()
}

pub fn decode_client(text: &str) -> Result<ClientMessage, DecodeError> {
    let value: Value = serde_json::from_str(text).map_err(|e| DecodeError::Malformed(e.to_string()))?;
    let (kind, body) = envelope(value)?;
    if !CLIENT_KINDS.contains(&kind.as_str()) {
        return Err(DecodeError::UnknownKind(kind));
    }
    serde_json::from_value(serde_json::json!({ "kind": kind, "body": body }))
        .map_err(|e| DecodeError::Malformed(format!("{kind}: {e}")))
}

pub fn encode_client(message: &ClientMessage) -> String {
    wrap(message)
}

pub fn encode_server(message: &ServerMessage) -> String {
    wrap(message)
}

pub fn decode_server(text: &str) -> Result<ServerMessage, DecodeError> {
    let value: Value = serde_json::from_str(text).map_err(|e| DecodeError::Malformed(e.to_string()))?;
    let (kind, body) = envelope(value)?;
    serde_json::from_value(serde_json::json!({ "kind": kind, "body": body }))
        .map_err(|e| DecodeError::Malformed(format!("{kind}: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sync::OpKind;

    #[test]
    fn client_frames_round_trip() {
        let msgs = vec![
            ClientMessage::Edit(EditOp {
                client_id: "c".into(),
                client_seq: 1,
                problem_id: "p".into(),
                blank_id: "b".into(),
                kind: OpKind::Delete { pos: 0, len: 2 },
                base_version: 3,
            }),
            ClientMessage::ListRooms {},
            ClientMessage::Review {
                room_id: Some("g1".into()),
                message_id: "m1".into(),
                action: ReviewAction::Edit { new_body: "x".into() },
            },
            ClientMessage::TaChat {
                room_id: None,
                body: "hi".into(),
            },
        ];
        for m in msgs {
            let text = encode_client(&m);
            assert!(!text.contains('\n'));
            assert_eq!(decode_client(&text).unwrap(), m);
        }
    }

    #[test]
    fn body_may_be_omitted_for_empty_kinds() {
        assert_eq!(decode_client(r#"{"v":1,"kind":"ListRooms"}"#).unwrap(), ClientMessage::ListRooms {});
        assert_eq!(
            decode_client(r#"{"v":1,"kind":"CheckAnswer","body":null}"#).unwrap(),
            ClientMessage::CheckAnswer { problem_id: None }
        );
    }

    #[test]
    fn decode_errors() {
        assert_eq!(decode_client(r#"{"v":2,"kind":"Ask","body":{}}"#), Err(DecodeError::Version(Some(2))));
        assert_eq!(decode_client(r#"{"kind":"Ask"}"#), Err(DecodeError::Version(None)));
        assert_eq!(decode_client(r#"{"v":1,"kind":"Dance"}"#), Err(DecodeError::UnknownKind("Dance".into())));
        assert!(matches!(decode_client(r#"{"v":1,"kind":"Ask","body":{}}"#), Err(DecodeError::Malformed(_))));
        assert!(matches!(decode_client("[1]"), Err(DecodeError::Malformed(_))));
        assert!(matches!(decode_client("not json"), Err(DecodeError::Malformed(_))));
    }

    #[test]
    fn every_listed_kind_decodes() {
        let bodies = [
            r#"{"client_id":"c","client_seq":1,"problem_id":"p","blank_id":"b","kind":{"insert":{"pos":0,"text":"x"}},"base_version":0}"#,
            r#"{"problem_id":"p"}"#,
            r#"{"problem_id":"p"}"#,
            r#"{"body":"help"}"#,
            r#"{"message_id":"m","label":"TooMuchHelp"}"#,
            r#"{}"#,
            r#"{"message_id":"m","action":{"type":"Read"}}"#,
            r#"{"body":"hi"}"#,
            r#"{}"#,
            r#"{"room_id":"g1"}"#,
            r#"{}"#,
            r#"{}"#,
        ];
        for (kind, body) in CLIENT_KINDS.iter().zip(bodies) {
            let frame = format!(r#"{{"v":1,"kind":"{kind}","body":{body}}}"#);
            let decoded = decode_client(&frame).unwrap_or_else(|e| panic!("{kind}: {e:?}"));
            assert_eq!(decoded.kind(), *kind);
        }
    }

    #[test]
    fn server_frame_shape() {
        let text = encode_server(&ServerMessage::error(ErrorCode::Busy, "tutor is answering", Some("Ask")));
        let v: Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["v"], 1);
        assert_eq!(v["kind"], "Error");
        assert_eq!(v["body"]["code"], "busy");
        assert_eq!(decode_server(&text).unwrap(), ServerMessage::error(ErrorCode::Busy, "tutor is answering", Some("Ask")));
    }
}
