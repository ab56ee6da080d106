use std::ffi::{c_char, CStr, CString};
use std::ptr;

use serde_json::{json, Value};
use tutorhub_ffi::*;

const DEMO: &str = include_str!("../../core/assets/demo.md");

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(tutorhub_last_error()) }.to_string_lossy().into_owned()
}

/// Takes ownership of a returned string.
fn take(p: *mut c_char) -> Option<String> {
    if p.is_null() {
        return None;
    }
    let s = unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_owned();
    unsafe { tutorhub_string_free(p) };
    Some(s)
}

fn ok(status: TutorhubStatus) {
    assert_eq!(status, TutorhubStatus::Ok, "{}", last_error());
}

fn frame(kind: &str, body: Value) -> CString {
    c(&json!({"v": tutorhub_protocol_version(), "kind": kind, "body": body}).to_string())
}

struct Hub(*mut TutorhubHub);

impl Hub {
    fn new(options: Value) -> Hub {
        let mut hub = ptr::null_mut();
        ok(unsafe { tutorhub_hub_new(c(DEMO).as_ptr(), c(&options.to_string()).as_ptr(), &mut hub) });
        Hub(hub)
    }

    fn join(&self, email: &str, group: i64) -> Result<Value, (TutorhubStatus, String)> {
        let mut out = ptr::null_mut();
        let status = unsafe { tutorhub_hub_join(self.0, c(email).as_ptr(), group, &mut out) };
        match status {
            TutorhubStatus::Ok => Ok(serde_json::from_str(&take(out).unwrap()).unwrap()),
            s => Err((s, last_error())),
        }
    }

    fn enter(&self, email: &str, group: i64) -> String {
        let token = self.join(email, group).unwrap()["token"].as_str().unwrap().to_owned();
        ok(unsafe { tutorhub_hub_connect(self.0, c(&token).as_ptr()) });
        token
    }

    fn send(&self, token: &str, frame: &CString) -> TutorhubStatus {
        unsafe { tutorhub_hub_handle_frame(self.0, c(token).as_ptr(), frame.as_ptr()) }
    }

    fn poll(&self, token: &str) -> Vec<Value> {
        let mut out = ptr::null_mut();
        ok(unsafe { tutorhub_hub_poll(self.0, c(token).as_ptr(), &mut out) });
        let frames: Vec<String> = serde_json::from_str(&take(out).unwrap()).unwrap();
        frames.iter().map(|f| serde_json::from_str(f).unwrap()).collect()
    }
}

impl Drop for Hub {
    fn drop(&mut self) {
        unsafe { tutorhub_hub_free(self.0) };
    }
}

struct Replica(*mut TutorhubReplica);

impl Replica {
    fn new(client_id: &str, snapshot: &Value) -> Replica {
        let mut r = ptr::null_mut();
        ok(unsafe { tutorhub_replica_new(c(client_id).as_ptr(), c(&snapshot.to_string()).as_ptr(), &mut r) });
        Replica(r)
    }

    fn edit(&self, blank: &str, kind: Value) -> Option<Value> {
        let mut out = ptr::null_mut();
        ok(unsafe { tutorhub_replica_local_edit(self.0, c(blank).as_ptr(), c(&kind.to_string()).as_ptr(), &mut out) });
        take(out).map(|s| serde_json::from_str(&s).unwrap())
    }

    fn receive(&self, applied: &Value) -> Option<Value> {
        let mut out = ptr::null_mut();
        ok(unsafe { tutorhub_replica_receive(self.0, c(&applied.to_string()).as_ptr(), &mut out) });
        take(out).map(|s| serde_json::from_str(&s).unwrap())
    }

    fn text(&self, blank: &str) -> String {
        let mut out = ptr::null_mut();
        ok(unsafe { tutorhub_replica_text(self.0, c(blank).as_ptr(), &mut out) });
        take(out).unwrap()
    }

    fn state(&self) -> (u64, u64) {
        let (mut version, mut pending) = (0, 0);
        ok(unsafe { tutorhub_replica_state(self.0, &mut version, &mut pending) });
        (version, pending)
    }
}

impl Drop for Replica {
    fn drop(&mut self) {
        unsafe { tutorhub_replica_free(self.0) };
    }
}

#[test]
fn version_strings() {
    let v = unsafe { CStr::from_ptr(tutorhub_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
    assert_eq!(tutorhub_protocol_version(), tutorhub::server::protocol::PROTOCOL_VERSION);
}

#[test]
fn worksheet_round_trip_matches_core() {
    let mut out = ptr::null_mut();
    ok(unsafe { tutorhub_worksheet_import(c(DEMO).as_ptr(), &mut out) });
    let json_text = take(out).unwrap();
    let parsed: tutorhub::model::Worksheet = serde_json::from_str(&json_text).unwrap();
    assert_eq!(parsed, tutorhub::cms::import_worksheet(DEMO).unwrap());

    ok(unsafe { tutorhub_worksheet_export(c(&json_text).as_ptr(), &mut out) });
    let markdown = take(out).unwrap();
    assert_eq!(markdown, tutorhub::cms::export_worksheet(&parsed));
    assert_eq!(last_error(), "");
}

#[test]
fn errors_set_status_and_message() {
    let mut out: *mut c_char = ptr::null_mut();
    let broken = c("---\nid: x\npublished: true\n---\n\n## P\n\nno starter\n");
    assert_eq!(unsafe { tutorhub_worksheet_import(broken.as_ptr(), &mut out) }, TutorhubStatus::Parse);
    assert!(!last_error().is_empty());
    assert!(out.is_null());

    assert_eq!(unsafe { tutorhub_worksheet_import(ptr::null(), &mut out) }, TutorhubStatus::NullArgument);
    assert!(last_error().contains("markdown"));
    assert_eq!(unsafe { tutorhub_worksheet_import(c(DEMO).as_ptr(), ptr::null_mut()) }, TutorhubStatus::NullArgument);

    let bad_utf8 = [0xffu8, 0xfe, 0];
    assert_eq!(unsafe { tutorhub_worksheet_import(bad_utf8.as_ptr().cast(), &mut out) }, TutorhubStatus::InvalidUtf8);
    assert_eq!(unsafe { tutorhub_worksheet_export(c("{").as_ptr(), &mut out) }, TutorhubStatus::InvalidJson);

    // null handles are reported, not dereferenced
    assert_eq!(unsafe { tutorhub_hub_connect(ptr::null_mut(), c("t").as_ptr()) }, TutorhubStatus::NullArgument);
    assert_eq!(unsafe { tutorhub_replica_state(ptr::null_mut(), ptr::null_mut(), ptr::null_mut()) }, TutorhubStatus::NullArgument);
    unsafe {
        tutorhub_string_free(ptr::null_mut());
        tutorhub_hub_free(ptr::null_mut());
        tutorhub_replica_free(ptr::null_mut());
    }
}

#[test]
fn render_solution_substitutes_blanks() {
    let worksheet = tutorhub::cms::import_worksheet(DEMO).unwrap();
    let problem = serde_json::to_string(&worksheet.problems[0]).unwrap();
    let mut out = ptr::null_mut();
    let blanks = json!({"greeting": "hello", "name": "world", "answer": "42"}).to_string();
    ok(unsafe { tutorhub_render_solution(c(&problem).as_ptr(), c(&blanks).as_ptr(), &mut out) });
    let solution = take(out).unwrap();
    assert!(solution.starts_with("print hello, world\nprint the answer is 42"), "{solution}");
    assert!(!solution.contains("{{blank:"));

    let unknown = json!({"nope": "x"}).to_string();
    assert_eq!(unsafe { tutorhub_render_solution(c(&problem).as_ptr(), c(&unknown).as_ptr(), &mut out) }, TutorhubStatus::NotFound);
}

#[test]
fn transform_agrees_with_core() {
    let op = json!({"client_id": "a", "client_seq": 1, "problem_id": "p", "blank_id": "b",
        "kind": {"insert": {"pos": 3, "text": "xy"}}, "base_version": 0});
    let against = json!({"client_id": "b", "client_seq": 1, "problem_id": "p", "blank_id": "b",
        "kind": {"delete": {"pos": 0, "len": 2}}, "base_version": 0});
    let mut out = ptr::null_mut();
    ok(unsafe { tutorhub_transform(c(&op.to_string()).as_ptr(), c(&against.to_string()).as_ptr(), &mut out) });
    let got: tutorhub::sync::EditOp = serde_json::from_str(&take(out).unwrap()).unwrap();
    let expected = tutorhub::sync::transform(&serde_json::from_value(op).unwrap(), &serde_json::from_value(against).unwrap());
    assert_eq!(got, expected);
    assert_eq!(got.kind, tutorhub::sync::OpKind::Insert { pos: 1, text: "xy".into() });
}

fn first(frames: &[Value], kind: &str) -> Value {
    frames
        .iter()
        .find(|f| f["kind"] == kind)
        .unwrap_or_else(|| panic!("no {kind} in {frames:?}"))["body"]
        .clone()
}

#[test]
fn two_students_edit_through_the_embedded_hub() {
    let hub = Hub::new(json!({"groups": [1, 2], "max_group_size": 2, "virtual_time_ms": 1_000}));
    let tokens = [hub.enter("a@example.edu", 1), hub.enter("b@example.edu", 1)];
    let mut replicas = Vec::new();
    for token in &tokens {
        let frames = hub.poll(token);
        let welcome = first(&frames, "Welcome");
        let room = first(&frames, "RoomState")["room"].clone();
        let problem = room["selected_problem"].as_str().unwrap().to_owned();
        replicas.push(Replica::new(welcome["client_id"].as_str().unwrap(), &room["docs"][&problem]));
    }
    assert_eq!(replicas[0].text("greeting"), "hi");

    // concurrent edits to the same blank
    let a = replicas[0].edit("greeting", json!({"insert": {"pos": 0, "text": "oh "}})).unwrap();
    let b = replicas[1].edit("greeting", json!({"delete": {"pos": 0, "len": 2}})).unwrap();
    assert!(replicas[0].edit("greeting", json!({"insert": {"pos": 0, "text": "!"}})).is_none());
    ok(hub.send(&tokens[0], &frame("Edit", a)));
    ok(hub.send(&tokens[1], &frame("Edit", b)));

    // deliver until quiet
    loop {
        let mut moved = false;
        for (token, replica) in tokens.iter().zip(&replicas) {
            for f in hub.poll(token) {
                if f["kind"] == "Op" {
                    moved = true;
                    if let Some(next) = replica.receive(&f["body"]["applied"]) {
                        ok(hub.send(token, &frame("Edit", next)));
                    }
                }
            }
        }
        if !moved {
            break;
        }
    }
    assert_eq!(replicas[0].text("greeting"), replicas[1].text("greeting"));
    assert_eq!(replicas[0].text("greeting"), "!oh ");
    assert_eq!(replicas[0].state(), (3, 0));
    assert_eq!(replicas[1].state(), (3, 0));

    // group is full
    let (status, message) = hub.join("c@example.edu", 1).unwrap_err();
    assert_eq!(status, TutorhubStatus::Rejected);
    assert!(!message.is_empty());
    assert!(hub.join("c@example.edu", 2).is_ok());

    let mut log = ptr::null_mut();
    ok(unsafe { tutorhub_hub_event_log(hub.0, &mut log) });
    let log = take(log).unwrap();
    let records = log.lines().count();
    assert!(records >= 5, "{log}");
    for line in log.lines() {
        serde_json::from_str::<Value>(line).unwrap();
    }
}

#[test]
fn tutor_grader_and_ta_flow_complete_inline() {
    let hub = Hub::new(json!({"groups": [1], "ta_allowlist": ["TA@example.edu"], "virtual_time_ms": 0}));
    let student = hub.enter("s@example.edu", 1);
    let ta = hub.enter("ta@example.edu", -1);
    hub.poll(&student);
    hub.poll(&ta);

    ok(hub.send(&student, &frame("Ask", json!({"body": "why does this print hi?"}))));
    let frames = hub.poll(&student);
    let authors: Vec<Value> = frames
        .iter()
        .filter(|f| f["kind"] == "Chat")
        .map(|f| f["body"]["message"]["author"]["type"].clone())
        .collect();
    assert!(authors.contains(&json!("Student")), "{frames:?}");
    assert!(authors.contains(&json!("AI")), "{frames:?}");

    ok(hub.send(&student, &frame("CheckAnswer", json!({}))));
    let result = first(&hub.poll(&student), "GraderResult")["result"].clone();
    assert_eq!(result["overall_pass"], false);

    let mut rooms = ptr::null_mut();
    ok(unsafe { tutorhub_hub_list_rooms(hub.0, &mut rooms) });
    let rooms: Value = serde_json::from_str(&take(rooms).unwrap()).unwrap();
    assert_eq!(rooms[0]["unreviewed_count"], 1, "{rooms}");

    // the TA saw the room change
    assert!(hub.poll(&ta).iter().any(|f| f["kind"] == "RoomUpdate"));

    // wrong protocol version closes the connection
    let stale = c(&json!({"v": 999, "kind": "ListRooms", "body": {}}).to_string());
    assert_eq!(hub.send(&ta, &stale), TutorhubStatus::ProtocolVersion);
    assert_eq!(hub.send("no-such-token", &frame("ListRooms", json!({}))), TutorhubStatus::NotFound);

    ok(unsafe { tutorhub_hub_advance_clock(hub.0, 500) });
    ok(unsafe { tutorhub_hub_disconnect(hub.0, c(&student).as_ptr()) });
}

#[test]
fn advance_clock_needs_a_virtual_clock() {
    let hub = Hub::new(json!({}));
    assert_eq!(unsafe { tutorhub_hub_advance_clock(hub.0, 1) }, TutorhubStatus::NotFound);
    let mut h = ptr::null_mut();
    let status = unsafe { tutorhub_hub_new(c(DEMO).as_ptr(), c(r#"{"bogus": 1}"#).as_ptr(), &mut h) };
    assert_eq!(status, TutorhubStatus::InvalidJson);
    let status = unsafe { tutorhub_hub_new(c(DEMO).as_ptr(), ptr::null(), &mut h) };
    ok(status);
    unsafe { tutorhub_hub_free(h) };
}
