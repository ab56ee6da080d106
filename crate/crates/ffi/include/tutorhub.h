#ifndef TUTORHUB_H
#define TUTORHUB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum TutorhubStatus {
  TUTORHUB_STATUS_OK = 0,
  // A required pointer argument was null.
  TUTORHUB_STATUS_NULL_ARGUMENT = 1,
  // A string argument was not valid UTF-8.
  TUTORHUB_STATUS_INVALID_UTF8 = 2,
  // A JSON argument did not match the expected shape.
  TUTORHUB_STATUS_INVALID_JSON = 3,
  // Worksheet markdown failed to parse or validate.
  TUTORHUB_STATUS_PARSE = 4,
  // An edit could not be applied (range, version or sequence error).
  TUTORHUB_STATUS_SYNC = 5,
  TUTORHUB_STATUS_NOT_FOUND = 6,
  // A join was refused (room full, unknown group, bad email).
  TUTORHUB_STATUS_REJECTED = 7,
  // A frame used another protocol version; close the connection.
  TUTORHUB_STATUS_PROTOCOL_VERSION = 8,
  // A Rust panic was caught at the boundary.
  TUTORHUB_STATUS_PANIC = 9,
} TutorhubStatus;

// Opaque in-process hub with an in-memory event log. Tutor requests are
// answered by the scripted mock and grading runs in process, both inline.
typedef struct TutorhubHub TutorhubHub;

// Opaque client-side replica of one problem document.
typedef struct TutorhubReplica TutorhubReplica;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread; empty after a success.
// Valid until the next tutorhub call on the same thread. Never null.
const char *tutorhub_last_error(void);

// Frees a string returned by this library. Null is ignored.
//
// # Safety
// `s` must come from this library and not be freed twice.
void tutorhub_string_free(char *s);

// Library version, static storage.
const char *tutorhub_version(void);

// WebSocket protocol version spoken by the hub.
uint64_t tutorhub_protocol_version(void);

// Parses worksheet markdown into worksheet JSON. On `Parse`, the last
// error lists every problem, one per line.
//
// # Safety
// `markdown` must be a NUL-terminated string; `json_out` must be writable.
enum TutorhubStatus tutorhub_worksheet_import(const char *markdown, char **json_out);

// Renders worksheet JSON as canonical markdown.
//
// # Safety
// `worksheet_json` must be a NUL-terminated string; `markdown_out` must be writable.
enum TutorhubStatus tutorhub_worksheet_export(const char *worksheet_json, char **markdown_out);

// Substitutes blank texts (a JSON object of blank id to text) into a
// problem's starter code.
//
// # Safety
// Both inputs must be NUL-terminated strings; `solution_out` must be writable.
enum TutorhubStatus tutorhub_render_solution(const char *problem_json,
                                             const char *blanks_json,
                                             char **solution_out);

// Rewrites `op` so it applies after `against` (both EditOp JSON).
//
// # Safety
// Both inputs must be NUL-terminated strings; `op_out` must be writable.
enum TutorhubStatus tutorhub_transform(const char *op_json,
                                       const char *against_json,
                                       char **op_out);

// Creates a replica from the client id and snapshot a `Snapshot` or
// `Welcome`/`RoomState` frame carried.
//
// # Safety
// Inputs must be NUL-terminated strings; `replica_out` must be writable.
enum TutorhubStatus tutorhub_replica_new(const char *client_id,
                                         const char *snapshot_json,
                                         struct TutorhubReplica **replica_out);

// # Safety
// `replica` must come from `tutorhub_replica_new` and not be used afterwards.
void tutorhub_replica_free(struct TutorhubReplica *replica);

// Applies a local edit (`{"insert":{"pos":0,"text":"x"}}` or
// `{"delete":{"pos":0,"len":1}}`). Writes the EditOp JSON to send now, or
// null when an earlier op is still unacknowledged.
//
// # Safety
// Pointers must be valid; `op_out` must be writable.
enum TutorhubStatus tutorhub_replica_local_edit(struct TutorhubReplica *replica,
                                                const char *blank_id,
                                                const char *kind_json,
                                                char **op_out);

// Applies a server `AppliedOp` (the `applied` field of an `Op` frame).
// Writes the next EditOp to send, or null.
//
// On `Sync` the replica is out of step: request a `Snapshot` and rebuild it.
//
// # Safety
// Pointers must be valid; `op_out` must be writable.
enum TutorhubStatus tutorhub_replica_receive(struct TutorhubReplica *replica,
                                             const char *applied_json,
                                             char **op_out);

// Current text of one blank.
//
// # Safety
// Pointers must be valid; `text_out` must be writable.
enum TutorhubStatus tutorhub_replica_text(struct TutorhubReplica *replica,
                                          const char *blank_id,
                                          char **text_out);

// All blank texts as a JSON object.
//
// # Safety
// Pointers must be valid; `blanks_out` must be writable.
enum TutorhubStatus tutorhub_replica_blanks(struct TutorhubReplica *replica, char **blanks_out);

// Server version the replica has caught up to, and its unacknowledged op
// count. Either out-pointer may be null.
//
// # Safety
// `replica` must be valid.
enum TutorhubStatus tutorhub_replica_state(struct TutorhubReplica *replica,
                                           uint64_t *version_out,
                                           uint64_t *pending_out);

// Creates a hub serving one worksheet (markdown). `options_json` may be
// null or an object with `groups`, `max_group_size`, `ta_allowlist`,
// `max_turns` and `virtual_time_ms`.
//
// # Safety
// `worksheet_markdown` must be a NUL-terminated string; `hub_out` must be writable.
enum TutorhubStatus tutorhub_hub_new(const char *worksheet_markdown,
                                     const char *options_json,
                                     struct TutorhubHub **hub_out);

// # Safety
// `hub` must come from `tutorhub_hub_new` and not be used afterwards.
void tutorhub_hub_free(struct TutorhubHub *hub);

// Signs a participant in. `group_number` < 0 means none (TAs only).
// Writes the join response JSON (`token`, `participant`, `room_id`,
// `worksheet_id`). Refusals return `Rejected` or `NotFound`.
//
// # Safety
// Pointers must be valid; `response_out` must be writable.
enum TutorhubStatus tutorhub_hub_join(struct TutorhubHub *hub,
                                      const char *email,
                                      int64_t group_number,
                                      char **response_out);

// Attaches a connection for `token`; queues Welcome and RoomState frames.
//
// # Safety
// Pointers must be valid.
enum TutorhubStatus tutorhub_hub_connect(struct TutorhubHub *hub, const char *token);

// Detaches the connection; the session stays valid.
//
// # Safety
// Pointers must be valid.
enum TutorhubStatus tutorhub_hub_disconnect(struct TutorhubHub *hub, const char *token);

// Handles one client frame. Rejections are queued as Error frames and
// still return `Ok`; `ProtocolVersion` and `NotFound` (unknown session)
// mean the connection should be closed. Tutor and grader work requested
// by the frame completes before this returns.
//
// # Safety
// Pointers must be valid.
enum TutorhubStatus tutorhub_hub_handle_frame(struct TutorhubHub *hub,
                                              const char *token,
                                              const char *frame);

// Removes and returns the frames queued for `token` as a JSON array of
// frame strings, oldest first.
//
// # Safety
// Pointers must be valid; `frames_out` must be writable.
enum TutorhubStatus tutorhub_hub_poll(struct TutorhubHub *hub,
                                      const char *token,
                                      char **frames_out);

// TA room list in priority order, as JSON.
//
// # Safety
// Pointers must be valid; `rooms_out` must be writable.
enum TutorhubStatus tutorhub_hub_list_rooms(struct TutorhubHub *hub, char **rooms_out);

// The event log so far, as JSON lines.
//
// # Safety
// Pointers must be valid; `log_out` must be writable.
enum TutorhubStatus tutorhub_hub_event_log(struct TutorhubHub *hub, char **log_out);

// Moves a virtual clock forward. `NotFound` when the hub uses the system
// clock.
//
// # Safety
// `hub` must be valid.
enum TutorhubStatus tutorhub_hub_advance_clock(struct TutorhubHub *hub, uint64_t ms);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TUTORHUB_H */
