"""Generator for the protocol reference document.

The reference (docs/PROTOCOL.md) is generated, checked in, and verified by
a test so it can never drift from the implementation. One golden example
per message kind, each encoded with the canonical encoder.
"""

from __future__ import annotations

from .protocol import MAX_MESSAGE_BYTES, MessageEnvelope, MessageKind, encode_message

# (kind, direction, sequenced, floor-controlled, summary)
_KIND_ROWS: list[tuple[MessageKind, str, str, str, str]] = [
    (MessageKind.JOIN, "client -> server", "no", "-", "first frame of a new participant; carries display_name"),
    (MessageKind.WELCOME, "server -> client", "no", "-", "join reply: participant_id, role, scene snapshot, roster, max_seq"),
    (MessageKind.SNAPSHOT, "server -> client", "no", "-", "full state replacing replay when the ring aged out"),
    (MessageKind.ROLE_REQUEST, "both", "no", "no", "follower asks for the floor; forwarded privately to the leader"),
    (MessageKind.ROLE_GRANT, "client -> server", "no", "leader", "leader hands the floor to target"),
    (MessageKind.ROLE_DENY, "both", "no", "leader", "leader declines a queued request; sent privately to the requester"),
    (MessageKind.VIEW_UPDATE, "both", "yes", "leader", "camera pose; rate-coalesced, last update in a window wins"),
    (MessageKind.SKETCH_CREATE, "both", "yes", "leader", "add a polyline/polygon/arrow/text annotation"),
    (MessageKind.SKETCH_DELETE, "both", "yes", "leader", "remove a sketch by id"),
    (MessageKind.CHAT, "both", "yes", "no", "instant message, optionally anchored to a location/feature"),
    (MessageKind.OP_EXEC, "both", "yes", "leader", "run an analysis op (built-in or external service)"),
    (MessageKind.OP_RESULT, "server -> client", "yes", "-", "result of the preceding op_exec; exactly one per op"),
    (MessageKind.MODEL_PLACE, "both", "yes", "leader", "place a catalog model reference"),
    (MessageKind.MODEL_MOVE, "both", "yes", "leader", "reposition/retune an existing placement"),
    (MessageKind.MODEL_REMOVE, "both", "yes", "leader", "remove a placement by id"),
    (MessageKind.LAYER_IMPORT, "both", "yes", "leader", "import a vector layer (ingested from GeoJSON)"),
    (MessageKind.STAGE_CHANGE, "both", "yes", "leader", "advance/retreat the decision stage"),
    (MessageKind.PUBLISH_SOLUTION, "both", "yes", "leader", "publish the scene to the review service; payload gains solution_id/version"),
    (MessageKind.PARTICIPANT_JOINED, "server -> client", "yes", "-", "roster add"),
    (MessageKind.PARTICIPANT_LEFT, "server -> client", "yes", "-", "roster drop (disconnect)"),
    (MessageKind.LEADER_CHANGED, "server -> client", "yes", "-", "floor moved: grant, disconnect succession, or reconnect repair"),
    (MessageKind.REPLAY_REQUEST, "client -> server", "no", "-", "reconnect with old participant_id and last applied seq"),
    (MessageKind.REPLAY_BATCH, "server -> client", "no", "-", "banner before the missed envelopes are re-sent verbatim"),
    (MessageKind.ERROR, "server -> client", "no", "-", "typed rejection; code names the failure"),
    (MessageKind.PING, "client -> server", "no", "no", "liveness probe"),
    (MessageKind.PONG, "server -> client", "no", "-", "ping reply, payload echoed"),
]

_ANCHOR = {"lat": 31.2285, "lon": 121.4055, "height": 12.5}
_VIEW = {"position": _ANCHOR, "heading": 42.0, "pitch": -25.0, "roll": 0.0}
_SKETCH = {
    "id": "sk-1",
    "kind": "arrow",
    "vertices": [{"lat": 31.2285, "lon": 121.4055, "height": 0.0}, {"lat": 31.2287, "lon": 121.406, "height": 0.0}],
    "author": "p1",
}
_PLACEMENT = {"id": "m-1", "model_ref": "tree_a", "position": _ANCHOR, "heading": 90.0, "scale": 1.5}
_PARTICIPANT = {"id": "p2", "display_name": "grace", "role": "follower", "joined_at": 1700000001000, "connected": True}
_EMPTY_SCENE = {"sketches": {}, "placements": {}, "layers": {}, "stage": "problem_definition"}

_EXAMPLE_PAYLOADS: dict[MessageKind, tuple[str, int | None, dict]] = {
    MessageKind.JOIN: ("joining", None, {"display_name": "ada"}),
    MessageKind.WELCOME: (
        "server",
        None,
        {
            "participant_id": "p2",
            "role": "follower",
            "scene": _EMPTY_SCENE,
            "last_view": _VIEW,
            "max_seq": 2,
            "participants": [_PARTICIPANT],
        },
    ),
    MessageKind.SNAPSHOT: (
        "server",
        None,
        {
            "participant_id": "p2",
            "role": "follower",
            "scene": _EMPTY_SCENE,
            "last_view": _VIEW,
            "max_seq": 4120,
            "participants": [_PARTICIPANT],
        },
    ),
    MessageKind.ROLE_REQUEST: ("p2", None, {}),
    MessageKind.ROLE_GRANT: ("p1", None, {"target": "p2"}),
    MessageKind.ROLE_DENY: ("p1", None, {"target": "p2"}),
    MessageKind.VIEW_UPDATE: ("p1", 17, {"view": _VIEW}),
    MessageKind.SKETCH_CREATE: ("p1", 18, {"sketch": _SKETCH}),
    MessageKind.SKETCH_DELETE: ("p1", 19, {"sketch_id": "sk-1"}),
    MessageKind.CHAT: ("p2", 20, {"text": "the tree next to the building", "anchor": {**_ANCHOR, "feature_id": "m-1"}}),
    MessageKind.OP_EXEC: (
        "p1",
        21,
        {"op": "distance", "op_id": "op-1", "params": {"a": {"lat": 31.2285, "lon": 121.4055}, "b": {"lat": 31.2301, "lon": 121.41}}},
    ),
    MessageKind.OP_RESULT: (
        "server",
        22,
        {"op": "distance", "op_id": "op-1", "requested_by": "p1", "status": "ok", "result": {"meters": 462.8}},
    ),
    MessageKind.MODEL_PLACE: ("p1", 23, {"placement": _PLACEMENT}),
    MessageKind.MODEL_MOVE: ("p1", 24, {"placement_id": "m-1", "position": _ANCHOR, "heading": 180.0}),
    MessageKind.MODEL_REMOVE: ("p1", 25, {"placement_id": "m-1"}),
    MessageKind.LAYER_IMPORT: (
        "p1",
        26,
        {
            "layer": {
                "id": "layer-campus",
                "name": "campus outline",
                "features": [
                    {
                        "geometry_type": "point",
                        "coordinates": [{"lat": 31.2285, "lon": 121.4055, "height": 0.0}],
                        "properties": {"name": "gate"},
                    }
                ],
            }
        },
    ),
    MessageKind.STAGE_CHANGE: ("p1", 27, {"stage": "problem_analysis"}),
    MessageKind.PUBLISH_SOLUTION: ("p1", 28, {"title": "plan A", "solution_id": "sol-3f2a9c1d77aa", "version": 1}),
    MessageKind.PARTICIPANT_JOINED: ("server", 2, {"participant": _PARTICIPANT}),
    MessageKind.PARTICIPANT_LEFT: ("server", 29, {"participant_id": "p2"}),
    MessageKind.LEADER_CHANGED: ("server", 30, {"participant_id": "p2", "previous_leader": "p1", "reason": "grant"}),
    MessageKind.REPLAY_REQUEST: ("p2", None, {"participant_id": "p2", "last_seq": 20}),
    MessageKind.REPLAY_BATCH: ("server", None, {"from_seq": 21, "to_seq": 30, "count": 10, "your_role": "follower"}),
    MessageKind.ERROR: ("server", None, {"code": "not_leader", "detail": "p2 is not the leader"}),
    MessageKind.PING: ("p1", None, {}),
    MessageKind.PONG: ("server", None, {}),
}

ERROR_CODES = [
    ("protocol_error", "frame failed decoding, carried a seq, or mismatched session/sender"),
    ("unknown_session", "replay_request for a session this server does not host"),
    ("not_leader", "floor-controlled action from a participant who does not hold the floor"),
    ("invalid_action", "payload failed validation; session state unchanged"),
    ("session_full", "participant cap reached"),
    ("invalid_name", "display name empty or longer than 64 characters"),
    ("unknown_participant", "participant id not known (or purged after the retention window)"),
    ("target_disconnected", "role grant aimed at a disconnected participant"),
    ("not_queued", "role denial for someone who has no pending request"),
    ("unknown_service", "op_exec naming neither a built-in nor a configured service"),
    ("store_failure", "review store rejected a publish"),
    ("internal_error", "unexpected server-side failure handling one message"),
]


def golden_examples() -> list[tuple[MessageKind, MessageEnvelope]]:
    out = []
    for kind, *_ in _KIND_ROWS:
        sender, seq, payload = _EXAMPLE_PAYLOADS[kind]
        out.append(
            (kind, MessageEnvelope(kind=kind, session="riverside", sender=sender, ts=1700000002000, payload=payload, seq=seq))
        )
    return out


def protocol_reference_text() -> str:
    lines: list[str] = []
    emit = lines.append
    emit("# Wire protocol reference")
    emit("")
    emit("_Generated by `geocollab protocol-dump`; do not edit by hand._")
    emit("")
    emit("## Envelope")
    emit("")
    emit("Every message is one UTF-8 JSON object with keys in this fixed order:")
    emit("`v`, `kind`, `session`, `seq`, `sender`, `ts`, `payload`.")
    emit("")
    emit("| field | type | notes |")
    emit("|---|---|---|")
    emit("| v | int | protocol version, always 1; other values are rejected |")
    emit("| kind | string | one of the kinds below; unknown kinds are rejected |")
    emit("| session | string | session id, `[A-Za-z0-9_-]{1,64}` |")
    emit("| seq | int >= 1 | server-assigned, present only on sequenced broadcasts; contiguous per session |")
    emit("| sender | string | participant id, or `server` |")
    emit("| ts | int | server wall clock, ms since the Unix epoch |")
    emit("| payload | object | kind-specific; see the examples |")
    emit("")
    emit(f"Absent optional fields are omitted, never null. Encoded size is capped at {MAX_MESSAGE_BYTES} bytes;")
    emit("larger messages are rejected on both encode and decode. Snapshots of scenes too large for one")
    emit("envelope are unsupported (keep scenes at interactive scale).")
    emit("")
    emit("Broadcast ordering: the `seq` values observed by any client form a gap-free, strictly")
    emit("increasing range. A reconnecting client sends `replay_request` with its last applied seq;")
    emit("the server either re-sends the missed envelopes verbatim (after a `replay_batch` banner)")
    emit("or, when the replay ring no longer covers the gap, sends a full `snapshot`.")
    emit("")
    emit("Camera updates are coalesced: at most `view_rate_hz` view_update broadcasts per second,")
    emit("always the most recent update in a window; any non-view action flushes a held view first,")
    emit("so relative order of views and scene mutations is preserved.")
    emit("")
    emit("## Message kinds")
    emit("")
    emit("| kind | direction | sequenced | floor-controlled | summary |")
    emit("|---|---|---|---|---|")
    for kind, direction, sequenced, gated, summary in _KIND_ROWS:
        emit(f"| {kind.value} | {direction} | {sequenced} | {gated} | {summary} |")
    emit("")
    emit("## Golden examples")
    emit("")
    emit("One canonical encoding per kind (session `riverside`, ts fixed). These byte-exact")
    emit("strings are asserted by the test suite.")
    emit("")
    for kind, env in golden_examples():
        emit(f"### {kind.value}")
        emit("")
        emit("```json")
        emit(encode_message(env).decode("utf-8"))
        emit("```")
        emit("")
    emit("## Error codes")
    emit("")
    emit("| code | meaning |")
    emit("|---|---|")
    for code, meaning in ERROR_CODES:
        emit(f"| {code} | {meaning} |")
    emit("")
    emit("## Built-in analysis ops")
    emit("")
    emit("`op_exec` payloads carry `op`, a client-chosen `op_id`, and `params`. Besides any URLs")
    emit("configured under `service_endpoints`, three ops are built in:")
    emit("")
    emit("| op | params | result |")
    emit("|---|---|---|")
    emit("| distance | `a`, `b`: `{lat, lon}` | `{meters}` great-circle distance (mean-radius sphere) |")
    emit("| buffer_point | `center`, `radius_m`, optional `n` (default 64) | `{polygon: [anchor…]}` ring in bearing order from north |")
    emit("| buffer_polyline | `line`: `[{lat, lon}…]`, `radius_m` | `{polygon: [anchor…]}` offset outline with round caps |")
    emit("")
    return "\n".join(lines)
