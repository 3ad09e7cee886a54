"""Wire protocol for the collaboration server.

Defines the versioned message envelope, the closed set of message kinds,
and the canonical JSON encoding spoken over every WebSocket connection
(clients, server, simulation harness). Everything here is pure and
thread-safe: no I/O, no shared mutable state.

Canonical encoding rules:
- one JSON object per message, UTF-8, no trailing whitespace
- envelope keys in fixed order: v, kind, session, seq, sender, ts, payload
- absent optional fields are omitted, never null
- encoded size is capped at 64 KiB
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

PROTOCOL_VERSION = 1
MAX_MESSAGE_BYTES = 65_536


class ProtocolError(Exception):
    """Base for every typed protocol failure."""


class OversizeMessage(ProtocolError):
    """Encoded message exceeds MAX_MESSAGE_BYTES."""


class DecodeError(ProtocolError):
    """Base for failures turning bytes into an envelope."""


class MalformedJson(DecodeError):
    """Input is not valid UTF-8 JSON."""


class UnsupportedVersion(DecodeError):
    """Envelope carries a protocol version other than 1."""


class UnknownKind(DecodeError):
    """Envelope kind is not in the MessageKind enumeration."""


class SchemaViolation(DecodeError):
    """A field is missing, has the wrong type, or violates an invariant."""

    def __init__(self, field_name: str, detail: str = ""):
        self.field = field_name
        message = f"invalid field {field_name!r}"
        if detail:
            message += f": {detail}"
        super().__init__(message)


class MessageKind(str, Enum):
    JOIN = "join"
    WELCOME = "welcome"
    SNAPSHOT = "snapshot"
    ROLE_REQUEST = "role_request"
    ROLE_GRANT = "role_grant"
    ROLE_DENY = "role_deny"
    VIEW_UPDATE = "view_update"
    SKETCH_CREATE = "sketch_create"
    SKETCH_DELETE = "sketch_delete"
    CHAT = "chat"
    OP_EXEC = "op_exec"
    OP_RESULT = "op_result"
    MODEL_PLACE = "model_place"
    MODEL_MOVE = "model_move"
    MODEL_REMOVE = "model_remove"
    LAYER_IMPORT = "layer_import"
    STAGE_CHANGE = "stage_change"
    PUBLISH_SOLUTION = "publish_solution"
    PARTICIPANT_JOINED = "participant_joined"
    PARTICIPANT_LEFT = "participant_left"
    LEADER_CHANGED = "leader_changed"
    REPLAY_REQUEST = "replay_request"
    REPLAY_BATCH = "replay_batch"
    ERROR = "error"
    PING = "ping"
    PONG = "pong"


_KINDS_BY_VALUE = {k.value: k for k in MessageKind}


def _is_int(value: Any) -> bool:
    # bool is an int subclass; the wire format does not treat it as one
    return isinstance(value, int) and not isinstance(value, bool)


@dataclass(frozen=True)
class GeoAnchor:
    """A point on (or above) the reference sphere, optionally naming a scene object."""

    lat: float
    lon: float
    height: float = 0.0
    feature_id: str | None = None

    def __post_init__(self):
        for name, value in (("lat", self.lat), ("lon", self.lon), ("height", self.height)):
            if not isinstance(value, (int, float)) or isinstance(value, bool) or not math.isfinite(value):
                raise SchemaViolation(name, "must be a finite number")
            object.__setattr__(self, name, float(value))
        if not -90.0 <= self.lat <= 90.0:
            raise SchemaViolation("lat", "must be within [-90, 90]")
        if not -180.0 <= self.lon < 180.0:
            raise SchemaViolation("lon", "must be within [-180, 180)")
        if self.feature_id is not None and (not isinstance(self.feature_id, str) or not self.feature_id):
            raise SchemaViolation("feature_id", "must be a non-empty string when present")

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"lat": self.lat, "lon": self.lon, "height": self.height}
        if self.feature_id is not None:
            out["feature_id"] = self.feature_id
        return out

    @classmethod
    def from_dict(cls, raw: Any) -> "GeoAnchor":
        if not isinstance(raw, dict):
            raise SchemaViolation("anchor", "must be an object")
        extra = set(raw) - {"lat", "lon", "height", "feature_id"}
        if extra:
            raise SchemaViolation(sorted(extra)[0], "unknown anchor field")
        if "lat" not in raw or "lon" not in raw:
            raise SchemaViolation("anchor", "lat and lon are required")
        return cls(
            lat=raw["lat"],
            lon=raw["lon"],
            height=raw.get("height", 0.0),
            feature_id=raw.get("feature_id"),
        )


@dataclass(frozen=True)
class MessageEnvelope:
    """One wire message: a kind-specific payload plus routing metadata.

    seq is server-assigned and present only on server->client broadcasts;
    client->server messages must leave it unset.
    """

    kind: MessageKind
    session: str
    sender: str
    ts: int
    payload: dict[str, Any] = field(default_factory=dict)
    seq: int | None = None
    v: int = PROTOCOL_VERSION


_ENVELOPE_FIELDS = ("v", "kind", "session", "seq", "sender", "ts", "payload")


def _validate_envelope(env: MessageEnvelope) -> None:
    if env.v != PROTOCOL_VERSION:
        raise UnsupportedVersion(f"unsupported protocol version {env.v!r}")
    if not isinstance(env.kind, MessageKind):
        raise UnknownKind(f"unknown message kind {env.kind!r}")
    if not isinstance(env.session, str) or not env.session:
        raise SchemaViolation("session", "must be a non-empty string")
    if env.seq is not None and (not _is_int(env.seq) or env.seq < 1):
        raise SchemaViolation("seq", "must be an integer >= 1 when present")
    if not isinstance(env.sender, str) or not env.sender:
        raise SchemaViolation("sender", "must be a non-empty string")
    if not _is_int(env.ts) or env.ts < 0:
        raise SchemaViolation("ts", "must be a non-negative integer")
    if not isinstance(env.payload, dict):
        raise SchemaViolation("payload", "must be an object")


def encode_message(env: MessageEnvelope) -> bytes:
    """Encode an envelope as canonical UTF-8 JSON.

    Raises OversizeMessage when the encoding exceeds MAX_MESSAGE_BYTES, and
    SchemaViolation/UnknownKind/UnsupportedVersion when the envelope itself
    is invalid (programming error on the caller's side).
    """
    _validate_envelope(env)
    body: dict[str, Any] = {"v": env.v, "kind": env.kind.value, "session": env.session}
    if env.seq is not None:
        body["seq"] = env.seq
    body["sender"] = env.sender
    body["ts"] = env.ts
    body["payload"] = env.payload
    try:
        text = json.dumps(body, ensure_ascii=False, separators=(",", ":"), allow_nan=False)
    except (TypeError, ValueError) as exc:
        raise SchemaViolation("payload", f"not JSON-serializable: {exc}") from exc
    raw = text.encode("utf-8")
    if len(raw) > MAX_MESSAGE_BYTES:
        raise OversizeMessage(f"encoded message is {len(raw)} bytes, limit is {MAX_MESSAGE_BYTES}")
    return raw


def decode_message(raw: bytes | str) -> MessageEnvelope:
    """Decode bytes into an envelope, or raise a typed DecodeError.

    Total over arbitrary input: any byte string yields either a valid
    envelope or one of MalformedJson, OversizeMessage, UnsupportedVersion,
    UnknownKind, SchemaViolation. Never raises anything else.
    """
    if isinstance(raw, str):
        raw = raw.encode("utf-8")
    if not isinstance(raw, (bytes, bytearray)):
        raise MalformedJson("input is not bytes")
    if len(raw) > MAX_MESSAGE_BYTES:
        raise OversizeMessage(f"message is {len(raw)} bytes, limit is {MAX_MESSAGE_BYTES}")
    try:
        text = bytes(raw).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise MalformedJson(f"not valid UTF-8: {exc}") from exc
    try:
        body = json.loads(text)
    except (json.JSONDecodeError, RecursionError, ValueError) as exc:
        raise MalformedJson(f"not valid JSON: {exc}") from exc
    if not isinstance(body, dict):
        raise SchemaViolation("envelope", "top-level value must be an object")

    for key in body:
        if key not in _ENVELOPE_FIELDS:
            raise SchemaViolation(key, "unknown envelope field")

    if "v" not in body:
        raise SchemaViolation("v", "missing")
    if not _is_int(body["v"]):
        raise SchemaViolation("v", "must be an integer")
    if body["v"] != PROTOCOL_VERSION:
        raise UnsupportedVersion(f"unsupported protocol version {body['v']}")

    if "kind" not in body:
        raise SchemaViolation("kind", "missing")
    if not isinstance(body["kind"], str):
        raise SchemaViolation("kind", "must be a string")
    kind = _KINDS_BY_VALUE.get(body["kind"])
    if kind is None:
        raise UnknownKind(f"unknown message kind {body['kind']!r}")

    for name in ("session", "sender"):
        if name not in body:
            raise SchemaViolation(name, "missing")
        if not isinstance(body[name], str) or not body[name]:
            raise SchemaViolation(name, "must be a non-empty string")

    seq = body.get("seq")
    if seq is not None and (not _is_int(seq) or seq < 1):
        raise SchemaViolation("seq", "must be an integer >= 1 when present")

    if "ts" not in body:
        raise SchemaViolation("ts", "missing")
    if not _is_int(body["ts"]) or body["ts"] < 0:
        raise SchemaViolation("ts", "must be a non-negative integer")

    if "payload" not in body:
        raise SchemaViolation("payload", "missing")
    if not isinstance(body["payload"], dict):
        raise SchemaViolation("payload", "must be an object")

    return MessageEnvelope(
        kind=kind,
        session=body["session"],
        sender=body["sender"],
        ts=body["ts"],
        payload=body["payload"],
        seq=seq,
        v=body["v"],
    )
