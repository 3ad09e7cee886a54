"""Design-session state machine: membership, floor control, sequencing, replay.

One DesignSession instance owns all state for one live session. The model
is leader-and-follower: exactly one connected participant holds the floor
at a time, only the leader's operations mutate the shared scene, and
followers interact through chat and role requests. Every accepted action
is assigned the next sequence number, appended to the replay ring, and
returned as a broadcast for the transport layer to fan out.

Concurrency contract: instances are NOT thread-safe. The transport layer
must serialize all calls on one session (single writer); distinct sessions
are independent.
"""

from __future__ import annotations

import logging
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable

from . import geo_model
from .geo_model import SceneState, ViewState, scene_apply, scene_hash
from .protocol import GeoAnchor, MessageEnvelope, MessageKind, SchemaViolation

logger = logging.getLogger(__name__)

DEFAULT_MAX_PARTICIPANTS = 64
DEFAULT_REPLAY_CAPACITY = 1024
DEFAULT_RETENTION_MS = 10 * 60 * 1000  # disconnected participants kept for reconnection
MAX_DISPLAY_NAME = 64
MAX_CHAT_CHARS = 4000

# Floor-controlled kinds: accepted only from the current leader.
GATED_KINDS = frozenset(
    {
        MessageKind.VIEW_UPDATE,
        MessageKind.SKETCH_CREATE,
        MessageKind.SKETCH_DELETE,
        MessageKind.MODEL_PLACE,
        MessageKind.MODEL_MOVE,
        MessageKind.MODEL_REMOVE,
        MessageKind.LAYER_IMPORT,
        MessageKind.STAGE_CHANGE,
        MessageKind.OP_EXEC,
        MessageKind.PUBLISH_SOLUTION,
    }
)

# Accepted from any connected participant, leader or not.
UNGATED_KINDS = frozenset({MessageKind.CHAT, MessageKind.ROLE_REQUEST})


class SessionError(Exception):
    """Base for session-state failures."""

    code = "session_error"


class NotLeader(SessionError):
    """A floor-controlled action arrived from a participant who is not the leader."""

    code = "not_leader"


class InvalidAction(SessionError):
    """Action payload failed validation; session state is unchanged."""

    code = "invalid_action"


class SessionFull(SessionError):
    code = "session_full"


class InvalidName(SessionError):
    code = "invalid_name"


class UnknownParticipant(SessionError):
    code = "unknown_participant"


class TargetDisconnected(SessionError):
    code = "target_disconnected"


class NotQueued(SessionError):
    code = "not_queued"


@dataclass
class Participant:
    id: str
    display_name: str
    role: str  # "leader" | "follower"
    joined_at: int
    connected: bool = True
    disconnected_at: int | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "display_name": self.display_name,
            "role": self.role,
            "joined_at": self.joined_at,
            "connected": self.connected,
        }


class ReplayBuffer:
    """Ring of the most recent sequenced broadcasts, contiguous by seq."""

    def __init__(self, capacity: int = DEFAULT_REPLAY_CAPACITY):
        if capacity < 1:
            raise ValueError("replay capacity must be >= 1")
        self.capacity = capacity
        self.entries: deque[MessageEnvelope] = deque(maxlen=capacity)

    def append(self, env: MessageEnvelope) -> None:
        if self.entries and env.seq != self.entries[-1].seq + 1:
            raise ValueError(f"non-contiguous seq {env.seq} after {self.entries[-1].seq}")
        self.entries.append(env)

    @property
    def max_seq(self) -> int:
        return self.entries[-1].seq if self.entries else 0

    @property
    def min_seq(self) -> int:
        return self.entries[0].seq if self.entries else 0

    def covers(self, last_seq: int) -> bool:
        """True when every broadcast after last_seq is still buffered."""
        if last_seq >= self.max_seq:
            return True
        return bool(self.entries) and self.min_seq <= last_seq + 1

    def since(self, last_seq: int) -> list[MessageEnvelope]:
        return [e for e in self.entries if e.seq > last_seq]


@dataclass
class Delivery:
    """What the transport must send after one state transition."""

    broadcasts: list[MessageEnvelope] = field(default_factory=list)
    direct: list[tuple[str, MessageEnvelope]] = field(default_factory=list)
    exclude_from_broadcast: frozenset[str] = frozenset()

    def extend(self, other: "Delivery") -> None:
        self.broadcasts.extend(other.broadcasts)
        self.direct.extend(other.direct)


def _now_ms() -> int:
    return int(time.time() * 1000)


class DesignSession:
    """Authoritative state for one synchronous design session."""

    def __init__(
        self,
        session_id: str,
        *,
        max_participants: int = DEFAULT_MAX_PARTICIPANTS,
        replay_capacity: int = DEFAULT_REPLAY_CAPACITY,
        retention_ms: int = DEFAULT_RETENTION_MS,
        clock: Callable[[], int] = _now_ms,
    ):
        self.id = session_id
        self.max_participants = max_participants
        self.retention_ms = retention_ms
        self.participants: dict[str, Participant] = {}
        self.scene: SceneState = geo_model.empty_scene()
        self.next_seq = 1
        self.replay = ReplayBuffer(replay_capacity)
        self.role_queue: list[str] = []
        self.last_view: ViewState | None = None
        self._clock = clock
        self._join_counter = 0

    # --- introspection -------------------------------------------------------

    @property
    def max_seq(self) -> int:
        return self.next_seq - 1

    def leader_id(self) -> str | None:
        for p in self.participants.values():
            if p.role == "leader":
                return p.id
        return None

    def connected_ids(self) -> list[str]:
        return [p.id for p in self.participants.values() if p.connected]

    def scene_digest(self) -> bytes:
        return scene_hash(self.scene)

    def roster(self) -> list[dict[str, Any]]:
        return [p.to_dict() for p in sorted(self.participants.values(), key=lambda p: (p.joined_at, p.id))]

    def require_leader(self, pid: str) -> Participant:
        participant = self._connected(pid)
        if participant.role != "leader":
            raise NotLeader(f"{pid} is not the leader")
        return participant

    # --- internals -------------------------------------------------------------

    def _connected(self, pid: str) -> Participant:
        participant = self.participants.get(pid)
        if participant is None:
            raise UnknownParticipant(f"no participant {pid!r}")
        if not participant.connected:
            raise UnknownParticipant(f"participant {pid!r} is not connected")
        return participant

    def _sequence(self, kind: MessageKind, sender: str, payload: dict[str, Any]) -> MessageEnvelope:
        env = MessageEnvelope(
            kind=kind,
            session=self.id,
            sender=sender,
            ts=self._clock(),
            payload=payload,
            seq=self.next_seq,
        )
        self.next_seq += 1
        self.replay.append(env)
        return env

    def _private(self, kind: MessageKind, payload: dict[str, Any]) -> MessageEnvelope:
        return MessageEnvelope(kind=kind, session=self.id, sender="server", ts=self._clock(), payload=payload)

    def emit_server_event(self, kind: MessageKind, payload: dict[str, Any]) -> MessageEnvelope:
        """Sequence a server-originated broadcast (e.g. an op_result)."""
        return self._sequence(kind, "server", payload)

    def _snapshot_payload(self) -> dict[str, Any]:
        return {
            "scene": self.scene.to_dict(),
            "last_view": self.last_view.to_dict() if self.last_view else None,
            "max_seq": self.max_seq,
            "participants": self.roster(),
        }

    def _pick_successor(self) -> str | None:
        for pid in self.role_queue:
            p = self.participants.get(pid)
            if p and p.connected:
                return pid
        candidates = [p for p in self.participants.values() if p.connected]
        if not candidates:
            return None
        return min(candidates, key=lambda p: (p.joined_at, p.id)).id

    def _promote(self, pid: str, reason: str, previous: str | None) -> MessageEnvelope:
        participant = self.participants[pid]
        participant.role = "leader"
        if pid in self.role_queue:
            self.role_queue.remove(pid)
        logger.info("session %s: leader changed to %s (%s)", self.id, pid, reason)
        return self._sequence(
            MessageKind.LEADER_CHANGED,
            "server",
            {"participant_id": pid, "previous_leader": previous, "reason": reason},
        )

    def _repair_leadership(self, reason: str) -> list[MessageEnvelope]:
        """Restore the exactly-one-leader-iff-anyone-connected invariant."""
        if self.leader_id() is not None or not any(p.connected for p in self.participants.values()):
            return []
        successor = self._pick_successor()
        assert successor is not None
        return [self._promote(successor, reason, None)]

    # --- operations ------------------------------------------------------------

    def join(self, display_name: str) -> tuple[str, Delivery]:
        """Admit a participant; first connected joiner leads, later ones follow."""
        if not isinstance(display_name, str) or not display_name.strip():
            raise InvalidName("display name must be a non-empty string")
        if len(display_name) > MAX_DISPLAY_NAME:
            raise InvalidName(f"display name exceeds {MAX_DISPLAY_NAME} characters")
        if sum(1 for p in self.participants.values() if p.connected) >= self.max_participants:
            raise SessionFull(f"session {self.id} is at its cap of {self.max_participants}")

        self._join_counter += 1
        pid = f"p{self._join_counter}"
        role = "leader" if not any(p.connected for p in self.participants.values()) else "follower"
        participant = Participant(id=pid, display_name=display_name, role=role, joined_at=self._clock())
        self.participants[pid] = participant
        logger.info("session %s: %s joined as %s (%r)", self.id, pid, role, display_name)

        joined = self._sequence(MessageKind.PARTICIPANT_JOINED, "server", {"participant": participant.to_dict()})
        welcome = self._private(
            MessageKind.WELCOME,
            {"participant_id": pid, "role": role, **self._snapshot_payload()},
        )
        delivery = Delivery(
            broadcasts=[joined],
            direct=[(pid, welcome)],
            # the welcome's max_seq already covers the join broadcast
            exclude_from_broadcast=frozenset({pid}),
        )
        return pid, delivery

    def submit_action(self, pid: str, kind: MessageKind | str, payload: dict[str, Any]) -> Delivery:
        """Validate, sequence and return the broadcast for one participant action.

        Floor-controlled kinds raise NotLeader unless pid holds the floor;
        chat and role_request always succeed for connected participants.
        On any error the session state is untouched and nothing is broadcast.
        """
        if isinstance(kind, str):
            try:
                kind = MessageKind(kind)
            except ValueError:
                raise InvalidAction(f"unknown action kind {kind!r}") from None
        participant = self._connected(pid)
        if not isinstance(payload, dict):
            raise InvalidAction("payload must be an object")

        if kind in UNGATED_KINDS:
            if kind is MessageKind.CHAT:
                return Delivery(broadcasts=[self._chat(participant, payload)])
            return self._role_request(participant)

        if kind not in GATED_KINDS:
            raise InvalidAction(f"{kind.value!r} cannot be submitted as a session action")
        if participant.role != "leader":
            raise NotLeader(f"{pid} is not the leader")

        if kind is MessageKind.VIEW_UPDATE:
            try:
                view = ViewState.from_dict(payload.get("view"))
            except geo_model.SceneError as exc:
                raise InvalidAction(str(exc)) from exc
            self.last_view = view
            return Delivery(broadcasts=[self._sequence(kind, pid, {"view": view.to_dict()})])

        if kind.value in geo_model.SCENE_ACTION_KINDS:
            try:
                new_scene = scene_apply(self.scene, kind, payload)
            except geo_model.SceneError as exc:
                raise InvalidAction(str(exc)) from exc
            env = self._sequence(kind, pid, payload)
            self.scene = new_scene
            return Delivery(broadcasts=[env])

        if kind is MessageKind.OP_EXEC:
            op = payload.get("op")
            if not isinstance(op, str) or not op:
                raise InvalidAction("op_exec requires a non-empty op name")
            if not isinstance(payload.get("params", {}), dict):
                raise InvalidAction("op_exec params must be an object")
            return Delivery(broadcasts=[self._sequence(kind, pid, payload)])

        # publish_solution: the caller has already persisted the record and
        # enriched the payload with the assigned solution_id/version.
        title = payload.get("title")
        if not isinstance(title, str) or not title.strip():
            raise InvalidAction("publish_solution requires a non-empty title")
        return Delivery(broadcasts=[self._sequence(kind, pid, payload)])

    def _chat(self, participant: Participant, payload: dict[str, Any]) -> MessageEnvelope:
        text = payload.get("text")
        if not isinstance(text, str) or not text:
            raise InvalidAction("chat requires non-empty text")
        if len(text) > MAX_CHAT_CHARS:
            raise InvalidAction(f"chat text exceeds {MAX_CHAT_CHARS} characters")
        out: dict[str, Any] = {"text": text}
        if payload.get("anchor") is not None:
            try:
                out["anchor"] = GeoAnchor.from_dict(payload["anchor"]).to_dict()
            except SchemaViolation as exc:
                raise InvalidAction(f"chat anchor: {exc}") from exc
        return self._sequence(MessageKind.CHAT, participant.id, out)

    def _role_request(self, participant: Participant) -> Delivery:
        if participant.role == "leader":
            raise InvalidAction("the leader cannot request the leader role")
        if participant.id not in self.role_queue:
            self.role_queue.append(participant.id)
        leader = self.leader_id()
        notice = self._private(
            MessageKind.ROLE_REQUEST,
            {"participant_id": participant.id, "display_name": participant.display_name},
        )
        # a connected participant implies a leader exists, but stay defensive
        direct = [(leader, notice)] if leader else []
        return Delivery(direct=direct)

    def grant_role(self, granter_pid: str, target_pid: str) -> Delivery:
        """Hand the floor to another connected participant."""
        self.require_leader(granter_pid)
        if target_pid == granter_pid:
            raise InvalidAction("cannot grant the leader role to yourself")
        target = self.participants.get(target_pid)
        if target is None:
            raise UnknownParticipant(f"no participant {target_pid!r}")
        if not target.connected:
            raise TargetDisconnected(f"{target_pid} is disconnected")
        self.participants[granter_pid].role = "follower"
        env = self._promote(target_pid, "grant", granter_pid)
        return Delivery(broadcasts=[env])

    def deny_role(self, leader_pid: str, target_pid: str) -> Delivery:
        """Reject a queued role request; the requester may ask again later."""
        self.require_leader(leader_pid)
        if target_pid not in self.role_queue:
            raise NotQueued(f"{target_pid} has no pending role request")
        self.role_queue.remove(target_pid)
        deny = self._private(MessageKind.ROLE_DENY, {"participant_id": target_pid})
        return Delivery(direct=[(target_pid, deny)])

    def handle_disconnect(self, pid: str) -> Delivery:
        """Mark a participant offline, keeping the record for reconnection.

        Leadership auto-transfers to the queue head, else to the earliest
        joined connected follower; with nobody left the session is leaderless.
        """
        participant = self.participants.get(pid)
        if participant is None:
            raise UnknownParticipant(f"no participant {pid!r}")
        if not participant.connected:
            return Delivery()
        participant.connected = False
        participant.disconnected_at = self._clock()
        if pid in self.role_queue:
            self.role_queue.remove(pid)
        logger.info("session %s: %s disconnected", self.id, pid)

        broadcasts = [self._sequence(MessageKind.PARTICIPANT_LEFT, "server", {"participant_id": pid})]
        if participant.role == "leader":
            participant.role = "follower"
            successor = self._pick_successor()
            if successor is not None:
                broadcasts.append(self._promote(successor, "disconnect_succession", pid))
        return Delivery(broadcasts=broadcasts)

    def replay_since(self, pid: str, last_seq: int) -> Delivery:
        """Reconnect a participant, replaying what they missed or snapshotting.

        When every broadcast after last_seq is still in the ring, the missed
        envelopes are re-sent verbatim (prefixed by a replay_batch banner);
        when the range has aged out, a full snapshot is sent instead.
        """
        participant = self.participants.get(pid)
        if participant is None:
            raise UnknownParticipant(f"no participant {pid!r}")
        if not isinstance(last_seq, int) or isinstance(last_seq, bool) or last_seq < 0:
            raise InvalidAction("last_seq must be an integer >= 0")
        participant.connected = True
        participant.disconnected_at = None
        broadcasts = self._repair_leadership("reconnect")
        logger.info("session %s: %s reconnected from seq %d", self.id, pid, last_seq)

        direct: list[tuple[str, MessageEnvelope]] = []
        if self.replay.covers(last_seq):
            missed = self.replay.since(last_seq)
            banner = self._private(
                MessageKind.REPLAY_BATCH,
                {
                    "from_seq": last_seq + 1,
                    "to_seq": self.max_seq,
                    "count": len(missed),
                    "your_role": participant.role,
                },
            )
            direct.append((pid, banner))
            direct.extend((pid, env) for env in missed)
        else:
            snapshot = self._private(
                MessageKind.SNAPSHOT,
                {"participant_id": pid, "role": participant.role, **self._snapshot_payload()},
            )
            direct.append((pid, snapshot))
        # any leadership-repair broadcast is already inside the replayed range,
        # so the reconnector must not receive it a second time via fanout
        return Delivery(broadcasts=broadcasts, direct=direct, exclude_from_broadcast=frozenset({pid}))

    def purge_disconnected(self, now_ms: int | None = None) -> list[str]:
        """Drop participants disconnected longer than the retention window."""
        now = self._clock() if now_ms is None else now_ms
        stale = [
            p.id
            for p in self.participants.values()
            if not p.connected
            and p.disconnected_at is not None
            and now - p.disconnected_at >= self.retention_ms
        ]
        for pid in stale:
            del self.participants[pid]
            if pid in self.role_queue:
                self.role_queue.remove(pid)
        return stale

    def check_invariants(self) -> None:
        """Assert the structural invariants; used by property tests."""
        leaders = [p.id for p in self.participants.values() if p.role == "leader"]
        connected = [p.id for p in self.participants.values() if p.connected]
        if len(leaders) > 1:
            raise AssertionError(f"multiple leaders: {leaders}")
        if bool(connected) != (len(leaders) == 1):
            raise AssertionError(f"leader/connected mismatch: leaders={leaders} connected={connected}")
        if len(set(self.role_queue)) != len(self.role_queue):
            raise AssertionError(f"duplicate role requests: {self.role_queue}")
        if leaders and leaders[0] in self.role_queue:
            raise AssertionError("current leader is in the role queue")
        if self.next_seq != self.replay.max_seq + 1 and self.replay.entries:
            raise AssertionError(f"next_seq {self.next_seq} != replay max {self.replay.max_seq} + 1")


def apply_broadcast(scene: SceneState, env: MessageEnvelope) -> SceneState:
    """Follower-side replication: apply one broadcast to a local scene copy."""
    if env.kind.value in geo_model.SCENE_ACTION_KINDS:
        return scene_apply(scene, env.kind, env.payload)
    return scene


def broadcast_seqs(envelopes: Iterable[MessageEnvelope]) -> list[int]:
    return [e.seq for e in envelopes if e.seq is not None]
