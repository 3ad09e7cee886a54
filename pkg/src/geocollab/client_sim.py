"""Headless client: the follower/leader state machine without a 3D viewer.

Replicates exactly what a rendering client would do with the broadcast
stream: install the welcome snapshot, apply every sequenced broadcast in
order, track the shared camera, and keep a transcript of everything sent
and received. The transcript is what the harness audits for convergence,
gating soundness and gap-free ordering.

Broadcasts must arrive in seq order (the server guarantees per-connection
FIFO); anything out of order is buffered and logged loudly because it
indicates a transport bug or an injected fault.
"""

from __future__ import annotations

import asyncio
import logging
from dataclasses import dataclass, field
from typing import Any, Callable

from websockets.asyncio.client import connect as ws_connect
from websockets.exceptions import WebSocketException

from .geo_model import SceneState, ViewState, empty_scene, scene_hash
from .protocol import (
    MessageEnvelope,
    MessageKind,
    ProtocolError,
    decode_message,
    encode_message,
)
from .session_core import apply_broadcast

logger = logging.getLogger(__name__)


class ClientError(Exception):
    pass


class ConnectFailure(ClientError):
    pass


class ProtocolViolation(ClientError):
    pass


@dataclass
class TranscriptEntry:
    direction: str  # "sent" | "recv"
    env: MessageEnvelope

    def to_dict(self) -> dict[str, Any]:
        env = self.env
        return {
            "direction": self.direction,
            "kind": env.kind.value,
            "session": env.session,
            "seq": env.seq,
            "sender": env.sender,
            "ts": env.ts,
            "payload": env.payload,
        }


@dataclass
class SeqSegment:
    """One contiguous run of applied broadcasts, started by a welcome or snapshot."""

    base: int
    last: int


class HeadlessClient:
    def __init__(self, name: str):
        self.name = name
        self.participant_id: str | None = None
        self.role: str | None = None
        self.session_id: str | None = None
        self.scene: SceneState = empty_scene()
        self.last_seq = 0
        self.last_view: ViewState | None = None
        self.roster: dict[str, dict[str, Any]] = {}
        self.transcript: list[TranscriptEntry] = []
        self.errors: list[dict[str, Any]] = []
        self.not_leader_count = 0
        self.replay_banners: list[dict[str, Any]] = []
        self.snapshot_count = 0
        self.seq_segments: list[SeqSegment] = []
        self.out_of_order: list[int] = []
        self.connected = False
        self._base_url: str | None = None
        self._display_name: str | None = None
        self._ws = None
        self._recv_task: asyncio.Task | None = None
        self._event = asyncio.Event()
        self._pending: dict[int, MessageEnvelope] = {}

    # --- connection lifecycle --------------------------------------------------

    async def connect(self, base_url: str, session_id: str, display_name: str) -> None:
        """Join a session and install the welcome snapshot."""
        self._base_url = base_url
        self.session_id = session_id
        self._display_name = display_name
        try:
            self._ws = await ws_connect(f"{base_url}/ws/{session_id}", max_size=2**22)
        except (OSError, WebSocketException) as exc:
            raise ConnectFailure(f"{self.name}: cannot reach {base_url}: {exc}") from exc
        await self._send(MessageKind.JOIN, {"display_name": display_name}, sender="joining")
        env = await self._recv_one()
        if env.kind is MessageKind.ERROR:
            raise ConnectFailure(f"{self.name}: join rejected: {env.payload}")
        if env.kind is not MessageKind.WELCOME:
            raise ProtocolViolation(f"{self.name}: expected welcome, got {env.kind}")
        payload = env.payload
        self.participant_id = payload["participant_id"]
        self.role = payload["role"]
        self._install_snapshot(payload)
        self.connected = True
        self._recv_task = asyncio.create_task(self._recv_loop(), name=f"recv-{self.name}")

    async def reconnect(self) -> str:
        """Resume with the old participant id; returns 'replay' or 'snapshot'."""
        if self.participant_id is None or self._base_url is None:
            raise ClientError(f"{self.name}: never connected")
        try:
            self._ws = await ws_connect(f"{self._base_url}/ws/{self.session_id}", max_size=2**22)
        except (OSError, WebSocketException) as exc:
            raise ConnectFailure(f"{self.name}: cannot reach {self._base_url}: {exc}") from exc
        await self._send(
            MessageKind.REPLAY_REQUEST,
            {"participant_id": self.participant_id, "last_seq": self.last_seq},
        )
        env = await self._recv_one()
        if env.kind is MessageKind.ERROR:
            raise ConnectFailure(f"{self.name}: reconnect rejected: {env.payload}")
        self.connected = True
        if env.kind is MessageKind.REPLAY_BATCH:
            banner = env.payload
            self.replay_banners.append(banner)
            self._recv_task = asyncio.create_task(self._recv_loop(), name=f"recv-{self.name}")
            if banner["count"]:
                await self.wait_for(lambda c: c.last_seq >= banner["to_seq"], timeout=30.0)
            self.role = banner.get("your_role", self.role)
            return "replay"
        if env.kind is MessageKind.SNAPSHOT:
            self.snapshot_count += 1
            self.role = env.payload.get("role", self.role)
            self._install_snapshot(env.payload)
            self._recv_task = asyncio.create_task(self._recv_loop(), name=f"recv-{self.name}")
            return "snapshot"
        raise ProtocolViolation(f"{self.name}: expected replay_batch or snapshot, got {env.kind}")

    async def close(self) -> None:
        self.connected = False
        if self._recv_task:
            self._recv_task.cancel()
            try:
                await self._recv_task
            except (asyncio.CancelledError, Exception):
                pass
            self._recv_task = None
        if self._ws is not None:
            try:
                await self._ws.close()
            except Exception:
                pass
            self._ws = None

    # --- sending ----------------------------------------------------------------

    async def send_action(self, kind: MessageKind | str, payload: dict[str, Any]) -> None:
        if not self.connected:
            raise ClientError(f"{self.name}: not connected")
        kind = MessageKind(kind) if isinstance(kind, str) else kind
        await self._send(kind, payload)

    async def _send(self, kind: MessageKind, payload: dict[str, Any], sender: str | None = None) -> None:
        env = MessageEnvelope(
            kind=kind,
            session=self.session_id,
            sender=sender or self.participant_id or "joining",
            ts=0,
            payload=payload,
        )
        self.transcript.append(TranscriptEntry("sent", env))
        await self._ws.send(encode_message(env).decode("utf-8"))

    # --- receiving ----------------------------------------------------------------

    async def _recv_one(self) -> MessageEnvelope:
        raw = await self._ws.recv()
        try:
            env = decode_message(raw if isinstance(raw, (bytes, str)) else bytes(raw))
        except ProtocolError as exc:
            raise ProtocolViolation(f"{self.name}: server sent undecodable frame: {exc}") from exc
        self.transcript.append(TranscriptEntry("recv", env))
        return env

    async def _recv_loop(self) -> None:
        try:
            while True:
                env = await self._recv_one()
                self._dispatch(env)
                self._event.set()
        except asyncio.CancelledError:
            raise
        except (WebSocketException, OSError, EOFError):
            self.connected = False
            self._event.set()
        except ProtocolViolation:
            logger.exception("%s: protocol violation", self.name)
            self.connected = False
            self._event.set()

    def _dispatch(self, env: MessageEnvelope) -> None:
        kind = env.kind
        if kind is MessageKind.ERROR:
            self.errors.append(env.payload)
            if env.payload.get("code") == "not_leader":
                self.not_leader_count += 1
            return
        if kind is MessageKind.SNAPSHOT:
            self.snapshot_count += 1
            self._install_snapshot(env.payload)
            return
        if kind is MessageKind.REPLAY_BATCH:
            self.replay_banners.append(env.payload)
            return
        if env.seq is None:
            # private server messages: pong, role_request notices, role_deny
            if kind is MessageKind.ROLE_DENY and env.payload.get("participant_id") == self.participant_id:
                logger.info("%s: role request denied", self.name)
            return
        if env.seq <= self.last_seq:
            logger.warning("%s: duplicate broadcast seq %d", self.name, env.seq)
            return
        if env.seq > self.last_seq + 1:
            # per-connection FIFO should make this impossible; scream and buffer
            logger.error(
                "%s: OUT-OF-ORDER broadcast seq %d after %d — transport bug or injected fault",
                self.name,
                env.seq,
                self.last_seq,
            )
            self.out_of_order.append(env.seq)
            self._pending[env.seq] = env
            return
        self._apply(env)
        while self.last_seq + 1 in self._pending:
            self._apply(self._pending.pop(self.last_seq + 1))

    def _apply(self, env: MessageEnvelope) -> None:
        kind = env.kind
        payload = env.payload
        self.scene = apply_broadcast(self.scene, env)
        if kind is MessageKind.VIEW_UPDATE:
            self.last_view = ViewState.from_dict(payload["view"])
        elif kind is MessageKind.PARTICIPANT_JOINED:
            participant = payload["participant"]
            self.roster[participant["id"]] = participant
        elif kind is MessageKind.PARTICIPANT_LEFT:
            entry = self.roster.get(payload["participant_id"])
            if entry is not None:
                entry["connected"] = False
        elif kind is MessageKind.LEADER_CHANGED:
            new_leader = payload["participant_id"]
            for pid, entry in self.roster.items():
                entry["role"] = "leader" if pid == new_leader else "follower"
            if new_leader == self.participant_id:
                self.role = "leader"
            elif self.role == "leader":
                self.role = "follower"
        self.last_seq = env.seq
        if self.seq_segments and self.seq_segments[-1].last == env.seq - 1:
            self.seq_segments[-1].last = env.seq
        else:
            self.seq_segments.append(SeqSegment(base=env.seq - 1, last=env.seq))

    def _install_snapshot(self, payload: dict[str, Any]) -> None:
        self.scene = SceneState.from_dict(payload["scene"])
        self.last_view = ViewState.from_dict(payload["last_view"]) if payload.get("last_view") else None
        self.last_seq = payload["max_seq"]
        self.roster = {p["id"]: dict(p) for p in payload.get("participants", [])}
        self._pending.clear()
        self.seq_segments.append(SeqSegment(base=self.last_seq, last=self.last_seq))

    # --- observation helpers ---------------------------------------------------------

    def scene_digest_hex(self) -> str:
        return scene_hash(self.scene).hex()

    def received_kind_count(self, kind: MessageKind | str) -> int:
        kind = MessageKind(kind) if isinstance(kind, str) else kind
        return sum(1 for t in self.transcript if t.direction == "recv" and t.env.kind is kind)

    def received_broadcasts(self) -> list[MessageEnvelope]:
        return [t.env for t in self.transcript if t.direction == "recv" and t.env.seq is not None]

    def gap_free(self) -> bool:
        """Every applied run is contiguous and nothing arrived out of order."""
        if self.out_of_order or self._pending:
            return False
        return all(seg.last >= seg.base for seg in self.seq_segments)

    async def wait_for(self, predicate: Callable[["HeadlessClient"], bool], timeout: float = 10.0) -> None:
        loop = asyncio.get_running_loop()
        deadline = loop.time() + timeout
        while True:
            if predicate(self):
                return
            remaining = deadline - loop.time()
            if remaining <= 0:
                raise asyncio.TimeoutError(f"{self.name}: wait_for timed out after {timeout}s")
            self._event.clear()
            try:
                await asyncio.wait_for(self._event.wait(), remaining)
            except asyncio.TimeoutError:
                pass

    async def wait_applied(self, seq: int, timeout: float = 10.0) -> None:
        await self.wait_for(lambda c: c.last_seq >= seq, timeout)
