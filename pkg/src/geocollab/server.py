"""The register server: session hosting, fanout, assets, review REST API.

One process serves both server roles: the synchronization application
(WebSocket sessions at /ws/{session_id}) and the data server (static
assets at /assets/, review API at /api/). Within a session every state
mutation runs under that session's lock, so the session core sees a
single writer; sessions are fully independent.

Slow consumers never block the rest of a session: each connection has a
bounded outbound queue and a per-send timeout, and overflowing or timing
out gets that one participant disconnected.
"""

from __future__ import annotations

import asyncio
import logging
import re
import time
from contextlib import asynccontextmanager
from typing import Any

import httpx
from fastapi import FastAPI, Request, WebSocket, WebSocketDisconnect
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles

from . import analysis
from .coalesce import ViewCoalescer
from .config import ServerConfig
from .geo_model import SceneError, ViewState
from .protocol import (
    MessageEnvelope,
    MessageKind,
    ProtocolError,
    decode_message,
    encode_message,
)
from .review import (
    BoundingBox,
    ReviewError,
    ReviewStore,
    StoreFailure,
    UnknownComment,
    UnknownParent,
    UnknownSolution,
    ValidationError,
)
from .session_core import Delivery, DesignSession, SessionError, UnknownParticipant

logger = logging.getLogger(__name__)

SESSION_ID_RE = re.compile(r"^[A-Za-z0-9_-]{1,64}$")
WS_PROTOCOL_ERROR = 1002
WS_GOING_AWAY = 1001


def _now_ms() -> int:
    return int(time.time() * 1000)


class ClientConnection:
    """One participant's socket: bounded outbound queue plus writer task."""

    def __init__(self, pid: str, ws: WebSocket, queue_size: int, write_timeout: float):
        self.pid = pid
        self.ws = ws
        self.queue: asyncio.Queue[str | None] = asyncio.Queue(maxsize=queue_size)
        self.write_timeout = write_timeout
        self.failed = False
        self._writer: asyncio.Task | None = None

    def start(self, on_failure) -> None:
        self._writer = asyncio.create_task(self._write_loop(on_failure))

    async def _write_loop(self, on_failure) -> None:
        try:
            while True:
                item = await self.queue.get()
                if item is None:
                    return
                await asyncio.wait_for(self.ws.send_text(item), timeout=self.write_timeout)
        except asyncio.CancelledError:
            raise
        except Exception as exc:
            if not self.failed:
                self.failed = True
                logger.warning("write to %s failed: %s", self.pid, exc)
                on_failure(self.pid)

    def enqueue(self, text: str) -> bool:
        """Queue one outbound frame; False means the queue overflowed."""
        if self.failed:
            return False
        try:
            self.queue.put_nowait(text)
            return True
        except asyncio.QueueFull:
            self.failed = True
            logger.warning("outbound queue overflow for %s", self.pid)
            return False

    async def drain_and_close(self, code: int = WS_GOING_AWAY) -> None:
        deadline = time.monotonic() + 2.0
        while not self.queue.empty() and time.monotonic() < deadline and not self.failed:
            await asyncio.sleep(0.01)
        await self.close(code)

    async def close(self, code: int = WS_GOING_AWAY) -> None:
        if self._writer:
            self._writer.cancel()
        try:
            await self.ws.close(code=code)
        except Exception:
            pass


class SessionHost:
    """Everything the server tracks for one live session."""

    def __init__(self, session_id: str, config: ServerConfig):
        self.id = session_id
        self.config = config
        self.core = DesignSession(
            session_id,
            max_participants=config.max_participants,
            replay_capacity=config.replay_capacity,
            retention_ms=int(config.retention_s * 1000),
        )
        self.lock = asyncio.Lock()
        self.conns: dict[str, ClientConnection] = {}
        self.coalescer = ViewCoalescer(config.view_rate_hz)
        self.processing = 0
        self._flush_task: asyncio.Task | None = None

    @property
    def in_flight(self) -> int:
        queued = sum(c.queue.qsize() for c in self.conns.values())
        return self.processing + queued + self.coalescer.pending_count

    def fanout(self, delivery: Delivery) -> None:
        """Queue a delivery on every relevant connection; never blocks."""
        for pid, env in delivery.direct:
            conn = self.conns.get(pid)
            if conn is not None and not conn.enqueue(encode_message(env).decode("utf-8")):
                self._spawn_disconnect(pid)
        for env in delivery.broadcasts:
            text = encode_message(env).decode("utf-8")
            for pid, conn in list(self.conns.items()):
                if pid in delivery.exclude_from_broadcast:
                    continue
                if not conn.enqueue(text):
                    self._spawn_disconnect(pid)

    def send_private(self, pid: str, env: MessageEnvelope) -> None:
        self.fanout(Delivery(direct=[(pid, env)]))

    def _spawn_disconnect(self, pid: str) -> None:
        asyncio.get_running_loop().create_task(self.force_disconnect(pid))

    async def force_disconnect(self, pid: str) -> None:
        """Server-initiated removal (write failure / queue overflow)."""
        conn = self.conns.pop(pid, None)
        if conn is None:
            return
        await conn.close(code=WS_GOING_AWAY)
        async with self.lock:
            try:
                delivery = self.core.handle_disconnect(pid)
            except UnknownParticipant:
                return
            self.fanout(delivery)

    def schedule_flush(self, flush_at: float | None) -> None:
        """Arrange for pending coalesced views to be sequenced when due."""
        if flush_at is None or (self._flush_task and not self._flush_task.done()):
            return
        self._flush_task = asyncio.create_task(self._flush_when_due(flush_at))

    async def _flush_when_due(self, flush_at: float) -> None:
        delay = max(0.0, flush_at - time.monotonic())
        await asyncio.sleep(delay)
        async with self.lock:
            result = self.coalescer.flush_due()
            for sender, payload in result.forward:
                try:
                    self.fanout(self.core.submit_action(sender, MessageKind.VIEW_UPDATE, payload))
                except SessionError as exc:
                    logger.info("dropping stale coalesced view from %s: %s", sender, exc)
        if result.flush_at is not None:
            # a newer update arrived while this flush ran; chase its window
            self._flush_task = asyncio.create_task(self._flush_when_due(result.flush_at))

    def flush_views_for_action(self) -> None:
        """Sequence held views before a non-view action; caller holds the lock."""
        for sender, payload in self.coalescer.flush_for_action():
            try:
                self.fanout(self.core.submit_action(sender, MessageKind.VIEW_UPDATE, payload))
            except SessionError as exc:
                logger.info("dropping stale coalesced view from %s: %s", sender, exc)

    def debug_state(self) -> dict[str, Any]:
        core = self.core
        return {
            "session": self.id,
            "max_seq": core.max_seq,
            "scene_hash": core.scene_digest().hex(),
            "stage": core.scene.stage,
            "last_view": core.last_view.to_dict() if core.last_view else None,
            "participants": core.roster(),
            "leader": core.leader_id(),
            "role_queue": list(core.role_queue),
            "in_flight": self.in_flight,
        }


class Hub:
    """Registry of live sessions plus the shared review store."""

    def __init__(self, config: ServerConfig):
        self.config = config
        self.sessions: dict[str, SessionHost] = {}
        self.store = ReviewStore(config.review_dir)
        self._purge_task: asyncio.Task | None = None

    def get(self, session_id: str) -> SessionHost | None:
        return self.sessions.get(session_id)

    def get_or_create(self, session_id: str) -> SessionHost:
        host = self.sessions.get(session_id)
        if host is None:
            if len(self.sessions) >= self.config.max_sessions:
                raise SessionError(f"server is at its cap of {self.config.max_sessions} sessions")
            host = SessionHost(session_id, self.config)
            self.sessions[session_id] = host
            logger.info("session %s created", session_id)
        return host

    def start_background(self) -> None:
        self._purge_task = asyncio.create_task(self._purge_loop())

    async def _purge_loop(self) -> None:
        while True:
            await asyncio.sleep(30.0)
            for host in list(self.sessions.values()):
                async with host.lock:
                    purged = host.core.purge_disconnected()
                    if purged:
                        logger.info("session %s purged %s", host.id, purged)

    async def shutdown(self) -> None:
        if self._purge_task:
            self._purge_task.cancel()
        for host in self.sessions.values():
            await asyncio.gather(
                *(conn.drain_and_close() for conn in list(host.conns.values())),
                return_exceptions=True,
            )
        self.store.close()
        logger.info("server drained %d sessions", len(self.sessions))


def _error_env(session_id: str, code: str, detail: str) -> MessageEnvelope:
    return MessageEnvelope(
        kind=MessageKind.ERROR,
        session=session_id,
        sender="server",
        ts=_now_ms(),
        payload={"code": code, "detail": detail},
    )


async def _send_raw_error(ws: WebSocket, session_id: str, code: str, detail: str) -> None:
    try:
        await ws.send_text(encode_message(_error_env(session_id, code, detail)).decode("utf-8"))
    except Exception:
        pass


# --- op_exec execution -------------------------------------------------------


async def _execute_op(hub: Hub, host: SessionHost, leader_pid: str, payload: dict[str, Any]) -> None:
    """Run an op after its op_exec broadcast; exactly one op_result follows."""
    op = payload.get("op", "")
    params = payload.get("params", {})
    op_id = payload.get("op_id")
    endpoint = hub.config.service_endpoints.get(op)
    result_payload: dict[str, Any] = {"op": op, "op_id": op_id, "requested_by": leader_pid}

    if endpoint is None:
        # pre-validated as a built-in before the broadcast, so this cannot fail
        # except on a genuine bug; surface that as an error result, not a crash
        try:
            result = analysis.run_builtin(op, params)
            result_payload.update(status="ok", result=result)
        except analysis.AnalysisError as exc:
            result_payload.update(status="error", error={"code": "invalid_params", "detail": str(exc)})
    else:
        try:
            async with httpx.AsyncClient(timeout=hub.config.service_timeout_s) as client:
                response = await client.post(endpoint, json=params)
            if response.status_code >= 400:
                result_payload.update(
                    status="error",
                    error={"code": "service_error", "http_status": response.status_code},
                )
            else:
                result_payload.update(status="ok", result=response.json())
        except httpx.TimeoutException:
            result_payload.update(
                status="error",
                error={"code": "service_timeout", "timeout_s": hub.config.service_timeout_s},
            )
        except (httpx.HTTPError, ValueError) as exc:
            result_payload.update(status="error", error={"code": "service_error", "detail": str(exc)})

    async with host.lock:
        env = host.core.emit_server_event(MessageKind.OP_RESULT, result_payload)
        host.fanout(Delivery(broadcasts=[env]))


# --- per-message dispatch ------------------------------------------------------


async def _handle_client_message(hub: Hub, host: SessionHost, pid: str, raw: str) -> None:
    try:
        env = decode_message(raw)
    except ProtocolError as exc:
        host.send_private(pid, _error_env(host.id, "protocol_error", str(exc)))
        return

    if env.seq is not None:
        host.send_private(pid, _error_env(host.id, "protocol_error", "clients must not set seq"))
        return
    if env.session != host.id:
        host.send_private(pid, _error_env(host.id, "protocol_error", "session mismatch"))
        return
    if env.sender != pid:
        host.send_private(pid, _error_env(host.id, "protocol_error", f"sender must be {pid}"))
        return

    kind = env.kind
    payload = env.payload

    if kind is MessageKind.PING:
        host.send_private(
            pid,
            MessageEnvelope(kind=MessageKind.PONG, session=host.id, sender="server", ts=_now_ms(), payload=payload),
        )
        return

    try:
        if kind is MessageKind.ROLE_GRANT:
            async with host.lock:
                delivery = host.core.grant_role(pid, str(payload.get("target", "")))
                host.coalescer.reset()
                host.fanout(delivery)
            return

        if kind is MessageKind.ROLE_DENY:
            async with host.lock:
                host.fanout(host.core.deny_role(pid, str(payload.get("target", ""))))
            return

        if kind is MessageKind.REPLAY_REQUEST:
            last_seq = payload.get("last_seq")
            async with host.lock:
                host.fanout(host.core.replay_since(pid, last_seq))
            return

        if kind is MessageKind.VIEW_UPDATE:
            async with host.lock:
                host.core.require_leader(pid)
                try:
                    ViewState.from_dict(payload.get("view"))
                except SceneError as exc:
                    raise SessionError(f"invalid view: {exc}") from exc
                result = host.coalescer.offer_view(pid, payload)
                for sender, view_payload in result.forward:
                    host.fanout(host.core.submit_action(sender, MessageKind.VIEW_UPDATE, view_payload))
                host.schedule_flush(result.flush_at)
            return

        if kind is MessageKind.OP_EXEC:
            async with host.lock:
                host.core.require_leader(pid)
                op = payload.get("op")
                if not isinstance(op, str) or not op:
                    raise SessionError("op_exec requires a non-empty op name")
                params = payload.get("params", {})
                if op not in hub.config.service_endpoints:
                    if op not in analysis.BUILTIN_OPS:
                        host.send_private(
                            pid, _error_env(host.id, "unknown_service", f"no service or built-in for op {op!r}")
                        )
                        return
                    # validate built-in parameters before announcing the operation
                    try:
                        analysis.run_builtin(op, params if isinstance(params, dict) else {})
                    except analysis.AnalysisError as exc:
                        host.send_private(pid, _error_env(host.id, "invalid_action", str(exc)))
                        return
                host.flush_views_for_action()
                host.fanout(host.core.submit_action(pid, kind, payload))
            asyncio.get_running_loop().create_task(_execute_op(hub, host, pid, payload))
            return

        if kind is MessageKind.PUBLISH_SOLUTION:
            async with host.lock:
                host.core.require_leader(pid)
                title = payload.get("title")
                if not isinstance(title, str) or not title.strip():
                    raise SessionError("publish_solution requires a non-empty title")
                try:
                    solution_id, version = await asyncio.to_thread(
                        hub.store.publish_solution, host.id, title, host.core.scene
                    )
                except (ValidationError, StoreFailure) as exc:
                    host.send_private(pid, _error_env(host.id, "store_failure", str(exc)))
                    return
                host.flush_views_for_action()
                enriched = {**payload, "solution_id": solution_id, "version": version}
                host.fanout(host.core.submit_action(pid, kind, enriched))
            return

        # remaining kinds: scene mutations, chat, role_request — session_core
        # gates and validates them; anything else it rejects
        async with host.lock:
            needs_sequencing = kind is not MessageKind.ROLE_REQUEST
            if needs_sequencing:
                host.flush_views_for_action()
            host.fanout(host.core.submit_action(pid, kind, payload))
        return
    except SessionError as exc:
        host.send_private(pid, _error_env(host.id, exc.code, str(exc)))


# --- app assembly ----------------------------------------------------------------


def create_app(config: ServerConfig | None = None) -> FastAPI:
    config = config or ServerConfig()

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        hub = Hub(config)
        app.state.hub = hub
        hub.start_background()
        try:
            yield
        finally:
            await hub.shutdown()

    app = FastAPI(title="geocollab", lifespan=lifespan)

    @app.exception_handler(RequestValidationError)
    async def validation_handler(request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=400, content={"error": "validation_error", "detail": str(exc)})

    @app.get("/healthz")
    async def healthz():
        hub: Hub = app.state.hub
        participants = sum(len(h.core.connected_ids()) for h in hub.sessions.values())
        return {"sessions": len(hub.sessions), "participants": participants}

    @app.get("/debug/sessions/{session_id}")
    async def debug_session(session_id: str):
        hub: Hub = app.state.hub
        host = hub.get(session_id)
        if host is None:
            return JSONResponse(status_code=404, content={"error": "unknown_session"})
        return host.debug_state()

    @app.websocket("/ws/{session_id}")
    async def ws_endpoint(websocket: WebSocket, session_id: str):
        await websocket.accept()
        hub: Hub = app.state.hub
        if not SESSION_ID_RE.fullmatch(session_id):
            await _send_raw_error(websocket, "invalid", "protocol_error", "invalid session id")
            await websocket.close(code=WS_PROTOCOL_ERROR)
            return

        # the first frame must identify the participant: join or replay_request
        try:
            first_raw = await websocket.receive_text()
            first = decode_message(first_raw)
        except (WebSocketDisconnect, RuntimeError):
            return
        except ProtocolError as exc:
            await _send_raw_error(websocket, session_id, "protocol_error", str(exc))
            await websocket.close(code=WS_PROTOCOL_ERROR)
            return
        except Exception:
            await websocket.close(code=WS_PROTOCOL_ERROR)
            return

        pid: str | None = None
        host: SessionHost | None = None
        conn: ClientConnection | None = None

        try:
            if first.kind is MessageKind.JOIN:
                host = hub.get_or_create(session_id)
                async with host.lock:
                    pid, delivery = host.core.join(first.payload.get("display_name", ""))
                    conn = ClientConnection(pid, websocket, config.outbound_queue_size, config.write_timeout_s)
                    # replace-then-fanout so the welcome precedes any later broadcast
                    host.conns[pid] = conn
                    conn.start(host._spawn_disconnect)
                    host.fanout(delivery)
            elif first.kind is MessageKind.REPLAY_REQUEST:
                host = hub.get(session_id)
                if host is None:
                    await _send_raw_error(websocket, session_id, "unknown_session", "no such session")
                    await websocket.close(code=WS_PROTOCOL_ERROR)
                    return
                pid = str(first.payload.get("participant_id", ""))
                async with host.lock:
                    stale = host.conns.pop(pid, None)
                    if stale is not None:
                        await stale.close()
                    delivery = host.core.replay_since(pid, first.payload.get("last_seq"))
                    # repair broadcasts reach the others now; the reconnector sees
                    # them inside its backlog
                    host.fanout(Delivery(broadcasts=delivery.broadcasts,
                                         exclude_from_broadcast=delivery.exclude_from_broadcast))
                    # the backlog can exceed the outbound queue bound, so write it
                    # straight to the fresh socket before going live
                    try:
                        for _, env in delivery.direct:
                            await websocket.send_text(encode_message(env).decode("utf-8"))
                    except Exception:
                        host.fanout(host.core.handle_disconnect(pid))
                        return
                    conn = ClientConnection(pid, websocket, config.outbound_queue_size, config.write_timeout_s)
                    host.conns[pid] = conn
                    conn.start(host._spawn_disconnect)
            else:
                await _send_raw_error(websocket, session_id, "protocol_error", "first message must be join or replay_request")
                await websocket.close(code=WS_PROTOCOL_ERROR)
                return
        except SessionError as exc:
            await _send_raw_error(websocket, session_id, exc.code, str(exc))
            await websocket.close(code=WS_PROTOCOL_ERROR)
            return

        try:
            while True:
                try:
                    raw = await websocket.receive_text()
                except WebSocketDisconnect:
                    break
                except Exception:
                    # binary frames or transport failure: drop this client only
                    break
                host.processing += 1
                try:
                    await _handle_client_message(hub, host, pid, raw)
                except Exception:
                    logger.exception("error handling message from %s", pid)
                    host.send_private(pid, _error_env(host.id, "internal_error", "message handling failed"))
                finally:
                    host.processing -= 1
        finally:
            if host is not None and pid is not None and host.conns.get(pid) is conn:
                del host.conns[pid]
                if conn is not None and conn._writer:
                    conn._writer.cancel()
                async with host.lock:
                    try:
                        host.fanout(host.core.handle_disconnect(pid))
                    except UnknownParticipant:
                        pass

    # review REST API ------------------------------------------------------------

    def _store() -> ReviewStore:
        return app.state.hub.store

    def _review_error(exc: ReviewError) -> JSONResponse:
        status = 404 if isinstance(exc, (UnknownSolution, UnknownParent, UnknownComment)) else 400
        if isinstance(exc, StoreFailure):
            status = 500
        return JSONResponse(status_code=status, content={"error": exc.code, "detail": str(exc)})

    @app.post("/api/solutions", status_code=201)
    async def publish_solution(body: dict):
        try:
            solution_id, version = await asyncio.to_thread(
                _store().publish_solution,
                body.get("source_session", ""),
                body.get("title", ""),
                body.get("scene", {}),
            )
        except SceneError as exc:
            return JSONResponse(status_code=400, content={"error": "validation_error", "detail": str(exc)})
        except ReviewError as exc:
            return _review_error(exc)
        return {"solution_id": solution_id, "version": version}

    @app.get("/api/solutions")
    async def list_solutions():
        return _store().list_solutions()

    @app.get("/api/solutions/{solution_id}/{version}")
    async def get_solution(solution_id: str, version: int):
        try:
            return _store().get_solution(solution_id, version).to_dict()
        except ReviewError as exc:
            return _review_error(exc)

    @app.post("/api/solutions/{solution_id}/{version}/comments", status_code=201)
    async def post_comment(solution_id: str, version: int, body: dict):
        try:
            comment_id = await asyncio.to_thread(
                _store().post_comment,
                solution_id,
                version,
                body.get("author", ""),
                body.get("text", ""),
                body.get("anchor", {}),
                body.get("parent_id"),
            )
        except ReviewError as exc:
            return _review_error(exc)
        return {"comment_id": comment_id}

    @app.get("/api/solutions/{solution_id}/{version}/comments")
    async def list_comments(
        solution_id: str,
        version: int,
        bbox: str | None = None,
        since: int | None = None,
        status: str | None = None,
        all_versions: bool = False,
    ):
        try:
            box = BoundingBox.parse(bbox) if bbox else None
            comments = _store().list_comments(
                solution_id,
                version=None if all_versions else version,
                bbox=box,
                since=since,
                status=status,
            )
        except ReviewError as exc:
            return _review_error(exc)
        return {"comments": [c.to_dict() for c in comments]}

    @app.patch("/api/comments/{comment_id}")
    async def patch_comment(comment_id: str, body: dict):
        try:
            comment = await asyncio.to_thread(_store().set_comment_status, comment_id, body.get("status", ""))
        except ReviewError as exc:
            return _review_error(exc)
        return comment.to_dict()

    if config.asset_dir:
        app.mount("/assets", StaticFiles(directory=config.asset_dir), name="assets")

    return app


async def serve_async(config: ServerConfig, *, started: asyncio.Event | None = None) -> None:
    """Run the server until cancelled; used by the CLI and the harness."""
    import uvicorn

    app = create_app(config)
    uv_config = uvicorn.Config(app, host=config.host, port=config.port, log_level="warning", lifespan="on")
    server = uvicorn.Server(uv_config)
    task = asyncio.create_task(server.serve())
    while not server.started and not task.done():
        await asyncio.sleep(0.01)
    if task.done():
        task.result()  # surfaces bind errors
        return
    port = actual_port(server)
    logger.info("listening on %s:%d", config.host, port)
    print(f"geocollab server listening on {config.host}:{port}", flush=True)
    if started is not None:
        started.set()
    try:
        await task
    except asyncio.CancelledError:
        server.should_exit = True
        await task
        raise


def actual_port(server) -> int:
    return server.servers[0].sockets[0].getsockname()[1]
