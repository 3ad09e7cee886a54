"""Deterministic multi-client scenario harness with fault injection.

Runs the production server in-process, drives real WebSocket clients
through per-client proxies, injects faults (abrupt disconnects, delays,
dropped frames) at the proxy so the code paths under test stay the
production ones, and evaluates named assertions at quiescence. The same
(scenario, seed) pair always yields the same assertion outcomes: every
event is executed sequentially and awaited to its observable effect.

Scenario files are JSON documents; see the scenarios/ corpus.
"""

from __future__ import annotations

import asyncio
import contextlib
import json
import logging
import random
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import httpx
from websockets.asyncio.client import connect as ws_connect
from websockets.asyncio.server import serve as ws_serve

from .client_sim import HeadlessClient
from .config import ServerConfig
from .protocol import MessageKind
from .server import actual_port, create_app

logger = logging.getLogger(__name__)

EVENT_TYPES = frozenset({"connect", "disconnect", "reconnect", "delay", "drop_next", "act", "act_script"})
CHECK_TYPES = frozenset(
    {
        "convergence",
        "gap_free",
        "isolation",
        "not_leader_errors",
        "no_follower_mutations",
        "replay_exact",
        "snapshot_recovery",
        "leader_is",
        "received_kind_count",
        "error_code_count",
        "gap_detected",
    }
)


class ScenarioError(Exception):
    pass


class ScenarioInvalid(ScenarioError):
    pass


class ScenarioTimeout(ScenarioError):
    pass


@dataclass
class ClientSpec:
    name: str
    session: str = "s1"


@dataclass
class Scenario:
    name: str
    seed: int
    clients: list[ClientSpec]
    events: list[dict[str, Any]]
    assertions: list[dict[str, Any]]
    quiescence_timeout_s: float = 20.0
    server: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "Scenario":
        if not isinstance(raw, dict):
            raise ScenarioInvalid("scenario must be an object")
        for key in ("name", "clients", "events", "assertions"):
            if key not in raw:
                raise ScenarioInvalid(f"scenario is missing {key!r}")
        clients = []
        for spec in raw["clients"]:
            if isinstance(spec, str):
                clients.append(ClientSpec(name=spec))
            elif isinstance(spec, dict) and "name" in spec:
                clients.append(ClientSpec(name=spec["name"], session=spec.get("session", "s1")))
            else:
                raise ScenarioInvalid(f"bad client spec {spec!r}")
        names = [c.name for c in clients]
        if len(set(names)) != len(names):
            raise ScenarioInvalid("duplicate client names")
        events = list(raw["events"])
        last_at = None
        for event in events:
            if not isinstance(event, dict) or event.get("type") not in EVENT_TYPES:
                raise ScenarioInvalid(f"bad event {event!r}")
            if event.get("client") is not None and event["client"] not in names:
                raise ScenarioInvalid(f"event references undeclared client {event['client']!r}")
            at = event.get("at_ms")
            if at is not None:
                if last_at is not None and at < last_at:
                    raise ScenarioInvalid("event times must be non-decreasing")
                last_at = at
        assertions = list(raw["assertions"])
        for assertion in assertions:
            if not isinstance(assertion, dict) or assertion.get("check") not in CHECK_TYPES:
                raise ScenarioInvalid(f"bad assertion {assertion!r}")
            if assertion.get("client") is not None and assertion["client"] not in names:
                raise ScenarioInvalid(f"assertion references undeclared client {assertion['client']!r}")
        return cls(
            name=raw["name"],
            seed=int(raw.get("seed", 0)),
            clients=clients,
            events=events,
            assertions=assertions,
            quiescence_timeout_s=float(raw.get("quiescence_timeout_s", 20.0)),
            server=dict(raw.get("server", {})),
        )

    @classmethod
    def from_file(cls, path: str | Path) -> "Scenario":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ScenarioInvalid(f"cannot load scenario {path}: {exc}") from exc
        return cls.from_dict(raw)


class WsProxy:
    """WebSocket-level forwarder between one client and the server.

    Faults act on the server->client direction: drop_next discards whole
    messages, delay_ms holds each message before forwarding, and stall
    stops reading from the server entirely (creating real backpressure).
    """

    def __init__(self, upstream_base: str):
        self.upstream_base = upstream_base
        self.delay_ms = 0
        self.drop_remaining = 0
        self.stalled = False
        self.dropped = 0
        self.port: int | None = None
        self._server = None
        self._pairs: list[tuple[Any, Any]] = []

    async def start(self) -> None:
        self._server = await ws_serve(self._handler, "127.0.0.1", 0, max_size=2**22)
        self.port = self._server.sockets[0].getsockname()[1]

    @property
    def url(self) -> str:
        return f"ws://127.0.0.1:{self.port}"

    async def _handler(self, client_ws) -> None:
        path = client_ws.request.path
        try:
            upstream = await ws_connect(self.upstream_base + path, max_size=2**22)
        except Exception:
            await client_ws.close()
            return
        self._pairs.append((client_ws, upstream))
        up_task = asyncio.create_task(self._pump_up(client_ws, upstream))
        down_task = asyncio.create_task(self._pump_down(upstream, client_ws))
        done, pending = await asyncio.wait({up_task, down_task}, return_when=asyncio.FIRST_COMPLETED)
        for task in pending:
            task.cancel()
        with contextlib.suppress(Exception):
            await upstream.close()
        with contextlib.suppress(Exception):
            await client_ws.close()

    async def _pump_up(self, client_ws, upstream) -> None:
        with contextlib.suppress(Exception):
            async for message in client_ws:
                await upstream.send(message)

    async def _pump_down(self, upstream, client_ws) -> None:
        with contextlib.suppress(Exception):
            while True:
                while self.stalled:
                    await asyncio.sleep(0.01)  # not reading -> backpressure on the server
                message = await upstream.recv()
                if self.drop_remaining > 0:
                    self.drop_remaining -= 1
                    self.dropped += 1
                    continue
                if self.delay_ms > 0:
                    await asyncio.sleep(self.delay_ms / 1000.0)
                await client_ws.send(message)

    async def kill_connections(self) -> None:
        """Abrupt network failure: tear down transports without close frames."""
        pairs, self._pairs = self._pairs, []
        for client_ws, upstream in pairs:
            for ws in (client_ws, upstream):
                transport = getattr(ws, "transport", None)
                if transport is not None:
                    transport.abort()
                else:
                    with contextlib.suppress(Exception):
                        await ws.close()

    async def stop(self) -> None:
        await self.kill_connections()
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()


@dataclass
class RunningServer:
    config: ServerConfig
    port: int
    task: asyncio.Task
    server: Any

    @property
    def ws_base(self) -> str:
        return f"ws://127.0.0.1:{self.port}"

    @property
    def http_base(self) -> str:
        return f"http://127.0.0.1:{self.port}"

    async def stop(self) -> None:
        self.server.should_exit = True
        with contextlib.suppress(Exception):
            await asyncio.wait_for(self.task, timeout=10.0)


async def start_server(config: ServerConfig) -> RunningServer:
    import uvicorn

    app = create_app(config)
    uv_config = uvicorn.Config(app, host=config.host, port=config.port, log_level="warning", lifespan="on")
    server = uvicorn.Server(uv_config)
    task = asyncio.create_task(server.serve())
    while not server.started:
        if task.done():
            task.result()
            raise ScenarioError("server exited during startup")
        await asyncio.sleep(0.005)
    return RunningServer(config=config, port=actual_port(server), task=task, server=server)


# --- scripted action generation ---------------------------------------------------


def expand_script(script: str, count: int, rng: random.Random, state: dict[str, Any]) -> list[tuple[str, dict]]:
    """Deterministic action scripts; `state` persists across events of one client."""
    state.setdefault("counter", 0)
    state.setdefault("sketches", [])
    state.setdefault("placements", [])
    actions: list[tuple[str, dict]] = []

    def fresh_id(prefix: str) -> str:
        state["counter"] += 1
        return f"{prefix}{state['counter']}"

    def random_anchor() -> dict[str, float]:
        return {"lat": round(rng.uniform(-60.0, 60.0), 6), "lon": round(rng.uniform(-179.0, 179.0), 6), "height": 0.0}

    for _ in range(count):
        if script == "sketches":
            roll = 0.3
        elif script == "chat":
            roll = 0.95
        elif script == "moves":
            roll = 0.85 if state["placements"] else 0.7
        else:  # mixed: views/sketches/placements/chat
            roll = rng.random()
        if roll < 0.25:
            actions.append(
                (
                    "view_update",
                    {
                        "view": {
                            "position": random_anchor(),
                            "heading": round(rng.uniform(0, 359.9), 3),
                            "pitch": round(rng.uniform(-89, 89), 3),
                            "roll": 0.0,
                        }
                    },
                )
            )
        elif roll < 0.5:
            sid = fresh_id("sk-")
            state["sketches"].append(sid)
            vertices = [random_anchor() for _ in range(rng.randint(2, 4))]
            actions.append(
                ("sketch_create", {"sketch": {"id": sid, "kind": "polyline", "vertices": vertices, "author": "script"}})
            )
        elif roll < 0.6 and state["sketches"]:
            sid = state["sketches"].pop(rng.randrange(len(state["sketches"])))
            actions.append(("sketch_delete", {"sketch_id": sid}))
        elif roll < 0.8:
            pid = fresh_id("m-")
            state["placements"].append(pid)
            actions.append(
                (
                    "model_place",
                    {"placement": {"id": pid, "model_ref": rng.choice(["tree", "lamp", "building"]), "position": random_anchor()}},
                )
            )
        elif roll < 0.9 and state["placements"]:
            target = rng.choice(state["placements"])
            actions.append(("model_move", {"placement_id": target, "position": random_anchor()}))
        else:
            actions.append(("chat", {"text": f"note {fresh_id('t')}"}))
    return actions


# --- the runner -----------------------------------------------------------------


class _Run:
    def __init__(self, scenario: Scenario, config: ServerConfig):
        self.scenario = scenario
        self.config = config
        self.rng = random.Random(scenario.seed)
        self.clients: dict[str, HeadlessClient] = {}
        self.proxies: dict[str, WsProxy] = {}
        self.specs = {c.name: c for c in scenario.clients}
        self.script_state: dict[str, dict] = {}
        self.server: RunningServer | None = None
        self.http: httpx.AsyncClient | None = None
        self.welcome_rosters: dict[str, list[dict]] = {}

    async def debug_state(self, session: str) -> dict[str, Any]:
        response = await self.http.get(f"{self.server.http_base}/debug/sessions/{session}")
        response.raise_for_status()
        return response.json()

    async def run(self) -> dict[str, Any]:
        self.server = await start_server(self.config)
        self.http = httpx.AsyncClient(timeout=10.0)
        try:
            for spec in self.scenario.clients:
                proxy = WsProxy(self.server.ws_base)
                await proxy.start()
                self.proxies[spec.name] = proxy
                self.clients[spec.name] = HeadlessClient(spec.name)
            for event in self.scenario.events:
                await self._execute(event)
            await self._quiesce()
            results = [await self._check(a) for a in self.scenario.assertions]
            passed = all(r["passed"] for r in results)
            return {
                "name": self.scenario.name,
                "seed": self.scenario.seed,
                "passed": passed,
                "assertions": results,
                "stats": await self._stats(),
                "transcripts": {
                    name: [t.to_dict() for t in client.transcript] for name, client in self.clients.items()
                },
            }
        finally:
            for client in self.clients.values():
                await client.close()
            for proxy in self.proxies.values():
                await proxy.stop()
            if self.http is not None:
                await self.http.aclose()
            await self.server.stop()

    # --- events -----------------------------------------------------------------

    async def _execute(self, event: dict[str, Any]) -> None:
        etype = event["type"]
        name = event.get("client")
        client = self.clients.get(name) if name else None
        spec = self.specs.get(name) if name else None

        if etype == "connect":
            await client.connect(self.proxies[name].url, spec.session, name)
            self.welcome_rosters[name] = [dict(p) for p in client.roster.values()]
            return

        if etype == "disconnect":
            # let the client catch up first so replay counts are deterministic
            if client.connected and not self._impaired(name):
                state = await self.debug_state(spec.session)
                if state["in_flight"] == 0:
                    await client.wait_applied(state["max_seq"], timeout=10.0)
            await self.proxies[name].kill_connections()
            client.connected = False
            # wait until the server has registered the loss
            await self._wait_debug(
                spec.session,
                lambda d: not any(p["id"] == client.participant_id and p["connected"] for p in d["participants"]),
            )
            return

        if etype == "reconnect":
            await client.reconnect()
            return

        if etype == "delay":
            self.proxies[name].delay_ms = int(event.get("ms", 0))
            return

        if etype == "drop_next":
            self.proxies[name].drop_remaining += int(event.get("n", 1))
            return

        if etype == "act":
            await self._act(client, spec, event["action"]["kind"], event["action"].get("payload", {}),
                            expect=event.get("expect", "auto"))
            return

        if etype == "act_script":
            state = self.script_state.setdefault(name, {})
            actions = expand_script(event.get("script", "mixed"), int(event["count"]), self.rng, state)
            for kind, payload in actions:
                await self._act(client, spec, kind, payload, expect="auto")
            return

        raise ScenarioInvalid(f"unhandled event {etype!r}")

    async def _act(self, client: HeadlessClient, spec: ClientSpec, kind: str, payload: dict, expect: str) -> None:
        """Send one action and await its observable effect, keeping runs deterministic."""
        errors_before = len(client.errors)
        kind_enum = MessageKind(kind)
        echo_before = sum(
            1
            for t in client.transcript
            if t.direction == "recv" and t.env.kind is kind_enum and t.env.sender == client.participant_id
        )
        await client.send_action(kind, payload)

        if kind == "view_update":
            return  # coalescing legitimately swallows intermediates; no echo contract
        if kind == "role_request":
            if expect == "error":
                await client.wait_for(lambda c: len(c.errors) > errors_before)
                return
            pid = client.participant_id
            await self._wait_debug(spec.session, lambda d: pid in d["role_queue"])
            return
        if kind == "role_grant":
            target = payload.get("target")
            await client.wait_for(
                lambda c: len(c.errors) > errors_before
                or any(
                    t.direction == "recv"
                    and t.env.kind is MessageKind.LEADER_CHANGED
                    and t.env.payload.get("participant_id") == target
                    for t in c.transcript
                )
            )
            return
        if kind == "role_deny":
            target = payload.get("target")
            if expect == "error":
                await client.wait_for(lambda c: len(c.errors) > errors_before)
            else:
                await self._wait_debug(spec.session, lambda d: target not in d["role_queue"])
            return

        def done(c: HeadlessClient) -> bool:
            if len(c.errors) > errors_before:
                return True
            echoes = sum(
                1
                for t in c.transcript
                if t.direction == "recv" and t.env.kind is kind_enum and t.env.sender == c.participant_id
            )
            return echoes > echo_before

        await client.wait_for(done, timeout=15.0)
        if expect == "error" and len(client.errors) == errors_before:
            raise ScenarioError(f"{client.name}: expected an error for {kind}, got the echo")
        if expect == "ok" and len(client.errors) > errors_before:
            raise ScenarioError(f"{client.name}: expected success for {kind}, got {client.errors[-1]}")

    async def _wait_debug(self, session: str, predicate, timeout: float = 10.0) -> None:
        deadline = time.monotonic() + timeout
        while True:
            state = await self.debug_state(session)
            if predicate(state):
                return
            if time.monotonic() > deadline:
                raise ScenarioTimeout(f"debug condition not reached for session {session}")
            await asyncio.sleep(0.01)

    # --- quiescence -------------------------------------------------------------

    def _impaired(self, name: str) -> bool:
        proxy = self.proxies[name]
        return proxy.dropped > 0 or proxy.drop_remaining > 0 or proxy.delay_ms > 0 or proxy.stalled

    async def _quiesce(self) -> None:
        deadline = time.monotonic() + self.scenario.quiescence_timeout_s
        sessions = sorted({spec.session for spec in self.scenario.clients})
        while True:
            settled = True
            for session in sessions:
                try:
                    state = await self.debug_state(session)
                except httpx.HTTPStatusError:
                    continue  # session never created (no client connected)
                if state["in_flight"] > 0:
                    settled = False
                    break
                for name, client in self.clients.items():
                    if self.specs[name].session != session or not client.connected:
                        continue
                    if self._impaired(name):
                        continue
                    if client.last_seq < state["max_seq"]:
                        settled = False
                        break
                if not settled:
                    break
            if settled:
                return
            if time.monotonic() > deadline:
                raise ScenarioTimeout(
                    f"quiescence not reached within {self.scenario.quiescence_timeout_s}s"
                )
            await asyncio.sleep(0.02)

    # --- assertions -------------------------------------------------------------

    async def _stats(self) -> dict[str, Any]:
        sessions = {}
        for session in sorted({spec.session for spec in self.scenario.clients}):
            try:
                state = await self.debug_state(session)
                sessions[session] = {
                    "max_seq": state["max_seq"],
                    "scene_hash": state["scene_hash"],
                    "leader": state["leader"],
                }
            except httpx.HTTPStatusError:
                sessions[session] = None
        return {
            "sessions": sessions,
            "clients": {
                name: {
                    "participant_id": client.participant_id,
                    "role": client.role,
                    "last_seq": client.last_seq,
                    "connected": client.connected,
                    "errors": len(client.errors),
                    "not_leader_count": client.not_leader_count,
                    "snapshots": client.snapshot_count,
                    "scene_hash": client.scene_digest_hex(),
                }
                for name, client in self.clients.items()
            },
        }

    async def _check(self, assertion: dict[str, Any]) -> dict[str, Any]:
        check = assertion["check"]
        try:
            if check == "convergence":
                report = await check_convergence(self)
                return {"check": check, "passed": report["passed"], "detail": report}
            if check == "gap_free":
                bad = {n: c.out_of_order for n, c in self.clients.items() if not c.gap_free()}
                return {"check": check, "passed": not bad, "detail": bad or "all transcripts contiguous"}
            if check == "isolation":
                leaks = {}
                for name, client in self.clients.items():
                    expected = self.specs[name].session
                    foreign = [t.env.session for t in client.transcript if t.env.session != expected]
                    if foreign:
                        leaks[name] = foreign
                return {"check": check, "passed": not leaks, "detail": leaks or "no cross-session envelopes"}
            if check == "not_leader_errors":
                client = self.clients[assertion["client"]]
                expected = int(assertion["equals"])
                return {
                    "check": check,
                    "passed": client.not_leader_count == expected,
                    "detail": f"{client.name}: {client.not_leader_count} not_leader errors, expected {expected}",
                }
            if check == "no_follower_mutations":
                violations = audit_gating(self)
                return {"check": check, "passed": not violations, "detail": violations or "every mutation came from the leader"}
            if check == "replay_exact":
                client = self.clients[assertion["client"]]
                expected = int(assertion["missed"])
                banner = client.replay_banners[-1] if client.replay_banners else None
                got = banner["count"] if banner else None
                passed = banner is not None and got == expected and client.gap_free() and client.last_seq >= banner["to_seq"]
                return {
                    "check": check,
                    "passed": passed,
                    "detail": f"{client.name}: replay banner count={got}, expected {expected}",
                }
            if check == "snapshot_recovery":
                client = self.clients[assertion["client"]]
                state = await self.debug_state(self.specs[assertion["client"]].session)
                passed = client.snapshot_count >= 1 and client.scene_digest_hex() == state["scene_hash"]
                return {
                    "check": check,
                    "passed": passed,
                    "detail": f"{client.name}: snapshots={client.snapshot_count}, hash match={client.scene_digest_hex() == state['scene_hash']}",
                }
            if check == "leader_is":
                state = await self.debug_state(self.specs[assertion["client"]].session)
                client = self.clients[assertion["client"]]
                passed = state["leader"] == client.participant_id and client.role == "leader"
                return {"check": check, "passed": passed, "detail": f"server leader={state['leader']}"}
            if check == "received_kind_count":
                client = self.clients[assertion["client"]]
                got = client.received_kind_count(assertion["kind"])
                op = assertion.get("op", "==")
                expected = int(assertion["value"])
                passed = got >= expected if op == ">=" else got == expected
                return {"check": check, "passed": passed, "detail": f"{assertion['kind']}: {got} {op} {expected}"}
            if check == "error_code_count":
                client = self.clients[assertion["client"]]
                code = assertion["code"]
                got = sum(1 for e in client.errors if e.get("code") == code)
                expected = int(assertion["equals"])
                return {"check": check, "passed": got == expected, "detail": f"{code}: {got}, expected {expected}"}
            if check == "gap_detected":
                client = self.clients[assertion["client"]]
                detected = bool(client.out_of_order)
                return {"check": check, "passed": detected, "detail": f"out_of_order={client.out_of_order}"}
            raise ScenarioInvalid(f"unknown check {check!r}")
        except (ScenarioTimeout, KeyError, httpx.HTTPError) as exc:
            return {"check": check, "passed": False, "detail": f"check errored: {exc!r}"}


async def check_convergence(run: _Run) -> dict[str, Any]:
    """All connected clients match the server: scene hash, last view, gap-free seqs."""
    failures: list[str] = []
    preconditions: list[str] = []
    for session in sorted({spec.session for spec in run.scenario.clients}):
        try:
            state = await run.debug_state(session)
        except httpx.HTTPStatusError:
            continue
        if state["in_flight"] > 0:
            preconditions.append(f"{session}: {state['in_flight']} messages in flight")
            continue
        for name, client in run.clients.items():
            if run.specs[name].session != session or not client.connected:
                continue
            if client._pending:
                preconditions.append(f"{name}: mid-replay with {len(client._pending)} buffered broadcasts")
                continue
            if client.scene_digest_hex() != state["scene_hash"]:
                failures.append(f"{name}: scene hash mismatch")
            server_view = state["last_view"]
            client_view = client.last_view.to_dict() if client.last_view else None
            if client_view != server_view:
                failures.append(f"{name}: last_view mismatch")
            if client.last_seq != state["max_seq"]:
                failures.append(f"{name}: applied seq {client.last_seq} != server max {state['max_seq']}")
            if not client.gap_free():
                failures.append(f"{name}: transcript has gaps")
    return {
        "passed": not failures and not preconditions,
        "failures": failures,
        "precondition_violations": preconditions,
    }


def audit_gating(run: _Run) -> list[str]:
    """Verify every scene mutation was sent by whoever held the floor at that seq.

    Reconstructs the leadership timeline per session from the earliest
    welcome roster plus the leader_changed broadcasts observed by clients.
    """
    from .geo_model import SCENE_ACTION_KINDS

    violations: list[str] = []
    for session in sorted({spec.session for spec in run.scenario.clients}):
        envelopes: dict[int, Any] = {}
        for name, client in run.clients.items():
            if run.specs[name].session != session:
                continue
            for env in client.received_broadcasts():
                envelopes.setdefault(env.seq, env)
        if not envelopes:
            continue
        leader: str | None = None
        for name in run.welcome_rosters:
            if run.specs[name].session != session:
                continue
            for participant in run.welcome_rosters[name]:
                if participant["role"] == "leader":
                    leader = participant["id"]
                    break
            if leader:
                break
        for seq in sorted(envelopes):
            env = envelopes[seq]
            if env.kind is MessageKind.LEADER_CHANGED:
                leader = env.payload["participant_id"]
            elif env.kind.value in SCENE_ACTION_KINDS or env.kind is MessageKind.VIEW_UPDATE:
                if env.sender != leader:
                    violations.append(f"{session}: seq {seq} {env.kind.value} from {env.sender}, leader was {leader}")
    return violations


def run_scenario(scenario: Scenario | dict | str | Path, server_config: ServerConfig | None = None) -> dict[str, Any]:
    """Execute a scenario against a fresh in-process server; returns the report."""
    if isinstance(scenario, (str, Path)):
        scenario = Scenario.from_file(scenario)
    elif isinstance(scenario, dict):
        scenario = Scenario.from_dict(scenario)

    async def _main() -> dict[str, Any]:
        with tempfile.TemporaryDirectory(prefix="geocollab-scenario-") as tmp:
            overrides = {
                "port": 0,
                "review_dir": str(Path(tmp) / "review"),
                **scenario.server,
            }
            config = server_config or ServerConfig(**overrides)
            return await _Run(scenario, config).run()

    return asyncio.run(_main())
