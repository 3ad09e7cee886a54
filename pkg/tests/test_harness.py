"""Harness tests: real sockets, fault injection, scenario engine determinism."""

import asyncio
import copy

import pytest

from geocollab.client_sim import ConnectFailure, HeadlessClient
from geocollab.config import ServerConfig
from geocollab.harness import (
    Scenario,
    ScenarioInvalid,
    WsProxy,
    run_scenario,
    start_server,
)


def scenario_dict(**overrides):
    base = {
        "name": "basic",
        "seed": 7,
        "clients": [{"name": "leader"}, {"name": "f1"}],
        "events": [
            {"type": "connect", "client": "leader"},
            {"type": "connect", "client": "f1"},
            {"type": "act_script", "client": "leader", "script": "mixed", "count": 20},
        ],
        "assertions": [{"check": "convergence"}, {"check": "gap_free"}, {"check": "no_follower_mutations"}],
    }
    base.update(overrides)
    return base


def test_scenario_validation():
    with pytest.raises(ScenarioInvalid):
        Scenario.from_dict({"name": "x"})
    with pytest.raises(ScenarioInvalid):
        Scenario.from_dict(scenario_dict(events=[{"type": "teleport", "client": "leader"}]))
    with pytest.raises(ScenarioInvalid):
        Scenario.from_dict(scenario_dict(events=[{"type": "connect", "client": "ghost"}]))
    with pytest.raises(ScenarioInvalid):
        Scenario.from_dict(scenario_dict(assertions=[{"check": "nonsense"}]))
    with pytest.raises(ScenarioInvalid):
        Scenario.from_dict(scenario_dict(clients=[{"name": "a"}, {"name": "a"}]))
    with pytest.raises(ScenarioInvalid):
        Scenario.from_dict(
            scenario_dict(events=[{"type": "connect", "client": "leader", "at_ms": 10}, {"type": "connect", "client": "f1", "at_ms": 5}])
        )
    scenario = Scenario.from_dict(scenario_dict())
    assert scenario.clients[0].session == "s1"


def test_basic_scenario_converges():
    report = run_scenario(scenario_dict())
    assert report["passed"], report["assertions"]
    stats = report["stats"]
    assert stats["clients"]["leader"]["scene_hash"] == stats["sessions"]["s1"]["scene_hash"]
    assert stats["clients"]["f1"]["scene_hash"] == stats["sessions"]["s1"]["scene_hash"]
    assert report["transcripts"]["leader"]


def test_scenario_determinism():
    doc = scenario_dict(name="det", seed=123)
    first = run_scenario(copy.deepcopy(doc))
    second = run_scenario(copy.deepcopy(doc))
    strip = lambda r: [(a["check"], a["passed"]) for a in r["assertions"]]
    assert strip(first) == strip(second)
    assert first["passed"] and second["passed"]
    # the scripted actions are identical, so the scenes are identical
    assert first["stats"]["sessions"]["s1"]["scene_hash"] == second["stats"]["sessions"]["s1"]["scene_hash"]


def test_follower_gated_actions_counted():
    doc = scenario_dict(
        name="gating",
        events=[
            {"type": "connect", "client": "leader"},
            {"type": "connect", "client": "f1"},
            *[
                {
                    "type": "act",
                    "client": "f1",
                    "expect": "error",
                    "action": {
                        "kind": "sketch_create",
                        "payload": {
                            "sketch": {
                                "id": f"evil-{i}",
                                "kind": "polyline",
                                "vertices": [{"lat": 0, "lon": 0}, {"lat": 1, "lon": 1}],
                                "author": "f1",
                            }
                        },
                    },
                }
                for i in range(10)
            ],
        ],
        assertions=[
            {"check": "not_leader_errors", "client": "f1", "equals": 10},
            {"check": "no_follower_mutations"},
            {"check": "convergence"},
        ],
    )
    report = run_scenario(doc)
    assert report["passed"], report["assertions"]
    # none of the rejected sketches exist anywhere
    assert report["stats"]["clients"]["f1"]["not_leader_count"] == 10


def test_disconnect_reconnect_replay():
    doc = {
        "name": "replay",
        "seed": 3,
        "clients": [{"name": "leader"}, {"name": "f1"}],
        "events": [
            {"type": "connect", "client": "leader"},
            {"type": "connect", "client": "f1"},
            {"type": "act_script", "client": "leader", "script": "sketches", "count": 3},
            {"type": "disconnect", "client": "f1"},
            # 1 participant_left + 6 sketches = 7 missed broadcasts
            {"type": "act_script", "client": "leader", "script": "sketches", "count": 6},
            {"type": "reconnect", "client": "f1"},
        ],
        "assertions": [
            {"check": "replay_exact", "client": "f1", "missed": 7},
            {"check": "convergence"},
            {"check": "gap_free"},
        ],
    }
    report = run_scenario(doc)
    assert report["passed"], report["assertions"]


def test_snapshot_after_overflow():
    doc = {
        "name": "overflow",
        "seed": 5,
        "clients": [{"name": "leader"}, {"name": "f1"}],
        "server": {"replay_capacity": 32},
        "events": [
            {"type": "connect", "client": "leader"},
            {"type": "connect", "client": "f1"},
            {"type": "disconnect", "client": "f1"},
            {"type": "act_script", "client": "leader", "script": "moves", "count": 80},
            {"type": "reconnect", "client": "f1"},
        ],
        "assertions": [
            {"check": "snapshot_recovery", "client": "f1"},
            {"check": "convergence"},
        ],
    }
    report = run_scenario(doc)
    assert report["passed"], report["assertions"]
    assert report["stats"]["clients"]["f1"]["snapshots"] == 1


def test_two_sessions_isolated():
    doc = {
        "name": "isolation",
        "seed": 11,
        "clients": [
            {"name": "a_leader", "session": "alpha"},
            {"name": "a_f1", "session": "alpha"},
            {"name": "b_leader", "session": "beta"},
            {"name": "b_f1", "session": "beta"},
        ],
        "events": [
            {"type": "connect", "client": "a_leader"},
            {"type": "connect", "client": "b_leader"},
            {"type": "connect", "client": "a_f1"},
            {"type": "connect", "client": "b_f1"},
            {"type": "act_script", "client": "a_leader", "script": "sketches", "count": 10},
            {"type": "act_script", "client": "b_leader", "script": "moves", "count": 10},
            {"type": "act_script", "client": "a_leader", "script": "chat", "count": 5},
        ],
        "assertions": [
            {"check": "isolation"},
            {"check": "convergence"},
            {"check": "gap_free"},
        ],
    }
    report = run_scenario(doc)
    assert report["passed"], report["assertions"]
    sessions = report["stats"]["sessions"]
    assert sessions["alpha"]["scene_hash"] != sessions["beta"]["scene_hash"]


def test_leadership_handover_scenario():
    doc = {
        "name": "handover",
        "seed": 2,
        "clients": [{"name": "leader"}, {"name": "f1"}],
        "events": [
            {"type": "connect", "client": "leader"},
            {"type": "connect", "client": "f1"},
            {"type": "act", "client": "f1", "action": {"kind": "role_request", "payload": {}}},
            {"type": "act", "client": "leader", "action": {"kind": "role_grant", "payload": {"target": "p2"}}},
            {"type": "act_script", "client": "f1", "script": "sketches", "count": 4},
        ],
        "assertions": [
            {"check": "leader_is", "client": "f1"},
            {"check": "no_follower_mutations"},
            {"check": "convergence"},
        ],
    }
    report = run_scenario(doc)
    assert report["passed"], report["assertions"]


def test_leader_disconnect_succession_scenario():
    doc = {
        "name": "succession",
        "seed": 4,
        "clients": [{"name": "leader"}, {"name": "f1"}, {"name": "f2"}],
        "events": [
            {"type": "connect", "client": "leader"},
            {"type": "connect", "client": "f1"},
            {"type": "connect", "client": "f2"},
            {"type": "disconnect", "client": "leader"},
            {"type": "act_script", "client": "f1", "script": "sketches", "count": 3},
        ],
        "assertions": [
            {"check": "leader_is", "client": "f1"},  # earliest-joined follower takes over
            {"check": "convergence"},
        ],
    }
    report = run_scenario(doc)
    assert report["passed"], report["assertions"]


def test_drop_fault_detected():
    doc = {
        "name": "drops",
        "seed": 6,
        "clients": [{"name": "leader"}, {"name": "f1"}],
        "events": [
            {"type": "connect", "client": "leader"},
            {"type": "connect", "client": "f1"},
            {"type": "drop_next", "client": "f1", "n": 2},
            {"type": "act_script", "client": "leader", "script": "sketches", "count": 6},
        ],
        "assertions": [{"check": "gap_detected", "client": "f1"}],
    }
    report = run_scenario(doc)
    assert report["passed"], report["assertions"]


def test_connect_failure():
    async def main():
        client = HeadlessClient("lost")
        with pytest.raises(ConnectFailure):
            await client.connect("ws://127.0.0.1:9", "s1", "lost")

    asyncio.run(main())


def test_stalled_connection_dropped_others_unaffected(tmp_path):
    """One consumer whose transport blocks is dropped; eleven others get every frame.

    The stall is injected at the transport endpoint (a socket whose send never
    completes) because kernel TCP buffering on loopback can absorb many MB
    before a real socket blocks; everything above the socket — fanout, bounded
    queues, write timeout, forced disconnect — is the production path.
    """

    async def main():
        from geocollab.server import ClientConnection, SessionHost

        config = ServerConfig(
            port=0,
            review_dir=str(tmp_path / "review"),
            outbound_queue_size=32,
            write_timeout_s=0.2,
        )
        host = SessionHost("s1", config)

        class RecordingSocket:
            def __init__(self, stalled=False):
                self.sent = []
                self.stalled = stalled
                self.closed = False

            async def send_text(self, text):
                if self.stalled:
                    await asyncio.sleep(3600)
                self.sent.append(text)

            async def close(self, code=1000):
                self.closed = True

        sockets = {}
        for i in range(12):
            name = f"user{i}"
            pid, delivery = host.core.join(name)
            socket = RecordingSocket(stalled=(i == 5))
            sockets[pid] = socket
            conn = ClientConnection(pid, socket, config.outbound_queue_size, config.write_timeout_s)
            host.conns[pid] = conn
            conn.start(host._spawn_disconnect)
            host.fanout(delivery)

        leader = host.core.leader_id()
        for i in range(100):
            async with host.lock:
                host.fanout(host.core.submit_action(leader, "chat", {"text": f"m{i}"}))
            await asyncio.sleep(0.001)  # let writer tasks drain, as real socket pacing would

        stalled_pid = "p6"  # the sixth joiner
        deadline = asyncio.get_running_loop().time() + 10.0
        while asyncio.get_running_loop().time() < deadline:
            if not host.core.participants[stalled_pid].connected:
                break
            await asyncio.sleep(0.02)
        assert not host.core.participants[stalled_pid].connected, "stalled connection never dropped"
        assert sockets[stalled_pid].closed

        # every healthy participant got all 100 chats plus the join traffic
        for pid, socket in sockets.items():
            if pid == stalled_pid:
                continue
            deadline = asyncio.get_running_loop().time() + 10.0
            while asyncio.get_running_loop().time() < deadline:
                chats = [s for s in socket.sent if '"kind":"chat"' in s]
                if len(chats) >= 100:
                    break
                await asyncio.sleep(0.02)
            assert len([s for s in socket.sent if '"kind":"chat"' in s]) == 100, pid

        for conn in list(host.conns.values()):
            await conn.close()

    asyncio.run(main())


def test_shutdown_drains_and_closes_clients(tmp_path):
    """Server shutdown sends every connected client a server-initiated close."""

    async def main():
        config = ServerConfig(port=0, review_dir=str(tmp_path / "review"))
        server = await start_server(config)
        clients = [HeadlessClient(f"c{i}") for i in range(3)]
        for client in clients:
            await client.connect(server.ws_base, "s1", client.name)
        assert all(c.connected for c in clients)
        await server.stop()
        for client in clients:
            await client.wait_for(lambda c: not c.connected, timeout=10.0)
        for client in clients:
            await client.close()

    asyncio.run(main())


def test_second_client_snapshot_matches(tmp_path):
    """Fresh joiner's welcome snapshot equals the server scene mid-session."""

    async def main():
        config = ServerConfig(port=0, review_dir=str(tmp_path / "review"))
        server = await start_server(config)
        try:
            leader = HeadlessClient("leader")
            await leader.connect(server.ws_base, "s1", "ada")
            assert leader.role == "leader"
            for i in range(5):
                await leader.send_action(
                    "sketch_create",
                    {"sketch": {"id": f"s{i}", "kind": "polyline", "vertices": [{"lat": 0, "lon": 0}, {"lat": 1, "lon": 1}], "author": "p1"}},
                )
            await leader.wait_for(lambda c: c.received_kind_count("sketch_create") >= 5)

            late = HeadlessClient("late")
            await late.connect(server.ws_base, "s1", "grace")
            assert late.role == "follower"
            assert late.scene_digest_hex() == leader.scene_digest_hex()
            await leader.close()
            await late.close()
        finally:
            await server.stop()

    asyncio.run(main())
