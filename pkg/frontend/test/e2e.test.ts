// End-to-end against the real collaboration server: the production session
// store, transport and camera animator run as a follower while a scripted
// leader drives the session over a second socket. Requires python3 with
// the geocollab package importable (the repository layout provides it).

import { spawn, type ChildProcess } from "node:child_process";
import { dirname, join } from "node:path";
import { fileURLToPath } from "node:url";
import { mkdtempSync } from "node:fs";
import { tmpdir } from "node:os";
import { afterAll, beforeAll, describe, expect, it } from "vitest";
import WebSocket from "ws";

import { CameraAnimator } from "../src/camera";
import { decodeEnvelope, encodeEnvelope, makeEnvelope, type Envelope, type ViewState } from "../src/protocol";
import { ReviewClient } from "../src/review";
import { sceneSummary } from "../src/scene";
import { SessionStore } from "../src/session";
import { SessionTransport } from "../src/transport";

(globalThis as Record<string, unknown>).WebSocket = WebSocket;

const here = dirname(fileURLToPath(import.meta.url));
const repoRoot = join(here, "..", "..");

let server: ChildProcess;
let port = 0;

function sleep(ms: number): Promise<void> {
  return new Promise((resolve) => setTimeout(resolve, ms));
}

async function waitFor(predicate: () => boolean, timeoutMs = 10_000, what = "condition"): Promise<void> {
  const deadline = Date.now() + timeoutMs;
  while (!predicate()) {
    if (Date.now() > deadline) throw new Error(`timed out waiting for ${what}`);
    await sleep(10);
  }
}

/** Minimal scripted leader: a raw socket, no UI machinery. */
class ScriptedLeader {
  ws!: WebSocket;
  participantId = "";
  received: Envelope[] = [];

  async join(session: string): Promise<void> {
    this.ws = new WebSocket(`ws://127.0.0.1:${port}/ws/${session}`);
    await new Promise<void>((resolve, reject) => {
      this.ws.once("open", () => resolve());
      this.ws.once("error", reject);
    });
    this.ws.on("message", (data) => {
      this.received.push(decodeEnvelope(String(data)));
    });
    this.ws.send(encodeEnvelope(makeEnvelope("join", session, "joining", { display_name: "scripted-leader" })));
    await waitFor(() => this.received.some((e) => e.kind === "welcome"), 10_000, "leader welcome");
    const welcome = this.received.find((e) => e.kind === "welcome")!;
    this.participantId = welcome.payload.participant_id as string;
    expect(welcome.payload.role).toBe("leader");
  }

  send(kind: Envelope["kind"], payload: Record<string, unknown>, session: string): void {
    this.ws.send(encodeEnvelope(makeEnvelope(kind, session, this.participantId, payload)));
  }

  close(): void {
    this.ws.close();
  }
}

beforeAll(async () => {
  const reviewDir = mkdtempSync(join(tmpdir(), "geocollab-e2e-"));
  server = spawn("python3", ["-m", "geocollab.cli", "serve", "--port", "0", "--review-dir", reviewDir], {
    cwd: repoRoot,
    env: { ...process.env, PYTHONPATH: join(repoRoot, "src") },
    stdio: ["ignore", "pipe", "pipe"],
  });
  await new Promise<void>((resolve, reject) => {
    const timer = setTimeout(() => reject(new Error("server never announced its port")), 20_000);
    server.stdout!.on("data", (chunk: Buffer) => {
      const match = /listening on [\d.]+:(\d+)/.exec(chunk.toString());
      if (match) {
        port = Number(match[1]);
        clearTimeout(timer);
        resolve();
      }
    });
    server.on("exit", (code) => reject(new Error(`server exited early: ${code}`)));
  });
}, 30_000);

afterAll(() => {
  server?.kill("SIGINT");
});

describe("live session", () => {
  it("follows the scripted leader's camera within 250 ms per update", async () => {
    const session = "e2e-follow";
    const leader = new ScriptedLeader();
    await leader.join(session);

    const camera = new CameraAnimator({ lat: 0, lon: 0, height: 1000, heading: 0, pitch: -45, roll: 0 });
    const arrivals: number[] = [];
    let transport: SessionTransport;
    const store = new SessionStore(session, (env) => transport.send(env), {
      onViewUpdate: (view) => {
        camera.followTo(view);
        arrivals.push(performance.now());
      },
    });
    transport = new SessionTransport(`ws://127.0.0.1:${port}`, store, "browser-follower");
    transport.connect();
    await transport.welcomed;
    expect(store.role).toBe("follower");

    const poses: ViewState[] = [];
    for (let i = 0; i < 5; i++) {
      const view: ViewState = {
        position: { lat: 31.2 + i * 0.01, lon: 121.4 + i * 0.01, height: 500 + i * 50 },
        heading: (i * 40) % 360,
        pitch: -30,
        roll: 0,
      };
      poses.push(view);
      leader.send("view_update", { view }, session);
      // spaced beyond the 10 Hz coalescing window so every update broadcasts
      await sleep(150);
      await waitFor(() => store.lastView?.heading === view.heading, 5_000, `view ${i}`);
      const received = arrivals[arrivals.length - 1]!;
      // the animation completes within the 250 ms budget after receipt
      while (camera.animating) {
        camera.tick();
        await sleep(10);
        if (performance.now() - received > 250) break;
      }
      expect(performance.now() - received).toBeLessThanOrEqual(250);
      expect(camera.atPose(view, 1e-6)).toBe(true);
    }
    expect(store.lastView).toEqual(poses[poses.length - 1]);

    transport.close();
    leader.close();
  }, 30_000);

  it("gated tools stay disabled for followers and the server backs the gate", async () => {
    const session = "e2e-gate";
    const leader = new ScriptedLeader();
    await leader.join(session);

    const errors: string[] = [];
    let transport: SessionTransport;
    const store = new SessionStore(session, (env) => transport.send(env), {
      onError: (code) => errors.push(code),
    });
    transport = new SessionTransport(`ws://127.0.0.1:${port}`, store, "browser-follower");
    transport.connect();
    await transport.welcomed;

    expect(store.canSubmit("sketch_create")).toBe(false); // UI-level gate
    expect(() => store.submit("stage_change", { stage: "problem_analysis" })).toThrow();
    // bypass the local gate to prove the server still rejects it
    transport.send(makeEnvelope("stage_change", session, store.participantId!, { stage: "problem_analysis" }));
    await waitFor(() => errors.includes("not_leader"), 5_000, "server rejection");

    transport.close();
    leader.close();
  }, 30_000);

  it("reconnects after a drop with a scene identical to a fresh join", async () => {
    const session = "e2e-reconnect";
    const leader = new ScriptedLeader();
    await leader.join(session);
    leader.send(
      "sketch_create",
      { sketch: { id: "before", kind: "polyline", vertices: [{ lat: 0, lon: 0 }, { lat: 1, lon: 1 }], author: leader.participantId } },
      session,
    );

    let transport: SessionTransport;
    const store = new SessionStore(session, (env) => transport.send(env));
    transport = new SessionTransport(`ws://127.0.0.1:${port}`, store, "sleepy-browser");
    transport.connect();
    await transport.welcomed;
    expect(store.scene.sketches.has("before")).toBe(true);

    transport.simulateDrop(); // the browser goes to sleep
    await waitFor(() => store.connectionState === "reconnecting", 5_000, "drop detected");
    leader.send(
      "model_place",
      { placement: { id: "while-away", model_ref: "tree_a", position: { lat: 2, lon: 2, height: 0 } } },
      session,
    );
    await waitFor(() => store.connectionState === "live" && store.scene.placements.has("while-away"), 10_000, "replayed");

    // a fresh join must see exactly the same scene
    const freshSeen: Envelope[] = [];
    const fresh = new WebSocket(`ws://127.0.0.1:${port}/ws/${session}`);
    await new Promise<void>((resolve) => fresh.once("open", () => resolve()));
    fresh.on("message", (data) => freshSeen.push(decodeEnvelope(String(data))));
    fresh.send(encodeEnvelope(makeEnvelope("join", session, "joining", { display_name: "fresh" })));
    await waitFor(() => freshSeen.some((e) => e.kind === "welcome"), 5_000, "fresh welcome");
    const welcome = freshSeen.find((e) => e.kind === "welcome")!;
    const { sceneFromSnapshot } = await import("../src/scene");
    const freshScene = sceneFromSnapshot(welcome.payload.scene);
    expect(sceneSummary(store.scene)).toEqual(sceneSummary(freshScene));
    fresh.close();

    transport.close();
    leader.close();
  }, 30_000);
});

describe("review flow", () => {
  it("posts an anchored comment that the bbox query returns", async () => {
    const session = "e2e-review";
    const leader = new ScriptedLeader();
    await leader.join(session);
    leader.send("publish_solution", { title: "e2e plan" }, session);
    await waitFor(() => leader.received.some((e) => e.kind === "publish_solution"), 10_000, "publish broadcast");
    const published = leader.received.find((e) => e.kind === "publish_solution")!;
    const solutionId = published.payload.solution_id as string;

    const client = new ReviewClient(`http://127.0.0.1:${port}`);
    const anchor = { lat: 31.2287, lon: 121.4061, height: 7.5 };
    const commentId = await client.postComment(solutionId, 1, {
      author: "browser-citizen",
      text: "add bike parking here",
      anchor,
    });

    const inBox = await client.listComments(solutionId, 1, { bbox: [121.4, 31.22, 121.41, 31.23] });
    expect(inBox.map((c) => c.comment_id)).toContain(commentId);
    const outside = await client.listComments(solutionId, 1, { bbox: [0, 0, 1, 1] });
    expect(outside).toHaveLength(0);

    const threadsReady = await client.listComments(solutionId, 1);
    expect(threadsReady.find((c) => c.comment_id === commentId)?.anchor).toEqual(anchor);

    leader.close();
  }, 30_000);
});
