// DOM shell: wires the session store, camera, globe and review client to
// the panels in index.html. Gated tools follow the store's canSubmit so a
// follower physically cannot emit leader-only actions; the server remains
// the authority and its not_leader errors surface as toasts regardless.

import { CameraAnimator, type CameraPose } from "./camera";
import { GlobeView } from "./globe";
import type { GeoAnchor, ViewState } from "./protocol";
import { buildThreads, ReviewClient, type Comment } from "./review";
import { sceneFromSnapshot } from "./scene";
import { SessionStore } from "./session";
import { SessionTransport } from "./transport";

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

export function toast(text: string, kind: "info" | "error" = "info"): void {
  const host = el<HTMLDivElement>("toasts");
  const node = document.createElement("div");
  node.className = `toast ${kind}`;
  node.textContent = text;
  host.appendChild(node);
  setTimeout(() => node.remove(), 4000);
}

const GATED_TOOL_IDS = ["tool-sketch", "tool-place", "tool-stage", "tool-publish", "tool-distance", "tool-grant"];

type PickHandler = (anchor: GeoAnchor) => void;

export class SessionUi {
  private store: SessionStore;
  private transport: SessionTransport;
  private globe: GlobeView;
  private animator: CameraAnimator;
  private pendingPick: PickHandler | null = null;
  private sketchDraft: GeoAnchor[] = [];
  private chatAnchor: GeoAnchor | null = null;
  private distancePicks: GeoAnchor[] = [];

  constructor(wsBase: string, sessionId: string, displayName: string, canvas: HTMLCanvasElement) {
    this.globe = new GlobeView(canvas);
    const initial: CameraPose = { lat: 31.2285, lon: 121.4055, height: 1200, heading: 0, pitch: -45, roll: 0 };
    this.animator = new CameraAnimator(initial);

    this.store = new SessionStore(sessionId, (env) => this.transport.send(env), {
      onChange: () => this.refresh(),
      onChat: (entry) => this.appendChat(entry.sender, entry.text, entry.anchor),
      onError: (code, detail) =>
        toast(code === "not_leader" ? "leader only" : `${code}: ${detail}`, "error"),
      onViewUpdate: (view) => this.animator.followTo(view),
      onRoleRequest: (pid, name) => toast(`${name} (${pid}) requests the leader role`),
      onOpResult: (payload) => this.showOpResult(payload),
      onPublished: (sid, version) => toast(`published ${sid} v${version}`),
    });
    this.transport = new SessionTransport(wsBase, this.store, displayName, {
      onStateChange: (state) => {
        el("connection").textContent = state;
        el("connection").className = `pill ${state}`;
      },
    });

    this.wireTools();
    this.globe.onGroundClick = (anchor) => this.handleGroundClick(anchor);
    this.transport.connect();
    this.loop();
  }

  private loop(): void {
    this.animator.tick();
    this.globe.applyPose(this.animator.pose);
    this.globe.render();
    requestAnimationFrame(() => this.loop());
  }

  private handleGroundClick(anchor: GeoAnchor): void {
    if (this.pendingPick) {
      const handler = this.pendingPick;
      this.pendingPick = null;
      handler(anchor);
      return;
    }
    if (!this.animator.following && this.store.isLeader) return;
  }

  private wireTools(): void {
    el<HTMLButtonElement>("tool-follow").onclick = () => {
      this.animator.setFollowing(!this.animator.following, this.store.lastView);
      el("tool-follow").textContent = this.animator.following ? "Following leader" : "Looking around";
    };
    el<HTMLButtonElement>("tool-request-role").onclick = () => {
      this.store.requestRole();
      toast("role requested");
    };
    el<HTMLButtonElement>("tool-grant").onclick = () => {
      const target = el<HTMLSelectElement>("grant-target").value;
      if (target) this.store.submit("role_grant", { target });
    };
    el<HTMLButtonElement>("tool-sketch").onclick = () => {
      this.sketchDraft = [];
      toast("click the globe to add vertices, then Finish sketch");
      this.armSketchPick();
      el("tool-sketch-finish").hidden = false;
    };
    el<HTMLButtonElement>("tool-sketch-finish").onclick = () => {
      el("tool-sketch-finish").hidden = true;
      this.pendingPick = null;
      if (this.sketchDraft.length < 2) return toast("need at least two vertices", "error");
      this.store.submit("sketch_create", {
        sketch: {
          id: `sk-${Date.now().toString(36)}`,
          kind: "polyline",
          vertices: this.sketchDraft,
          author: this.store.participantId,
        },
      });
      this.sketchDraft = [];
    };
    el<HTMLButtonElement>("tool-place").onclick = () => {
      const ref = el<HTMLSelectElement>("model-select").value;
      toast("click the globe to place the model");
      this.pendingPick = (anchor) =>
        this.store.submit("model_place", {
          placement: { id: `m-${Date.now().toString(36)}`, model_ref: ref, position: anchor },
        });
    };
    el<HTMLSelectElement>("tool-stage").onchange = () => {
      this.store.submit("stage_change", { stage: el<HTMLSelectElement>("tool-stage").value });
    };
    el<HTMLButtonElement>("tool-publish").onclick = () => {
      const title = window.prompt("Solution title?");
      if (title) this.store.submit("publish_solution", { title });
    };
    el<HTMLButtonElement>("tool-distance").onclick = () => {
      this.distancePicks = [];
      toast("pick two points");
      this.pendingPick = (first) => {
        this.distancePicks = [first];
        this.pendingPick = (second) => {
          this.store.submit("op_exec", {
            op: "distance",
            op_id: `d-${Date.now().toString(36)}`,
            params: { a: { lat: first.lat, lon: first.lon }, b: { lat: second.lat, lon: second.lon } },
          });
        };
      };
    };
    el<HTMLButtonElement>("chat-anchor").onclick = () => {
      toast("click the globe to anchor your next message");
      this.pendingPick = (anchor) => {
        this.chatAnchor = anchor;
        el("chat-anchor").textContent = `@${anchor.lat.toFixed(4)},${anchor.lon.toFixed(4)}`;
      };
    };
    el<HTMLFormElement>("chat-form").onsubmit = (event) => {
      event.preventDefault();
      const input = el<HTMLInputElement>("chat-input");
      if (!input.value.trim()) return;
      this.store.sendChat(input.value.trim(), this.chatAnchor ?? undefined);
      input.value = "";
      this.chatAnchor = null;
      el("chat-anchor").textContent = "@";
    };
  }

  private armSketchPick(): void {
    this.pendingPick = (anchor) => {
      this.sketchDraft.push(anchor);
      toast(`vertex ${this.sketchDraft.length}`);
      this.armSketchPick(); // keep collecting until Finish
    };
  }

  private showOpResult(payload: Record<string, unknown>): void {
    const result = payload.result as Record<string, unknown> | undefined;
    if (payload.status === "ok" && result && typeof result.meters === "number") {
      toast(`distance: ${(result.meters as number).toFixed(1)} m`);
    } else if (payload.status === "ok") {
      toast(`${payload.op}: done`);
    } else {
      toast(`${payload.op} failed`, "error");
    }
  }

  private appendChat(sender: string, text: string, anchor?: GeoAnchor): void {
    const log = el<HTMLUListElement>("chat-log");
    const item = document.createElement("li");
    const who = this.store.roster.get(sender)?.display_name ?? sender;
    item.textContent = `${who}: ${text}`;
    if (anchor) {
      const chip = document.createElement("button");
      chip.className = "chip";
      chip.textContent = `@${anchor.lat.toFixed(4)},${anchor.lon.toFixed(4)}`;
      chip.onclick = () => {
        this.animator.setFollowing(false, null);
        this.animator.moveLocally({ lat: anchor.lat, lon: anchor.lon, height: 800, pitch: -60 });
        el("tool-follow").textContent = "Looking around";
      };
      item.appendChild(chip);
    }
    log.appendChild(item);
    log.scrollTop = log.scrollHeight;
  }

  private refresh(): void {
    el("role-badge").textContent = this.store.role ?? "-";
    el("role-badge").className = `pill ${this.store.role ?? ""}`;
    el("stage-banner").textContent = this.store.scene.stage.replace(/_/g, " ");
    const roster = el<HTMLUListElement>("roster");
    roster.innerHTML = "";
    const grantTarget = el<HTMLSelectElement>("grant-target");
    grantTarget.innerHTML = "";
    for (const participant of this.store.roster.values()) {
      const item = document.createElement("li");
      item.textContent = `${participant.display_name} ${participant.role === "leader" ? "★" : ""}${participant.connected ? "" : " (offline)"}`;
      roster.appendChild(item);
      if (participant.id !== this.store.participantId && participant.connected) {
        const option = document.createElement("option");
        option.value = participant.id;
        option.textContent = participant.display_name;
        grantTarget.appendChild(option);
      }
    }
    for (const id of GATED_TOOL_IDS) {
      const node = document.getElementById(id);
      if (node) (node as HTMLButtonElement).disabled = !this.store.isLeader;
    }
    const stage = el<HTMLSelectElement>("tool-stage");
    if (stage.value !== this.store.scene.stage) stage.value = this.store.scene.stage;
    this.globe.syncScene(this.store.scene);
  }
}

export class ReviewUi {
  private client: ReviewClient;
  private globe: GlobeView;
  private animator: CameraAnimator;
  private comments: Comment[] = [];
  private solutionId: string | null = null;
  private version = 1;
  private pickedAnchor: GeoAnchor | null = null;
  private replyTo: string | null = null;

  constructor(apiBase: string, canvas: HTMLCanvasElement) {
    this.client = new ReviewClient(apiBase);
    this.globe = new GlobeView(canvas);
    this.animator = new CameraAnimator({ lat: 31.2285, lon: 121.4055, height: 2500, heading: 0, pitch: -55, roll: 0 });
    this.globe.onMarkerClick = (id) => this.openThread(id);
    this.globe.onGroundClick = (anchor) => {
      this.pickedAnchor = anchor;
      el("composer-anchor").textContent = `@${anchor.lat.toFixed(4)},${anchor.lon.toFixed(4)}`;
    };
    this.wire();
    this.loop();
    void this.loadSolutions();
  }

  private loop(): void {
    this.animator.tick();
    this.globe.applyPose(this.animator.pose);
    this.globe.render();
    requestAnimationFrame(() => this.loop());
  }

  private wire(): void {
    el<HTMLSelectElement>("solution-select").onchange = () => {
      const [sid, version] = el<HTMLSelectElement>("solution-select").value.split("@");
      this.solutionId = sid ?? null;
      this.version = Number(version ?? 1);
      void this.loadComments();
    };
    el<HTMLFormElement>("composer").onsubmit = (event) => {
      event.preventDefault();
      void this.post();
    };
  }

  private async loadSolutions(): Promise<void> {
    try {
      const solutions = await this.client.listSolutions();
      const select = el<HTMLSelectElement>("solution-select");
      select.innerHTML = "";
      for (const solution of solutions) {
        for (let v = 1; v <= solution.latest_version; v++) {
          const option = document.createElement("option");
          option.value = `${solution.solution_id}@${v}`;
          option.textContent = `${solution.title} — v${v}`;
          select.appendChild(option);
        }
      }
      if (solutions.length) {
        const latest = solutions[0]!;
        this.solutionId = latest.solution_id;
        this.version = latest.latest_version;
        select.value = `${this.solutionId}@${this.version}`;
        await this.loadSceneAndComments();
      }
    } catch (err) {
      this.showApiError("loading solutions failed", err, () => this.loadSolutions());
    }
  }

  private async loadSceneAndComments(): Promise<void> {
    if (!this.solutionId) return;
    try {
      const scene = await this.client.getSolutionScene(this.solutionId, this.version);
      this.globe.syncScene(sceneFromSnapshot(scene));
    } catch (err) {
      this.showApiError("loading scene failed", err, () => this.loadSceneAndComments());
    }
    await this.loadComments();
  }

  private async loadComments(): Promise<void> {
    if (!this.solutionId) return;
    try {
      this.comments = await this.client.listComments(this.solutionId, this.version);
      this.globe.setMarkers(
        this.comments
          .filter((c) => !c.parent_id)
          .map((c) => ({
            id: c.comment_id,
            anchor: c.anchor,
            color: c.status === "addressed" ? 0x6a994e : 0xe63946,
          })),
      );
      el("comment-count").textContent = `${this.comments.length} comments`;
      this.renderThreads();
    } catch (err) {
      this.showApiError("loading comments failed", err, () => this.loadComments());
    }
  }

  private renderThreads(): void {
    const host = el<HTMLDivElement>("threads");
    host.innerHTML = "";
    for (const thread of buildThreads(this.comments)) {
      const card = document.createElement("div");
      card.className = "thread";
      card.id = `thread-${thread.root.comment_id}`;
      const head = document.createElement("p");
      head.innerHTML = `<b>${thread.root.author}</b> <span class="status ${thread.root.status}">${thread.root.status}</span><br>${thread.root.text}`;
      card.appendChild(head);
      for (const reply of thread.replies) {
        const line = document.createElement("p");
        line.className = "reply";
        line.textContent = `${reply.author}: ${reply.text}`;
        card.appendChild(line);
      }
      const replyButton = document.createElement("button");
      replyButton.textContent = "reply";
      replyButton.onclick = () => {
        this.replyTo = thread.root.comment_id;
        this.pickedAnchor = thread.root.anchor;
        el("composer-anchor").textContent = "@thread anchor";
        el<HTMLInputElement>("composer-text").focus();
      };
      card.appendChild(replyButton);
      host.appendChild(card);
    }
  }

  private openThread(commentId: string): void {
    const comment = this.comments.find((c) => c.comment_id === commentId);
    if (!comment) return;
    this.animator.setFollowing(false, null);
    this.animator.moveLocally({ lat: comment.anchor.lat, lon: comment.anchor.lon, height: 600, pitch: -65 });
    document.getElementById(`thread-${commentId}`)?.scrollIntoView({ behavior: "smooth" });
  }

  private async post(): Promise<void> {
    if (!this.solutionId) return;
    const text = el<HTMLInputElement>("composer-text").value.trim();
    const author = el<HTMLInputElement>("composer-author").value.trim() || "anonymous";
    if (!text) return;
    if (!this.pickedAnchor) {
      toast("pick an anchor on the globe first", "error");
      return;
    }
    try {
      await this.client.postComment(this.solutionId, this.version, {
        author,
        text,
        anchor: this.pickedAnchor,
        ...(this.replyTo ? { parent_id: this.replyTo } : {}),
      });
      el<HTMLInputElement>("composer-text").value = "";
      el("composer-anchor").textContent = "@";
      this.pickedAnchor = null;
      this.replyTo = null;
      await this.loadComments(); // appears without reload
    } catch (err) {
      this.showApiError("posting failed", err, () => this.post());
    }
  }

  private showApiError(prefix: string, err: unknown, retry: () => Promise<void> | void): void {
    const host = el<HTMLDivElement>("review-errors");
    host.innerHTML = "";
    const line = document.createElement("p");
    line.className = "toast error inline";
    line.textContent = `${prefix}: ${err instanceof Error ? err.message : String(err)} `;
    const button = document.createElement("button");
    button.textContent = "retry";
    button.onclick = () => {
      host.innerHTML = "";
      void retry();
    };
    line.appendChild(button);
    host.appendChild(line);
  }
}
