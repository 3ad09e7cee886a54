// Session store: the client half of the collaboration state machine.
// Transport-agnostic — it consumes decoded envelopes and emits envelopes to
// send, so the same store runs in the browser and in node tests.

import {
  GATED_KINDS,
  makeEnvelope,
  viewStateSchema,
  type Envelope,
  type GeoAnchor,
  type MessageKind,
  type ViewState,
} from "./protocol";
import { applyBroadcast, emptyScene, sceneFromSnapshot, type SceneReplica } from "./scene";

export interface Participant {
  id: string;
  display_name: string;
  role: "leader" | "follower";
  connected: boolean;
}

export interface ChatEntry {
  sender: string;
  text: string;
  anchor?: GeoAnchor;
  ts: number;
}

export interface SessionEvents {
  onChange?: () => void;
  onChat?: (entry: ChatEntry) => void;
  onError?: (code: string, detail: string) => void;
  onViewUpdate?: (view: ViewState) => void;
  onRoleRequest?: (participantId: string, displayName: string) => void;
  onOpResult?: (payload: Record<string, unknown>) => void;
  onPublished?: (solutionId: string, version: number) => void;
}

export class GatedActionError extends Error {}

export class SessionStore {
  readonly sessionId: string;
  participantId: string | null = null;
  role: "leader" | "follower" | null = null;
  roster = new Map<string, Participant>();
  scene: SceneReplica = emptyScene();
  lastSeq = 0;
  lastView: ViewState | null = null;
  chatLog: ChatEntry[] = [];
  followLeader = true;
  connectionState: "connecting" | "live" | "reconnecting" | "closed" = "connecting";
  private events: SessionEvents;
  private sendRaw: (env: Envelope) => void;

  constructor(sessionId: string, send: (env: Envelope) => void, events: SessionEvents = {}) {
    this.sessionId = sessionId;
    this.sendRaw = send;
    this.events = events;
  }

  get isLeader(): boolean {
    return this.role === "leader";
  }

  /** Whether a toolbar action is enabled right now (mirrors the server gate). */
  canSubmit(kind: MessageKind): boolean {
    if (kind === "chat" || kind === "role_request" || kind === "ping") return true;
    if (GATED_KINDS.has(kind) || kind === "role_grant" || kind === "role_deny") return this.isLeader;
    return false;
  }

  /** Validate and send one action; refuses gated actions while following. */
  submit(kind: MessageKind, payload: Record<string, unknown>): void {
    if (!this.participantId) throw new GatedActionError("not joined yet");
    if (!this.canSubmit(kind)) {
      throw new GatedActionError(`${kind} is leader-only`);
    }
    if (kind === "view_update") {
      viewStateSchema.parse(payload.view); // never ship a malformed camera pose
    }
    this.sendRaw(makeEnvelope(kind, this.sessionId, this.participantId, payload));
  }

  sendChat(text: string, anchor?: GeoAnchor): void {
    const payload: Record<string, unknown> = { text };
    if (anchor) payload.anchor = anchor;
    this.submit("chat", payload);
  }

  requestRole(): void {
    this.submit("role_request", {});
  }

  joinEnvelope(displayName: string): Envelope {
    return makeEnvelope("join", this.sessionId, "joining", { display_name: displayName });
  }

  replayEnvelope(): Envelope {
    if (!this.participantId) throw new GatedActionError("cannot replay before the first join");
    return makeEnvelope("replay_request", this.sessionId, this.participantId, {
      participant_id: this.participantId,
      last_seq: this.lastSeq,
    });
  }

  /** Feed one decoded server envelope into the store. */
  handle(env: Envelope): void {
    switch (env.kind) {
      case "welcome":
        this.participantId = env.payload.participant_id as string;
        this.role = env.payload.role as "leader" | "follower";
        this.installSnapshot(env.payload);
        this.connectionState = "live";
        break;
      case "snapshot":
        this.role = (env.payload.role as "leader" | "follower") ?? this.role;
        this.installSnapshot(env.payload);
        this.connectionState = "live";
        break;
      case "replay_batch":
        this.role = (env.payload.your_role as "leader" | "follower") ?? this.role;
        this.connectionState = "live";
        break;
      case "error":
        this.events.onError?.(String(env.payload.code ?? "error"), String(env.payload.detail ?? ""));
        break;
      case "role_request":
        this.events.onRoleRequest?.(
          String(env.payload.participant_id ?? ""),
          String(env.payload.display_name ?? ""),
        );
        break;
      case "role_deny":
        if (env.payload.participant_id === this.participantId) {
          this.events.onError?.("role_denied", "the leader declined your request");
        }
        break;
      case "pong":
        break;
      default:
        if (env.seq !== undefined) this.applySequenced(env);
    }
    this.events.onChange?.();
  }

  private applySequenced(env: Envelope): void {
    if (env.seq === undefined) return;
    if (env.seq <= this.lastSeq) return; // duplicate (already covered by replay)
    if (env.seq > this.lastSeq + 1) {
      // per-connection FIFO makes this a transport fault: recover via replay
      console.error(`broadcast gap: got seq ${env.seq} after ${this.lastSeq}`);
      this.events.onError?.("gap_detected", `missed broadcasts ${this.lastSeq + 1}..${env.seq - 1}`);
      return;
    }
    switch (env.kind) {
      case "view_update": {
        const view = viewStateSchema.parse(env.payload.view);
        this.lastView = view;
        this.events.onViewUpdate?.(view);
        break;
      }
      case "chat": {
        const entry: ChatEntry = {
          sender: env.sender,
          text: String(env.payload.text ?? ""),
          anchor: env.payload.anchor as GeoAnchor | undefined,
          ts: env.ts,
        };
        this.chatLog.push(entry);
        this.events.onChat?.(entry);
        break;
      }
      case "participant_joined": {
        const participant = env.payload.participant as Participant;
        this.roster.set(participant.id, participant);
        break;
      }
      case "participant_left": {
        const gone = this.roster.get(String(env.payload.participant_id));
        if (gone) gone.connected = false;
        break;
      }
      case "leader_changed": {
        const newLeader = String(env.payload.participant_id);
        for (const participant of this.roster.values()) {
          participant.role = participant.id === newLeader ? "leader" : "follower";
        }
        this.role = newLeader === this.participantId ? "leader" : "follower";
        break;
      }
      case "op_result":
        this.events.onOpResult?.(env.payload);
        break;
      case "publish_solution":
        this.events.onPublished?.(String(env.payload.solution_id), Number(env.payload.version));
        break;
      default:
        applyBroadcast(this.scene, env);
    }
    this.lastSeq = env.seq;
  }

  private installSnapshot(payload: Record<string, unknown>): void {
    this.scene = sceneFromSnapshot(payload.scene);
    this.lastSeq = payload.max_seq as number;
    this.lastView = payload.last_view ? viewStateSchema.parse(payload.last_view) : null;
    this.roster = new Map(
      ((payload.participants as Participant[] | undefined) ?? []).map((p) => [p.id, { ...p }]),
    );
  }
}
