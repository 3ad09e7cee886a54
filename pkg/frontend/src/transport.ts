// WebSocket transport with automatic replay-request reconnection.
// On connection loss the session store keeps its state; we reconnect with
// the old participant id and last applied seq, and the server replays what
// was missed (or sends a snapshot when the gap aged out of the ring).

import { decodeEnvelope, encodeEnvelope, type Envelope } from "./protocol";
import type { SessionStore } from "./session";

export interface TransportEvents {
  onStateChange?: (state: "connecting" | "live" | "reconnecting" | "closed") => void;
}

export class SessionTransport {
  private ws: WebSocket | null = null;
  private url: string;
  private store: SessionStore;
  private displayName: string;
  private events: TransportEvents;
  private closedByUser = false;
  private reconnectDelayMs = 500;
  welcomed: Promise<void>;
  private resolveWelcome!: () => void;
  private rejectWelcome!: (err: Error) => void;

  constructor(wsBase: string, store: SessionStore, displayName: string, events: TransportEvents = {}) {
    this.url = `${wsBase}/ws/${store.sessionId}`;
    this.store = store;
    this.displayName = displayName;
    this.events = events;
    this.welcomed = new Promise((resolve, reject) => {
      this.resolveWelcome = resolve;
      this.rejectWelcome = reject;
    });
  }

  connect(): void {
    this.open(false);
  }

  close(): void {
    this.closedByUser = true;
    this.store.connectionState = "closed";
    this.events.onStateChange?.("closed");
    this.ws?.close();
  }

  send(env: Envelope): void {
    if (!this.ws || this.ws.readyState !== WebSocket.OPEN) {
      throw new Error("not connected");
    }
    this.ws.send(encodeEnvelope(env));
  }

  /** Used by tests to simulate a network drop without a clean close. */
  simulateDrop(): void {
    this.ws?.close();
  }

  private open(isReconnect: boolean): void {
    const state = isReconnect ? "reconnecting" : "connecting";
    this.store.connectionState = state;
    this.events.onStateChange?.(state);
    const ws = new WebSocket(this.url);
    this.ws = ws;

    ws.onopen = () => {
      const hello = isReconnect && this.store.participantId
        ? this.store.replayEnvelope()
        : this.store.joinEnvelope(this.displayName);
      ws.send(encodeEnvelope(hello));
    };

    ws.onmessage = (event) => {
      let env: Envelope;
      try {
        env = decodeEnvelope(String(event.data));
      } catch (err) {
        console.error("dropping undecodable frame", err);
        return;
      }
      this.store.handle(env);
      if (this.store.connectionState === "live") {
        this.reconnectDelayMs = 500;
        this.events.onStateChange?.("live");
        this.resolveWelcome();
      }
    };

    ws.onclose = () => {
      if (this.closedByUser) return;
      if (!this.store.participantId) {
        this.rejectWelcome(new Error("connection closed before welcome"));
        return;
      }
      this.events.onStateChange?.("reconnecting");
      const delay = this.reconnectDelayMs;
      this.reconnectDelayMs = Math.min(this.reconnectDelayMs * 2, 10_000);
      setTimeout(() => {
        if (!this.closedByUser) this.open(true);
      }, delay);
    };
  }
}
