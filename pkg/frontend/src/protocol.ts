// Wire protocol: envelope schema, kinds, and validated encode/decode.
// Mirrors docs/PROTOCOL.md; the test suite checks the golden examples there
// against these schemas so the two cannot drift apart.

import { z } from "zod";

export const PROTOCOL_VERSION = 1;
export const MAX_MESSAGE_BYTES = 65536;

export const MESSAGE_KINDS = [
  "join",
  "welcome",
  "snapshot",
  "role_request",
  "role_grant",
  "role_deny",
  "view_update",
  "sketch_create",
  "sketch_delete",
  "chat",
  "op_exec",
  "op_result",
  "model_place",
  "model_move",
  "model_remove",
  "layer_import",
  "stage_change",
  "publish_solution",
  "participant_joined",
  "participant_left",
  "leader_changed",
  "replay_request",
  "replay_batch",
  "error",
  "ping",
  "pong",
] as const;

export type MessageKind = (typeof MESSAGE_KINDS)[number];

// Actions the server only accepts from the current leader; the UI disables
// the matching tools for followers (the server remains the authority).
export const GATED_KINDS: ReadonlySet<MessageKind> = new Set([
  "view_update",
  "sketch_create",
  "sketch_delete",
  "model_place",
  "model_move",
  "model_remove",
  "layer_import",
  "stage_change",
  "op_exec",
  "publish_solution",
]);

export const geoAnchorSchema = z
  .object({
    lat: z.number().gte(-90).lte(90),
    lon: z.number().gte(-180).lt(180),
    height: z.number().finite().optional(),
    feature_id: z.string().min(1).optional(),
  })
  .strict();

export type GeoAnchor = z.infer<typeof geoAnchorSchema>;

export const viewStateSchema = z
  .object({
    position: geoAnchorSchema,
    heading: z.number().gte(0).lt(360),
    pitch: z.number().gte(-90).lte(90),
    roll: z.number().gte(-180).lt(180),
  })
  .strict();

export type ViewState = z.infer<typeof viewStateSchema>;

export const envelopeSchema = z
  .object({
    v: z.literal(PROTOCOL_VERSION),
    kind: z.enum(MESSAGE_KINDS),
    session: z.string().min(1),
    seq: z.number().int().gte(1).optional(),
    sender: z.string().min(1),
    ts: z.number().int().gte(0),
    payload: z.record(z.string(), z.unknown()),
  })
  .strict();

export type Envelope = z.infer<typeof envelopeSchema>;

export class ProtocolViolation extends Error {}

/** Encode a client->server envelope, validating before anything leaves the app. */
export function encodeEnvelope(env: Envelope): string {
  const checked = envelopeSchema.safeParse(env);
  if (!checked.success) {
    throw new ProtocolViolation(`refusing to send invalid envelope: ${checked.error.message}`);
  }
  if (env.seq !== undefined) {
    throw new ProtocolViolation("clients must not set seq");
  }
  // fixed key order: v, kind, session, sender, ts, payload (seq never sent)
  const body = {
    v: env.v,
    kind: env.kind,
    session: env.session,
    sender: env.sender,
    ts: env.ts,
    payload: env.payload,
  };
  const text = JSON.stringify(body);
  if (new TextEncoder().encode(text).length > MAX_MESSAGE_BYTES) {
    throw new ProtocolViolation("encoded message exceeds 64 KiB");
  }
  return text;
}

export function decodeEnvelope(raw: string): Envelope {
  let parsed: unknown;
  try {
    parsed = JSON.parse(raw);
  } catch (err) {
    throw new ProtocolViolation(`server sent non-JSON frame: ${String(err)}`);
  }
  const checked = envelopeSchema.safeParse(parsed);
  if (!checked.success) {
    throw new ProtocolViolation(`server sent invalid envelope: ${checked.error.message}`);
  }
  return checked.data;
}

export function makeEnvelope(
  kind: MessageKind,
  session: string,
  sender: string,
  payload: Record<string, unknown>,
): Envelope {
  return { v: PROTOCOL_VERSION, kind, session, sender, ts: Date.now(), payload };
}
