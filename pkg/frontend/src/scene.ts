// Client-side scene replica: applies the broadcast stream the same way the
// server does, so the rendered scene is exactly the authoritative one.

import { z } from "zod";
import { geoAnchorSchema, type Envelope, type GeoAnchor } from "./protocol";

export const STAGES = [
  "problem_definition",
  "problem_analysis",
  "solution_generation",
  "solution_evaluation",
] as const;

export type Stage = (typeof STAGES)[number];

const sketchSchema = z.object({
  id: z.string().min(1),
  kind: z.enum(["polyline", "polygon", "arrow", "text_annotation"]),
  vertices: z.array(geoAnchorSchema).min(1),
  author: z.string().min(1),
  text: z.string().optional(),
  style: z.object({ color: z.string().optional(), width: z.number().optional() }).optional(),
});

const placementSchema = z.object({
  id: z.string().min(1),
  model_ref: z.string().min(1),
  position: geoAnchorSchema,
  heading: z.number().optional(),
  scale: z.number().optional(),
});

const layerSchema = z.object({
  id: z.string().min(1),
  name: z.string().min(1),
  features: z.array(
    z.object({
      geometry_type: z.enum(["point", "linestring", "polygon"]),
      coordinates: z.array(geoAnchorSchema).min(1),
      properties: z.record(z.string(), z.string()).optional(),
    }),
  ),
});

export type Sketch = z.infer<typeof sketchSchema>;
export type Placement = z.infer<typeof placementSchema>;
export type Layer = z.infer<typeof layerSchema>;

export interface SceneReplica {
  sketches: Map<string, Sketch>;
  placements: Map<string, Placement>;
  layers: Map<string, Layer>;
  stage: Stage;
}

export function emptyScene(): SceneReplica {
  return { sketches: new Map(), placements: new Map(), layers: new Map(), stage: "problem_definition" };
}

const snapshotSchema = z.object({
  sketches: z.record(z.string(), sketchSchema),
  placements: z.record(z.string(), placementSchema),
  layers: z.record(z.string(), layerSchema),
  stage: z.enum(STAGES),
});

export function sceneFromSnapshot(raw: unknown): SceneReplica {
  const parsed = snapshotSchema.parse(raw);
  return {
    sketches: new Map(Object.entries(parsed.sketches)),
    placements: new Map(Object.entries(parsed.placements)),
    layers: new Map(Object.entries(parsed.layers)),
    stage: parsed.stage,
  };
}

/** Apply one sequenced broadcast in place; returns true when the scene changed. */
export function applyBroadcast(scene: SceneReplica, env: Envelope): boolean {
  const payload = env.payload as Record<string, unknown>;
  switch (env.kind) {
    case "sketch_create": {
      const sketch = sketchSchema.parse(payload.sketch);
      scene.sketches.set(sketch.id, sketch);
      return true;
    }
    case "sketch_delete":
      return scene.sketches.delete(String(payload.sketch_id));
    case "model_place": {
      const placement = placementSchema.parse(payload.placement);
      scene.placements.set(placement.id, placement);
      return true;
    }
    case "model_move": {
      const id = String(payload.placement_id);
      const current = scene.placements.get(id);
      if (!current) return false;
      const position = payload.position ? geoAnchorSchema.parse(payload.position) : current.position;
      scene.placements.set(id, {
        ...current,
        position,
        heading: (payload.heading as number | undefined) ?? current.heading,
        scale: (payload.scale as number | undefined) ?? current.scale,
      });
      return true;
    }
    case "model_remove":
      return scene.placements.delete(String(payload.placement_id));
    case "layer_import": {
      const layer = layerSchema.parse(payload.layer);
      scene.layers.set(layer.id, layer);
      return true;
    }
    case "stage_change": {
      const stage = payload.stage as Stage;
      if ((STAGES as readonly string[]).includes(stage)) {
        scene.stage = stage;
        return true;
      }
      return false;
    }
    default:
      return false;
  }
}

export function sceneSummary(scene: SceneReplica): {
  sketches: string[];
  placements: string[];
  layers: string[];
  stage: Stage;
} {
  return {
    sketches: [...scene.sketches.keys()].sort(),
    placements: [...scene.placements.keys()].sort(),
    layers: [...scene.layers.keys()].sort(),
    stage: scene.stage,
  };
}

export type { GeoAnchor };
