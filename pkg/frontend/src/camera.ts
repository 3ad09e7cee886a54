// Follow-leader camera: animates the local camera to each shared pose
// within the latency budget, and supports a look-around toggle that snaps
// back on the next leader update.

import type { ViewState } from "./protocol";

export const FOLLOW_ANIMATION_MS = 200; // must stay within the 250 ms budget

export interface CameraPose {
  lat: number;
  lon: number;
  height: number;
  heading: number;
  pitch: number;
  roll: number;
}

export function poseFromView(view: ViewState): CameraPose {
  return {
    lat: view.position.lat,
    lon: view.position.lon,
    height: view.position.height ?? 0,
    heading: view.heading,
    pitch: view.pitch,
    roll: view.roll,
  };
}

function easeInOut(t: number): number {
  return t < 0.5 ? 2 * t * t : 1 - (1 - t) * (1 - t) * 2;
}

function lerp(a: number, b: number, t: number): number {
  return a + (b - a) * t;
}

function lerpAngle(a: number, b: number, t: number): number {
  let delta = ((b - a + 540) % 360) - 180; // shortest way around
  return (a + delta * t + 360) % 360;
}

export class CameraAnimator {
  pose: CameraPose;
  following = true;
  private target: CameraPose | null = null;
  private from: CameraPose | null = null;
  private startedAt = 0;
  private durationMs: number;
  private now: () => number;

  constructor(initial: CameraPose, opts: { durationMs?: number; now?: () => number } = {}) {
    this.pose = { ...initial };
    this.durationMs = opts.durationMs ?? FOLLOW_ANIMATION_MS;
    this.now = opts.now ?? (() => performance.now());
  }

  get animating(): boolean {
    return this.target !== null;
  }

  /** New shared pose from the leader; snaps back even if the user looked around. */
  followTo(view: ViewState): void {
    if (!this.following) return;
    this.from = { ...this.pose };
    this.target = poseFromView(view);
    this.startedAt = this.now();
  }

  /** Local look-around while not following; server state is unaffected. */
  moveLocally(pose: Partial<CameraPose>): void {
    if (this.following) return;
    this.pose = { ...this.pose, ...pose };
  }

  setFollowing(on: boolean, lastSharedView: ViewState | null): void {
    this.following = on;
    if (on && lastSharedView) this.followTo(lastSharedView); // snap back
  }

  /** Advance the animation; returns true while the camera is still moving. */
  tick(): boolean {
    if (!this.target || !this.from) return false;
    const t = Math.min(1, (this.now() - this.startedAt) / this.durationMs);
    const k = easeInOut(t);
    this.pose = {
      lat: lerp(this.from.lat, this.target.lat, k),
      lon: lerp(this.from.lon, this.target.lon, k),
      height: lerp(this.from.height, this.target.height, k),
      heading: lerpAngle(this.from.heading, this.target.heading, k),
      pitch: lerp(this.from.pitch, this.target.pitch, k),
      roll: lerp(this.from.roll, this.target.roll, k),
    };
    if (t >= 1) {
      this.pose = { ...this.target };
      this.target = null;
      this.from = null;
      return false;
    }
    return true;
  }

  atPose(view: ViewState, tolerance = 1e-6): boolean {
    const target = poseFromView(view);
    return (
      Math.abs(this.pose.lat - target.lat) <= tolerance &&
      Math.abs(this.pose.lon - target.lon) <= tolerance &&
      Math.abs(this.pose.height - target.height) <= Math.max(1e-3, tolerance) &&
      Math.abs(((this.pose.heading - target.heading + 540) % 360) - 180) <= tolerance &&
      Math.abs(this.pose.pitch - target.pitch) <= tolerance
    );
  }
}
