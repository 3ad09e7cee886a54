// Camera follow behavior on a fake clock: the animation must land on the
// leader's pose within the 250 ms budget, and the look-around toggle must
// snap back on re-follow.

import { describe, expect, it } from "vitest";

import { CameraAnimator } from "../src/camera";
import type { ViewState } from "../src/protocol";

const start = { lat: 0, lon: 0, height: 1000, heading: 0, pitch: -45, roll: 0 };

function view(lat: number, lon: number, heading = 90): ViewState {
  return { position: { lat, lon, height: 500 }, heading, pitch: -30, roll: 0 };
}

function makeClock(): { now: () => number; advance: (ms: number) => void } {
  let t = 0;
  return { now: () => t, advance: (ms) => (t += ms) };
}

describe("follow animation", () => {
  it("reaches the shared pose within 250 ms", () => {
    const clock = makeClock();
    const camera = new CameraAnimator(start, { now: clock.now });
    const target = view(31.2285, 121.4055);
    camera.followTo(target);
    let ticks = 0;
    while (camera.animating && ticks < 100) {
      clock.advance(25);
      camera.tick();
      ticks += 1;
    }
    expect(clock.now()).toBeLessThanOrEqual(250);
    expect(camera.atPose(target, 1e-9)).toBe(true);
  });

  it("takes the short way around the heading wrap", () => {
    const clock = makeClock();
    const camera = new CameraAnimator({ ...start, heading: 350 }, { now: clock.now });
    camera.followTo(view(0, 0, 10)); // 20 degrees clockwise, not 340 anticlockwise
    clock.advance(100);
    camera.tick();
    const mid = camera.pose.heading;
    expect(mid > 350 || mid < 10).toBe(true);
    clock.advance(200);
    camera.tick();
    expect(Math.abs(camera.pose.heading - 10)).toBeLessThan(1e-9);
  });

  it("a newer update retargets mid-flight", () => {
    const clock = makeClock();
    const camera = new CameraAnimator(start, { now: clock.now });
    camera.followTo(view(10, 10));
    clock.advance(100);
    camera.tick();
    const second = view(-20, 40);
    camera.followTo(second);
    clock.advance(250);
    camera.tick();
    expect(camera.atPose(second, 1e-9)).toBe(true);
  });
});

describe("look-around toggle", () => {
  it("ignores shared poses while off and snaps back when re-enabled", () => {
    const clock = makeClock();
    const camera = new CameraAnimator(start, { now: clock.now });
    camera.setFollowing(false, null);
    camera.moveLocally({ lat: 5, lon: 5 });
    const shared = view(31, 121);
    camera.followTo(shared); // ignored: user is looking around
    expect(camera.animating).toBe(false);
    expect(camera.pose.lat).toBe(5);

    camera.setFollowing(true, shared); // snap back to the leader
    clock.advance(250);
    camera.tick();
    expect(camera.atPose(shared, 1e-9)).toBe(true);
  });

  it("blocks local moves while following", () => {
    const camera = new CameraAnimator(start, { now: () => 0 });
    camera.moveLocally({ lat: 45 });
    expect(camera.pose.lat).toBe(0);
  });
});
