import { describe, expect, it } from "vitest";

import { StateTelemetry } from "../src/protocol.js";
import { SnapshotView } from "../src/snapshot.js";
import {
  ViewState,
  applyPreview,
  applySnapshot,
  applyState,
  canConfirm,
  confirmBlocker,
  initialViewState,
} from "../src/view.js";

function telemetry(overrides: Partial<StateTelemetry> = {}): StateTelemetry {
  return {
    phase: "Idle",
    clock: 0,
    q: [0, 0, 0, 0, 0, 0],
    ee: [0.4, 0, -0.3],
    contact: false,
    token: null,
    revision: 3,
    ...overrides,
  };
}

function snapshot(revision: number): SnapshotView {
  return {
    revision,
    terrain: { origin: [-2, -2], cellSize: 0.25, rows: 2, cols: 2, grid: new Float32Array(4) },
    objects: [],
  };
}

function previewed(state: ViewState, revision: number): ViewState {
  return applyPreview(
    state,
    { duration_s: 4.2, guarded: true, waypoints: 80, ee_path: [[0, 0, 0], [0.1, 0, -0.1]] },
    revision,
    { kind: "xrf" },
  );
}

describe("confirm gating", () => {
  it("requires connection, token, preview, and a fresh revision", () => {
    let state = initialViewState("alice");
    expect(canConfirm(state)).toBe(false);
    expect(confirmBlocker(state)).toBe("not connected");

    state = { ...state, connection: "connected" };
    state = applyState(state, telemetry({ token: "alice", phase: "GoalProposed" }));
    state = applySnapshot(state, snapshot(3));
    expect(canConfirm(state)).toBe(false);
    expect(confirmBlocker(state)).toBe("no plan previewed");

    state = previewed(state, 3);
    expect(canConfirm(state)).toBe(true);
    expect(confirmBlocker(state)).toBeNull();
  });

  it("denies confirm without the token, naming the holder", () => {
    let state = { ...initialViewState("bob"), connection: "connected" as const };
    state = applyState(state, telemetry({ token: "alice" }));
    state = previewed(state, 3);
    expect(canConfirm(state)).toBe(false);
    expect(confirmBlocker(state)).toContain("alice");
  });

  it("disables confirm when the scene moves past the previewed revision", () => {
    let state = { ...initialViewState("alice"), connection: "connected" as const };
    state = applyState(state, telemetry({ token: "alice" }));
    state = applySnapshot(state, snapshot(3));
    state = previewed(state, 3);
    expect(canConfirm(state)).toBe(true);

    state = applySnapshot(state, snapshot(4)); // a new object arrived
    expect(canConfirm(state)).toBe(false);
    expect(confirmBlocker(state)).toContain("scene changed");
  });

  it("drops the preview when the phase leaves Previewed", () => {
    let state = { ...initialViewState("alice"), connection: "connected" as const };
    state = applyState(state, telemetry({ token: "alice", phase: "Previewed" }));
    state = applySnapshot(state, snapshot(3));
    state = previewed(state, 3);
    state = applyState(state, telemetry({ token: "alice", phase: "Aborted" }));
    expect(state.preview).toBeNull();
    expect(canConfirm(state)).toBe(false);
  });
});
