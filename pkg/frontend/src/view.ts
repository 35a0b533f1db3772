/**
 * Console view state: a single store fed only by server messages.
 * Nothing in here predicts robot motion — the arm pose, phase, and
 * scene all come from received telemetry and snapshots.
 */

import { GestureRay } from "./gesture.js";
import { StateTelemetry } from "./protocol.js";
import { SnapshotView } from "./snapshot.js";

export type ConnectionStatus = "disconnected" | "connecting" | "connected";

export interface PreviewView {
  durationS: number;
  guarded: boolean;
  waypoints: number;
  eePath: Array<[number, number, number]>;
  revision: number;
  goal: Record<string, unknown>;
}

export interface SpectrumView {
  counts: number[];
  liveTimeS: number;
}

export interface ViewState {
  operatorId: string;
  connection: ConnectionStatus;
  phase: string;
  tokenHolder: string | null;
  sceneRevision: number;
  snapshot: SnapshotView | null;
  lastState: StateTelemetry | null;
  preview: PreviewView | null;
  pendingGesture: GestureRay | null;
  selectedObjectId: number | null;
  spectrum: SpectrumView | null;
  banner: string | null;
  pendingRequests: number;
}

export function initialViewState(operatorId: string): ViewState {
  return {
    operatorId,
    connection: "disconnected",
    phase: "Idle",
    tokenHolder: null,
    sceneRevision: -1,
    snapshot: null,
    lastState: null,
    preview: null,
    pendingGesture: null,
    selectedObjectId: null,
    spectrum: null,
    banner: null,
    pendingRequests: 0,
  };
}

export function applyState(state: ViewState, telemetry: StateTelemetry): ViewState {
  return {
    ...state,
    phase: telemetry.phase,
    tokenHolder: telemetry.token,
    sceneRevision: telemetry.revision,
    lastState: telemetry,
    // a terminal or aborted phase invalidates any preview still showing
    preview: telemetry.phase === "Previewed" ? state.preview : null,
  };
}

export function applySnapshot(state: ViewState, snapshot: SnapshotView): ViewState {
  return { ...state, snapshot, sceneRevision: snapshot.revision };
}

export function applyPreview(
  state: ViewState,
  preview: {
    duration_s: number;
    guarded: boolean;
    waypoints: number;
    ee_path: Array<[number, number, number]>;
  },
  revision: number,
  goal: Record<string, unknown>,
): ViewState {
  return {
    ...state,
    phase: "Previewed",
    preview: {
      durationS: preview.duration_s,
      guarded: preview.guarded,
      waypoints: preview.waypoints,
      eePath: preview.ee_path,
      revision,
      goal,
    },
  };
}

export function holdsToken(state: ViewState): boolean {
  return state.tokenHolder === state.operatorId;
}

/**
 * Confirm is enabled only when this operator holds the control token,
 * a preview exists, and the preview was planned against the scene
 * revision the console is currently showing.
 */
export function canConfirm(state: ViewState): boolean {
  return (
    state.connection === "connected" &&
    holdsToken(state) &&
    state.phase === "Previewed" &&
    state.preview !== null &&
    state.preview.revision === state.sceneRevision
  );
}

/** Why confirm is disabled, for the UI explanation line. */
export function confirmBlocker(state: ViewState): string | null {
  if (canConfirm(state)) return null;
  if (state.connection !== "connected") return "not connected";
  if (!holdsToken(state)) {
    return state.tokenHolder ? `control token held by ${state.tokenHolder}` : "control token not held";
  }
  if (state.phase !== "Previewed" || state.preview === null) return "no plan previewed";
  if (state.preview.revision !== state.sceneRevision) {
    return "scene changed since preview — request a new preview";
  }
  return "confirm unavailable";
}
