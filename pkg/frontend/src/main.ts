/**
 * Browser entry point: 3D worksite view, command entry, preview ghost,
 * spectrum chart, and link/token indicators. Everything rendered here
 * comes from server messages; the console never simulates robot state.
 */

import * as THREE from "three";

import { MissionClient } from "./client.js";
import { CameraModel, GestureRay, clickToRay } from "./gesture.js";
import { Reply, StateTelemetry } from "./protocol.js";
import { SceneObjectView, SnapshotView, SHAPE_BOX, SHAPE_CYLINDER, SHAPE_SPHERE } from "./snapshot.js";
import { chartPoints } from "./spectrum.js";
import {
  ViewState,
  applyPreview,
  applySnapshot,
  applyState,
  canConfirm,
  confirmBlocker,
  holdsToken,
  initialViewState,
} from "./view.js";

const params = new URLSearchParams(location.search);
const OPERATOR = params.get("operator") ?? "operator-1";
const WS_URL = params.get("ws") ?? `ws://${location.hostname}:8765`;

let state: ViewState = initialViewState(OPERATOR);
let client: MissionClient | null = null;

// ---------------------------------------------------------------------------
// DOM scaffold

const el = (id: string) => document.getElementById(id)!;
const viewport = el("viewport") as HTMLDivElement;
const commandInput = el("command") as HTMLInputElement;
const diagnostic = el("diagnostic");
const banner = el("banner");
const goalCard = el("goal-card");
const confirmBtn = el("confirm") as HTMLButtonElement;
const abortBtn = el("abort") as HTMLButtonElement;
const tokenBtn = el("token") as HTMLButtonElement;
const spectrumCanvas = el("spectrum") as HTMLCanvasElement;

function chip(id: string, text: string, good: boolean) {
  const node = el(id);
  node.textContent = text;
  node.className = `chip ${good ? "chip-good" : "chip-warn"}`;
}

function setBanner(text: string | null) {
  state = { ...state, banner: text };
  banner.textContent = text ?? "";
  (banner as HTMLElement).style.display = text ? "block" : "none";
}

// ---------------------------------------------------------------------------
// three.js scene

const renderer = new THREE.WebGLRenderer({ antialias: true });
renderer.setSize(viewport.clientWidth, viewport.clientHeight);
viewport.appendChild(renderer.domElement);

const scene = new THREE.Scene();
scene.background = new THREE.Color(0x0b1a26);
// the worksite frame is z-up
const camera = new THREE.PerspectiveCamera(55, viewport.clientWidth / viewport.clientHeight, 0.01, 50);
camera.up.set(0, 0, 1);
camera.position.set(1.4, -1.2, 0.6);
camera.lookAt(0.4, 0, -0.4);

scene.add(new THREE.AmbientLight(0xffffff, 0.45));
const sun = new THREE.DirectionalLight(0xbfdfff, 1.1);
sun.position.set(2, -1, 3);
scene.add(sun);

let terrainMesh: THREE.Mesh | null = null;
const objectMeshes = new Map<number, THREE.Mesh>();
const eeMarker = new THREE.Mesh(
  new THREE.SphereGeometry(0.018, 16, 16),
  new THREE.MeshStandardMaterial({ color: 0xffc857 }),
);
scene.add(eeMarker);
const gestureMarker = new THREE.Mesh(
  new THREE.SphereGeometry(0.012, 12, 12),
  new THREE.MeshBasicMaterial({ color: 0x6ee7ff }),
);
gestureMarker.visible = false;
scene.add(gestureMarker);

let ghostLine: THREE.Line | null = null;
let ghostMarker: THREE.Mesh | null = null;
let ghostStart = 0;

function buildTerrain(snapshot: SnapshotView) {
  if (terrainMesh) scene.remove(terrainMesh);
  const t = snapshot.terrain;
  const geom = new THREE.PlaneGeometry(
    (t.cols - 1) * t.cellSize,
    (t.rows - 1) * t.cellSize,
    t.cols - 1,
    t.rows - 1,
  );
  const pos = geom.attributes.position as THREE.BufferAttribute;
  for (let row = 0; row < t.rows; row++) {
    for (let col = 0; col < t.cols; col++) {
      const i = row * t.cols + col;
      pos.setXYZ(
        i,
        t.origin[0] + col * t.cellSize,
        t.origin[1] + (t.rows - 1 - row) * t.cellSize,
        t.grid[(t.rows - 1 - row) * t.cols + col],
      );
    }
  }
  geom.computeVertexNormals();
  terrainMesh = new THREE.Mesh(
    geom,
    new THREE.MeshStandardMaterial({ color: 0x3a5f4b, wireframe: false, side: THREE.DoubleSide }),
  );
  scene.add(terrainMesh);
}

function shapeGeometry(obj: SceneObjectView): THREE.BufferGeometry {
  const d = obj.shape.dims;
  switch (obj.shape.kind) {
    case SHAPE_SPHERE:
      return new THREE.SphereGeometry(d[0], 20, 20);
    case SHAPE_BOX:
      return new THREE.BoxGeometry(d[0], d[1], d[2]);
    case SHAPE_CYLINDER: {
      const geom = new THREE.CylinderGeometry(d[0], d[0], d[1], 20);
      geom.rotateX(Math.PI / 2); // worksite cylinders are z-aligned
      return geom;
    }
    default:
      return new THREE.SphereGeometry(0.02, 8, 8);
  }
}

function syncObjects(snapshot: SnapshotView) {
  const seen = new Set<number>();
  for (const obj of snapshot.objects) {
    seen.add(obj.id);
    let mesh = objectMeshes.get(obj.id);
    if (!mesh) {
      mesh = new THREE.Mesh(
        shapeGeometry(obj),
        new THREE.MeshStandardMaterial({ color: 0x8fb8de }),
      );
      objectMeshes.set(obj.id, mesh);
      scene.add(mesh);
    }
    mesh.position.set(...obj.position);
    const [w, x, y, z] = obj.orientation;
    mesh.quaternion.set(x, y, z, w);
  }
  for (const [id, mesh] of [...objectMeshes]) {
    if (!seen.has(id)) {
      scene.remove(mesh);
      objectMeshes.delete(id);
    }
  }
}

function showGhost() {
  clearGhost();
  if (!state.preview) return;
  const pts = state.preview.eePath.map((p) => new THREE.Vector3(...p));
  ghostLine = new THREE.Line(
    new THREE.BufferGeometry().setFromPoints(pts),
    new THREE.LineBasicMaterial({ color: 0xd9f4ff, transparent: true, opacity: 0.7 }),
  );
  ghostMarker = new THREE.Mesh(
    new THREE.SphereGeometry(0.015, 12, 12),
    new THREE.MeshBasicMaterial({ color: 0xd9f4ff, transparent: true, opacity: 0.5 }),
  );
  ghostStart = performance.now();
  scene.add(ghostLine);
  scene.add(ghostMarker);
}

function clearGhost() {
  if (ghostLine) scene.remove(ghostLine);
  if (ghostMarker) scene.remove(ghostMarker);
  ghostLine = null;
  ghostMarker = null;
}

function animate() {
  requestAnimationFrame(animate);
  if (ghostMarker && state.preview) {
    const path = state.preview.eePath;
    const cycle = Math.max(state.preview.durationS, 1);
    const frac = ((performance.now() - ghostStart) / 1000 / cycle) % 1;
    const p = path[Math.min(Math.floor(frac * path.length), path.length - 1)];
    ghostMarker.position.set(...p);
  }
  renderer.render(scene, camera);
}
animate();

// ---------------------------------------------------------------------------
// server events

function cameraModel(): CameraModel {
  const forward = new THREE.Vector3();
  camera.getWorldDirection(forward);
  return {
    position: camera.position.toArray() as [number, number, number],
    forward: forward.toArray() as [number, number, number],
    up: camera.up.toArray() as [number, number, number],
    fovYDeg: camera.fov,
    aspect: camera.aspect,
  };
}

function refreshControls() {
  chip("chip-conn", state.connection, state.connection === "connected");
  chip("chip-token", holdsToken(state) ? "token: held" : `token: ${state.tokenHolder ?? "free"}`, holdsToken(state));
  chip("chip-phase", state.phase, state.phase !== "Aborted");
  confirmBtn.disabled = !canConfirm(state);
  confirmBtn.title = confirmBlocker(state) ?? "";
  tokenBtn.textContent = holdsToken(state) ? "Release control" : "Request control";
}

function onState(telemetry: StateTelemetry) {
  state = applyState(state, telemetry);
  if (!state.preview) clearGhost();
  eeMarker.position.set(telemetry.ee[0], telemetry.ee[1], telemetry.ee[2]);
  refreshControls();
}

function onSnapshot(snapshot: SnapshotView) {
  state = applySnapshot(state, snapshot);
  buildTerrain(snapshot);
  syncObjects(snapshot);
  refreshControls();
}

function drawSpectrum(counts: number[]) {
  const ctx = spectrumCanvas.getContext("2d")!;
  const { width, height } = spectrumCanvas;
  ctx.clearRect(0, 0, width, height);
  ctx.fillStyle = "#0b1a26";
  ctx.fillRect(0, 0, width, height);
  const points = chartPoints(counts);
  const peak = Math.max(1, ...counts);
  ctx.strokeStyle = "#6ee7ff";
  ctx.beginPath();
  for (let i = 0; i < points.length; i++) {
    const x = (i / (points.length - 1)) * width;
    const y = height - (points[i].counts / peak) * (height - 8);
    if (i === 0) ctx.moveTo(x, y);
    else ctx.lineTo(x, y);
  }
  ctx.stroke();
  ctx.fillStyle = "#9fb6c6";
  ctx.font = "10px monospace";
  ctx.fillText(`peak ${peak} counts; 0 – ${points[points.length - 1].kev.toFixed(2)} keV`, 6, 12);
}

function describeGoal(reply: Reply): string {
  const goal = reply.goal as Record<string, unknown> | undefined;
  if (!goal) return "";
  const preview = reply.preview as { duration_s: number; guarded: boolean } | undefined;
  const bits = [`goal: ${goal.kind}`];
  if (preview) {
    bits.push(`${preview.duration_s.toFixed(1)} s${preview.guarded ? ", guarded" : ""}`);
  }
  return bits.join(" — ");
}

// ---------------------------------------------------------------------------
// user actions

async function submitCommand() {
  if (!client) return;
  const text = commandInput.value.trim();
  if (!text) return;
  diagnostic.textContent = "";
  const msg: Record<string, unknown> = { type: "utterance", text };
  if (state.pendingGesture) {
    msg.gesture = {
      origin: state.pendingGesture.origin,
      direction: state.pendingGesture.direction,
    };
  }
  commandInput.disabled = true;
  try {
    const reply = await client.request(msg);
    if (reply.ok) {
      commandInput.value = "";
      state = { ...state, pendingGesture: null };
      gestureMarker.visible = false;
      if (reply.preview) {
        state = applyPreview(
          state,
          reply.preview as Parameters<typeof applyPreview>[1],
          reply.revision as number,
          reply.goal as Record<string, unknown>,
        );
        showGhost();
      }
      goalCard.textContent = describeGoal(reply);
      setBanner(null);
    } else if (reply.error === "ParseError") {
      const pos = reply.position as number;
      const caret = " ".repeat(Math.max(pos, 0)) + "^";
      diagnostic.textContent = `${reply.message}\n${text}\n${caret}\nexpected: ${(reply.expected as string[]).join(", ")}`;
    } else {
      setBanner(`${reply.error}: ${reply.detail ?? ""}`);
    }
  } catch {
    // input preserved so the operator can retry after a transport timeout
    setBanner("command timed out — link degraded, retry when reconnected");
  } finally {
    commandInput.disabled = false;
    refreshControls();
  }
}

async function toggleToken() {
  if (!client) return;
  const type = holdsToken(state) ? "release_token" : "acquire_token";
  const reply = await client.request({ type });
  if (reply.ok) {
    state = { ...state, tokenHolder: type === "acquire_token" ? (reply.holder as string) : null };
  } else {
    setBanner(`${reply.error}: ${reply.detail ?? ""}`);
  }
  refreshControls();
}

async function confirmPlan() {
  if (!client || !canConfirm(state)) return;
  confirmBtn.disabled = true;
  try {
    const reply = await client.request({ type: "confirm" });
    if (reply.ok && reply.result) {
      const result = reply.result as Record<string, unknown>;
      if (Array.isArray(result.counts)) {
        state = {
          ...state,
          spectrum: { counts: result.counts as number[], liveTimeS: result.live_time_s as number },
        };
        drawSpectrum(state.spectrum!.counts);
      }
      goalCard.textContent = `finished: ${reply.phase}`;
    } else if (!reply.ok) {
      setBanner(`${reply.error ?? "execution failed"}: ${reply.detail ?? ""}`);
    }
  } catch {
    setBanner("confirm timed out — check link");
  }
  state = { ...state, preview: null };
  clearGhost();
  refreshControls();
}

viewport.addEventListener("click", (ev) => {
  if (state.connection !== "connected") return; // gesture input disabled offline
  const rect = renderer.domElement.getBoundingClientRect();
  const ray: GestureRay = clickToRay(
    ev.clientX - rect.left,
    ev.clientY - rect.top,
    rect.width,
    rect.height,
    cameraModel(),
  );
  state = { ...state, pendingGesture: ray };
  // show the ray's terrain intersection estimate until the server echoes
  gestureMarker.visible = true;
  if (state.snapshot && ray.direction[2] < 0) {
    const t = (state.snapshot.terrain.grid[0] - ray.origin[2]) / ray.direction[2];
    gestureMarker.position.set(
      ray.origin[0] + t * ray.direction[0],
      ray.origin[1] + t * ray.direction[1],
      ray.origin[2] + t * ray.direction[2],
    );
  }
});

commandInput.addEventListener("keydown", (ev) => {
  if (ev.key === "Enter") void submitCommand();
});
confirmBtn.addEventListener("click", () => void confirmPlan());
tokenBtn.addEventListener("click", () => void toggleToken());
abortBtn.addEventListener("click", () => {
  void client?.request({ type: "abort" }).then((r) => {
    if (!r.ok) setBanner(`${r.error}: ${r.detail ?? ""}`);
  });
});

// ---------------------------------------------------------------------------
// connection

function connect() {
  state = { ...state, connection: "connecting" };
  refreshControls();
  const ws = new WebSocket(WS_URL);
  ws.binaryType = "arraybuffer";
  ws.onopen = () => {
    ws.send(JSON.stringify({ operator: OPERATOR, name: OPERATOR, role: "scientist" }));
  };
  ws.onmessage = (ev) => {
    if (typeof ev.data === "string") {
      const hello = JSON.parse(ev.data);
      if (hello.ok) {
        client = new MissionClient({ send: (d) => ws.send(d), close: () => ws.close() }, {
          onState,
          onSnapshot,
        });
        state = { ...state, connection: "connected" };
        setBanner(null);
        setInterval(() => client?.pump(), 20);
      } else {
        setBanner(`connection refused: ${hello.error}`);
        ws.close();
      }
    } else {
      client?.receive(new Uint8Array(ev.data as ArrayBuffer));
      client?.pump();
    }
    refreshControls();
  };
  ws.onclose = () => {
    state = { ...state, connection: "disconnected" };
    client = null;
    refreshControls();
    setTimeout(connect, 2000);
  };
}

connect();
