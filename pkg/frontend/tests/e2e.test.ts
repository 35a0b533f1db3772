/**
 * Drives a live mission service over a real WebSocket: the server
 * decodes every frame this client emits, so a single passing run proves
 * both codecs agree on the wire format end to end.
 */
import { afterAll, beforeAll, describe, expect, it } from "vitest";
import { spawn, ChildProcess } from "node:child_process";
import WebSocket from "ws";

import { MissionClient } from "../src/client.js";
import { decodeFrame } from "../src/frame.js";
import { StateTelemetry } from "../src/protocol.js";
import { SnapshotView } from "../src/snapshot.js";

const PORT = 18000 + (process.pid % 1000);

let server: ChildProcess;
let ws: WebSocket;
let client: MissionClient;
let pumpTimer: ReturnType<typeof setInterval>;
const snapshots: SnapshotView[] = [];
const states: StateTelemetry[] = [];

async function waitFor(cond: () => boolean, timeoutMs = 10000): Promise<void> {
  const start = Date.now();
  while (!cond()) {
    if (Date.now() - start > timeoutMs) throw new Error("timed out waiting for condition");
    await new Promise((r) => setTimeout(r, 20));
  }
}

beforeAll(async () => {
  server = spawn(
    "python3",
    ["-m", "benthic.cli", "serve", "--port", String(PORT), "--profile", "none"],
    { stdio: ["ignore", "pipe", "pipe"] },
  );
  // retry until the listener is up
  await waitFor(() => server.exitCode === null, 2000);
  for (let attempt = 0; ; attempt++) {
    try {
      ws = new WebSocket(`ws://127.0.0.1:${PORT}`);
      await new Promise<void>((resolve, reject) => {
        ws.once("open", () => resolve());
        ws.once("error", reject);
      });
      break;
    } catch (err) {
      if (attempt >= 40) throw err;
      await new Promise((r) => setTimeout(r, 250));
    }
  }
  ws.send(JSON.stringify({ operator: "e2e", name: "E2E", role: "commander" }));
  const ack = await new Promise<string>((resolve) => ws.once("message", (d) => resolve(d.toString())));
  expect(JSON.parse(ack).ok).toBe(true);

  client = new MissionClient(
    { send: (data) => ws.send(data), close: () => ws.close() },
    {
      onSnapshot: (s) => snapshots.push(s),
      onState: (s) => states.push(s),
    },
  );
  ws.on("message", (data: Buffer) => {
    client.receive(new Uint8Array(data));
    client.pump();
  });
  pumpTimer = setInterval(() => client.pump(), 20);
}, 30000);

afterAll(() => {
  clearInterval(pumpTimer);
  ws?.close();
  server?.kill();
});

describe("live mission service round trip", () => {
  it("receives the scene snapshot and state telemetry", async () => {
    await waitFor(() => snapshots.length > 0 && states.length > 0, 15000);
    expect(snapshots[0].objects.length).toBeGreaterThan(0);
    expect(states[states.length - 1].phase).toBeTruthy();
  }, 20000);

  it("acquires the command token", async () => {
    const reply = await client.request({ type: "acquire_token" });
    expect(reply.ok).toBe(true);
    expect(reply.holder).toBe("e2e");
  }, 20000);

  it("previews a typed motion command", async () => {
    const reply = await client.request({ type: "utterance", text: "move to (0.5, 0.1, -0.35)" });
    expect(reply.ok).toBe(true);
    expect(reply.phase).toBe("Previewed");
    const preview = reply.preview as { duration_s: number; ee_path: number[][] };
    expect(preview.duration_s).toBeGreaterThan(0);
    expect(preview.ee_path.length).toBeGreaterThan(1);
  }, 20000);

  it("surfaces parse diagnostics from the ship", async () => {
    const reply = await client.request({ type: "utterance", text: "flurble the core" });
    expect(reply.ok).toBe(false);
    expect(reply.error).toBe("ParseError");
    expect(reply.expected).toBeInstanceOf(Array);
  }, 20000);

  it("emitted only frames the ship-side codec accepts", () => {
    expect(client.sentFrames.length).toBeGreaterThan(0);
    for (const frame of client.sentFrames) {
      expect(() => decodeFrame(frame)).not.toThrow();
    }
  });
});
