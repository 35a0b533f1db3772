/**
 * Message layer on top of the reliable endpoint: JSON requests with mid
 * correlation and fragmentation, snapshot chunk reassembly, and state
 * telemetry parsing. Mirrors the ship-side conventions exactly.
 */

import { Endpoint } from "./endpoint.js";
import { SnapshotView, decodeSnapshot } from "./snapshot.js";

export const CMD_CHUNK = 700; // JSON payload slice carried per CMD frame
export const TAG_SNAPSHOT = 0x01;
export const TAG_STATE = 0x03;

export interface StateTelemetry {
  phase: string;
  clock: number;
  q: number[];
  ee: number[];
  contact: boolean;
  token: string | null;
  revision: number;
  hold?: { deviation_m: number; elapsed_s: number; required_s: number };
}

export interface Reply {
  type: string;
  re: string;
  mid: number;
  ok: boolean;
  [key: string]: unknown;
}

const encoder = new TextEncoder();
const decoder = new TextDecoder();

/** Fragment an outgoing JSON message the same way the ship does. */
export function encodeJsonPayloads(payload: Record<string, unknown>): Uint8Array[] {
  const data = JSON.stringify(payload);
  if (data.length <= CMD_CHUNK) {
    return [encoder.encode(data)];
  }
  const mid = (payload.mid as number) ?? 0;
  const out: Uint8Array[] = [];
  const n = Math.ceil(data.length / CMD_CHUNK);
  for (let i = 0; i < n; i++) {
    const env = JSON.stringify({
      frag: { mid, i, n },
      data: data.slice(i * CMD_CHUNK, (i + 1) * CMD_CHUNK),
    });
    out.push(encoder.encode(env));
  }
  return out;
}

/** Incremental consumer of the endpoint's delivered queues. */
export class MessageReader {
  private cmdIndex = 0;
  private bulkIndex = 0;
  private telemetryIndex = 0;
  private fragBuf = new Map<number, Map<number, string>>();
  private snapChunks = new Map<number, Uint8Array>();
  private snapTotal = 0;

  constructor(private ep: Endpoint) {}

  /** Complete JSON replies released since the last call. */
  readReplies(): Reply[] {
    const out: Reply[] = [];
    while (this.cmdIndex < this.ep.deliveredCmd.length) {
      const raw = this.ep.deliveredCmd[this.cmdIndex++];
      let msg: Record<string, unknown>;
      try {
        msg = JSON.parse(decoder.decode(raw));
      } catch {
        continue;
      }
      if (msg.frag !== undefined) {
        const whole = this.reassemble(msg as { frag: { mid: number; i: number; n: number }; data: string });
        if (whole === null) continue;
        msg = whole;
      }
      out.push(msg as unknown as Reply);
    }
    return out;
  }

  private reassemble(env: { frag: { mid: number; i: number; n: number }; data: string }) {
    const { mid, i, n } = env.frag;
    let buf = this.fragBuf.get(mid);
    if (!buf) {
      buf = new Map();
      this.fragBuf.set(mid, buf);
    }
    buf.set(i, env.data);
    if (buf.size < n) return null;
    let data = "";
    for (let k = 0; k < n; k++) data += buf.get(k)!;
    this.fragBuf.delete(mid);
    return JSON.parse(data) as Record<string, unknown>;
  }

  /** Newly completed scene snapshots, oldest first. */
  readSnapshots(): SnapshotView[] {
    const out: SnapshotView[] = [];
    while (this.bulkIndex < this.ep.deliveredBulk.length) {
      const payload = this.ep.deliveredBulk[this.bulkIndex++];
      if (payload.length < 3 || payload[0] !== TAG_SNAPSHOT) continue;
      const [, i, n] = payload;
      if (this.snapTotal !== n) {
        // a new transfer started; drop any half-assembled previous one
        this.snapChunks.clear();
        this.snapTotal = n;
      }
      this.snapChunks.set(i, payload.subarray(3));
      if (this.snapChunks.size === n) {
        const size = [...this.snapChunks.values()].reduce((acc, c) => acc + c.length, 0);
        const blob = new Uint8Array(size);
        let at = 0;
        for (let k = 0; k < n; k++) {
          const chunk = this.snapChunks.get(k)!;
          blob.set(chunk, at);
          at += chunk.length;
        }
        this.snapChunks.clear();
        this.snapTotal = 0;
        out.push(decodeSnapshot(blob));
      }
    }
    return out;
  }

  /** State telemetry payloads received since the last call. */
  readStates(): StateTelemetry[] {
    const out: StateTelemetry[] = [];
    while (this.telemetryIndex < this.ep.deliveredTelemetry.length) {
      const payload = this.ep.deliveredTelemetry[this.telemetryIndex++];
      if (payload.length < 1 || payload[0] !== TAG_STATE) continue;
      try {
        out.push(JSON.parse(decoder.decode(payload.subarray(1))) as StateTelemetry);
      } catch {
        continue;
      }
    }
    return out;
  }
}
