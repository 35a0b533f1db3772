import { describe, expect, it } from "vitest";

import { Endpoint, MAX_ATTEMPTS } from "../src/endpoint.js";
import { CH_CMD, decodeFrame } from "../src/frame.js";

const enc = new TextEncoder();
const dec = new TextDecoder();

/**
 * Deterministic lossy wire between two endpoints: drop decisions come
 * from a scripted predicate, delivery is immediate.
 */
function tick(
  a: Endpoint,
  b: Endpoint,
  now: number,
  dropAB: (frameIndex: number) => boolean = () => false,
) {
  let index = 0;
  for (const data of a.poll(now)) {
    if (!dropAB(index++)) b.deliver(data);
  }
  for (const data of b.poll(now)) {
    a.deliver(data);
  }
}

describe("reliable command channel", () => {
  it("delivers exactly once and in order over a clean wire", () => {
    const a = new Endpoint(0.1);
    const b = new Endpoint(0.1);
    for (let i = 0; i < 20; i++) a.sendCommand(enc.encode(`msg-${i}`), 0);
    for (let t = 0; t < 10; t++) tick(a, b, t * 0.05);
    expect(b.deliveredCmd.map((p) => dec.decode(p))).toEqual(
      Array.from({ length: 20 }, (_, i) => `msg-${i}`),
    );
    expect(a.inFlight).toBe(0);
  });

  it("retransmits losses until the receiver has every payload", () => {
    const a = new Endpoint(0.1);
    const b = new Endpoint(0.1);
    for (let i = 0; i < 10; i++) a.sendCommand(enc.encode(`p${i}`), 0);
    // drop every third frame on the first pass, then run clean
    tick(a, b, 0, (i) => i % 3 === 0);
    for (let t = 1; t < 40; t++) tick(a, b, t * 0.2);
    expect(b.deliveredCmd.map((p) => dec.decode(p))).toEqual(
      Array.from({ length: 10 }, (_, i) => `p${i}`),
    );
  });

  it("absorbs duplicated frames", () => {
    const a = new Endpoint(0.1);
    const b = new Endpoint(0.1);
    a.sendCommand(enc.encode("only"), 0);
    const frames = a.poll(0);
    expect(frames.length).toBe(1);
    b.deliver(frames[0]);
    b.deliver(frames[0]);
    b.deliver(frames[0]);
    expect(b.deliveredCmd.length).toBe(1);
  });

  it("reports failures after the retry budget on a dead wire", () => {
    const a = new Endpoint(0.01);
    a.sendCommand(enc.encode("void"), 0);
    let now = 0;
    for (let i = 0; i < MAX_ATTEMPTS + 2; i++) {
      now += 1000;
      a.poll(now); // frames vanish
    }
    expect(a.takeFailures()).toEqual([0]);
    expect(a.inFlight).toBe(0);
  });

  it("emits only well-formed frames with cumulative acks back", () => {
    const a = new Endpoint(0.1);
    const b = new Endpoint(0.1);
    for (let i = 0; i < 5; i++) a.sendCommand(enc.encode(`x${i}`), 0);
    const wire: Uint8Array[] = [];
    for (let t = 0; t < 6; t++) {
      for (const data of a.poll(t * 0.1)) {
        wire.push(data);
        b.deliver(data);
      }
      for (const data of b.poll(t * 0.1)) {
        wire.push(data);
        a.deliver(data);
      }
    }
    for (const data of wire) {
      const frame = decodeFrame(data); // throws on any malformed frame
      expect(frame.channel).toBe(CH_CMD);
    }
    expect(a.inFlight).toBe(0);
  });

  it("respects a bandwidth budget across the sliding window", () => {
    const a = new Endpoint(0.1, 2000); // 2 kbit/s
    for (let i = 0; i < 30; i++) a.sendCommand(enc.encode(`chunk-${i}-${"y".repeat(40)}`), 0);
    const emissions: Array<[number, number]> = [];
    for (let t = 0; t < 2000; t++) {
      const now = t * 0.01;
      for (const data of a.poll(now)) emissions.push([now, data.length * 8]);
      if (a.idle) break;
    }
    expect(emissions.length).toBeGreaterThan(0);
    for (const [now] of emissions) {
      const windowBits = emissions
        .filter(([t]) => t > now - 1.0 && t <= now)
        .reduce((acc, [, bits]) => acc + bits, 0);
      expect(windowBits).toBeLessThanOrEqual(2000);
    }
  });
});
