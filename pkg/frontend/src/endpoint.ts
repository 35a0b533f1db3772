/**
 * Client-side reliable endpoint: same ARQ discipline as the ship
 * (cumulative acks, RTO with exponential backoff, strict-priority
 * scheduling under a sliding-window bandwidth budget), driven by an
 * explicit clock so tests are deterministic.
 */

import {
  CH_BULK,
  CH_CMD,
  CH_TELEMETRY,
  FLAG_ACK,
  Frame,
  WINDOW,
  decodeFrame,
  encodeFrame,
  makeFrame,
  seqAdd,
  seqLt,
} from "./frame.js";

export const RTO_MULT = 1.5;
export const RTO_BACKOFF = 2.0;
export const MAX_ATTEMPTS = 8;

interface Pending {
  frame: Frame;
  nextRetry: number;
  attempts: number;
  rto: number;
}

class ReliableSender {
  nextSeq = 0;
  pending = new Map<number, Pending>();
  order: number[] = [];
  failed: number[] = [];
  private baseRto: number;

  constructor(private channel: number, rttEstimate: number) {
    this.baseRto = RTO_MULT * Math.max(rttEstimate, 1e-3);
  }

  send(payload: Uint8Array, now: number): Frame {
    const frame = makeFrame({ channel: this.channel, seq: this.nextSeq, payload });
    this.pending.set(this.nextSeq, {
      frame,
      nextRetry: now + this.baseRto,
      attempts: 1,
      rto: this.baseRto,
    });
    this.order.push(this.nextSeq);
    this.nextSeq = seqAdd(this.nextSeq, 1);
    return frame;
  }

  /** Cumulative ack: everything before `ack` is delivered. */
  onAck(ack: number): void {
    this.order = this.order.filter((seq) => {
      if (seqLt(seq, ack)) {
        this.pending.delete(seq);
        return false;
      }
      return true;
    });
  }

  dueRetransmits(now: number): Frame[] {
    const out: Frame[] = [];
    for (const seq of [...this.order]) {
      const p = this.pending.get(seq);
      if (!p || now < p.nextRetry) continue;
      if (p.attempts >= MAX_ATTEMPTS) {
        this.pending.delete(seq);
        this.order.splice(this.order.indexOf(seq), 1);
        this.failed.push(seq);
        continue;
      }
      p.attempts += 1;
      p.rto *= RTO_BACKOFF;
      p.nextRetry = now + p.rto;
      out.push(p.frame);
    }
    return out;
  }

  get inFlight(): number {
    return this.pending.size;
  }
}

class ReliableReceiver {
  expectedSeq = 0;
  private outOfOrder = new Map<number, Uint8Array>();

  constructor(private channel: number) {}

  /** Payloads released to the application, in order; duplicates absorbed. */
  onFrame(frame: Frame): Uint8Array[] {
    const seq = frame.seq;
    if (seqLt(seq, this.expectedSeq)) return [];
    if (seq !== this.expectedSeq) {
      if (((seq - this.expectedSeq) & 0xffff) < WINDOW) {
        this.outOfOrder.set(seq, frame.payload);
      }
      return [];
    }
    const released = [frame.payload];
    this.expectedSeq = seqAdd(this.expectedSeq, 1);
    while (this.outOfOrder.has(this.expectedSeq)) {
      released.push(this.outOfOrder.get(this.expectedSeq)!);
      this.outOfOrder.delete(this.expectedSeq);
      this.expectedSeq = seqAdd(this.expectedSeq, 1);
    }
    return released;
  }

  ackFrame(): Frame {
    return makeFrame({ channel: this.channel, flags: FLAG_ACK, ack: this.expectedSeq });
  }
}

/** Strict priority CMD > TELEMETRY > BULK under bits/s over a 1 s window. */
class Scheduler {
  private cmd: Uint8Array[] = [];
  private emitted: Array<[number, number]> = [];

  constructor(private budgetBps: number, private windowS = 1.0) {}

  queueCmd(data: Uint8Array): void {
    this.cmd.push(data);
  }

  emit(now: number): Uint8Array[] {
    this.emitted = this.emitted.filter(([t]) => t > now - this.windowS);
    let used = this.emitted.reduce((acc, [, b]) => acc + b, 0);
    const cap = this.budgetBps * this.windowS;
    const out: Uint8Array[] = [];
    while (this.cmd.length > 0) {
      const bits = this.cmd[0].length * 8;
      if (used + bits > cap) break;
      used += bits;
      this.emitted.push([now, bits]);
      out.push(this.cmd.shift()!);
    }
    return out;
  }

  get backlog(): number {
    return this.cmd.length;
  }
}

/**
 * One side of the link. The console only originates CMD traffic;
 * TELEMETRY and BULK arrive downstream and are surfaced through the
 * delivered queues.
 */
export class Endpoint {
  private cmdTx: ReliableSender;
  private cmdRx = new ReliableReceiver(CH_CMD);
  private bulkRx = new ReliableReceiver(CH_BULK);
  private sched: Scheduler;
  private backlogQueue: Uint8Array[] = [];
  private acks: Uint8Array[] = [];
  deliveredCmd: Uint8Array[] = [];
  deliveredBulk: Uint8Array[] = [];
  deliveredTelemetry: Uint8Array[] = [];

  constructor(rttEstimate = 0.0, budgetBps = 1e9) {
    this.cmdTx = new ReliableSender(CH_CMD, rttEstimate);
    this.sched = new Scheduler(budgetBps);
  }

  sendCommand(payload: Uint8Array, now: number): void {
    this.backlogQueue.push(payload);
    this.drainBacklog(now);
  }

  private drainBacklog(now: number): void {
    while (this.backlogQueue.length > 0 && this.cmdTx.inFlight < WINDOW / 2) {
      const frame = this.cmdTx.send(this.backlogQueue.shift()!, now);
      this.sched.queueCmd(encodeFrame(frame));
    }
  }

  /** Feed one encoded frame received from the wire. */
  deliver(data: Uint8Array): void {
    const frame = decodeFrame(data);
    if (frame.flags & FLAG_ACK) {
      if (frame.channel === CH_CMD) this.cmdTx.onAck(frame.ack);
      return;
    }
    if (frame.channel === CH_CMD) {
      this.deliveredCmd.push(...this.cmdRx.onFrame(frame));
      this.acks.push(encodeFrame(this.cmdRx.ackFrame()));
    } else if (frame.channel === CH_BULK) {
      this.deliveredBulk.push(...this.bulkRx.onFrame(frame));
      this.acks.push(encodeFrame(this.bulkRx.ackFrame()));
    } else if (frame.channel === CH_TELEMETRY) {
      this.deliveredTelemetry.push(frame.payload);
    }
  }

  /** Encoded frames to transmit this tick. */
  poll(now: number): Uint8Array[] {
    this.drainBacklog(now);
    for (const frame of this.cmdTx.dueRetransmits(now)) {
      this.sched.queueCmd(encodeFrame(frame));
    }
    for (const ack of this.acks) {
      this.sched.queueCmd(ack);
    }
    this.acks = [];
    return this.sched.emit(now);
  }

  takeFailures(): number[] {
    const failed = this.cmdTx.failed;
    this.cmdTx.failed = [];
    return failed;
  }

  get inFlight(): number {
    return this.cmdTx.inFlight;
  }

  get idle(): boolean {
    return this.cmdTx.inFlight === 0 && this.backlogQueue.length === 0 && this.sched.backlog === 0;
  }
}
