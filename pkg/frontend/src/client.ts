/**
 * Mission client: one WebSocket, one reliable endpoint, request/reply
 * with mid correlation. Transport is injectable so tests can run the
 * client against an in-memory wire or a headless server.
 */

import { Endpoint } from "./endpoint.js";
import { MessageReader, Reply, StateTelemetry, encodeJsonPayloads } from "./protocol.js";
import { SnapshotView } from "./snapshot.js";

/** The subset of the WebSocket API the client needs. */
export interface Transport {
  send(data: Uint8Array): void;
  close(): void;
}

export interface ClientEvents {
  onReply?(reply: Reply): void;
  onState?(state: StateTelemetry): void;
  onSnapshot?(snapshot: SnapshotView): void;
  onTimeout?(mid: number): void;
}

interface PendingRequest {
  resolve(reply: Reply): void;
  reject(err: Error): void;
  deadline: number;
}

export class RequestTimeout extends Error {
  constructor(public mid: number) {
    super(`no reply to request ${mid}`);
  }
}

export class MissionClient {
  readonly ep = new Endpoint(1.5);
  private reader = new MessageReader(this.ep);
  private nextMid = 1;
  private pending = new Map<number, PendingRequest>();
  /** Every frame this client put on the wire, for traffic validation. */
  sentFrames: Uint8Array[] = [];

  constructor(
    private transport: Transport,
    private events: ClientEvents = {},
    private nowFn: () => number = () => Date.now() / 1000,
    private timeoutS = 30,
  ) {}

  get pendingCount(): number {
    return this.pending.size;
  }

  /** Feed one binary message received from the socket. */
  receive(data: Uint8Array): void {
    this.ep.deliver(data);
  }

  /** Send a request; the promise settles on the matching reply. */
  request(payload: Record<string, unknown>): Promise<Reply> {
    const mid = this.nextMid++;
    const body = { ...payload, mid };
    for (const chunk of encodeJsonPayloads(body)) {
      this.ep.sendCommand(chunk, this.nowFn());
    }
    return new Promise<Reply>((resolve, reject) => {
      this.pending.set(mid, { resolve, reject, deadline: this.nowFn() + this.timeoutS });
    });
  }

  /**
   * Drive the endpoint: flush outgoing frames to the transport, route
   * delivered messages, and expire timed-out requests. Call this on a
   * short interval (and after each received message).
   */
  pump(): void {
    const now = this.nowFn();
    for (const frame of this.ep.poll(now)) {
      this.sentFrames.push(frame);
      this.transport.send(frame);
    }
    for (const reply of this.reader.readReplies()) {
      const waiter = this.pending.get(reply.mid);
      if (waiter) {
        this.pending.delete(reply.mid);
        waiter.resolve(reply);
      }
      this.events.onReply?.(reply);
    }
    for (const snapshot of this.reader.readSnapshots()) {
      this.events.onSnapshot?.(snapshot);
    }
    for (const state of this.reader.readStates()) {
      this.events.onState?.(state);
    }
    for (const [mid, waiter] of [...this.pending]) {
      if (now >= waiter.deadline) {
        this.pending.delete(mid);
        waiter.reject(new RequestTimeout(mid));
        this.events.onTimeout?.(mid);
      }
    }
  }

  close(): void {
    this.transport.close();
  }
}
