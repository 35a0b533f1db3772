/**
 * Wire frame codec, byte-compatible with the ship-side protocol.
 *
 * Layout (big-endian):
 *   magic 0xA5 (1) | version (1) | channel (1) | flags (1)
 *   seq (2) | ack (2) | len (2) | payload (len) | crc32 (4)
 */

export const FRAME_MAGIC = 0xa5;
export const PROTOCOL_VERSION = 1;

export const CH_CMD = 0;
export const CH_TELEMETRY = 1;
export const CH_BULK = 2;

export const FLAG_ACK = 0x01;
export const FLAG_FIN = 0x02;

export const HEADER_LEN = 10;
export const CRC_LEN = 4;
export const MAX_FRAME = 1024;
export const MAX_PAYLOAD = MAX_FRAME - HEADER_LEN - CRC_LEN;

export const SEQ_MOD = 1 << 16;
export const WINDOW = 256;

export class FrameError extends Error {}
export class BadMagic extends FrameError {}
export class BadCrc extends FrameError {}
export class TruncatedFrame extends FrameError {}

export interface Frame {
  channel: number;
  seq: number;
  ack: number;
  flags: number;
  payload: Uint8Array;
  version: number;
}

export function makeFrame(partial: Partial<Frame> & { channel: number }): Frame {
  return {
    seq: 0,
    ack: 0,
    flags: 0,
    payload: new Uint8Array(0),
    version: PROTOCOL_VERSION,
    ...partial,
  };
}

// CRC-32 (IEEE 802.3, the zlib polynomial), table-driven.
const CRC_TABLE = (() => {
  const table = new Uint32Array(256);
  for (let n = 0; n < 256; n++) {
    let c = n;
    for (let k = 0; k < 8; k++) {
      c = c & 1 ? 0xedb88320 ^ (c >>> 1) : c >>> 1;
    }
    table[n] = c >>> 0;
  }
  return table;
})();

export function crc32(data: Uint8Array): number {
  let c = 0xffffffff;
  for (let i = 0; i < data.length; i++) {
    c = CRC_TABLE[(c ^ data[i]) & 0xff] ^ (c >>> 8);
  }
  return (c ^ 0xffffffff) >>> 0;
}

export function encodeFrame(frame: Frame): Uint8Array {
  if (frame.payload.length > MAX_PAYLOAD) {
    throw new FrameError(`payload exceeds ${MAX_PAYLOAD} bytes`);
  }
  if (frame.seq < 0 || frame.seq >= SEQ_MOD || frame.ack < 0 || frame.ack >= SEQ_MOD) {
    throw new FrameError("seq/ack out of 16-bit range");
  }
  const total = HEADER_LEN + frame.payload.length + CRC_LEN;
  const out = new Uint8Array(total);
  const view = new DataView(out.buffer);
  view.setUint8(0, FRAME_MAGIC);
  view.setUint8(1, frame.version);
  view.setUint8(2, frame.channel);
  view.setUint8(3, frame.flags);
  view.setUint16(4, frame.seq);
  view.setUint16(6, frame.ack);
  view.setUint16(8, frame.payload.length);
  out.set(frame.payload, HEADER_LEN);
  view.setUint32(total - CRC_LEN, crc32(out.subarray(0, total - CRC_LEN)));
  return out;
}

export function decodeFrame(data: Uint8Array): Frame {
  if (data.length < HEADER_LEN + CRC_LEN) {
    throw new TruncatedFrame(`${data.length} bytes is below the minimum frame size`);
  }
  const view = new DataView(data.buffer, data.byteOffset, data.byteLength);
  const magic = view.getUint8(0);
  if (magic !== FRAME_MAGIC) {
    throw new BadMagic(`bad magic byte 0x${magic.toString(16).padStart(2, "0").toUpperCase()}`);
  }
  const length = view.getUint16(8);
  const total = HEADER_LEN + length + CRC_LEN;
  if (data.length < total) {
    throw new TruncatedFrame(`need ${total} bytes, have ${data.length}`);
  }
  const crc = view.getUint32(HEADER_LEN + length);
  if (crc32(data.subarray(0, HEADER_LEN + length)) !== crc) {
    throw new BadCrc("crc mismatch");
  }
  return {
    channel: view.getUint8(2),
    seq: view.getUint16(4),
    ack: view.getUint16(6),
    flags: view.getUint8(3),
    payload: data.slice(HEADER_LEN, HEADER_LEN + length),
    version: view.getUint8(1),
  };
}

/** 16-bit wrap-around sequence comparison: is a strictly before b? */
export function seqLt(a: number, b: number): boolean {
  return a !== b && ((b - a) & 0xffff) < 0x8000;
}

export function seqAdd(a: number, n: number): number {
  return (a + n) % SEQ_MOD;
}
