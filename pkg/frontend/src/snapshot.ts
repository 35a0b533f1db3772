/**
 * Scene snapshot decoding (server-authoritative state).
 *
 * Positions arrive as int32 millimeters, orientations as
 * smallest-three quantized quaternions (largest-component index byte +
 * three 12-bit values), elevations as big-endian float32.
 */

export const SHAPE_SPHERE = 0;
export const SHAPE_BOX = 1;
export const SHAPE_CYLINDER = 2;

const SHAPE_DIMS: Record<number, number> = {
  [SHAPE_SPHERE]: 1,
  [SHAPE_BOX]: 3,
  [SHAPE_CYLINDER]: 2,
};

const POSITION_STEP = 1e-3;
const QUAT_BITS = 12;
const SQRT2_INV = 1 / Math.sqrt(2);

export class WireError extends Error {}

export interface SceneShape {
  kind: number;
  dims: number[];
}

export interface SceneObjectView {
  id: number;
  label: string;
  position: [number, number, number];
  orientation: [number, number, number, number]; // w, x, y, z
  shape: SceneShape;
  confidence: number;
}

export interface TerrainView {
  origin: [number, number];
  cellSize: number;
  rows: number;
  cols: number;
  grid: Float32Array; // row-major
}

export interface SnapshotView {
  revision: number;
  terrain: TerrainView;
  objects: SceneObjectView[];
}

export function dequantizeQuat(
  idx: number,
  enc: [number, number, number],
): [number, number, number, number] {
  const scale = (1 << QUAT_BITS) - 1;
  const rest = enc.map((e) => (e / scale) * (2 * SQRT2_INV) - SQRT2_INV);
  const sq = 1 - rest.reduce((acc, v) => acc + v * v, 0);
  const big = Math.sqrt(Math.max(sq, 0));
  const out: number[] = [];
  let k = 0;
  for (let i = 0; i < 4; i++) {
    out.push(i === idx ? big : rest[k++]);
  }
  return out as [number, number, number, number];
}

class Reader {
  private view: DataView;
  private pos = 0;

  constructor(data: Uint8Array) {
    this.view = new DataView(data.buffer, data.byteOffset, data.byteLength);
  }

  private need(n: number): number {
    if (this.pos + n > this.view.byteLength) {
      throw new WireError("truncated scene message");
    }
    const at = this.pos;
    this.pos += n;
    return at;
  }

  u8(): number {
    return this.view.getUint8(this.need(1));
  }
  u16(): number {
    return this.view.getUint16(this.need(2));
  }
  u32(): number {
    return this.view.getUint32(this.need(4));
  }
  i32(): number {
    return this.view.getInt32(this.need(4));
  }
  f32(): number {
    return this.view.getFloat32(this.need(4));
  }
  f64(): number {
    return this.view.getFloat64(this.need(8));
  }
  utf8(n: number): string {
    const at = this.need(n);
    return new TextDecoder().decode(
      new Uint8Array(this.view.buffer, this.view.byteOffset + at, n),
    );
  }
}

function readObject(r: Reader): SceneObjectView {
  const id = r.u32();
  const label = r.utf8(r.u8());
  const kind = r.u8();
  const nDims = SHAPE_DIMS[kind];
  if (nDims === undefined) throw new WireError(`bad shape kind ${kind}`);
  const dims: number[] = [];
  for (let i = 0; i < nDims; i++) dims.push(r.f32());
  const position: [number, number, number] = [
    r.i32() * POSITION_STEP,
    r.i32() * POSITION_STEP,
    r.i32() * POSITION_STEP,
  ];
  const idx = r.u8();
  const enc: [number, number, number] = [r.u16(), r.u16(), r.u16()];
  const confidence = r.u8() / 255;
  return { id, label, position, orientation: dequantizeQuat(idx, enc), shape: { kind, dims }, confidence };
}

export function decodeSnapshot(data: Uint8Array): SnapshotView {
  const r = new Reader(data);
  const revision = r.u32();
  const origin: [number, number] = [r.f64(), r.f64()];
  const cellSize = r.f64();
  const rows = r.u16();
  const cols = r.u16();
  const grid = new Float32Array(rows * cols);
  for (let i = 0; i < grid.length; i++) grid[i] = r.f32();
  const nObjects = r.u16();
  const objects: SceneObjectView[] = [];
  for (let i = 0; i < nObjects; i++) objects.push(readObject(r));
  return { revision, terrain: { origin, cellSize, rows, cols, grid }, objects };
}

/** Bilinear terrain elevation lookup, matching the server's heightfield
 * (grid is rows along y, cols along x). */
export function elevationAt(terrain: TerrainView, x: number, y: number): number {
  const fx = (x - terrain.origin[0]) / terrain.cellSize;
  const fy = (y - terrain.origin[1]) / terrain.cellSize;
  const ix = Math.min(Math.max(Math.floor(fx), 0), terrain.cols - 2);
  const iy = Math.min(Math.max(Math.floor(fy), 0), terrain.rows - 2);
  const u = fx - ix;
  const v = fy - iy;
  const g = (row: number, col: number) => terrain.grid[row * terrain.cols + col];
  return (
    g(iy, ix) * (1 - u) * (1 - v) +
    g(iy, ix + 1) * u * (1 - v) +
    g(iy + 1, ix) * (1 - u) * v +
    g(iy + 1, ix + 1) * u * v
  );
}
