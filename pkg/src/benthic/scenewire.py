"""Binary layout for scene snapshots and deltas.

All integers big-endian. Poses are quantized: positions as int32
millimeters, orientations as smallest-three quaternions (index byte +
three 12-bit values stored in uint16s). Elevations are float32.

Delta:
    u32 base_revision | u32 new_revision
    u16 n_changed     | n_changed * object record
    u16 n_removed     | n_removed * u32 id
    u16 n_patches     | n_patches * patch record

Object record:
    u32 id | u8 label_len | label utf-8 | u8 shape_kind | dims f32...
    i32 x_mm | i32 y_mm | i32 z_mm | u8 quat_index | 3 * u16 quat
    u8 confidence (0..255)

Patch record:
    u16 ix0 | u16 iy0 | u16 cols | u16 rows | rows*cols * f32

Snapshot:
    u32 revision | f64 origin_x | f64 origin_y | f64 cell_size
    u16 rows | u16 cols | rows*cols * f32
    u16 n_objects | n_objects * object record
"""

from __future__ import annotations

import struct
from dataclasses import replace
from io import BytesIO

import numpy as np

from .kinematics import Pose
from .scene import (
    Heightfield,
    SceneDelta,
    SceneGraph,
    SceneObject,
    Shape,
    TerrainPatch,
    _SHAPE_DIMS,
    dequantize_position,
    dequantize_quat,
    quantize_position,
    quantize_quat,
)


class WireError(ValueError):
    pass


def _write_object(buf: BytesIO, obj: SceneObject):
    label = obj.label.encode("utf-8")
    if len(label) > 255:
        raise WireError("label too long")
    buf.write(struct.pack(">IB", obj.id, len(label)))
    buf.write(label)
    buf.write(struct.pack(">B", obj.shape.kind))
    for d in obj.shape.dims:
        buf.write(struct.pack(">f", d))
    x, y, z = quantize_position(obj.pose.position)
    idx, enc = quantize_quat(obj.pose.orientation)
    buf.write(struct.pack(">iiiB3H", x, y, z, idx, *enc))
    buf.write(struct.pack(">B", int(round(obj.confidence * 255))))


def _read_exact(buf: BytesIO, n: int) -> bytes:
    data = buf.read(n)
    if len(data) != n:
        raise WireError("truncated scene message")
    return data


def _read_object(buf: BytesIO) -> SceneObject:
    oid, label_len = struct.unpack(">IB", _read_exact(buf, 5))
    label = _read_exact(buf, label_len).decode("utf-8")
    (kind,) = struct.unpack(">B", _read_exact(buf, 1))
    if kind not in _SHAPE_DIMS:
        raise WireError(f"bad shape kind {kind}")
    dims = struct.unpack(f">{_SHAPE_DIMS[kind]}f", _read_exact(buf, 4 * _SHAPE_DIMS[kind]))
    x, y, z, idx, e0, e1, e2 = struct.unpack(">iiiB3H", _read_exact(buf, 19))
    (conf,) = struct.unpack(">B", _read_exact(buf, 1))
    return SceneObject(
        id=oid,
        label=label,
        pose=Pose(dequantize_position((x, y, z)), dequantize_quat(idx, (e0, e1, e2))),
        shape=Shape(kind, dims),
        confidence=conf / 255.0,
    )


def _write_patch(buf: BytesIO, patch: TerrainPatch):
    rows, cols = patch.values.shape
    buf.write(struct.pack(">4H", patch.ix0, patch.iy0, cols, rows))
    buf.write(np.asarray(patch.values, dtype=">f4").tobytes())


def _read_patch(buf: BytesIO) -> TerrainPatch:
    ix0, iy0, cols, rows = struct.unpack(">4H", _read_exact(buf, 8))
    vals = np.frombuffer(_read_exact(buf, 4 * rows * cols), dtype=">f4").reshape(rows, cols)
    return TerrainPatch(ix0, iy0, vals.astype(float))


def encode_delta_bytes(delta: SceneDelta) -> bytes:
    buf = BytesIO()
    buf.write(struct.pack(">II", delta.base_revision, delta.new_revision))
    buf.write(struct.pack(">H", len(delta.changed)))
    for obj in delta.changed:
        _write_object(buf, obj)
    buf.write(struct.pack(">H", len(delta.removed)))
    for oid in delta.removed:
        buf.write(struct.pack(">I", oid))
    buf.write(struct.pack(">H", len(delta.terrain_patches)))
    for patch in delta.terrain_patches:
        _write_patch(buf, patch)
    return buf.getvalue()


def decode_delta_bytes(data: bytes) -> SceneDelta:
    buf = BytesIO(data)
    base, new = struct.unpack(">II", _read_exact(buf, 8))
    (n,) = struct.unpack(">H", _read_exact(buf, 2))
    changed = tuple(_read_object(buf) for _ in range(n))
    (n,) = struct.unpack(">H", _read_exact(buf, 2))
    removed = tuple(struct.unpack(">I", _read_exact(buf, 4))[0] for _ in range(n))
    (n,) = struct.unpack(">H", _read_exact(buf, 2))
    patches = tuple(_read_patch(buf) for _ in range(n))
    return SceneDelta(base, new, changed, removed, patches)


def encode_snapshot_bytes(graph: SceneGraph) -> bytes:
    buf = BytesIO()
    t = graph.terrain
    buf.write(struct.pack(">IdddHH", graph.revision, t.origin[0], t.origin[1], t.cell_size, t.rows, t.cols))
    buf.write(np.asarray(t.grid, dtype=">f4").tobytes())
    buf.write(struct.pack(">H", len(graph.objects)))
    for obj in graph.objects:
        _write_object(buf, obj)
    return buf.getvalue()


def decode_snapshot_bytes(data: bytes) -> SceneGraph:
    buf = BytesIO(data)
    rev, ox, oy, cell, rows, cols = struct.unpack(">IdddHH", _read_exact(buf, 32))
    grid = np.frombuffer(_read_exact(buf, 4 * rows * cols), dtype=">f4").reshape(rows, cols)
    (n,) = struct.unpack(">H", _read_exact(buf, 2))
    objects = tuple(_read_object(buf) for _ in range(n))
    terrain = Heightfield((ox, oy), cell, grid.astype(float))
    return SceneGraph(terrain=terrain, objects=objects, revision=rev)
