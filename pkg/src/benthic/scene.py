"""Compact labeled 3D workspace representation.

A SceneGraph is an immutable snapshot of labeled primitive shapes over a
heightfield terrain. Mutations return a new graph with revision + 1.
Gesture rays are resolved against the graph with raycast(). Deltas
between revisions serialize to a compact binary layout (see scenewire)
so telemetry stays inside the link budget.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .kinematics import Pose
from .transforms import quat_conjugate, quat_rotate

POSITION_STEP = 1e-3  # wire quantization, meters
SQRT2_INV = 1.0 / math.sqrt(2.0)
QUAT_BITS = 12

SHAPE_SPHERE = 0
SHAPE_BOX = 1
SHAPE_CYLINDER = 2

_SHAPE_NAMES = {"sphere": SHAPE_SPHERE, "box": SHAPE_BOX, "cylinder": SHAPE_CYLINDER}
_SHAPE_DIMS = {SHAPE_SPHERE: 1, SHAPE_BOX: 3, SHAPE_CYLINDER: 2}


class InvalidShape(ValueError):
    pass


class RevisionMismatch(ValueError):
    pass


class OutOfBounds(ValueError):
    pass


@dataclass(frozen=True)
class Shape:
    kind: int  # SHAPE_*
    dims: tuple  # sphere: (r,); box: (dx,dy,dz); cylinder: (r,h)

    def __post_init__(self):
        if self.kind not in _SHAPE_DIMS:
            raise InvalidShape(f"unknown shape kind {self.kind}")
        if len(self.dims) != _SHAPE_DIMS[self.kind]:
            raise InvalidShape("wrong number of shape dimensions")
        if any(d <= 0 for d in self.dims):
            raise InvalidShape("shape dimensions must be positive")
        object.__setattr__(self, "dims", tuple(float(d) for d in self.dims))


def sphere(r) -> Shape:
    return Shape(SHAPE_SPHERE, (r,))


def box(dx, dy, dz) -> Shape:
    return Shape(SHAPE_BOX, (dx, dy, dz))


def cylinder(r, h) -> Shape:
    return Shape(SHAPE_CYLINDER, (r, h))


@dataclass(frozen=True)
class SceneObject:
    id: int
    label: str
    pose: Pose
    shape: Shape
    confidence: float = 1.0

    def __post_init__(self):
        if not (0.0 <= self.confidence <= 1.0):
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


@dataclass(frozen=True)
class Heightfield:
    origin: tuple  # (x, y) of grid[0][0], meters
    cell_size: float
    grid: np.ndarray  # rows (y) x cols (x), elevation in meters

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=float)
        if g.ndim != 2 or g.size == 0:
            raise ValueError("terrain grid must be a non-empty 2D array")
        if not np.all(np.isfinite(g)):
            raise ValueError("terrain elevations must be finite")
        if self.cell_size <= 0:
            raise ValueError("cell_size must be positive")
        g.setflags(write=False)
        object.__setattr__(self, "grid", g)
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @property
    def rows(self) -> int:
        return self.grid.shape[0]

    @property
    def cols(self) -> int:
        return self.grid.shape[1]

    def bounds(self):
        x0, y0 = self.origin
        return (x0, y0, x0 + (self.cols - 1) * self.cell_size, y0 + (self.rows - 1) * self.cell_size)

    def contains(self, x: float, y: float) -> bool:
        x0, y0, x1, y1 = self.bounds()
        return x0 <= x <= x1 and y0 <= y <= y1

    def _cell(self, x: float, y: float):
        x0, y0 = self.origin
        fx = (x - x0) / self.cell_size
        fy = (y - y0) / self.cell_size
        ix = min(int(fx), self.cols - 2)
        iy = min(int(fy), self.rows - 2)
        ix = max(ix, 0)
        iy = max(iy, 0)
        return ix, iy, fx - ix, fy - iy

    def height(self, x: float, y: float) -> float:
        """Bilinear elevation at (x, y)."""
        if not self.contains(x, y):
            raise OutOfBounds(f"({x}, {y}) outside terrain")
        ix, iy, u, v = self._cell(x, y)
        g = self.grid
        z00, z10 = g[iy, ix], g[iy, ix + 1]
        z01, z11 = g[iy + 1, ix], g[iy + 1, ix + 1]
        return float(z00 * (1 - u) * (1 - v) + z10 * u * (1 - v) + z01 * (1 - u) * v + z11 * u * v)

    def with_patch(self, ix0: int, iy0: int, values) -> "Heightfield":
        values = np.asarray(values, dtype=float)
        g = self.grid.copy()
        g[iy0 : iy0 + values.shape[0], ix0 : ix0 + values.shape[1]] = values
        return Heightfield(self.origin, self.cell_size, g)


def surface_normal(terrain: Heightfield, x: float, y: float) -> np.ndarray:
    """Unit normal of the bilinear terrain patch at (x, y), pointing +z."""
    if not terrain.contains(x, y):
        raise OutOfBounds(f"({x}, {y}) outside terrain")
    ix, iy, u, v = terrain._cell(x, y)
    g = terrain.grid
    z00, z10 = g[iy, ix], g[iy, ix + 1]
    z01, z11 = g[iy + 1, ix], g[iy + 1, ix + 1]
    dzdx = ((z10 - z00) * (1 - v) + (z11 - z01) * v) / terrain.cell_size
    dzdy = ((z01 - z00) * (1 - u) + (z11 - z10) * u) / terrain.cell_size
    n = np.array([-dzdx, -dzdy, 1.0])
    return n / np.linalg.norm(n)


@dataclass(frozen=True)
class SceneGraph:
    terrain: Heightfield
    objects: tuple = ()
    revision: int = 0

    def __post_init__(self):
        ids = [o.id for o in self.objects]
        if len(ids) != len(set(ids)):
            raise ValueError("duplicate object ids in scene")
        object.__setattr__(self, "objects", tuple(sorted(self.objects, key=lambda o: o.id)))

    def get(self, object_id: int):
        for o in self.objects:
            if o.id == object_id:
                return o
        return None

    def by_label(self, label: str) -> list:
        needle = label.casefold()
        return [o for o in self.objects if o.label.casefold() == needle]


def upsert_object(graph: SceneGraph, obj: SceneObject) -> SceneGraph:
    rest = tuple(o for o in graph.objects if o.id != obj.id)
    return replace(graph, objects=rest + (obj,), revision=graph.revision + 1)


def remove_object(graph: SceneGraph, object_id: int) -> SceneGraph:
    rest = tuple(o for o in graph.objects if o.id != object_id)
    if len(rest) == len(graph.objects):
        raise KeyError(f"no object with id {object_id}")
    return replace(graph, objects=rest, revision=graph.revision + 1)


def patch_terrain(graph: SceneGraph, ix0: int, iy0: int, values) -> SceneGraph:
    return replace(graph, terrain=graph.terrain.with_patch(ix0, iy0, values), revision=graph.revision + 1)


# ---------------------------------------------------------------------------
# raycasting

TERRAIN_ID = -1


@dataclass(frozen=True)
class RayHit:
    point: np.ndarray
    distance: float
    object_id: int  # TERRAIN_ID for terrain


def _ray_sphere(origin, direction, center, r):
    oc = origin - center
    b = float(np.dot(oc, direction))
    c = float(np.dot(oc, oc)) - r * r
    disc = b * b - c
    if disc < 0:
        return None
    sq = math.sqrt(disc)
    t = -b - sq
    if t < 0:
        t = -b + sq
    return t if t >= 0 else None


def _ray_box(origin, direction, half):
    """Slab test in the box's local frame; half = half extents."""
    tmin, tmax = -math.inf, math.inf
    for i in range(3):
        if abs(direction[i]) < 1e-12:
            if abs(origin[i]) > half[i]:
                return None
            continue
        t1 = (-half[i] - origin[i]) / direction[i]
        t2 = (half[i] - origin[i]) / direction[i]
        if t1 > t2:
            t1, t2 = t2, t1
        tmin = max(tmin, t1)
        tmax = min(tmax, t2)
        if tmin > tmax:
            return None
    t = tmin if tmin >= 0 else tmax
    return t if t >= 0 else None


def _ray_cylinder(origin, direction, r, h):
    """Finite cylinder in local frame: axis +z, centered, radius r, height h."""
    hz = h / 2.0
    best = None
    ox, oy, oz = origin
    dx, dy, dz = direction
    a = dx * dx + dy * dy
    if a > 1e-12:
        b = ox * dx + oy * dy
        c = ox * ox + oy * oy - r * r
        disc = b * b - a * c
        if disc >= 0:
            sq = math.sqrt(disc)
            for t in ((-b - sq) / a, (-b + sq) / a):
                if t >= 0 and abs(oz + t * dz) <= hz:
                    best = t if best is None else min(best, t)
                    break
    if abs(dz) > 1e-12:
        for zcap in (-hz, hz):
            t = (zcap - oz) / dz
            if t >= 0:
                px, py = ox + t * dx, oy + t * dy
                if px * px + py * py <= r * r:
                    best = t if best is None else min(best, t)
    return best


def ray_shape_distance(origin, direction, obj: SceneObject):
    """Ray-parameter t of the nearest intersection with obj, or None."""
    # into the object's local frame
    inv_q = quat_conjugate(obj.pose.orientation)
    lo = quat_rotate(inv_q, np.asarray(origin, dtype=float) - obj.pose.position)
    ld = quat_rotate(inv_q, np.asarray(direction, dtype=float))
    if obj.shape.kind == SHAPE_SPHERE:
        return _ray_sphere(lo, ld, np.zeros(3), obj.shape.dims[0])
    if obj.shape.kind == SHAPE_BOX:
        return _ray_box(lo, ld, [d / 2.0 for d in obj.shape.dims])
    return _ray_cylinder(lo, ld, obj.shape.dims[0], obj.shape.dims[1])


def _ray_terrain(origin, direction, terrain: Heightfield, t_max: float = 100.0):
    """March the ray until it crosses the surface, then bisect."""
    step = terrain.cell_size / 4.0

    def above(t):
        p = origin + t * direction
        if not terrain.contains(p[0], p[1]):
            return None
        return p[2] - terrain.height(p[0], p[1])

    t_prev, f_prev = None, None
    t = 0.0
    while t <= t_max:
        f = above(t)
        if f is not None:
            if f_prev is not None and (f_prev > 0) != (f > 0):
                lo, hi = t_prev, t
                for _ in range(60):
                    mid = 0.5 * (lo + hi)
                    fm = above(mid)
                    if fm is None:
                        break
                    if (fm > 0) == (f_prev > 0):
                        lo = mid
                    else:
                        hi = mid
                return 0.5 * (lo + hi)
            if f == 0.0:
                return t
            t_prev, f_prev = t, f
        else:
            t_prev, f_prev = None, None
        t += step
    return None


def raycast(graph: SceneGraph, origin, direction, t_max: float = 100.0):
    """Nearest intersection of the ray with any object shape or the terrain."""
    origin = np.asarray(origin, dtype=float)
    direction = np.asarray(direction, dtype=float)
    if abs(np.linalg.norm(direction) - 1.0) > 1e-6:
        raise ValueError("ray direction must be unit-norm")
    best_t = None
    best_id = None
    for obj in graph.objects:
        t = ray_shape_distance(origin, direction, obj)
        if t is not None and t <= t_max and (best_t is None or t < best_t):
            best_t, best_id = t, obj.id
    t = _ray_terrain(origin, direction, graph.terrain, t_max)
    if t is not None and (best_t is None or t < best_t):
        best_t, best_id = t, TERRAIN_ID
    if best_t is None:
        return None
    return RayHit(point=origin + best_t * direction, distance=float(best_t), object_id=best_id)


# ---------------------------------------------------------------------------
# pose quantization (shared with the wire codec)


def quantize_position(p):
    return tuple(int(round(v / POSITION_STEP)) for v in p)


def dequantize_position(ip):
    return np.array([v * POSITION_STEP for v in ip])


def quantize_quat(q):
    """Smallest-three encoding: (largest-component index, three 12-bit values)."""
    q = np.asarray(q, dtype=float)
    idx = int(np.argmax(np.abs(q)))
    if q[idx] < 0:
        q = -q
    rest = [q[i] for i in range(4) if i != idx]
    scale = (1 << QUAT_BITS) - 1
    enc = tuple(int(round((v + SQRT2_INV) / (2 * SQRT2_INV) * scale)) for v in rest)
    enc = tuple(min(max(e, 0), scale) for e in enc)
    return idx, enc


def dequantize_quat(idx, enc):
    scale = (1 << QUAT_BITS) - 1
    rest = [e / scale * (2 * SQRT2_INV) - SQRT2_INV for e in enc]
    sq = 1.0 - sum(v * v for v in rest)
    big = math.sqrt(max(sq, 0.0))
    out = []
    k = 0
    for i in range(4):
        if i == idx:
            out.append(big)
        else:
            out.append(rest[k])
            k += 1
    q = np.array(out)
    return q / np.linalg.norm(q)


def quantize_pose(pose: Pose) -> Pose:
    idx, enc = quantize_quat(pose.orientation)
    return Pose(dequantize_position(quantize_position(pose.position)), dequantize_quat(idx, enc))


# ---------------------------------------------------------------------------
# deltas


@dataclass(frozen=True)
class TerrainPatch:
    ix0: int
    iy0: int
    values: np.ndarray  # rows x cols block

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class SceneDelta:
    base_revision: int
    new_revision: int
    changed: tuple = ()  # SceneObjects, poses already quantized
    removed: tuple = ()  # object ids
    terrain_patches: tuple = ()

    @property
    def empty(self) -> bool:
        return not (self.changed or self.removed or self.terrain_patches)


def _wire_key(obj: SceneObject):
    idx, enc = quantize_quat(obj.pose.orientation)
    return (
        obj.label,
        obj.shape.kind,
        obj.shape.dims,
        quantize_position(obj.pose.position),
        idx,
        enc,
        int(round(obj.confidence * 255)),
    )


def encode_delta(old: SceneGraph, new: SceneGraph) -> SceneDelta:
    if old.revision > new.revision:
        raise RevisionMismatch("old revision exceeds new revision")
    old_by_id = {o.id: o for o in old.objects}
    changed = []
    for obj in new.objects:
        prev = old_by_id.get(obj.id)
        if prev is None or _wire_key(prev) != _wire_key(obj):
            changed.append(replace(obj, pose=quantize_pose(obj.pose)))
    removed = tuple(oid for oid in old_by_id if new.get(oid) is None)

    patches = []
    if old.terrain.grid.shape != new.terrain.grid.shape or old.terrain.origin != new.terrain.origin:
        patches.append(TerrainPatch(0, 0, new.terrain.grid))
    else:
        diff = old.terrain.grid != new.terrain.grid
        if diff.any():
            ys, xs = np.nonzero(diff)
            iy0, iy1 = int(ys.min()), int(ys.max())
            ix0, ix1 = int(xs.min()), int(xs.max())
            patches.append(TerrainPatch(ix0, iy0, new.terrain.grid[iy0 : iy1 + 1, ix0 : ix1 + 1]))

    return SceneDelta(
        base_revision=old.revision,
        new_revision=new.revision,
        changed=tuple(changed),
        removed=removed,
        terrain_patches=tuple(patches),
    )


def apply_delta(graph: SceneGraph, delta: SceneDelta) -> SceneGraph:
    if graph.revision != delta.base_revision:
        raise RevisionMismatch(
            f"delta expects base revision {delta.base_revision}, graph is at {graph.revision}"
        )
    objs = {o.id: o for o in graph.objects}
    for oid in delta.removed:
        objs.pop(oid, None)
    for obj in delta.changed:
        objs[obj.id] = obj
    terrain = graph.terrain
    for patch in delta.terrain_patches:
        terrain = terrain.with_patch(patch.ix0, patch.iy0, patch.values)
    return SceneGraph(terrain=terrain, objects=tuple(objs.values()), revision=delta.new_revision)


# ---------------------------------------------------------------------------
# fixtures


def shape_from_dict(d: dict) -> Shape:
    kind = _SHAPE_NAMES[d["kind"]]
    return Shape(kind, tuple(d["dims"]))


def object_from_dict(d: dict) -> SceneObject:
    return SceneObject(
        id=int(d["id"]),
        label=d["label"],
        pose=Pose(np.array(d["position"], dtype=float), np.array(d.get("orientation", [1, 0, 0, 0]), dtype=float)),
        shape=shape_from_dict(d["shape"]),
        confidence=float(d.get("confidence", 1.0)),
    )


def scene_from_dict(data: dict) -> SceneGraph:
    t = data["terrain"]
    terrain = Heightfield(tuple(t["origin"]), float(t["cell_size"]), np.array(t["grid"], dtype=float))
    objects = tuple(object_from_dict(o) for o in data.get("objects", []))
    return SceneGraph(terrain=terrain, objects=objects, revision=int(data.get("revision", 0)))


def load_scene(path) -> SceneGraph:
    with open(path) as f:
        return scene_from_dict(json.load(f))
