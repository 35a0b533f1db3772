"""Collision-aware motion planning over the scene.

plan_to_pose runs a bidirectional RRT (RRT-Connect) in joint space with
post-hoc shortcutting; plan_guarded_descent produces the straight-line
contact-seeking approach used for sensor placement. All randomness comes
from a caller-supplied seed, so plans are reproducible bit for bit.

Collision checking is vectorized: batches of configurations map to robot
proxy-sphere centers in one pass, then to signed clearances against every
scene shape and the terrain.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .kinematics import KinematicChain, Pose, Unreachable, clamp_to_limits, forward_kinematics, solve_ik
from .scene import SHAPE_BOX, SHAPE_CYLINDER, SHAPE_SPHERE, SceneGraph
from .transforms import quat_to_matrix

DENSIFY_STEP_RAD = math.radians(0.5)
CLEAR_INF = float("inf")


class StartInCollision(RuntimeError):
    pass


class GoalUnreachable(RuntimeError):
    pass


class PlanningTimeout(RuntimeError):
    pass


class MalformedTrajectory(ValueError):
    pass


@dataclass(frozen=True)
class LinkSphere:
    frame: int  # index into link_frames output (dof = end effector)
    offset: np.ndarray  # m, in frame coordinates
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "offset", np.asarray(self.offset, dtype=float))
        if self.radius <= 0:
            raise ValueError("proxy sphere radius must be positive")


@dataclass(frozen=True)
class CollisionWorld:
    scene: SceneGraph
    link_spheres: tuple
    safety_margin: float = 0.02

    def __post_init__(self):
        object.__setattr__(self, "link_spheres", tuple(self.link_spheres))
        if self.safety_margin < 0:
            raise ValueError("safety_margin must be non-negative")


def proxies_from_chain_fixture(path) -> tuple:
    with open(path) as f:
        data = json.load(f)
    return tuple(
        LinkSphere(int(e["frame"]), np.array(e["offset"], dtype=float), float(e["radius"]))
        for e in data["collision_spheres"]
    )


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray  # s, strictly increasing from 0
    waypoints: np.ndarray  # len(times) x dof
    guarded: bool = False

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        w = np.atleast_2d(np.asarray(self.waypoints, dtype=float))
        if t.ndim != 1 or len(t) != len(w):
            raise MalformedTrajectory("times and waypoints disagree")
        if len(t) == 0:
            raise MalformedTrajectory("empty trajectory")
        if t[0] != 0.0 or (len(t) > 1 and not np.all(np.diff(t) > 0)):
            raise MalformedTrajectory("times must start at 0 and strictly increase")
        t.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "waypoints", w)

    @property
    def duration(self) -> float:
        return float(self.times[-1])

    def setpoint(self, t: float) -> np.ndarray:
        """Linear interpolation of the joint setpoint at time t."""
        if t <= 0:
            return self.waypoints[0]
        if t >= self.duration:
            return self.waypoints[-1]
        i = int(np.searchsorted(self.times, t, side="right")) - 1
        t0, t1 = self.times[i], self.times[i + 1]
        a = (t - t0) / (t1 - t0)
        return (1 - a) * self.waypoints[i] + a * self.waypoints[i + 1]


@dataclass(frozen=True)
class ValidationReport:
    collision_free: bool
    first_violation: float | None
    min_clearance: float


# ---------------------------------------------------------------------------
# batch forward kinematics for proxy spheres


def _rodrigues_batch(axis: np.ndarray, angles: np.ndarray) -> np.ndarray:
    """(M,) angles about a fixed unit axis -> (M,3,3) rotation matrices."""
    x, y, z = axis
    K = np.array([[0, -z, y], [z, 0, -x], [-y, x, 0]])
    K2 = K @ K
    s = np.sin(angles)[:, None, None]
    c = (1.0 - np.cos(angles))[:, None, None]
    return np.eye(3)[None] + s * K[None] + c * K2[None]


def sphere_centers_batch(chain: KinematicChain, proxies, Q: np.ndarray) -> np.ndarray:
    """Proxy-sphere centers for a batch of configurations: (M, n_spheres, 3)."""
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    M = Q.shape[0]
    R = np.broadcast_to(np.eye(3), (M, 3, 3)).copy()
    p = np.zeros((M, 3))
    frames = []
    for i, link in enumerate(chain.links):
        p = p + np.einsum("mij,j->mi", R, link.origin_position)
        R = R @ quat_to_matrix(link.origin_orientation)[None]
        R = R @ _rodrigues_batch(link.axis, Q[:, i])
        frames.append((p, R))
    p_ee = p + np.einsum("mij,j->mi", R, chain.ee_offset_position)
    R_ee = R @ quat_to_matrix(chain.ee_offset_orientation)[None]
    frames.append((p_ee, R_ee))

    centers = np.empty((M, len(proxies), 3))
    for k, pr in enumerate(proxies):
        fp, fR = frames[pr.frame]
        centers[:, k, :] = fp + np.einsum("mij,j->mi", fR, pr.offset)
    return centers


def _shape_distance_batch(points: np.ndarray, obj) -> np.ndarray:
    """Distance from each point to the surface of obj (negative inside)."""
    R = quat_to_matrix(obj.pose.orientation)
    local = (points - obj.pose.position) @ R  # R^T applied row-wise
    kind = obj.shape.kind
    if kind == SHAPE_SPHERE:
        return np.linalg.norm(local, axis=-1) - obj.shape.dims[0]
    if kind == SHAPE_BOX:
        half = np.array(obj.shape.dims) / 2.0
        d = np.abs(local) - half
        outside = np.linalg.norm(np.maximum(d, 0.0), axis=-1)
        inside = np.minimum(np.max(d, axis=-1), 0.0)
        return outside + inside
    # cylinder: axis +z, centered
    r, h = obj.shape.dims
    dr = np.linalg.norm(local[..., :2], axis=-1) - r
    dz = np.abs(local[..., 2]) - h / 2.0
    d = np.stack([dr, dz], axis=-1)
    outside = np.linalg.norm(np.maximum(d, 0.0), axis=-1)
    inside = np.minimum(np.maximum(dr, dz), 0.0)
    return outside + inside


def _terrain_clearance_batch(points: np.ndarray, terrain) -> np.ndarray:
    """Vertical clearance above the terrain (conservative for mild slopes)."""
    x0, y0, x1, y1 = terrain.bounds()
    x = np.clip(points[..., 0], x0, x1)
    y = np.clip(points[..., 1], y0, y1)
    fx = (x - x0) / terrain.cell_size
    fy = (y - y0) / terrain.cell_size
    ix = np.clip(fx.astype(int), 0, terrain.cols - 2)
    iy = np.clip(fy.astype(int), 0, terrain.rows - 2)
    u = fx - ix
    v = fy - iy
    g = terrain.grid
    z = (
        g[iy, ix] * (1 - u) * (1 - v)
        + g[iy, ix + 1] * u * (1 - v)
        + g[iy + 1, ix] * (1 - u) * v
        + g[iy + 1, ix + 1] * u * v
    )
    return points[..., 2] - z


def clearance_detail(chain: KinematicChain, world: CollisionWorld, Q: np.ndarray):
    """Per-configuration clearances: (object pairs, terrain).

    Object clearance is the minimum proxy-sphere-to-shape distance over all
    pairs (+inf when the scene has no objects); terrain clearance is the
    vertical gap above the heightfield. The safety margin is NOT subtracted.
    """
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    centers = sphere_centers_batch(chain, world.link_spheres, Q)  # (M,S,3)
    radii = np.array([p.radius for p in world.link_spheres])
    obj_clear = np.full(Q.shape[0], CLEAR_INF)
    flat = centers.reshape(-1, 3)
    for obj in world.scene.objects:
        d = _shape_distance_batch(flat, obj).reshape(centers.shape[:2]) - radii[None, :]
        obj_clear = np.minimum(obj_clear, d.min(axis=1))
    d = _terrain_clearance_batch(flat, world.scene.terrain).reshape(centers.shape[:2]) - radii[None, :]
    terrain_clear = d.min(axis=1)
    return obj_clear, terrain_clear


def clearance_batch(chain: KinematicChain, world: CollisionWorld, Q: np.ndarray) -> np.ndarray:
    """Combined minimum clearance per configuration (objects and terrain)."""
    obj_clear, terrain_clear = clearance_detail(chain, world, Q)
    return np.minimum(obj_clear, terrain_clear)


def config_free(chain: KinematicChain, world: CollisionWorld, q) -> bool:
    return bool(clearance_batch(chain, world, np.atleast_2d(q))[0] >= world.safety_margin)


def _densify(a: np.ndarray, b: np.ndarray, step: float = DENSIFY_STEP_RAD) -> np.ndarray:
    n = max(int(math.ceil(np.max(np.abs(b - a)) / step)), 1)
    alphas = np.linspace(0.0, 1.0, n + 1)[:, None]
    return a[None] * (1 - alphas) + b[None] * alphas


def edge_free(chain: KinematicChain, world: CollisionWorld, a, b) -> bool:
    samples = _densify(np.asarray(a, float), np.asarray(b, float))
    return bool(np.all(clearance_batch(chain, world, samples) >= world.safety_margin))


# ---------------------------------------------------------------------------
# RRT-Connect


def _extend(tree_nodes, tree_parents, chain, world, q_target, step=0.3):
    """Grow the tree toward q_target; returns index of the new node or None."""
    nodes = np.array(tree_nodes)
    d = np.linalg.norm(nodes - q_target, axis=1)
    near = int(np.argmin(d))
    q_near = tree_nodes[near]
    dist = d[near]
    if dist < 1e-12:
        return near, True
    q_new = q_target if dist <= step else q_near + (q_target - q_near) * (step / dist)
    if not edge_free(chain, world, q_near, q_new):
        return None, False
    tree_nodes.append(q_new)
    tree_parents.append(near)
    return len(tree_nodes) - 1, bool(np.linalg.norm(q_new - q_target) < 1e-12)


def _trace(nodes, parents, idx):
    path = []
    while idx is not None:
        path.append(nodes[idx])
        idx = parents[idx]
    return path[::-1]


def _shortcut(chain, world, path, rng, attempts=200):
    path = [np.asarray(p, float) for p in path]
    for _ in range(attempts):
        if len(path) <= 2:
            break
        i, j = sorted(rng.integers(0, len(path), size=2))
        if j - i < 2:
            continue
        if edge_free(chain, world, path[i], path[j]):
            path = path[: i + 1] + path[j:]
    return path


def time_parameterize(chain: KinematicChain, path, guarded: bool = False) -> Trajectory:
    """Per-segment duration = max over joints of |dq| / max_rate."""
    if len(path) == 0:
        raise MalformedTrajectory("empty path")
    pts = [chain.check_q(p) for p in path]
    times = [0.0]
    for a, b in zip(pts, pts[1:]):
        dt = float(np.max(np.abs(b - a) / chain.max_rates))
        times.append(times[-1] + max(dt, 1e-9))
    return Trajectory(np.array(times), np.array(pts), guarded=guarded)


def plan_to_pose(
    chain: KinematicChain,
    world: CollisionWorld,
    q_start,
    target: Pose,
    rng_seed: int,
    max_samples: int = 20000,
    ik_goal_seeds: int = 8,
) -> Trajectory:
    """Joint-space RRT-Connect from q_start to an IK solution of target."""
    rng = np.random.default_rng(rng_seed)
    q_start = clamp_to_limits(chain, q_start)
    if not config_free(chain, world, q_start):
        raise StartInCollision("start configuration violates the safety margin")

    lo, hi = chain.lower_limits, chain.upper_limits
    goals = []
    for k in range(ik_goal_seeds):
        seed = q_start if k == 0 else rng.uniform(lo, hi)
        try:
            sol = solve_ik(chain, target, seed)
        except Unreachable:
            continue
        if config_free(chain, world, sol.joints):
            goals.append(sol.joints)
    if not goals:
        raise GoalUnreachable("no collision-free IK solution for target pose")

    # straight-shot fast path
    for g in goals:
        if edge_free(chain, world, q_start, g):
            path = _shortcut(chain, world, [q_start, g], rng)
            return time_parameterize(chain, path)

    goal = goals[0]
    a_nodes, a_parents = [q_start], [None]
    b_nodes, b_parents = [goal], [None]
    samples = 0
    while samples < max_samples:
        q_rand = rng.uniform(lo, hi)
        samples += 1
        new_idx, _ = _extend(a_nodes, a_parents, chain, world, q_rand)
        if new_idx is not None:
            # greedily connect the other tree to the new node
            target_q = a_nodes[new_idx]
            while True:
                idx, reached = _extend(b_nodes, b_parents, chain, world, target_q)
                if idx is None:
                    break
                if reached:
                    path_a = _trace(a_nodes, a_parents, new_idx)
                    path_b = _trace(b_nodes, b_parents, idx)
                    path = path_a + path_b[::-1][1:]
                    if a_nodes[0] is not q_start:
                        path = path[::-1]
                    path = _shortcut(chain, world, path, rng)
                    return time_parameterize(chain, path)
        a_nodes, b_nodes = b_nodes, a_nodes
        a_parents, b_parents = b_parents, a_parents
    raise PlanningTimeout(f"no path found within {max_samples} samples")


def plan_guarded_descent(
    chain: KinematicChain,
    world: CollisionWorld,
    q_start,
    surface_point,
    approach,
    step: float = 0.005,
) -> Trajectory:
    """Straight-line Cartesian descent toward surface_point along approach.

    The resulting trajectory is flagged guarded: execution halts on sensed
    contact. Lateral deviation of the planned end-effector track from the
    approach line stays within 1 cm.
    """
    surface_point = np.asarray(surface_point, dtype=float)
    approach = np.asarray(approach, dtype=float)
    if abs(np.linalg.norm(approach) - 1.0) > 1e-6:
        raise ValueError("approach must be a unit vector")
    q_start = chain.check_q(q_start)
    start_pose = forward_kinematics(chain, q_start)
    to_surface = surface_point - start_pose.position
    depth = float(np.dot(to_surface, approach))
    if depth <= 0:
        raise GoalUnreachable("end effector is not above the surface point along the approach")
    lateral = to_surface - depth * approach
    if np.linalg.norm(lateral) > 0.01:
        raise GoalUnreachable(
            f"start point is {np.linalg.norm(lateral) * 100:.1f} cm off the approach line"
        )

    n = max(int(math.ceil(depth / step)), 1)
    path = [q_start]
    q = q_start
    for i in range(1, n + 1):
        p = start_pose.position + to_surface * (i / n)
        try:
            sol = solve_ik(chain, Pose(p, start_pose.orientation), q, tol_pos=1e-4)
        except Unreachable as exc:
            raise GoalUnreachable("descent line leaves the reachable workspace") from exc
        q = sol.joints
        path.append(q)
    traj = time_parameterize(chain, path, guarded=True)
    # verify the planned track stays on the approach line
    for wp in traj.waypoints:
        p = forward_kinematics(chain, wp).position
        off = p - surface_point
        lat = off - np.dot(off, approach) * approach
        if np.linalg.norm(lat) > 0.01:
            raise GoalUnreachable("planned descent deviates more than 1 cm laterally")
    return traj


def validate_trajectory(chain: KinematicChain, world: CollisionWorld, traj: Trajectory) -> ValidationReport:
    """Dense collision check of a trajectory at joint steps <= 0.5 degrees."""
    sample_q = [traj.waypoints[0]]
    sample_t = [float(traj.times[0])]
    for i in range(len(traj.times) - 1):
        a, b = traj.waypoints[i], traj.waypoints[i + 1]
        seg = _densify(a, b)
        alphas = np.linspace(0.0, 1.0, len(seg))
        for alpha, q in zip(alphas[1:], seg[1:]):
            sample_q.append(q)
            sample_t.append(float(traj.times[i] + alpha * (traj.times[i + 1] - traj.times[i])))
    obj_clear, terrain_clear = clearance_detail(chain, world, np.array(sample_q))
    # min_clearance reports proxy-vs-object pairs: +inf sentinel with no objects
    min_clear = float(obj_clear.min())
    if traj.guarded:
        # guarded moves end on the terrain by design; only objects constrain them
        combined = obj_clear
    else:
        combined = np.minimum(obj_clear, terrain_clear)
    bad = np.nonzero(combined < world.safety_margin)[0]
    if len(bad):
        return ValidationReport(False, sample_t[int(bad[0])], min_clear)
    return ValidationReport(True, None, min_clear)
