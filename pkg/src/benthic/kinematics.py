"""Serial-chain kinematics: forward kinematics, geometric Jacobian, and
damped-least-squares inverse kinematics with joint-limit clamping.

All joints are revolute. A chain is a list of links, each carrying a fixed
origin transform (parent frame -> joint frame) and a rotation axis in the
joint frame. The functions are pure: identical inputs give bit-identical
outputs, and nothing here mutates its arguments.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .transforms import (
    compose,
    quat_identity,
    quat_from_axis_angle,
    quat_from_matrix,
    quat_is_unit,
    quat_to_matrix,
    relative_angle,
    rotation_vector_from_matrix,
)


class DimensionMismatch(ValueError):
    """Joint vector length does not match the chain."""


class Unreachable(RuntimeError):
    """IK failed to converge; carries the best solution found."""

    def __init__(self, best: "IKSolution"):
        super().__init__(
            f"no IK convergence in {best.iterations} iterations "
            f"(pos err {best.position_error:.3e} m, rot err {best.orientation_error:.3e} rad)"
        )
        self.best = best


@dataclass(frozen=True)
class Link:
    origin_position: np.ndarray  # m, in parent frame
    origin_orientation: np.ndarray  # unit quaternion
    axis: np.ndarray  # unit vector in joint frame
    limits: tuple  # (min_rad, max_rad)
    max_rate: float  # rad/s

    def __post_init__(self):
        object.__setattr__(self, "origin_position", np.asarray(self.origin_position, dtype=float))
        object.__setattr__(self, "origin_orientation", np.asarray(self.origin_orientation, dtype=float))
        object.__setattr__(self, "axis", np.asarray(self.axis, dtype=float))
        if not quat_is_unit(self.origin_orientation):
            raise ValueError("link origin quaternion not unit-norm")
        n = np.linalg.norm(self.axis)
        if abs(n - 1.0) > 1e-9:
            raise ValueError("joint axis not unit-norm")
        lo, hi = self.limits
        if not lo < hi:
            raise ValueError("joint limits must satisfy min < max")
        if not self.max_rate > 0:
            raise ValueError("max_rate must be positive")


@dataclass(frozen=True)
class Pose:
    position: np.ndarray
    orientation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float))
        object.__setattr__(self, "orientation", np.asarray(self.orientation, dtype=float))
        if not quat_is_unit(self.orientation):
            raise ValueError("pose quaternion not unit-norm")


@dataclass(frozen=True)
class KinematicChain:
    links: tuple
    ee_offset_position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    ee_offset_orientation: np.ndarray = field(default_factory=quat_identity)

    def __post_init__(self):
        object.__setattr__(self, "links", tuple(self.links))
        object.__setattr__(self, "ee_offset_position", np.asarray(self.ee_offset_position, dtype=float))
        object.__setattr__(self, "ee_offset_orientation", np.asarray(self.ee_offset_orientation, dtype=float))
        if len(self.links) == 0:
            raise ValueError("chain needs at least one link")
        if not quat_is_unit(self.ee_offset_orientation):
            raise ValueError("end-effector offset quaternion not unit-norm")

    @property
    def dof(self) -> int:
        return len(self.links)

    def check_q(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        if q.shape != (self.dof,):
            raise DimensionMismatch(f"expected {self.dof} joint values, got {q.shape}")
        if not np.all(np.isfinite(q)):
            raise ValueError("joint values must be finite")
        return q

    @property
    def lower_limits(self) -> np.ndarray:
        return np.array([lk.limits[0] for lk in self.links])

    @property
    def upper_limits(self) -> np.ndarray:
        return np.array([lk.limits[1] for lk in self.links])

    @property
    def max_rates(self) -> np.ndarray:
        return np.array([lk.max_rate for lk in self.links])


@dataclass(frozen=True)
class IKSolution:
    joints: np.ndarray
    position_error: float
    orientation_error: float
    iterations: int


def link_frames(chain: KinematicChain, q) -> list:
    """Pose of every joint frame (post joint rotation) plus the end effector.

    Returns dof+1 (position, quaternion) pairs; the last one includes the
    end-effector offset.
    """
    q = chain.check_q(q)
    p = np.zeros(3)
    rot = quat_identity()
    frames = []
    for link, qi in zip(chain.links, q):
        p, rot = compose(p, rot, link.origin_position, link.origin_orientation)
        rot = np.asarray(rot)
        joint_rot = quat_from_axis_angle(link.axis, float(qi))
        p, rot = compose(p, rot, np.zeros(3), joint_rot)
        frames.append((p, rot))
    p, rot = compose(p, rot, chain.ee_offset_position, chain.ee_offset_orientation)
    frames.append((p, rot))
    return frames


def _chain_consts(chain: KinematicChain):
    """Per-chain scalar tables for the kinematics core, cached on the chain.

    Everything is unpacked to plain Python floats (rotations as 9-tuples,
    identity collapsed to None) because the FK loop runs inside IK and the
    planner and array dispatch overhead dominates at this size.
    """
    cached = getattr(chain, "_fk_consts", None)
    if cached is None:
        identity = np.eye(3)

        def mat_or_none(quat):
            R = quat_to_matrix(quat)
            return None if np.array_equal(R, identity) else tuple(map(float, R.ravel()))

        links = tuple(
            (
                tuple(map(float, lk.origin_position)),
                mat_or_none(lk.origin_orientation),
                tuple(map(float, lk.axis)),
            )
            for lk in chain.links
        )
        cached = (links, tuple(map(float, chain.ee_offset_position)), mat_or_none(chain.ee_offset_orientation))
        object.__setattr__(chain, "_fk_consts", cached)
    return cached


def _fk_scalar(chain: KinematicChain, q):
    """Joint positions, world joint axes, end-effector position and rotation
    (row-major 9-tuple) -- the pieces the Jacobian and the IK loop need.

    `q` must be a plain sequence of floats.
    """
    links, ee_p, ee_r = _chain_consts(chain)
    r00, r01, r02, r10, r11, r12, r20, r21, r22 = 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0
    px = py = pz = 0.0
    joint_p = []
    joint_z = []
    for (op, oR, ax), qi in zip(links, q):
        ox, oy, oz = op
        px += r00 * ox + r01 * oy + r02 * oz
        py += r10 * ox + r11 * oy + r12 * oz
        pz += r20 * ox + r21 * oy + r22 * oz
        if oR is not None:
            m00, m01, m02, m10, m11, m12, m20, m21, m22 = oR
            r00, r01, r02 = r00 * m00 + r01 * m10 + r02 * m20, r00 * m01 + r01 * m11 + r02 * m21, r00 * m02 + r01 * m12 + r02 * m22
            r10, r11, r12 = r10 * m00 + r11 * m10 + r12 * m20, r10 * m01 + r11 * m11 + r12 * m21, r10 * m02 + r11 * m12 + r12 * m22
            r20, r21, r22 = r20 * m00 + r21 * m10 + r22 * m20, r20 * m01 + r21 * m11 + r22 * m21, r20 * m02 + r21 * m12 + r22 * m22
        c = math.cos(qi)
        s = math.sin(qi)
        k = 1.0 - c
        x, y, z = ax
        m00 = c + x * x * k
        m01 = x * y * k - z * s
        m02 = x * z * k + y * s
        m10 = y * x * k + z * s
        m11 = c + y * y * k
        m12 = y * z * k - x * s
        m20 = z * x * k - y * s
        m21 = z * y * k + x * s
        m22 = c + z * z * k
        r00, r01, r02 = r00 * m00 + r01 * m10 + r02 * m20, r00 * m01 + r01 * m11 + r02 * m21, r00 * m02 + r01 * m12 + r02 * m22
        r10, r11, r12 = r10 * m00 + r11 * m10 + r12 * m20, r10 * m01 + r11 * m11 + r12 * m21, r10 * m02 + r11 * m12 + r12 * m22
        r20, r21, r22 = r20 * m00 + r21 * m10 + r22 * m20, r20 * m01 + r21 * m11 + r22 * m21, r20 * m02 + r21 * m12 + r22 * m22
        joint_p.append((px, py, pz))
        joint_z.append((r00 * x + r01 * y + r02 * z, r10 * x + r11 * y + r12 * z, r20 * x + r21 * y + r22 * z))
    ox, oy, oz = ee_p
    ex = px + r00 * ox + r01 * oy + r02 * oz
    ey = py + r10 * ox + r11 * oy + r12 * oz
    ez = pz + r20 * ox + r21 * oy + r22 * oz
    if ee_r is not None:
        m00, m01, m02, m10, m11, m12, m20, m21, m22 = ee_r
        r00, r01, r02 = r00 * m00 + r01 * m10 + r02 * m20, r00 * m01 + r01 * m11 + r02 * m21, r00 * m02 + r01 * m12 + r02 * m22
        r10, r11, r12 = r10 * m00 + r11 * m10 + r12 * m20, r10 * m01 + r11 * m11 + r12 * m21, r10 * m02 + r11 * m12 + r12 * m22
        r20, r21, r22 = r20 * m00 + r21 * m10 + r22 * m20, r20 * m01 + r21 * m11 + r22 * m21, r20 * m02 + r21 * m12 + r22 * m22
    return joint_p, joint_z, (ex, ey, ez), (r00, r01, r02, r10, r11, r12, r20, r21, r22)


def forward_kinematics(chain: KinematicChain, q) -> Pose:
    q = chain.check_q(q)
    _, _, p_ee, R_ee = _fk_scalar(chain, q.tolist())
    return Pose(np.array(p_ee), quat_from_matrix(np.array(R_ee).reshape(3, 3)))


def _jacobian_rows(joint_p, joint_z, p_ee):
    ex, ey, ez = p_ee
    cols = []
    for (p0, p1, p2), (z0, z1, z2) in zip(joint_p, joint_z):
        d0, d1, d2 = ex - p0, ey - p1, ez - p2
        cols.append((z1 * d2 - z2 * d1, z2 * d0 - z0 * d2, z0 * d1 - z1 * d0, z0, z1, z2))
    return np.array(cols).T  # 6 x dof


def jacobian(chain: KinematicChain, q) -> np.ndarray:
    """Geometric Jacobian, 6xN: rows 0-2 linear velocity, 3-5 angular."""
    q = chain.check_q(q)
    joint_p, joint_z, p_ee, _ = _fk_scalar(chain, q.tolist())
    return _jacobian_rows(joint_p, joint_z, p_ee)


def clamp_to_limits(chain: KinematicChain, q) -> np.ndarray:
    q = chain.check_q(q)
    return np.clip(q, chain.lower_limits, chain.upper_limits)


def pose_error(chain: KinematicChain, q, target: Pose):
    pose = forward_kinematics(chain, q)
    e_pos = target.position - pose.position
    e_rot = relative_angle(pose.orientation, target.orientation)
    return pose, e_pos, e_rot


def solve_ik(
    chain: KinematicChain,
    target: Pose,
    seed,
    tol_pos: float = 1e-3,
    tol_rot: float = 5e-3,
    max_iter: int = 400,
) -> IKSolution:
    """Damped-least-squares IK with per-iteration joint-limit clamping.

    Damping scales with the residual (Levenberg-Marquardt style), so steps
    stay bounded far from the target and near singularities. If the error
    stops improving for a dozen iterations -- typically a joint-limit lock
    -- the iterate is re-seeded from a deterministic random sequence, so
    the solver escapes local minima while staying a pure function of its
    arguments. Raises Unreachable (carrying the best iterate) on
    non-convergence.
    """
    if tol_pos <= 0 or tol_rot <= 0:
        raise ValueError("tolerances must be positive")
    q = clamp_to_limits(chain, seed)
    lo, hi = chain.lower_limits, chain.upper_limits
    t00, t01, t02, t10, t11, t12, t20, t21, t22 = map(float, quat_to_matrix(target.orientation).ravel())
    tx, ty, tz = map(float, target.position)
    restart_rng = np.random.default_rng(0x5EED)
    best = None  # (metric, q, pos_err, rot_err)
    best_metric = math.inf
    since_best = 0
    err = np.empty(6)

    for it in range(max_iter + 1):
        joint_p, joint_z, p_ee, R_ee = _fk_scalar(chain, q.tolist())
        e0, e1, e2 = tx - p_ee[0], ty - p_ee[1], tz - p_ee[2]
        # rotation vector of the remaining rotation target * current^-1,
        # which lives in the world frame
        r00, r01, r02, r10, r11, r12, r20, r21, r22 = R_ee
        cosang = 0.5 * (
            (t00 * r00 + t01 * r01 + t02 * r02)
            + (t10 * r10 + t11 * r11 + t12 * r12)
            + (t20 * r20 + t21 * r21 + t22 * r22)
            - 1.0
        )
        cosang = min(1.0, max(-1.0, cosang))
        angle = math.acos(cosang)
        v0 = (t20 * r10 + t21 * r11 + t22 * r12) - (t10 * r20 + t11 * r21 + t12 * r22)
        v1 = (t00 * r20 + t01 * r21 + t02 * r22) - (t20 * r00 + t21 * r01 + t22 * r02)
        v2 = (t10 * r00 + t11 * r01 + t12 * r02) - (t00 * r10 + t01 * r11 + t02 * r12)
        vn = math.sqrt(v0 * v0 + v1 * v1 + v2 * v2)
        if angle < 1e-12:
            w0 = w1 = w2 = 0.0
        elif vn < 1e-12:
            # angle near pi: recover the axis from the symmetric part
            T = np.array([[t00, t01, t02], [t10, t11, t12], [t20, t21, t22]])
            Re = np.array(R_ee).reshape(3, 3)
            w0, w1, w2 = rotation_vector_from_matrix(T @ Re.T)
        else:
            f = angle / vn
            w0, w1, w2 = f * v0, f * v1, f * v2
        pos_err = math.sqrt(e0 * e0 + e1 * e1 + e2 * e2)
        rot_err = math.sqrt(w0 * w0 + w1 * w1 + w2 * w2)
        metric = pos_err + 0.1 * rot_err
        if best is None or metric < best[0]:
            best = (metric, q.copy(), pos_err, rot_err)
        if pos_err <= tol_pos and rot_err <= tol_rot:
            return IKSolution(q.copy(), pos_err, rot_err, it)
        if it == max_iter:
            break
        if metric < best_metric - 1e-6:
            best_metric = metric
            since_best = 0
        else:
            since_best += 1
            if since_best >= 12:  # stalled: re-seed and keep iterating
                q = restart_rng.uniform(lo, hi)
                best_metric = math.inf
                since_best = 0
                continue
        J = _jacobian_rows(joint_p, joint_z, p_ee)
        # cap the error vector so distant targets do not produce wild steps
        fp = min(1.0, 0.2 / max(pos_err, 1e-12))
        fr = min(1.0, 1.0 / max(rot_err, 1e-12))
        err[0] = e0 * fp
        err[1] = e1 * fp
        err[2] = e2 * fp
        err[3] = w0 * fr
        err[4] = w1 * fr
        err[5] = w2 * fr
        lam2 = 0.1 * float(err @ err) + 1e-6
        A = J @ J.T
        A.flat[::7] += lam2
        dq = J.T @ np.linalg.solve(A, err)
        step = float(np.max(np.abs(dq)))
        if step > 0.5:  # trust region: cap joint step at 0.5 rad
            dq *= 0.5 / step
        q = np.clip(q + dq, lo, hi)

    raise Unreachable(IKSolution(best[1], best[2], best[3], max_iter))


# ---------------------------------------------------------------------------
# chain construction / fixtures


def chain_from_dict(data: dict) -> KinematicChain:
    links = []
    for entry in data["links"]:
        links.append(
            Link(
                origin_position=np.array(entry["origin"]["position"], dtype=float),
                origin_orientation=np.array(entry["origin"]["orientation"], dtype=float),
                axis=np.array(entry["axis"], dtype=float),
                limits=tuple(entry["limits"]),
                max_rate=float(entry["max_rate"]),
            )
        )
    ee = data.get("end_effector_offset", {})
    return KinematicChain(
        links=tuple(links),
        ee_offset_position=np.array(ee.get("position", [0, 0, 0]), dtype=float),
        ee_offset_orientation=np.array(ee.get("orientation", [1, 0, 0, 0]), dtype=float),
    )


def load_chain(path) -> KinematicChain:
    with open(path) as f:
        return chain_from_dict(json.load(f))


def planar_2r_chain(l1: float = 1.0, l2: float = 1.0) -> KinematicChain:
    """Two-link planar arm in the xy plane, both joints about +z."""
    z = np.array([0.0, 0.0, 1.0])
    ident = quat_identity()
    return KinematicChain(
        links=(
            Link(np.zeros(3), ident, z, (-np.pi, np.pi), 1.0),
            Link(np.array([l1, 0.0, 0.0]), ident, z, (-np.pi, np.pi), 1.0),
        ),
        ee_offset_position=np.array([l2, 0.0, 0.0]),
    )
