"""Minimal rigid-transform and quaternion helpers.

Quaternions are (w, x, y, z) numpy arrays, kept unit-norm. A rigid
transform is a (position, quaternion) pair. Everything here is pure
numpy so results are bit-reproducible across runs.
"""

from __future__ import annotations

import numpy as np

UNIT_TOL = 1e-9


def quat_identity() -> np.ndarray:
    return np.array([1.0, 0.0, 0.0, 0.0])


def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if n == 0.0:
        raise ValueError("zero quaternion")
    return q / n


def quat_is_unit(q, tol: float = UNIT_TOL) -> bool:
    return abs(np.linalg.norm(np.asarray(q, dtype=float)) - 1.0) <= tol


def quat_multiply(a, b) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_conjugate(q) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * angle
    return np.concatenate(([np.cos(half)], np.sin(half) * axis))


def quat_rotate(q, v) -> np.ndarray:
    """Rotate vector v by quaternion q (active rotation)."""
    w, x, y, z = q
    u = np.array([x, y, z])
    v = np.asarray(v, dtype=float)
    return v + 2.0 * np.cross(u, np.cross(u, v) + w * v)


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_from_matrix(R) -> np.ndarray:
    """Unit quaternion of a rotation matrix (Shepperd's method)."""
    R = np.asarray(R, dtype=float)
    t = R[0, 0] + R[1, 1] + R[2, 2]
    if t > 0:
        r = np.sqrt(1.0 + t)
        f = 0.5 / r
        return np.array(
            [0.5 * r, (R[2, 1] - R[1, 2]) * f, (R[0, 2] - R[2, 0]) * f, (R[1, 0] - R[0, 1]) * f]
        )
    i = int(np.argmax(np.diag(R)))
    j, k = (i + 1) % 3, (i + 2) % 3
    r = np.sqrt(1.0 + R[i, i] - R[j, j] - R[k, k])
    f = 0.5 / r
    q = np.empty(4)
    q[0] = (R[k, j] - R[j, k]) * f
    q[1 + i] = 0.5 * r
    q[1 + j] = (R[j, i] + R[i, j]) * f
    q[1 + k] = (R[k, i] + R[i, k]) * f
    return q


def rotation_vector_from_matrix(R) -> np.ndarray:
    """Axis-angle (rotation vector) of a rotation matrix, magnitude in [0, pi]."""
    R = np.asarray(R, dtype=float)
    cosang = min(1.0, max(-1.0, 0.5 * (R[0, 0] + R[1, 1] + R[2, 2] - 1.0)))
    angle = np.arccos(cosang)
    if angle < 1e-12:
        return np.zeros(3)
    v = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    n = np.linalg.norm(v)
    if n < 1e-12:
        # angle near pi: the antisymmetric part vanishes, recover the axis
        # from the diagonal instead
        ax = np.sqrt(np.maximum(0.0, 0.5 * (np.diag(R) + 1.0)))
        return angle * ax / max(np.linalg.norm(ax), 1e-12)
    return (angle / n) * v


def quat_angle(q) -> float:
    """Rotation angle of q in [0, pi]."""
    w = np.clip(abs(float(q[0])), 0.0, 1.0)
    return 2.0 * np.arccos(w)


def quat_rotation_vector(q) -> np.ndarray:
    """Axis-angle (rotation vector) of q, magnitude in [0, pi]."""
    q = np.asarray(q, dtype=float)
    if q[0] < 0:
        q = -q
    w = np.clip(q[0], -1.0, 1.0)
    angle = 2.0 * np.arccos(w)
    s = np.sqrt(max(1.0 - w * w, 0.0))
    if s < 1e-12:
        return 2.0 * q[1:4]  # small-angle limit
    return (angle / s) * q[1:4]


def compose(p1, q1, p2, q2):
    """Compose rigid transforms: (p1,q1) then apply (p2,q2) in its frame."""
    return quat_rotate(q1, p2) + np.asarray(p1, dtype=float), quat_multiply(q1, q2)


def relative_angle(qa, qb) -> float:
    """Angle of the rotation taking qa to qb."""
    return quat_angle(quat_multiply(quat_conjugate(qa), qb))
