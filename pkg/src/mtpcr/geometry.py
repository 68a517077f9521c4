"""Rigid-body transforms, Euler encode/decode and loop-closure algebra.

A genome is a six-vector ``[rx, ry, rz, tx, ty, tz]``: rotation angles in
radians about the x, y and z axes followed by translations. Rotations are
applied in x, y, z order, i.e. the rotation block is ``Rz(rz) @ Ry(ry) @
Rx(rx)``. Transforms are 4x4 homogeneous matrices with an orthonormal
rotation block and bottom row ``[0, 0, 0, 1]``.
"""

from __future__ import annotations

import math

import numpy as np

POSE_DIM = 6

# Tolerance for SO(3) membership checks; well below the sensitivity of any
# cost computed from point distances.
SO3_TOL = 1e-9

# |cos(ry)| below this counts as gimbal lock when decoding.
GIMBAL_COS_TOL = 1e-9


class GimbalLockError(ValueError):
    """Decoding hit ry = +/-pi/2 where the x/z angles are coupled.

    ``pose`` carries a valid but non-unique decomposition with rx fixed
    to 0 and rz absorbing the coupled rotation.
    """

    def __init__(self, pose: np.ndarray):
        super().__init__(
            "gimbal lock: ry at +/-pi/2, decomposition not unique (rx set to 0)"
        )
        self.pose = pose


def identity() -> np.ndarray:
    """4x4 identity transform."""
    return np.eye(4)


def is_rigid_transform(transform: np.ndarray, tol: float = SO3_TOL) -> bool:
    """True if ``transform`` is 4x4 with orthonormal, det-1 rotation block
    and an exact ``[0, 0, 0, 1]`` bottom row."""
    t = np.asarray(transform, dtype=float)
    if t.shape != (4, 4):
        return False
    if not np.array_equal(t[3], [0.0, 0.0, 0.0, 1.0]):
        return False
    r = t[:3, :3]
    if np.linalg.norm(r @ r.T - np.eye(3)) > tol:
        return False
    return abs(np.linalg.det(r) - 1.0) <= tol


def _require_rigid(transform: np.ndarray) -> np.ndarray:
    t = np.asarray(transform, dtype=float)
    if not is_rigid_transform(t):
        raise ValueError("expected a 4x4 rigid transform (orthonormal R, det 1)")
    return t


def euler_to_rotation(rx: float, ry: float, rz: float) -> np.ndarray:
    """Rotation matrix ``Rz(rz) @ Ry(ry) @ Rx(rx)`` (x, y, z application order)."""
    if not (math.isfinite(rx) and math.isfinite(ry) and math.isfinite(rz)):
        raise ValueError("rotation angles must be finite")
    cx, sx = math.cos(rx), math.sin(rx)
    cy, sy = math.cos(ry), math.sin(ry)
    cz, sz = math.cos(rz), math.sin(rz)
    rot_x = np.array([[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]])
    rot_y = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    rot_z = np.array([[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]])
    return rot_z @ rot_y @ rot_x


def pose_to_transform(pose: np.ndarray) -> np.ndarray:
    """Decode a six-vector genome into a 4x4 transform."""
    p = np.asarray(pose, dtype=float).reshape(POSE_DIM)
    transform = np.eye(4)
    transform[:3, :3] = euler_to_rotation(p[0], p[1], p[2])
    transform[:3, 3] = p[3:]
    return transform


def transform_to_pose(transform: np.ndarray) -> np.ndarray:
    """Encode a 4x4 transform back into a six-vector genome.

    Angles are recovered with atan2 so the full [-pi, pi] range survives
    a round trip. Raises :class:`GimbalLockError` when |cos(ry)| falls
    below ``GIMBAL_COS_TOL``; the error carries the canonical rx=0 pose.
    """
    t = _require_rigid(transform)
    cy = math.hypot(t[2, 1], t[2, 2])
    tx, ty, tz = t[0, 3], t[1, 3], t[2, 3]
    if cy < GIMBAL_COS_TOL:
        # sin(ry) = -t[2, 0]; only rx - rz (or rx + rz) is determined, so
        # pin rx = 0 and let rz absorb the coupled rotation.
        if t[2, 0] < 0.0:
            ry = math.pi / 2
            rz = math.atan2(-t[0, 1], t[0, 2])
        else:
            ry = -math.pi / 2
            rz = math.atan2(-t[0, 1], -t[0, 2])
        raise GimbalLockError(np.array([0.0, ry, rz, tx, ty, tz]))
    rx = math.atan2(t[2, 1], t[2, 2])
    ry = math.atan2(-t[2, 0], cy)
    rz = math.atan2(t[1, 0], t[0, 0])
    return np.array([rx, ry, rz, tx, ty, tz])


def compose(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product ``a @ b`` (apply b first, then a)."""
    return np.asarray(a, dtype=float) @ np.asarray(b, dtype=float)


def invert(transform: np.ndarray) -> np.ndarray:
    """Closed-form inverse ``[R^T, -R^T t; 0 1]``."""
    t = np.asarray(transform, dtype=float)
    rt = t[:3, :3].T
    out = np.eye(4)
    out[:3, :3] = rt
    out[:3, 3] = -rt @ t[:3, 3]
    return out


def transform_points(points: np.ndarray, transform: np.ndarray) -> np.ndarray:
    """Apply a 4x4 transform to an (N, 3) array of points."""
    t = np.asarray(transform, dtype=float)
    return np.asarray(points, dtype=float) @ t[:3, :3].T + t[:3, 3]


def loop_residual(t12: np.ndarray, t23: np.ndarray, t31: np.ndarray) -> float:
    """Frobenius norm of ``T31 @ T23 @ T12 - I``.

    Zero exactly when chaining the three pairwise transforms around the
    view cycle returns every point to its start.
    """
    chain = np.asarray(t31, float) @ np.asarray(t23, float) @ np.asarray(t12, float)
    return float(np.linalg.norm(chain - np.eye(4)))


def loop_slots(j: int, own: np.ndarray, peer_a: np.ndarray, peer_b: np.ndarray):
    """Arrange (T12, T23, T31) with ``own`` in slot ``j`` and the peers in
    the cyclic slots j+1, j+2."""
    if j not in (1, 2, 3):
        raise ValueError(f"task index must be 1, 2 or 3, got {j}")
    slots = [None, None, None]
    slots[j - 1] = own
    slots[j % 3] = peer_a
    slots[(j + 1) % 3] = peer_b
    return slots[0], slots[1], slots[2]


def combine_for_task(j: int, best_a: np.ndarray, best_b: np.ndarray) -> np.ndarray:
    """Transform implied for task ``j`` by the other two tasks' bests.

    ``best_a`` and ``best_b`` are the best transforms of tasks j+1 and
    j+2 in cyclic order; the result is ``(best_b @ best_a)^-1``, which
    closes the three-view loop exactly (e.g. T12' = (T31 @ T23)^-1).
    """
    if j not in (1, 2, 3):
        raise ValueError(f"task index must be 1, 2 or 3, got {j}")
    return invert(compose(best_b, best_a))


def rotation_error(est: list, gt: list) -> float:
    """Mean Frobenius distance between estimated and true rotation blocks."""
    if len(est) != len(gt) or not est:
        raise ValueError("estimate and ground truth lists must match in length")
    total = 0.0
    for e, g in zip(est, gt):
        e = np.asarray(e, float)
        g = np.asarray(g, float)
        total += float(np.linalg.norm(e[:3, :3] - g[:3, :3]))
    return total / len(est)


def translation_error(est: list, gt: list) -> float:
    """Mean Euclidean distance between estimated and true translations."""
    if len(est) != len(gt) or not est:
        raise ValueError("estimate and ground truth lists must match in length")
    total = 0.0
    for e, g in zip(est, gt):
        e = np.asarray(e, float)
        g = np.asarray(g, float)
        total += float(np.linalg.norm(e[:3, 3] - g[:3, 3]))
    return total / len(est)
