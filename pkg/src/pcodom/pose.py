"""Rigid-body poses, Euler/quaternion conversions and trajectory integration.

Conventions (used by every call site in the package):

* A :class:`Pose` ``T = (R, t)`` maps a point from the child frame into the
  parent frame, ``x_parent = R @ x_child + t``.  Column vectors throughout.
* ``compose(a, b)`` is the homogeneous product ``a @ b``: apply ``b`` first,
  then ``a``.  A world pose times a relative pose gives the next world pose.
* A 6-vector ``v = [p, q]`` stores translation ``p`` in meters followed by the
  Euler angles ``q`` in radians.  ``q`` is indexed by axis, ``q = (angle about
  x, angle about y, angle about z)``; the :class:`EulerConvention` decides the
  order in which the three axis rotations are multiplied.  The project-wide
  default is intrinsic Z-Y-X (yaw, then pitch, then roll), i.e.
  ``R = Rz(q[2]) @ Ry(q[1]) @ Rx(q[0])``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import GimbalLockWarning, NonUnitQuaternion

ORTHO_TOL = 1e-9
GIMBAL_TOL = 1e-6
_AXES = {"X": 0, "Y": 1, "Z": 2}


@dataclass(frozen=True)
class EulerConvention:
    """Tait-Bryan axis order plus intrinsic/extrinsic flag."""

    order: str = "ZYX"
    intrinsic: bool = True

    def __post_init__(self):
        order = self.order.upper()
        if len(order) != 3 or set(order) != {"X", "Y", "Z"}:
            raise ValueError(f"unsupported Euler order {self.order!r}; need a permutation of XYZ")
        object.__setattr__(self, "order", order)

    @property
    def tag(self) -> str:
        return f"{'intrinsic' if self.intrinsic else 'extrinsic'}-{self.order}"

    @classmethod
    def from_tag(cls, tag: str) -> "EulerConvention":
        kind, _, order = tag.partition("-")
        if kind not in ("intrinsic", "extrinsic"):
            raise ValueError(f"bad Euler convention tag {tag!r}")
        return cls(order, kind == "intrinsic")

    def product_axes(self) -> tuple[int, int, int]:
        """Axis indices in left-to-right matrix-product order."""
        axes = tuple(_AXES[a] for a in self.order)
        return axes if self.intrinsic else axes[::-1]


DEFAULT_CONVENTION = EulerConvention("ZYX", intrinsic=True)


def wrap_angle(a):
    """Map angles into (-pi, pi]."""
    a = np.asarray(a, dtype=float)
    w = np.mod(a + np.pi, 2 * np.pi) - np.pi
    w = np.where(w <= -np.pi, w + 2 * np.pi, w)
    return w if w.ndim else float(w)


def axis_rotation(axis: int, angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    if axis == 0:
        return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])
    if axis == 1:
        return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def orthonormality_error(R: np.ndarray) -> float:
    return float(np.max(np.abs(R.T @ R - np.eye(3))))


def gram_schmidt(R: np.ndarray) -> np.ndarray:
    """Re-orthonormalize the columns of ``R`` (first column kept in direction)."""
    a, b = R[:, 0], R[:, 1]
    e0 = a / np.linalg.norm(a)
    b = b - (e0 @ b) * e0
    e1 = b / np.linalg.norm(b)
    e2 = np.cross(e0, e1)
    return np.column_stack([e0, e1, e2])


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Pose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float)
        t = np.asarray(self.translation, dtype=float).reshape(-1)
        if R.shape != (3, 3) or t.shape != (3,):
            raise ValueError(f"pose needs a 3x3 rotation and a 3-vector, got {R.shape} and {t.shape}")
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("pose contains non-finite values")
        err = orthonormality_error(R)
        if err > ORTHO_TOL:
            if err > 1e-2:
                raise ValueError(f"rotation is not orthonormal (max |R^T R - I| = {err:.3g})")
            R = gram_schmidt(R)
        if np.linalg.det(R) < 0:
            raise ValueError("rotation has det -1 (reflection)")
        object.__setattr__(self, "rotation", _frozen(R))
        object.__setattr__(self, "translation", _frozen(t))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, M) -> "Pose":
        M = np.asarray(M, dtype=float)
        if M.shape not in ((4, 4), (3, 4)):
            raise ValueError(f"expected a 3x4 or 4x4 matrix, got {M.shape}")
        return cls(M[:3, :3], M[:3, 3])

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def apply(self, points) -> np.ndarray:
        """Transform ``(N, 3)`` child-frame points into the parent frame."""
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def __matmul__(self, other: "Pose") -> "Pose":
        return compose(self, other)

    def __repr__(self) -> str:
        return f"Pose(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"


def euler_to_rotation(q, conv: EulerConvention = DEFAULT_CONVENTION) -> np.ndarray:
    q = np.asarray(q, dtype=float).reshape(3)
    R = np.eye(3)
    for axis in conv.product_axes():
        R = R @ axis_rotation(axis, q[axis])
    return R


def rotation_to_euler(R, conv: EulerConvention = DEFAULT_CONVENTION) -> np.ndarray:
    """Inverse of :func:`euler_to_rotation`.

    Near gimbal lock (middle angle within 1e-6 of +-pi/2) a
    :class:`GimbalLockWarning` is issued and the third angle is set to 0.
    """
    R = np.asarray(R, dtype=float)
    i, j, k = conv.product_axes()
    # +1 for cyclic (xyz, yzx, zxy) products, -1 otherwise
    s = 1.0 if (j - i) % 3 == 1 else -1.0
    middle = math.asin(max(-1.0, min(1.0, s * R[i, k])))
    if abs(abs(middle) - math.pi / 2) < GIMBAL_TOL:
        warnings.warn(
            f"gimbal lock in {conv.tag} extraction; third angle set to 0",
            GimbalLockWarning,
            stacklevel=2,
        )
        first_block = R @ axis_rotation(j, middle).T
        a, b = (i + 1) % 3, (i + 2) % 3
        first = math.atan2(first_block[b, a], first_block[a, a])
        third = 0.0
    else:
        first = math.atan2(-s * R[j, k], R[k, k])
        third = math.atan2(-s * R[i, j], R[i, i])
    q = np.zeros(3)
    q[i], q[j], q[k] = first, middle, third
    return np.asarray(wrap_angle(q))


def quaternion_to_matrix(w: float, x: float, y: float, z: float) -> np.ndarray:
    n = math.sqrt(w * w + x * x + y * y + z * z)
    if abs(n - 1.0) > 1e-6:
        raise NonUnitQuaternion(f"quaternion norm {n:.9f} deviates from 1 by more than 1e-6")
    w, x, y, z = w / n, x / n, y / n, z / n
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quaternion_to_euler(w, x, y, z, conv: EulerConvention = DEFAULT_CONVENTION) -> np.ndarray:
    return rotation_to_euler(quaternion_to_matrix(w, x, y, z), conv)


def compose(a: Pose, b: Pose) -> Pose:
    """``a @ b``: apply ``b`` then ``a``."""
    R = a.rotation @ b.rotation
    if orthonormality_error(R) > ORTHO_TOL:
        R = gram_schmidt(R)
    return Pose(R, a.rotation @ b.translation + a.translation)


def invert(a: Pose) -> Pose:
    Rt = a.rotation.T
    return Pose(Rt, -(Rt @ a.translation))


def relative_pose(from_pose: Pose, to_pose: Pose) -> Pose:
    """The pose ``X`` with ``compose(from_pose, X) == to_pose``."""
    return compose(invert(from_pose), to_pose)


def pose_to_vec6(a: Pose, conv: EulerConvention = DEFAULT_CONVENTION) -> np.ndarray:
    return np.concatenate([a.translation, rotation_to_euler(a.rotation, conv)])


def vec6_to_pose(v, conv: EulerConvention = DEFAULT_CONVENTION) -> Pose:
    v = np.asarray(v, dtype=float).reshape(6)
    return Pose(euler_to_rotation(v[3:], conv), v[:3])


def relative_poses(traj: Sequence[Pose]) -> list[Pose]:
    return [relative_pose(a, b) for a, b in zip(traj[:-1], traj[1:])]


def integrate_trajectory(
    start: Pose, rels: Iterable, conv: EulerConvention = DEFAULT_CONVENTION
) -> list[Pose]:
    """Chain relative motions onto ``start``.

    ``rels`` holds 6-vectors (or :class:`Pose` objects); the result has one
    more entry than ``rels`` and begins with ``start``.
    """
    out = [start]
    for rel in rels:
        step = rel if isinstance(rel, Pose) else vec6_to_pose(rel, conv)
        out.append(compose(out[-1], step))
    return out


def rotation_angle(R) -> float:
    """Rotation magnitude in [0, pi].

    Uses ``atan2(|skew|, trace - 1)``: exact 0 for symmetric (identity-like)
    inputs and well conditioned near 0 and pi, unlike a bare arccos.
    """
    R = np.asarray(R, dtype=float)
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return float(math.atan2(float(np.linalg.norm(w)), float(np.trace(R)) - 1.0))
