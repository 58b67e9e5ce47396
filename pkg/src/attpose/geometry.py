"""Quaternion and pose math.

Quaternions are numpy arrays in scalar-first order ``[u, vx, vy, vz]``.
Every ``Pose`` keeps its quaternion in the canonical hemisphere (u >= 0,
ties at u == 0 broken by making the first nonzero imaginary component
positive), so ``q`` and ``-q`` always map to the same stored value.

The ``*_t`` functions are batched torch versions used inside the network
and the loss; they follow the same conventions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .errors import IngestionError, InvalidQuaternionError

LOG_EPS = 1e-8
UNIT_TOL = 1e-6
ORTHO_TOL = 1e-4


def _as_quat(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (4,):
        raise InvalidQuaternionError(f"expected a 4-vector quaternion, got shape {q.shape}")
    if not np.all(np.isfinite(q)):
        raise InvalidQuaternionError(f"non-finite quaternion {q}")
    return q


def quat_normalize(q) -> np.ndarray:
    q = _as_quat(q)
    n = np.linalg.norm(q)
    if n < 1e-12:
        raise InvalidQuaternionError("cannot normalize a zero quaternion")
    return q / n


def canonicalize(q) -> np.ndarray:
    """Return the representative of ``{q, -q}`` on the u >= 0 hemisphere."""
    q = _as_quat(q)
    if abs(np.linalg.norm(q) - 1.0) > UNIT_TOL:
        raise InvalidQuaternionError(f"quaternion {q} is not unit-norm")
    if q[0] > 0:
        return q.copy()
    if q[0] < 0:
        return -q
    # u == 0: first nonzero imaginary component decides
    for c in q[1:]:
        if c != 0:
            return q.copy() if c > 0 else -q
    return q.copy()


def quat_log(q) -> np.ndarray:
    """Log map of a unit quaternion to a 3-vector of magnitude half the rotation angle.

    Callers should pass a canonical quaternion; the result then has norm <= pi/2.
    """
    q = _as_quat(q)
    if abs(np.linalg.norm(q) - 1.0) > UNIT_TOL:
        raise InvalidQuaternionError(f"quaternion {q} is not unit-norm")
    u, v = q[0], q[1:]
    nv = np.linalg.norm(v)
    if nv <= LOG_EPS:
        return np.zeros(3)
    # atan2(|v|, u) == arccos(u) for unit q, without arccos' loss of precision near u = 1
    return v / nv * math.atan2(nv, u)


def quat_exp(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (3,):
        raise ValueError(f"expected a 3-vector, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise ValueError(f"non-finite log-quaternion {w}")
    nw = np.linalg.norm(w)
    if nw <= LOG_EPS:
        q = np.concatenate([[1.0], w])
        return q / np.linalg.norm(q)
    return np.concatenate([[math.cos(nw)], w / nw * math.sin(nw)])


def quat_mul(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, av = a[0], a[1:]
    bw, bv = b[0], b[1:]
    return np.concatenate([[aw * bw - av @ bv], aw * bv + bw * av + np.cross(av, bv)])


def quat_conj(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return np.concatenate([q[:1], -q[1:]])


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([[math.cos(angle / 2)], math.sin(angle / 2) * axis])


def quat_to_rotmat(q) -> np.ndarray:
    w, x, y, z = quat_normalize(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def rotmat_to_quat(R, tol: float = ORTHO_TOL) -> np.ndarray:
    """Convert a proper rotation matrix to a canonical quaternion (Shepperd's method)."""
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3):
        raise ValueError(f"expected 3x3 rotation, got {R.shape}")
    err = np.abs(R.T @ R - np.eye(3)).max()
    if err > tol or abs(np.linalg.det(R) - 1.0) > tol:
        raise ValueError(f"rotation block is not orthonormal (max deviation {err:.2e})")
    tr = np.trace(R)
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return canonicalize(quat_normalize(q))


def position_error(p, p_hat) -> float:
    """Euclidean distance in meters."""
    return float(np.linalg.norm(np.asarray(p, dtype=np.float64) - np.asarray(p_hat, dtype=np.float64)))


def rotation_error(q, q_hat) -> float:
    """Geodesic angle between two rotations, in degrees, in [0, 180].

    Equal to ``2 * arccos(|<q, q_hat>|)``; evaluated via atan2 on the relative
    quaternion so that tiny angles keep full precision.
    """
    q = quat_normalize(q)
    q_hat = quat_normalize(q_hat)
    rel = quat_mul(quat_conj(q), q_hat)
    angle = 2.0 * math.atan2(np.linalg.norm(rel[1:]), abs(rel[0]))
    return math.degrees(angle)


@dataclass(frozen=True)
class Pose:
    """Camera position (meters) plus orientation, canonicalized on construction."""

    p: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.p, dtype=np.float64).reshape(3)
        q = canonicalize(self.q)
        q = q / np.linalg.norm(q)
        p.setflags(write=False)
        q.setflags(write=False)
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "q", q)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.zeros(3), np.array([1.0, 0, 0, 0]))

    @property
    def logq(self) -> np.ndarray:
        return quat_log(self.q)

    def as_matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = quat_to_rotmat(self.q)
        T[:3, 3] = self.p
        return T

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return np.array_equal(self.p, other.p) and np.array_equal(self.q, other.q)

    def __hash__(self):
        return hash((self.p.tobytes(), self.q.tobytes()))


@dataclass(frozen=True)
class RelativePose:
    """Componentwise pose difference ``(p_a - p_b, q_a - q_b)``.

    ``dlogq`` is the log-space rotation difference consumed by the temporal loss.
    """

    dp: np.ndarray
    dq: np.ndarray
    dlogq: np.ndarray

    def __neg__(self):
        return RelativePose(-self.dp, -self.dq, -self.dlogq)


def relative_pose(a: Pose, b: Pose) -> RelativePose:
    return RelativePose(a.p - b.p, a.q - b.q, a.logq - b.logq)


def matrix_to_pose(T, tol: float = ORTHO_TOL) -> Pose:
    T = np.asarray(T, dtype=np.float64)
    if T.shape != (4, 4):
        raise ValueError(f"expected a 4x4 homogeneous matrix, got {T.shape}")
    return Pose(T[:3, 3], rotmat_to_quat(T[:3, :3], tol=tol))


def read_pose_matrix(path) -> Pose:
    """Read a 16-float row-major homogeneous matrix file (7-Scenes ``frame-*.pose.txt``)."""
    path = Path(path)
    vals = np.array(path.read_text().split(), dtype=np.float64)
    if vals.size != 16:
        raise IngestionError(f"{path}: expected 16 numbers, found {vals.size}")
    try:
        return matrix_to_pose(vals.reshape(4, 4))
    except ValueError as e:
        raise IngestionError(f"{path}: {e}") from None


def write_pose_matrix(path, pose: Pose) -> None:
    T = pose.as_matrix()
    Path(path).write_text("\n".join(" ".join(repr(float(v)) for v in row) for row in T) + "\n")


@dataclass
class Trajectory:
    timestamps: np.ndarray
    positions: np.ndarray
    quats: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64).reshape(-1)
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.quats = np.asarray(self.quats, dtype=np.float64).reshape(-1, 4)
        n = len(self.timestamps)
        if len(self.positions) != n or len(self.quats) != n:
            raise ValueError("timestamps, positions and quats must have equal length")

    def __len__(self):
        return len(self.timestamps)

    @classmethod
    def from_poses(cls, poses: Sequence[Pose], timestamps: Iterable[float] | None = None) -> "Trajectory":
        ts = np.arange(len(poses), dtype=np.float64) if timestamps is None else np.asarray(list(timestamps))
        if not poses:
            return cls(ts, np.zeros((0, 3)), np.zeros((0, 4)))
        return cls(ts, np.stack([p.p for p in poses]), np.stack([p.q for p in poses]))

    def poses(self) -> list[Pose]:
        return [Pose(p, q) for p, q in zip(self.positions, self.quats)]


def write_pose_text(path, traj: Trajectory) -> None:
    """Write ``timestamp tx ty tz qu qvx qvy qvz`` lines (full float precision)."""
    lines = []
    for t, p, q in zip(traj.timestamps, traj.positions, traj.quats):
        lines.append(" ".join(repr(float(v)) for v in (t, *p, *q)))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_pose_text(path) -> Trajectory:
    path = Path(path)
    ts, ps, qs = [], [], []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) != 8:
            raise IngestionError(f"{path}:{lineno}: expected 8 fields, found {len(fields)}")
        vals = [float(f) for f in fields]
        try:
            pose = Pose(vals[1:4], vals[4:8])
        except InvalidQuaternionError as e:
            raise IngestionError(f"{path}:{lineno}: {e}") from None
        ts.append(vals[0])
        ps.append(pose.p)
        qs.append(pose.q)
    return Trajectory(ts, np.reshape(ps, (-1, 3)), np.reshape(qs, (-1, 4)))


# batched torch versions ----------------------------------------------------

def quat_exp_t(w: torch.Tensor) -> torch.Tensor:
    """(..., 3) log-quaternions -> (..., 4) unit quaternions, canonicalized."""
    n = w.norm(dim=-1, keepdim=True)
    small = n <= LOG_EPS
    safe_n = torch.where(small, torch.ones_like(n), n)
    q_big = torch.cat([torch.cos(n), w / safe_n * torch.sin(n)], dim=-1)
    q_small = torch.cat([torch.ones_like(n), w], dim=-1)
    q_small = q_small / q_small.norm(dim=-1, keepdim=True)
    q = torch.where(small, q_small, q_big)
    return canonicalize_t(q)


def canonicalize_t(q: torch.Tensor) -> torch.Tensor:
    # sign of the first nonzero component in (u, vx, vy, vz) order
    nz = q != 0
    first = torch.argmax(nz.to(torch.int8), dim=-1, keepdim=True)
    lead = torch.gather(q, -1, first)
    sign = torch.where(lead < 0, -torch.ones_like(lead), torch.ones_like(lead))
    return q * sign


def quat_log_t(q: torch.Tensor) -> torch.Tensor:
    """(..., 4) unit quaternions -> (..., 3) log-quaternions."""
    u, v = q[..., :1], q[..., 1:]
    nv = v.norm(dim=-1, keepdim=True)
    small = nv <= LOG_EPS
    safe = torch.where(small, torch.ones_like(nv), nv)
    out = v / safe * torch.atan2(nv, u)
    return torch.where(small, torch.zeros_like(v), out)
