"""Rigid transforms and closed-form alignment."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class PoseSE3:
    """Rigid transform ``p -> R @ p + t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "PoseSE3":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T) -> "PoseSE3":
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])

    @classmethod
    def from_xyz_rpy(cls, x=0.0, y=0.0, z=0.0, roll=0.0, pitch=0.0, yaw=0.0) -> "PoseSE3":
        R = Rotation.from_euler("ZYX", [yaw, pitch, roll]).as_matrix()
        return cls(R, [x, y, z])

    def as_matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def apply(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    def compose(self, other: "PoseSE3") -> "PoseSE3":
        """``self ∘ other``: apply ``other`` first."""
        return PoseSE3(self.rotation @ other.rotation,
                       self.rotation @ other.translation + self.translation)

    def __matmul__(self, other: "PoseSE3") -> "PoseSE3":
        return self.compose(other)

    def inverse(self) -> "PoseSE3":
        Rt = self.rotation.T
        return PoseSE3(Rt, -Rt @ self.translation)

    @property
    def yaw(self) -> float:
        return float(np.arctan2(self.rotation[1, 0], self.rotation[0, 0]))

    def is_valid(self, tol: float = ORTHO_TOL) -> bool:
        R = self.rotation
        return (np.all(np.isfinite(R)) and np.all(np.isfinite(self.translation))
                and np.abs(R.T @ R - np.eye(3)).max() <= tol
                and abs(np.linalg.det(R) - 1.0) <= tol)

    def to_list(self) -> list:
        return self.as_matrix()[:3].ravel().tolist()

    @classmethod
    def from_list(cls, values) -> "PoseSE3":
        m = np.asarray(values, dtype=float).reshape(3, 4)
        return cls(m[:, :3], m[:, 3])


def nearest_rotation(M) -> np.ndarray:
    """Closest proper rotation to ``M`` in Frobenius norm."""
    U, _, Vt = np.linalg.svd(np.asarray(M, dtype=float))
    d = np.sign(np.linalg.det(U @ Vt))
    if d == 0:
        d = 1.0
    return U @ np.diag([1.0, 1.0, d]) @ Vt


def exp_so3(omega) -> np.ndarray:
    return Rotation.from_rotvec(np.asarray(omega, dtype=float)).as_matrix()


def rotation_angle(R) -> float:
    """Geodesic angle of ``R`` in radians."""
    R = np.asarray(R, dtype=float)
    # atan2 form keeps full precision near zero, where arccos of the trace does not
    s = 0.5 * np.linalg.norm([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    c = (np.trace(R) - 1.0) / 2.0
    return float(np.arctan2(s, c))


def pose_delta(a: PoseSE3, b: PoseSE3) -> tuple[float, float]:
    """Translation and rotation-angle difference between two poses."""
    dt = float(np.linalg.norm(a.translation - b.translation))
    return dt, rotation_angle(a.rotation.T @ b.rotation)


def procrustes(source, target, weights=None) -> PoseSE3:
    """Least-squares rigid transform mapping ``source`` onto ``target``.

    Minimises ``sum ||R @ s_i + t - q_i||^2`` with the determinant sign
    fixed so the result is a proper rotation.
    """
    source = np.asarray(source, dtype=float)
    target = np.asarray(target, dtype=float)
    if weights is None:
        mu_s = source.mean(axis=0)
        mu_t = target.mean(axis=0)
        H = (source - mu_s).T @ (target - mu_t)
    else:
        w = np.asarray(weights, dtype=float)
        w = w / w.sum()
        mu_s = w @ source
        mu_t = w @ target
        H = ((source - mu_s) * w[:, None]).T @ (target - mu_t)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    if d == 0:
        d = 1.0
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return PoseSE3(R, mu_t - R @ mu_s)


def procrustes_batch(source, target):
    """Vectorised :func:`procrustes` over a batch of (B, n, 3) sets.

    Returns rotations (B, 3, 3) and translations (B, 3).
    """
    mu_s = source.mean(axis=1)
    mu_t = target.mean(axis=1)
    H = np.einsum("bni,bnj->bij", source - mu_s[:, None], target - mu_t[:, None])
    U, _, Vt = np.linalg.svd(H)
    V = np.swapaxes(Vt, 1, 2)
    Ut = np.swapaxes(U, 1, 2)
    d = np.sign(np.linalg.det(V @ Ut))
    d[d == 0] = 1.0
    D = np.zeros_like(H)
    D[:, 0, 0] = 1.0
    D[:, 1, 1] = 1.0
    D[:, 2, 2] = d
    R = V @ D @ Ut
    t = mu_t - np.einsum("bij,bj->bi", R, mu_s)
    return R, t
