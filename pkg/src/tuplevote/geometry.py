"""Geometric primitives: poses, point clouds, SO(3) maps and normal estimation.

Conventions
-----------
* Points are ``(n, 3)`` float64 arrays in meters (camera frame) or in the
  normalized canonical cube ``[-1, 1]^3``.
* A :class:`Pose9D` maps canonical coordinates to the camera frame as
  ``p = R @ diag(s) @ p_bar + t``; ``s`` holds the per-axis half-extents.
* The camera sits at the origin and looks down +z.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

# Canonical object frame: e1 ("up") is +y, e2 ("right") is +x.
CANONICAL_UP = np.array([0.0, 1.0, 0.0])
CANONICAL_RIGHT = np.array([1.0, 0.0, 0.0])

ROTATION_TOL = 1e-9
UNIT_TOL = 1e-9
# Poses composed more often than this are projected back onto SO(3).
REORTHONORMALIZE_EVERY = 100


def hat(w: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix of ``w``; batched over leading axes."""
    w = np.asarray(w, dtype=float)
    out = np.zeros(w.shape[:-1] + (3, 3))
    out[..., 0, 1] = -w[..., 2]
    out[..., 0, 2] = w[..., 1]
    out[..., 1, 0] = w[..., 2]
    out[..., 1, 2] = -w[..., 0]
    out[..., 2, 0] = -w[..., 1]
    out[..., 2, 1] = w[..., 0]
    return out


def vee(S: np.ndarray) -> np.ndarray:
    return np.stack([S[..., 2, 1], S[..., 0, 2], S[..., 1, 0]], axis=-1)


def so3_exp(omega) -> np.ndarray:
    """Rodrigues exponential map from a rotation vector to a 3x3 rotation."""
    w = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(w)
    K = hat(w)
    if theta < 1e-8:
        # second-order Taylor expansion; exact to double precision here
        return np.eye(3) + K + 0.5 * K @ K
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + a * K + b * K @ K


def so3_log(R) -> np.ndarray:
    """Inverse of :func:`so3_exp` on rotation angles in ``[0, pi]``.

    Near ``pi`` the axis is read off the symmetric part of ``R`` using the
    column with the largest diagonal entry.
    """
    R = np.asarray(R, dtype=float)
    v = vee(R - R.T) / 2.0  # = sin(theta) * axis
    s = np.linalg.norm(v)
    c = (np.trace(R) - 1.0) / 2.0
    theta = np.arctan2(s, c)
    if theta < 1e-8:
        return v
    if c > -0.9:
        return theta / s * v
    S = (R + R.T) / 2.0 - c * np.eye(3)
    S /= 1.0 - c
    k = int(np.argmax(np.diag(S)))
    axis = S[:, k] / np.sqrt(S[k, k])
    axis /= np.linalg.norm(axis)
    if axis @ v < 0:
        axis = -axis
    return theta * axis


def polar_orthonormalize(R: np.ndarray) -> np.ndarray:
    """Closest rotation to ``R`` in the Frobenius sense."""
    U, _, Vt = np.linalg.svd(R)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def is_rotation(R, tol: float = ROTATION_TOL) -> bool:
    R = np.asarray(R, dtype=float)
    return (
        R.shape == (3, 3)
        and np.abs(R.T @ R - np.eye(3)).max() < tol
        and abs(np.linalg.det(R) - 1.0) < tol
    )


def rotation_angle_deg(Ra: np.ndarray, Rb: np.ndarray) -> float:
    """Geodesic distance between two rotations, in degrees."""
    c = (np.trace(Ra.T @ Rb) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Haar-uniform rotation via a normalized quaternion."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


@dataclass(frozen=True)
class Pose9D:
    rotation: np.ndarray
    translation: np.ndarray
    scale: np.ndarray = field(default_factory=lambda: np.ones(3))
    compositions: int = field(default=0, compare=False)

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float)
        t = np.array(self.translation, dtype=float).reshape(3)
        s = np.array(self.scale, dtype=float).reshape(3)
        if not is_rotation(R, 1e-6):
            raise ValueError("rotation is not in SO(3)")
        if not np.all(np.isfinite(t)):
            raise ValueError("translation must be finite")
        if not np.all(s > 0):
            raise ValueError("scale components must be strictly positive")
        for a in (R, t, s):
            a.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "scale", s)

    @classmethod
    def identity(cls) -> "Pose9D":
        return cls(np.eye(3), np.zeros(3), np.ones(3))

    def apply(self, canonical: np.ndarray) -> np.ndarray:
        """Canonical points -> camera frame."""
        return (np.asarray(canonical) * self.scale) @ self.rotation.T + self.translation

    def inverse_apply(self, points: np.ndarray) -> np.ndarray:
        """Camera-frame points -> canonical coordinates."""
        return ((np.asarray(points) - self.translation) @ self.rotation) / self.scale

    def inverse(self) -> "Pose9D":
        """Inverse of a pose with isotropic scale."""
        if not np.allclose(self.scale, self.scale[0], rtol=0, atol=0):
            raise ValueError("only isotropic-scale poses have a similarity inverse")
        c = self.scale[0]
        Rt = self.rotation.T
        return Pose9D(Rt, -(Rt @ self.translation) / c, np.full(3, 1.0 / c))

    def compose(self, other: "Pose9D") -> "Pose9D":
        """``self ∘ other``: apply ``other`` first.

        Closed only when ``self`` has isotropic scale.
        """
        if not np.allclose(self.scale, self.scale[0], rtol=0, atol=0):
            raise ValueError("outer pose of a composition must have isotropic scale")
        c = self.scale[0]
        R = self.rotation @ other.rotation
        n = self.compositions + other.compositions + 1
        if n > REORTHONORMALIZE_EVERY:
            R, n = polar_orthonormalize(R), 0
        t = c * self.rotation @ other.translation + self.translation
        return Pose9D(R, t, c * other.scale, compositions=n)


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    normals: np.ndarray | None = None
    descriptors: np.ndarray | None = None

    def __post_init__(self):
        P = np.array(self.points, dtype=float)
        if P.ndim != 2 or P.shape[1] != 3 or len(P) == 0:
            raise ValueError("points must be a nonempty (n, 3) array")
        object.__setattr__(self, "points", P)
        if self.normals is not None:
            N = np.array(self.normals, dtype=float)
            if N.shape != P.shape:
                raise ValueError("normals must match points in shape")
            object.__setattr__(self, "normals", N)
        if self.descriptors is not None:
            D = np.array(self.descriptors, dtype=float)
            if D.ndim != 2 or len(D) != len(P):
                raise ValueError("descriptors must be (n, D) with one row per point")
            object.__setattr__(self, "descriptors", D)

    def __len__(self) -> int:
        return len(self.points)

    def subset(self, idx) -> "PointCloud":
        return PointCloud(
            self.points[idx],
            None if self.normals is None else self.normals[idx],
            None if self.descriptors is None else self.descriptors[idx],
        )

    def with_normals(self, normals: np.ndarray) -> "PointCloud":
        return PointCloud(self.points, normals, self.descriptors)

    def with_descriptors(self, descriptors: np.ndarray) -> "PointCloud":
        return PointCloud(self.points, self.normals, descriptors)


@dataclass(frozen=True)
class OrientedBox:
    """Box ``{R diag(s) u + t : u in [-1, 1]^3}``."""

    pose: Pose9D

    def corners(self) -> np.ndarray:
        u = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], float)
        return self.pose.apply(u)

    def contains(self, pts: np.ndarray) -> np.ndarray:
        local = (pts - self.pose.translation) @ self.pose.rotation
        return np.all(np.abs(local) <= self.pose.scale, axis=-1)


def transform(cloud: PointCloud, pose: Pose9D) -> PointCloud:
    """Apply ``p -> R diag(s) p + t``; normals follow the inverse transpose."""
    normals = None
    if cloud.normals is not None:
        n = (cloud.normals / pose.scale) @ pose.rotation.T
        normals = n / np.linalg.norm(n, axis=1, keepdims=True)
    return PointCloud(pose.apply(cloud.points), normals, cloud.descriptors)


def estimate_normals(
    points: np.ndarray,
    k: int = 16,
    viewpoint=(0.0, 0.0, 0.0),
    degenerate_ratio: float = 1e-10,
) -> tuple[np.ndarray, np.ndarray]:
    """PCA normals from k-nearest neighbourhoods.

    Returns ``(normals, degenerate)``. Each normal is the eigenvector of the
    smallest eigenvalue of its neighbourhood covariance, flipped to face
    ``viewpoint``. Neighbourhoods whose covariance has rank < 2 are flagged
    and get the unit direction towards the viewpoint instead.
    """
    P = np.asarray(points, dtype=float)
    if k < 3:
        raise ValueError("k must be at least 3")
    if len(P) < k:
        raise ValueError(f"need at least k={k} points, got {len(P)}")
    _, idx = cKDTree(P).query(P, k=k)
    nb = P[idx]
    centered = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    evals, evecs = np.linalg.eigh(cov)
    normals = evecs[:, :, 0].copy()
    to_view = np.asarray(viewpoint, float) - P
    view_norm = np.linalg.norm(to_view, axis=1, keepdims=True)
    view_dir = np.divide(to_view, view_norm, out=np.tile([0.0, 0.0, -1.0], (len(P), 1)),
                         where=view_norm > 0)
    degenerate = evals[:, 1] <= degenerate_ratio * np.maximum(evals[:, 2], 1e-300)
    normals[degenerate] = view_dir[degenerate]
    flip = np.einsum("ij,ij->i", normals, to_view) < 0
    normals[flip] *= -1.0
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return normals, degenerate
