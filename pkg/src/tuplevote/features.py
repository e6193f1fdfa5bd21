"""N-point tuple sampling and the tuple feature vector.

The feature of a tuple ``(p_1, ..., p_N)`` is ``[F1 | F2 | F3]``:

* F1: ``p_j - p_i`` for every pair ``i < j`` in lexicographic order (3 values each);
* F2: ``|n_i . n_j|`` for the same pairs;
* F3: the per-point descriptors, in tuple order.

Only the first two points of a tuple cast votes downstream.
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np
from scipy.spatial import cKDTree

from .geometry import PointCloud
from .targets import DEGENERATE_PAIR


@dataclass(frozen=True)
class DescriptorConfig:
    radius: float = 0.02
    distance_bins: int = 8
    normal_bins: int = 8
    offset_bins: int = 8

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("descriptor radius must be positive")

    @property
    def dim(self) -> int:
        return self.distance_bins + self.normal_bins + self.offset_bins


@dataclass
class TupleBatch:
    """K ordered tuples of N point indices, plus optional training targets."""

    indices: np.ndarray  # (K, N)
    features: np.ndarray | None = None  # (K, F)
    gt_canonical: np.ndarray | None = None  # (K, 2, 3)
    gt_scale: np.ndarray | None = None  # (K, 3)

    def __len__(self) -> int:
        return len(self.indices)

    @property
    def n(self) -> int:
        return self.indices.shape[1]


def pair_list(n: int) -> list[tuple[int, int]]:
    return list(combinations(range(n), 2))


def feature_dim(n: int, descriptor_dim: int) -> int:
    m = n * (n - 1) // 2
    return 3 * m + m + n * descriptor_dim


def sample_tuples(
    cloud: PointCloud, k: int, n: int = 5, seed: int | np.random.Generator | None = 0
) -> np.ndarray:
    """Draw ``k`` tuples of ``n`` distinct indices uniformly at random.

    The two voting slots are filled from a stream of concatenated random
    permutations of the cloud, so every index is marginally uniform while
    each point casts (almost) the same number of pair votes. The remaining
    slots are independent uniform draws. Tuples with a repeated index or
    whose first two points coincide (closer than 1e-9 m) are redrawn i.i.d.
    """
    npts = len(cloud)
    if n < 2:
        raise ValueError("tuples need at least two points")
    if k < 1:
        raise ValueError("k must be positive")
    if npts < n:
        raise ValueError(f"cloud has {npts} points, fewer than tuple size {n}")
    rng = np.random.default_rng(seed)
    P = cloud.points
    stream = np.concatenate([rng.permutation(npts) for _ in range(-(-2 * k // npts))])
    draw = np.empty((k, n), dtype=np.int64)
    draw[:, :2] = stream[: 2 * k].reshape(k, 2)
    draw[:, 2:] = rng.integers(0, npts, size=(k, n - 2))
    out = np.empty((k, n), dtype=np.int64)
    todo = np.arange(k)
    for _ in range(10_000):
        s = np.sort(draw, axis=1)
        ok = np.all(s[:, 1:] != s[:, :-1], axis=1)
        ok &= np.linalg.norm(P[draw[:, 1]] - P[draw[:, 0]], axis=1) > DEGENERATE_PAIR
        out[todo[ok]] = draw[ok]
        todo = todo[~ok]
        if len(todo) == 0:
            return out
        if npts < 4 * n:
            draw = np.stack([rng.choice(npts, n, replace=False) for _ in todo])
        else:
            draw = rng.integers(0, npts, size=(len(todo), n))
    raise ValueError("could not draw tuples with a non-degenerate first pair")


def compute_features(cloud: PointCloud, indices: np.ndarray) -> np.ndarray:
    """Feature vectors for a ``(K, N)`` index array."""
    if cloud.normals is None:
        raise ValueError("features need normals")
    indices = np.asarray(indices)
    n = indices.shape[1]
    pairs = np.array(pair_list(n))
    P = cloud.points[indices]
    Nrm = cloud.normals[indices]
    f1 = (P[:, pairs[:, 1]] - P[:, pairs[:, 0]]).reshape(len(indices), -1)
    dots = np.einsum("kpi,kpi->kp", Nrm[:, pairs[:, 0]], Nrm[:, pairs[:, 1]])
    f2 = np.minimum(np.abs(dots), 1.0)
    parts = [f1, f2]
    if cloud.descriptors is not None:
        parts.append(cloud.descriptors[indices].reshape(len(indices), -1))
    return np.concatenate(parts, axis=1)


def local_descriptors(cloud: PointCloud, cfg: DescriptorConfig = DescriptorConfig()):
    """Rotation-invariant three-block histogram for every point.

    Blocks, each L1-normalized over the neighbours within ``cfg.radius``:
    neighbour distances over ``[0, radius]``; ``|n_c . n_j|`` over ``[0, 1]``;
    ``|n_c . (q_j - p_c)/|q_j - p_c||`` over ``[0, 1]``.

    Returns ``(descriptors (n, D), empty (n,) bool)``; points without
    neighbours get a zero row and ``empty=True``.
    """
    if cloud.normals is None:
        raise ValueError("descriptors need normals")
    P, Nrm = cloud.points, cloud.normals
    npts = len(P)
    pairs = cKDTree(P).query_pairs(cfg.radius, output_type="ndarray")
    centers = np.concatenate([pairs[:, 0], pairs[:, 1]]).astype(np.int64)
    others = np.concatenate([pairs[:, 1], pairs[:, 0]]).astype(np.int64)
    off = P[others] - P[centers]
    dist = np.linalg.norm(off, axis=1)
    keep = dist > 0
    centers, others, off, dist = centers[keep], others[keep], off[keep], dist[keep]

    def block(values, bins):
        b = np.clip((values * bins).astype(np.int64), 0, bins - 1)
        h = np.bincount(centers * bins + b, minlength=npts * bins).reshape(npts, bins).astype(float)
        tot = h.sum(axis=1, keepdims=True)
        return np.divide(h, tot, out=np.zeros_like(h), where=tot > 0)

    nc = Nrm[centers]
    d_block = block(dist / cfg.radius, cfg.distance_bins)
    n_block = block(np.minimum(np.abs(np.einsum("ij,ij->i", nc, Nrm[others])), 1.0), cfg.normal_bins)
    o_block = block(
        np.minimum(np.abs(np.einsum("ij,ij->i", nc, off)) / dist, 1.0), cfg.offset_bins
    )
    desc = np.hstack([d_block, n_block, o_block])
    empty = np.bincount(centers, minlength=npts) == 0
    return desc, empty


def local_descriptor(cloud: PointCloud, index: int, cfg: DescriptorConfig = DescriptorConfig()):
    """Descriptor of a single point; see :func:`local_descriptors`."""
    desc, empty = local_descriptors(cloud, cfg)
    return desc[index], bool(empty[index])
