"""Hough-style accumulation of center, orientation and scale votes.

Every tuple contributes one *pair vote record* built from its first two
points and their decoded canonical coordinates. Records vote for the center
on a voxel grid, are filtered against the winning center, re-weighted so
each point keeps a comparable influence, and then vote for the two basis
vectors on a spherical grid.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .geometry import CANONICAL_RIGHT, CANONICAL_UP
from .targets import (
    DEGENERATE_PAIR,
    center_candidate,
    center_targets,
    orientation_candidate,
    orientation_targets,
    perpendicular,
)

# Records per accumulation chunk. Chunks are summed in a fixed order, so the
# result does not depend on how many workers computed them.
CHUNK = 256


@dataclass(frozen=True)
class FilterConfig:
    tau: float = 0.5
    eta: float = 1.0
    sigma_samples: int = 360
    theta_samples: int = 360
    voxel: float = 0.002
    orientation_res_deg: float = 1.0
    # grid margin around the input AABB, as a multiple of its largest side
    grid_padding: float = 1.0
    filtering: bool = True
    reweighting: bool = True
    use_beta: bool = True
    # recast the center vote with the filtered, re-weighted records
    reweight_center: bool = False
    ambiguity_ratio: float = 1.5

    def __post_init__(self):
        if not 0.0 <= self.tau < 1.0:
            raise ValueError("tau must lie in [0, 1)")
        if self.sigma_samples < 1 or self.theta_samples < 1:
            raise ValueError("sample counts must be positive")
        if self.voxel <= 0 or self.orientation_res_deg <= 0:
            raise ValueError("grid resolutions must be positive")


@dataclass
class PairVotes:
    """Structure-of-arrays over K pair vote records."""

    tuple_index: np.ndarray
    idx1: np.ndarray
    idx2: np.ndarray
    p1: np.ndarray
    p2: np.ndarray
    canon1: np.ndarray  # metric canonical coordinates, diag(s) @ p_bar
    canon2: np.ndarray
    scale: np.ndarray
    mu: np.ndarray
    nu: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    epsilon: np.ndarray = None
    kept: np.ndarray = None
    weight: np.ndarray = None
    dropped: int = 0

    def __post_init__(self):
        k = len(self.idx1)
        if self.epsilon is None:
            self.epsilon = np.zeros(k)
        if self.kept is None:
            self.kept = np.ones(k, bool)
        if self.weight is None:
            self.weight = np.ones(k)

    def __len__(self) -> int:
        return len(self.idx1)

    def to_csv(self, path) -> None:
        cols = {
            "tuple": self.tuple_index, "i1": self.idx1, "i2": self.idx2,
            "mu": self.mu, "nu": self.nu, "alpha": self.alpha, "beta": self.beta,
            "epsilon": self.epsilon, "kept": self.kept.astype(int), "weight": self.weight,
        }
        with open(path, "w") as fh:
            fh.write(",".join(cols) + "\n")
            for row in zip(*cols.values()):
                fh.write(",".join(repr(x.item()) for x in row) + "\n")


def derive_pair_targets(canon1, canon2, scale):
    """Voting targets from canonical coordinates of a pair.

    Canonical points are first made metric (``diag(scale) @ p_bar``), then
    ``(mu, nu)`` are measured against the canonical origin and ``(alpha,
    beta)`` against the canonical up (+y) and right (+x) axes.

    Returns ``(mu, nu, alpha, beta, valid)``; degenerate pairs are invalid
    and carry NaN targets.
    """
    c1 = np.asarray(canon1, float) * scale
    c2 = np.asarray(canon2, float) * scale
    valid = np.linalg.norm(c2 - c1, axis=-1) > DEGENERATE_PAIR
    shape = np.shape(valid)
    mu, nu, alpha, beta = (np.full(shape, np.nan) for _ in range(4))
    if np.any(valid):
        a, b = c1[valid], c2[valid]
        mu[valid], nu[valid] = center_targets(np.zeros(3), a, b)
        alpha[valid], beta[valid] = orientation_targets(CANONICAL_UP, CANONICAL_RIGHT, a, b)
    return mu, nu, alpha, beta, valid


def build_votes(points: np.ndarray, indices: np.ndarray, canon: np.ndarray, scale: np.ndarray) -> PairVotes:
    """Records for tuples ``indices`` given decoded canonical coordinates
    ``canon (K, 2, 3)`` and predicted scales ``(K, 3)``."""
    i1, i2 = indices[:, 0], indices[:, 1]
    mu, nu, alpha, beta, valid = derive_pair_targets(canon[:, 0], canon[:, 1], scale)
    keep = np.flatnonzero(valid)
    return PairVotes(
        tuple_index=keep, idx1=i1[keep], idx2=i2[keep],
        p1=points[i1[keep]], p2=points[i2[keep]],
        canon1=canon[keep, 0] * scale[keep], canon2=canon[keep, 1] * scale[keep],
        scale=scale[keep], mu=mu[keep], nu=nu[keep], alpha=alpha[keep], beta=beta[keep],
        dropped=int((~valid).sum()),
    )


def _sparse_bincount(lin: np.ndarray, w: np.ndarray):
    cells, inv = np.unique(lin, return_inverse=True)
    return cells, np.bincount(inv.ravel(), w, minlength=len(cells))


def _accumulate(n_cells: int, chunk_fn, n_records: int, workers: int) -> np.ndarray:
    """Sum per-chunk sparse partial grids into a dense grid in chunk order."""
    starts = range(0, n_records, CHUNK)
    total = np.zeros(n_cells)

    def run(a):
        return chunk_fn(a, min(a + CHUNK, n_records))

    if workers <= 1:
        parts = map(run, starts)
    else:
        ex = ThreadPoolExecutor(max_workers=workers)
        parts = ex.map(run, starts)
    for cells, sums in parts:
        total[cells] += sums
    if workers > 1:
        ex.shutdown()
    return total


@dataclass
class CenterGrid:
    origin: np.ndarray
    voxel: float
    dims: tuple[int, int, int]
    counts: np.ndarray = field(default=None, repr=False)

    @classmethod
    def around(cls, points: np.ndarray, voxel: float = 0.002, padding: float = 1.0) -> "CenterGrid":
        lo, hi = points.min(axis=0), points.max(axis=0)
        pad = padding * float(np.max(hi - lo))
        lo, hi = lo - pad, hi + pad
        dims = tuple(int(x) for x in np.floor((hi - lo) / voxel).astype(int) + 1)
        return cls(lo, voxel, dims)

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.dims))

    def linear_index(self, pts: np.ndarray):
        ijk = np.floor((pts - self.origin) / self.voxel).astype(np.int64)
        inside = np.all((ijk >= 0) & (ijk < np.array(self.dims)), axis=-1)
        ijk = np.where(inside[:, None], ijk, 0)
        return np.ravel_multi_index(tuple(ijk.T), self.dims), inside

    def cell_center(self, lin: int) -> np.ndarray:
        ijk = np.array(np.unravel_index(lin, self.dims))
        return self.origin + (ijk + 0.5) * self.voxel


def vote_center(votes: PairVotes, cloud_points: np.ndarray, cfg: FilterConfig = FilterConfig(),
                weights: np.ndarray | None = None, workers: int = 1):
    """Cast ``sigma_samples`` candidates per record; return ``(center, grid)``.

    The winner is the center of the heaviest voxel (lowest index on ties).
    """
    if len(votes) == 0:
        raise ValueError("no vote records")
    grid = CenterGrid.around(cloud_points, cfg.voxel, cfg.grid_padding)
    sig = 2 * np.pi * np.arange(cfg.sigma_samples) / cfg.sigma_samples
    w = np.ones(len(votes)) if weights is None else np.asarray(weights, float)

    def chunk(a, b):
        cand = center_candidate(votes.mu[a:b], votes.nu[a:b], sig, votes.p1[a:b], votes.p2[a:b])
        lin, inside = grid.linear_index(cand.reshape(-1, 3))
        ww = np.repeat(w[a:b], cfg.sigma_samples)
        return _sparse_bincount(lin[inside], ww[inside])

    grid.counts = _accumulate(grid.n_cells, chunk, len(votes), workers)
    best = int(np.argmax(grid.counts))
    return grid.cell_center(best), grid


def filter_noisy_pairs(votes: PairVotes, center: np.ndarray, tau: float) -> PairVotes:
    """Mark the ``ceil(tau K)`` records with the largest center error discarded.

    The error compares the targets implied by ``center`` in the camera frame
    with the predicted canonical targets. Ties keep input order: among equal
    errors the later records go first.
    """
    mu_o, nu_o = center_targets(center, votes.p1, votes.p2)
    votes.epsilon = np.hypot(mu_o - votes.mu, nu_o - votes.nu)
    k = len(votes)
    n_drop = math.ceil(round(tau * k, 9))
    order = np.argsort(votes.epsilon, kind="stable")
    kept = np.ones(k, bool)
    if n_drop:
        kept[order[k - n_drop:]] = False
    votes.kept = kept
    votes.weight = np.where(kept, votes.weight, 0.0)
    return votes


def point_membership(votes: PairVotes, n_points: int) -> np.ndarray:
    """Number of kept records containing each point, in either slot."""
    k = votes.kept
    return (np.bincount(votes.idx1[k], minlength=n_points)
            + np.bincount(votes.idx2[k], minlength=n_points))


def reweight(votes: PairVotes, eta: float, n_points: int | None = None) -> PairVotes:
    """``w = 1/(m(p1) + eta) * 1/(m(p2) + eta)`` for kept records, 0 otherwise."""
    if n_points is None:
        n_points = int(max(votes.idx1.max(), votes.idx2.max())) + 1
    m = point_membership(votes, n_points).astype(float)
    w = 1.0 / (m[votes.idx1] + eta) / (m[votes.idx2] + eta)
    votes.weight = np.where(votes.kept, w, 0.0)
    return votes


@dataclass
class OrientationGrid:
    """Equirectangular grid over (inclination from +z, azimuth)."""

    resolution_deg: float = 1.0
    counts: np.ndarray = field(default=None, repr=False)

    @property
    def shape(self) -> tuple[int, int]:
        return int(round(180 / self.resolution_deg)), int(round(360 / self.resolution_deg))

    def bin_index(self, u: np.ndarray) -> np.ndarray:
        n_inc, n_az = self.shape
        res = np.radians(self.resolution_deg)
        inc = np.arccos(np.clip(u[..., 2], -1.0, 1.0))
        az = np.mod(np.arctan2(u[..., 1], u[..., 0]), 2 * np.pi)
        i = np.minimum((inc / res).astype(np.int64), n_inc - 1)
        j = (az / res).astype(np.int64) % n_az
        return i * n_az + j

    def area_weight(self) -> np.ndarray:
        """Per-row factor compensating the shrinking bin area near the poles."""
        n_inc, _ = self.shape
        res = np.radians(self.resolution_deg)
        inc = (np.arange(n_inc) + 0.5) * res
        return 1.0 / np.maximum(np.sin(inc), np.sin(res))

    def direction(self, lin: int) -> np.ndarray:
        n_inc, n_az = self.shape
        res = np.radians(self.resolution_deg)
        i, j = divmod(int(lin), n_az)
        inc, az = (i + 0.5) * res, (j + 0.5) * res
        return np.array([np.sin(inc) * np.cos(az), np.sin(inc) * np.sin(az), np.cos(inc)])


def _orientation_grid(votes: PairVotes, cosines: np.ndarray, cfg: FilterConfig, workers: int):
    grid = OrientationGrid(cfg.orientation_res_deg)
    n_inc, n_az = grid.shape
    theta = 2 * np.pi * np.arange(cfg.theta_samples) / cfg.theta_samples
    row_w = grid.area_weight()
    sel = np.flatnonzero(votes.kept & (votes.weight > 0))
    w = votes.weight[sel]
    cos = cosines[sel]
    p1, p2 = votes.p1[sel], votes.p2[sel]

    def chunk(a, b):
        u = orientation_candidate(cos[a:b], theta, p1[a:b], p2[a:b])
        lin = grid.bin_index(u.reshape(-1, 3))
        ww = np.repeat(w[a:b], cfg.theta_samples) * row_w[lin // n_az]
        return _sparse_bincount(lin, ww)

    grid.counts = _accumulate(n_inc * n_az, chunk, len(sel), workers)
    return grid


@dataclass
class OrientationVote:
    e1: np.ndarray
    e2: np.ndarray
    ambiguous: bool
    up_grid: OrientationGrid
    right_grid: OrientationGrid | None

    def rotation(self) -> np.ndarray:
        """Columns map canonical x, y, z to e2, e1, e2 x e1."""
        return np.stack([self.e2, self.e1, np.cross(self.e2, self.e1)], axis=1)


def vote_orientation(votes: PairVotes, cfg: FilterConfig = FilterConfig(), workers: int = 1) -> OrientationVote:
    """Vote the up axis on alpha-cones and the right axis on beta-cones.

    The right axis is Gram-Schmidt projected against the winning up axis;
    a near-parallel winner falls through to the next-best bin.
    """
    if not np.any(votes.kept & (votes.weight > 0)):
        raise ValueError("no kept vote records with positive weight")
    up = _orientation_grid(votes, votes.alpha, cfg, workers)
    e1 = up.direction(int(np.argmax(up.counts)))
    right = None
    ambiguous = True
    e2 = None
    if cfg.use_beta:
        right = _orientation_grid(votes, votes.beta, cfg, workers)
        order = np.argsort(-right.counts, kind="stable")
        for lin in order:
            if right.counts[lin] <= 0:
                break
            cand = right.direction(int(lin))
            cand = cand - (cand @ e1) * e1
            nrm = np.linalg.norm(cand)
            if nrm > 1e-6:
                e2 = cand / nrm
                break
        nz = right.counts[right.counts > 0]
        ambiguous = bool(nz.max() / nz.mean() < cfg.ambiguity_ratio)
    if e2 is None:
        e2 = perpendicular(e1)
        ambiguous = True
    return OrientationVote(e1, e2, ambiguous, up, right)


def vote_scale(votes: PairVotes) -> np.ndarray:
    """Weighted mean of per-record scale predictions over kept records."""
    w = np.where(votes.kept, votes.weight, 0.0)
    if w.sum() <= 0:
        raise ValueError("no kept vote records with positive weight")
    return (w[:, None] * votes.scale).sum(axis=0) / w.sum()
