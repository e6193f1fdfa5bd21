"""Closed-form voting targets and their candidate reconstructions.

For a point pair ``(p1, p2)`` with unit direction ``d``:

* center targets ``mu = (o - p1) . d`` and ``nu = |o - (p1 + mu d)|`` place
  the center on a circle of radius ``nu`` around ``c = p1 + mu d``;
* orientation targets ``alpha = e1 . d`` and ``beta = e2 . d`` place each
  basis vector on a cone around ``d``.

All functions broadcast over leading axes (``(..., 3)`` inputs).
"""
from __future__ import annotations

import numpy as np

DEGENERATE_PAIR = 1e-9
TWO_PI = 2.0 * np.pi


class DegeneratePairError(ValueError):
    def __init__(self, msg: str = "degenerate pair"):
        super().__init__(msg)


def pair_direction(p1, p2) -> np.ndarray:
    diff = np.asarray(p2, float) - np.asarray(p1, float)
    length = np.linalg.norm(diff, axis=-1, keepdims=True)
    if np.any(length <= DEGENERATE_PAIR):
        raise DegeneratePairError()
    return diff / length


def perpendicular(d: np.ndarray) -> np.ndarray:
    """Unit vector orthogonal to ``d``, built from the least-aligned axis.

    Ties go to the lowest axis (x < y < z).
    """
    d = np.asarray(d, float)
    axis = np.argmin(np.abs(d), axis=-1)
    e = np.zeros_like(d)
    np.put_along_axis(e, axis[..., None], 1.0, axis=-1)
    v = e - np.sum(e * d, axis=-1, keepdims=True) * d
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def wrap_angle(a):
    """Wrap radians into ``[0, 2 pi)``."""
    w = np.mod(a, TWO_PI)
    return np.where(w >= TWO_PI, 0.0, w)


def center_targets(o, p1, p2) -> tuple[np.ndarray, np.ndarray]:
    """``(mu, nu)`` of center ``o`` relative to the pair ``(p1, p2)``."""
    o, p1 = np.asarray(o, float), np.asarray(p1, float)
    d = pair_direction(p1, p2)
    mu = np.sum((o - p1) * d, axis=-1)
    nu = np.linalg.norm(o - (p1 + mu[..., None] * d), axis=-1)
    return mu, nu


def _circle(center, radius, sigma, d):
    """Points ``center + radius (cos s d_perp + sin s d x d_perp)``.

    A scalar ``sigma`` gives ``(..., 3)``; a 1-d ``sigma`` of length S gives
    ``(..., S, 3)``.
    """
    dp = perpendicular(d)
    db = np.cross(d, dp)
    sigma = np.asarray(sigma, float)
    radius = np.asarray(radius, float)
    if sigma.ndim == 0:
        ring = np.cos(sigma) * dp + np.sin(sigma) * db
        return center + radius[..., None] * ring
    cs = np.stack([np.cos(sigma), np.sin(sigma)], axis=1)  # (S, 2)
    ring = cs @ np.stack([dp, db], axis=-2)  # (..., S, 3)
    ring *= radius[..., None, None]
    ring += center[..., None, :]
    return ring


def center_candidate(mu, nu, sigma, p1, p2) -> np.ndarray:
    """Reconstruct the center hypothesis for radial offset(s) ``sigma``."""
    p1 = np.asarray(p1, float)
    d = pair_direction(p1, p2)
    c = p1 + np.asarray(mu, float)[..., None] * d
    return _circle(c, nu, sigma, d)


def orientation_targets(e1, e2, p1, p2) -> tuple[np.ndarray, np.ndarray]:
    """Cosines ``(alpha, beta)`` between the basis vectors and the pair direction."""
    d = pair_direction(p1, p2)
    alpha = np.sum(np.asarray(e1, float) * d, axis=-1)
    beta = np.sum(np.asarray(e2, float) * d, axis=-1)
    return np.clip(alpha, -1.0, 1.0), np.clip(beta, -1.0, 1.0)


def orientation_candidate(alpha, theta, p1, p2) -> np.ndarray:
    """Unit vector(s) ``u`` on the cone ``u . d = alpha`` at cone angle ``theta``."""
    alpha = np.asarray(alpha, float)
    if np.any(np.abs(alpha) > 1.0):
        raise ValueError("|alpha| must not exceed 1")
    d = pair_direction(p1, p2)
    radius = np.sqrt(np.maximum(0.0, 1.0 - alpha**2))
    return _circle(alpha[..., None] * d, radius, theta, d)
