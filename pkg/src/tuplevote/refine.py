"""Inference-time alignment of (R, t) to predicted canonical coordinates.

The objective is the mean squared alignment residual

    L(R, t) = mean_i |R^T (p_i - t) - q_i|^2,

with camera points ``p_i`` and metric canonical targets ``q_i``. Rotation
steps are taken on the tangent space with a left-multiplicative exponential
retraction; translation is Euclidean.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose9D, so3_exp

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RefineConfig:
    learning_rate: float = 1e-2
    iterations: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # translation steps are taken in units of this many meters
    translation_unit: float = 1.0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.iterations < 0:
            raise ValueError("learning rate must be positive and iterations nonnegative")


@dataclass
class RefineResult:
    pose: Pose9D
    initial_loss: float
    final_loss: float
    loss_trace: list[float] = field(default_factory=list)
    degenerate: bool = False

    def trace_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("iteration,loss\n")
            for i, v in enumerate(self.loss_trace):
                fh.write(f"{i},{v!r}\n")


def alignment_loss(R, t, cam, canon, weights=None) -> float:
    r = (cam - t) @ R - canon
    sq = np.sum(r * r, axis=1)
    if weights is None:
        return float(sq.mean())
    return float(np.sum(weights * sq) / np.sum(weights))


def alignment_grad(R, t, cam, canon, weights=None):
    """Gradient of :func:`alignment_loss` w.r.t. ``(omega, t)``.

    ``omega`` parameterizes the perturbation ``R <- exp(omega) R``.
    """
    a = cam - t
    r = a @ R - canon
    Rr = r @ R.T
    w = np.full(len(cam), 1.0 / len(cam)) if weights is None else weights / np.sum(weights)
    g_omega = 2.0 * np.sum(w[:, None] * np.cross(Rr, a), axis=0)
    g_t = -2.0 * np.sum(w[:, None] * Rr, axis=0)
    return g_omega, g_t


def _rank_deficient(canon: np.ndarray) -> bool:
    if len(canon) < 3:
        return True
    sv = np.linalg.svd(canon - canon.mean(0), compute_uv=False)
    return sv[1] <= 1e-9 * max(sv[0], 1e-300)


def closed_form_align(cam, canon, scale=None, weights=None) -> Pose9D:
    """Least-squares ``(R, t)`` with ``cam ~ R canon + t`` (orthogonal Procrustes).

    ``canon`` is metric; ``scale`` only labels the returned pose.
    """
    cam = np.asarray(cam, float)
    canon = np.asarray(canon, float)
    if _rank_deficient(canon) or _rank_deficient(cam):
        raise ValueError("degenerate configuration: need 3 non-collinear correspondences")
    w = np.ones(len(cam)) if weights is None else np.asarray(weights, float)
    w = w / w.sum()
    mc = w @ canon
    mp = w @ cam
    H = ((canon - mc) * w[:, None]).T @ (cam - mp)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    t = mp - R @ mc
    return Pose9D(R, t, np.ones(3) if scale is None else scale)


def refine(cam, canon, initial: Pose9D, cfg: RefineConfig = RefineConfig(), weights=None) -> RefineResult:
    """Adam on the (rotation, translation) tangent; returns the best iterate.

    ``canon`` must already be metric (``diag(s) @ p_bar``); the scale of
    ``initial`` is carried through unchanged.
    """
    cam = np.asarray(cam, float)
    canon = np.asarray(canon, float)
    R, t = initial.rotation.copy(), initial.translation.copy()
    loss0 = alignment_loss(R, t, cam, canon, weights)
    if _rank_deficient(canon):
        log.warning("rank-deficient correspondences; keeping the initial pose")
        return RefineResult(initial, loss0, loss0, [loss0], degenerate=True)
    unit = np.array([1.0, 1.0, 1.0, cfg.translation_unit, cfg.translation_unit, cfg.translation_unit])
    m = np.zeros(6)
    v = np.zeros(6)
    best = (loss0, R, t)
    trace = [loss0]
    for step in range(1, cfg.iterations + 1):
        g_omega, g_t = alignment_grad(R, t, cam, canon, weights)
        g = np.concatenate([g_omega, g_t])
        m = cfg.beta1 * m + (1 - cfg.beta1) * g
        v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
        mh = m / (1 - cfg.beta1**step)
        vh = v / (1 - cfg.beta2**step)
        delta = -cfg.learning_rate * mh / (np.sqrt(vh) + cfg.eps) * unit
        R = so3_exp(delta[:3]) @ R
        t = t + delta[3:]
        loss = alignment_loss(R, t, cam, canon, weights)
        trace.append(loss)
        if loss < best[0]:
            best = (loss, R, t)
    loss, R, t = best
    pose = Pose9D(R, t, initial.scale) if loss < loss0 else initial
    return RefineResult(pose, loss0, min(loss, loss0), trace)
