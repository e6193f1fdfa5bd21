"""Synthetic training data: rendered views turned into tuple feature batches."""
from __future__ import annotations

import numpy as np

from .features import TupleBatch, compute_features, sample_tuples
from .meshio import Mesh
from .pipeline import PipelineConfig, prepare_cloud
from .scene import EmptyViewError, NoiseConfig, SceneSample, corrupt, random_pose, sample_view


def render_views(mesh: Mesh, scale, count: int, seed: int, mode: str = "tabletop",
                 noise: NoiseConfig | None = None) -> list[SceneSample]:
    """``count`` views of ``mesh`` under random poses, one RNG stream per view.

    Views that miss the frustum are redrawn with the next sub-seed.
    """
    out = []
    sub = 0
    while len(out) < count:
        rng = np.random.default_rng([seed, len(out), sub])
        pose = random_pose(rng, scale, mode=mode)
        try:
            s = sample_view(mesh, pose)
        except EmptyViewError:
            sub += 1
            continue
        if noise is not None:
            s = corrupt(s, noise, seed=int(rng.integers(2**31)))
        out.append(s)
    return out


def view_batch(sample: SceneSample, tuples: int, cfg: PipelineConfig, seed: int) -> TupleBatch:
    """Tuples from one view with their features and ground-truth targets.

    Tuples whose first two points are clutter carry NaN targets; callers
    training on clean views never see them.
    """
    cloud = prepare_cloud(sample.cloud, cfg)
    idx = sample_tuples(cloud, tuples, cfg.tuple_size, seed)
    feats = compute_features(cloud, idx)
    gc = sample.canonical[idx[:, :2]]
    gs = np.tile(sample.gt_pose.scale, (len(idx), 1))
    return TupleBatch(idx, feats, gc, gs)


def stack_batches(batches: list[TupleBatch]):
    """Concatenate batches into ``(features, gt_canonical, gt_scale)`` arrays."""
    return (
        np.concatenate([b.features for b in batches]),
        np.concatenate([b.gt_canonical for b in batches]),
        np.concatenate([b.gt_scale for b in batches]),
    )


def build_training_set(mesh: Mesh, scale, views: int, tuples_per_view: int, seed: int,
                       cfg: PipelineConfig = PipelineConfig(), mode: str = "tabletop"):
    samples = render_views(mesh, scale, views, seed, mode)
    batches = [view_batch(s, tuples_per_view, cfg, seed + i) for i, s in enumerate(samples)]
    return stack_batches(batches)


class TupleSource:
    """Per-epoch training arrays drawn from fixed views.

    Normals and descriptors are computed once per view on the full cloud,
    then each view keeps a uniform pool of ``pool`` points to bound memory.
    Every epoch draws fresh tuples from the pools with an epoch-dependent
    seed. Tuples whose first two points carry no ground truth (clutter) are
    dropped.
    """

    def __init__(self, samples: list[SceneSample], tuples_per_view: int,
                 cfg: PipelineConfig = PipelineConfig(), seed: int = 0, pool: int = 400):
        self.pools = []
        for i, s in enumerate(samples):
            cloud = prepare_cloud(s.cloud, cfg)
            rng = np.random.default_rng([seed, i])
            keep = np.sort(rng.permutation(len(cloud))[:pool])
            self.pools.append((cloud.subset(keep), s.canonical[keep], s.gt_pose.scale))
        self.tuples_per_view = tuples_per_view
        self.cfg = cfg
        self.seed = seed

    def __len__(self) -> int:
        return len(self.pools)

    def __call__(self, epoch: int):
        batches = []
        for i, (cloud, canonical, scale) in enumerate(self.pools):
            idx = sample_tuples(cloud, self.tuples_per_view, self.cfg.tuple_size,
                                [self.seed, epoch, i])
            gc = canonical[idx[:, :2]]
            ok = ~np.isnan(gc).any(axis=(1, 2))
            idx, gc = idx[ok], gc[ok]
            batches.append(TupleBatch(idx, compute_features(cloud, idx), gc,
                                      np.tile(scale, (len(idx), 1))))
        return stack_batches(batches)
