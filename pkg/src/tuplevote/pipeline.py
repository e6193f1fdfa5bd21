"""End-to-end pose estimation from a masked point cloud."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .features import DescriptorConfig, compute_features, local_descriptors, sample_tuples
from .geometry import PointCloud, Pose9D, estimate_normals
from .predictor import decode_coordinates, ensemble_select
from .refine import RefineConfig, RefineResult, alignment_loss, refine
from .voting import (
    CenterGrid,
    FilterConfig,
    OrientationVote,
    PairVotes,
    build_votes,
    filter_noisy_pairs,
    reweight,
    vote_center,
    vote_orientation,
    vote_scale,
)


@dataclass(frozen=True)
class PipelineConfig:
    tuples: int = 5000
    tuple_size: int = 5
    normal_k: int = 16
    estimate_normals: bool = True
    decode: str = "expectation"
    refine_enabled: bool = True
    seed: int = 0
    workers: int = 1
    descriptor: DescriptorConfig = field(default_factory=DescriptorConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)


@dataclass
class PoseEstimate:
    pose: Pose9D
    voted: Pose9D
    final_loss: float
    ambiguous: bool
    votes: PairVotes
    center_grid: CenterGrid
    orientation: OrientationVote
    refinement: RefineResult | None

    @property
    def center_cell(self) -> int:
        return int(np.argmax(self.center_grid.counts))


def prepare_cloud(cloud: PointCloud, cfg: PipelineConfig = PipelineConfig()) -> PointCloud:
    """Attach (re-)estimated normals and local descriptors."""
    if cfg.estimate_normals or cloud.normals is None:
        k = min(cfg.normal_k, len(cloud))
        normals, _ = estimate_normals(cloud.points, max(k, 3))
        cloud = cloud.with_normals(normals)
    desc, _ = local_descriptors(cloud, cfg.descriptor)
    return cloud.with_descriptors(desc)


def correspondences(votes: PairVotes, scale: np.ndarray):
    """Camera points and metric canonical targets of the kept records,
    re-expressed with the voted ``scale``."""
    k = votes.kept
    cam = np.vstack([votes.p1[k], votes.p2[k]])
    bar = np.vstack([votes.canon1[k] / votes.scale[k], votes.canon2[k] / votes.scale[k]])
    return cam, bar * scale


def estimate_pose(cloud: PointCloud, predictor, cfg: PipelineConfig = PipelineConfig(),
                  prepared: bool = False) -> PoseEstimate:
    """Sample tuples, predict canonical coordinates, vote, then refine."""
    if not prepared:
        cloud = prepare_cloud(cloud, cfg)
    pts = cloud.points
    indices = sample_tuples(cloud, cfg.tuples, cfg.tuple_size, cfg.seed)
    feats = compute_features(cloud, indices)
    pred = predictor.predict(feats, indices)
    canon = decode_coordinates(pred, cfg.decode, cfg.seed)
    votes = build_votes(pts, indices, canon, pred.scale)
    fc = cfg.filter
    center, grid = vote_center(votes, pts, fc, workers=cfg.workers)
    if fc.filtering:
        filter_noisy_pairs(votes, center, fc.tau)
    if fc.reweighting:
        reweight(votes, fc.eta, len(pts))
    if fc.reweight_center:
        center, grid = vote_center(votes, pts, fc, weights=votes.weight, workers=cfg.workers)
    ori = vote_orientation(votes, fc, workers=cfg.workers)
    scale = vote_scale(votes)
    voted = Pose9D(ori.rotation(), center, scale)
    cam, target = correspondences(votes, scale)
    result = None
    if cfg.refine_enabled:
        result = refine(cam, target, voted, cfg.refine)
        pose, loss = result.pose, result.final_loss
    else:
        pose, loss = voted, alignment_loss(voted.rotation, voted.translation, cam, target)
    return PoseEstimate(pose, voted, loss, ori.ambiguous, votes, grid, ori, result)


def estimate_pose_ensemble(cloud: PointCloud, predictors, cfg: PipelineConfig = PipelineConfig()):
    """Run every predictor and keep the one with the lowest refined loss.

    Returns ``(chosen_index, estimates)``.
    """
    cloud = prepare_cloud(cloud, cfg)
    estimates = [estimate_pose(cloud, p, cfg, prepared=True) for p in predictors]
    return ensemble_select([e.final_loss for e in estimates]), estimates
