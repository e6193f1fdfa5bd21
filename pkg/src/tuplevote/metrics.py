"""Pose accuracy metrics: n-degree/m-cm AP, 3D box IoU, ADD(-S) AUC."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geometry import OrientedBox, Pose9D, rotation_angle_deg, so3_exp

ROT_THRESHOLDS_DEG = (5.0, 10.0, 15.0)
TRANS_THRESHOLDS_CM = (2.0, 5.0, 10.0)
IOU_THRESHOLDS = (0.25, 0.5)
AUC_MAX = 0.10

AXES = {"x": np.array([1.0, 0, 0]), "y": np.array([0, 1.0, 0]), "z": np.array([0, 0, 1.0])}


@dataclass(frozen=True)
class PoseError:
    rot_deg: float
    trans_cm: float


def _axis(symmetry_axis):
    if symmetry_axis is None:
        return None
    if isinstance(symmetry_axis, str):
        return AXES[symmetry_axis]
    a = np.asarray(symmetry_axis, float)
    return a / np.linalg.norm(a)


def pose_error(pred: Pose9D, gt: Pose9D, symmetry_axis=None) -> PoseError:
    """Geodesic rotation error and translation error in cm.

    With a canonical ``symmetry_axis`` the rotation error is minimized over
    all rotations about that axis, which equals the angle between the axis
    images under the two rotations.
    """
    axis = _axis(symmetry_axis)
    if axis is None:
        rot = rotation_angle_deg(pred.rotation, gt.rotation)
    else:
        c = np.clip((pred.rotation @ axis) @ (gt.rotation @ axis), -1.0, 1.0)
        rot = float(np.degrees(np.arccos(c)))
    trans = float(np.linalg.norm(pred.translation - gt.translation) * 100.0)
    return PoseError(rot, trans)


def align_symmetric(pred: Pose9D, gt: Pose9D, symmetry_axis) -> Pose9D:
    """Rotate ``pred`` about its symmetry axis to best match ``gt``."""
    axis = _axis(symmetry_axis)
    if axis is None:
        return pred
    Q = gt.rotation.T @ pred.rotation
    # maximize trace(Q @ Rot(axis, phi)) in closed form
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    a = np.trace(Q @ K)
    b = -np.trace(Q @ K @ K)
    phi = np.arctan2(a, b)
    return Pose9D(pred.rotation @ so3_exp(axis * phi), pred.translation, pred.scale)


def box_iou(a: OrientedBox, b: OrientedBox, samples: int = 100_000) -> float:
    """IoU of two oriented boxes by counting a regular lattice of cell
    centers spanning the AABB of their union."""
    corners = np.vstack([a.corners(), b.corners()])
    lo, hi = corners.min(0), corners.max(0)
    per_axis = max(2, int(round(samples ** (1 / 3))))
    axes = [lo[i] + (np.arange(per_axis) + 0.5) * (hi[i] - lo[i]) / per_axis for i in range(3)]
    g = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    ina, inb = a.contains(g), b.contains(g)
    union = np.count_nonzero(ina | inb)
    if union == 0:
        return 0.0
    return np.count_nonzero(ina & inb) / union


def add_metric(pred: Pose9D, gt: Pose9D, model_points: np.ndarray, symmetric: bool = False) -> float:
    """ADD (mean corresponding distance) or ADD-S (mean closest distance).

    ``model_points`` are canonical; both poses apply their own scale.
    """
    pts = np.asarray(model_points, float)
    if len(pts) == 0:
        raise ValueError("need at least one model point")
    a = pred.apply(pts)
    b = gt.apply(pts)
    if not symmetric:
        return float(np.linalg.norm(a - b, axis=1).mean())
    d, _ = cKDTree(b).query(a)
    return float(d.mean())


def auc(values, max_threshold: float = AUC_MAX) -> float:
    """Area under the accuracy-vs-threshold curve on ``[0, max_threshold]``,
    normalized to ``[0, 1]``. The empirical CDF is a step function, so the
    integral is exact."""
    v = np.asarray(values, float)
    if len(v) == 0:
        raise ValueError("need at least one value")
    v = np.where(np.isfinite(v), v, np.inf)
    return float(np.mean(np.clip(1.0 - v / max_threshold, 0.0, 1.0)))


def accuracy_curve(values, max_threshold: float = AUC_MAX, steps: int = 101):
    th = np.linspace(0, max_threshold, steps)
    v = np.asarray(values, float)
    return th, np.array([(v <= x).mean() for x in th])


@dataclass
class SampleScore:
    sample_id: str
    rot_deg: float
    trans_cm: float
    iou: float
    add: float
    adds: float
    symmetric: bool
    missing: bool = False


@dataclass
class EvalReport:
    pose_ap: dict[tuple[float, float], float]
    iou_ap: dict[float, float]
    add_auc: float
    adds_auc: float
    add_s_auc: float  # ADD for asymmetric samples, ADD-S for symmetric ones
    count: int
    scores: list[SampleScore] = field(default_factory=list)

    def rows(self) -> list[tuple[str, float]]:
        out = [(f"{int(n)}deg_{int(m)}cm", v) for (n, m), v in self.pose_ap.items()]
        out += [(f"3D{int(round(t * 100))}", v) for t, v in self.iou_ap.items()]
        out += [("ADD_AUC", self.add_auc), ("ADD-S_AUC", self.adds_auc),
                ("ADD(-S)_AUC", self.add_s_auc), ("count", float(self.count))]
        return out

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("metric,value\n")
            for k, v in self.rows():
                fh.write(f"{k},{v:.6f}\n")

    def table(self) -> str:
        lines = [f"{'metric':<14}{'value':>10}", "-" * 24]
        lines += [f"{k:<14}{v:>10.4f}" for k, v in self.rows()]
        return "\n".join(lines) + "\n"

    def scores_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("id,rot_deg,trans_cm,iou,add,adds,symmetric,missing\n")
            for s in self.scores:
                fh.write(f"{s.sample_id},{s.rot_deg:.6f},{s.trans_cm:.6f},{s.iou:.6f},"
                         f"{s.add:.6f},{s.adds:.6f},{int(s.symmetric)},{int(s.missing)}\n")

    def curves_csv(self, path) -> None:
        th, add_c = accuracy_curve([s.add for s in self.scores])
        _, adds_c = accuracy_curve([s.adds for s in self.scores])
        with open(path, "w") as fh:
            fh.write("threshold_m,add_accuracy,adds_accuracy\n")
            for row in zip(th, add_c, adds_c):
                fh.write(",".join(f"{x:.6f}" for x in row) + "\n")


def score_sample(sample_id: str, pred: Pose9D | None, gt: Pose9D, model_points: np.ndarray,
                 symmetry_axis=None, iou_samples: int = 100_000) -> SampleScore:
    symmetric = symmetry_axis is not None
    if pred is None:
        return SampleScore(sample_id, 180.0, np.inf, 0.0, np.inf, np.inf, symmetric, missing=True)
    err = pose_error(pred, gt, symmetry_axis)
    aligned = align_symmetric(pred, gt, symmetry_axis)
    iou = box_iou(OrientedBox(aligned), OrientedBox(gt), iou_samples)
    return SampleScore(
        sample_id, err.rot_deg, err.trans_cm, iou,
        add_metric(pred, gt, model_points, False), add_metric(pred, gt, model_points, True),
        symmetric,
    )


def summarize(scores: list[SampleScore]) -> EvalReport:
    """AP tables over samples sorted by id; one object per sample, so AP
    reduces to the fraction of samples within each threshold."""
    scores = sorted(scores, key=lambda s: s.sample_id)
    rot = np.array([s.rot_deg for s in scores])
    tr = np.array([s.trans_cm for s in scores])
    iou = np.array([s.iou for s in scores])
    pose_ap = {
        (n, m): float(np.mean((rot <= n) & (tr <= m)))
        for n in ROT_THRESHOLDS_DEG for m in TRANS_THRESHOLDS_CM
    }
    iou_ap = {t: float(np.mean(iou >= t - 1e-12)) for t in IOU_THRESHOLDS}
    add = [s.add for s in scores]
    adds = [s.adds for s in scores]
    mixed = [s.adds if s.symmetric else s.add for s in scores]
    return EvalReport(pose_ap, iou_ap, auc(add), auc(adds), auc(mixed), len(scores), scores)
