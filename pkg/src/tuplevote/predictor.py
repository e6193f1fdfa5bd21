"""Per-tuple canonical coordinate distributions and scale predictions.

Two predictors share one interface, ``predict(features, indices)``:

* :class:`OraclePredictor` reads ground-truth canonical coordinates from a
  synthetic scene and corrupts them in controlled ways;
* :class:`MLPPredictor` is a residual MLP trained with plain numpy backprop.

Each tuple yields a ``(2, 3, B)`` array: one categorical distribution over B
bins in ``[-1, 1]`` per axis for the first two tuple points.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

log = logging.getLogger(__name__)

BINS = 32


def bin_centers(bins: int = BINS) -> np.ndarray:
    return -1.0 + (2.0 * np.arange(bins) + 1.0) / bins


def coord_to_bin(coord, bins: int = BINS) -> np.ndarray:
    b = np.floor((np.asarray(coord) + 1.0) / 2.0 * bins).astype(np.int64)
    return np.clip(b, 0, bins - 1)


@dataclass
class CanonicalPrediction:
    dist: np.ndarray  # (K, 2, 3, B)
    scale: np.ndarray  # (K, 3)

    def __post_init__(self):
        if self.dist.ndim != 4 or self.dist.shape[1:3] != (2, 3):
            raise ValueError("dist must have shape (K, 2, 3, B)")
        if self.scale.shape != (len(self.dist), 3):
            raise ValueError("scale must have shape (K, 3)")

    def __len__(self) -> int:
        return len(self.dist)

    @property
    def bins(self) -> int:
        return self.dist.shape[-1]

    def validate(self, tol: float = 1e-6) -> None:
        if np.any(self.dist < 0):
            raise ValueError("negative probability")
        if np.any(np.abs(self.dist.sum(-1) - 1.0) > tol):
            raise ValueError("distribution rows must sum to 1")


def decode_coordinates(pred: CanonicalPrediction, mode: str = "expectation", seed=None):
    """Turn distributions into canonical points ``(K, 2, 3)``.

    ``expectation`` takes the mean bin center per axis; ``sample`` draws one
    bin per axis from the categorical distribution.
    """
    centers = bin_centers(pred.bins)
    if mode == "expectation":
        return pred.dist @ centers
    if mode == "sample":
        rng = np.random.default_rng(seed)
        cdf = np.cumsum(pred.dist, axis=-1)
        u = rng.random(pred.dist.shape[:-1] + (1,))
        idx = np.minimum((u > cdf).sum(-1), pred.bins - 1)
        return centers[idx]
    raise ValueError(f"unknown decode mode {mode!r}")


# --------------------------------------------------------------------------
# oracle


@dataclass(frozen=True)
class OracleConfig:
    coord_noise_sigma: float = 0.0
    collision_rate: float = 0.0
    scale_noise_sigma: float = 0.0
    # feature-hash bucket widths for collisions: first-pair distance, |n1.n2|
    hash_distance: float = 0.005
    hash_normal: float = 0.05

    def __post_init__(self):
        if min(self.coord_noise_sigma, self.collision_rate, self.scale_noise_sigma) < 0:
            raise ValueError("oracle noise parameters must be nonnegative")
        if self.collision_rate > 1:
            raise ValueError("collision_rate must lie in [0, 1]")


def feature_hash(features: np.ndarray, n: int, cfg: OracleConfig) -> np.ndarray:
    """Bucket id from the classic pair feature of the first two points."""
    m = n * (n - 1) // 2
    dist = np.linalg.norm(features[:, 0:3], axis=1)
    ndot = features[:, 3 * m]
    key = np.stack(
        [np.floor(dist / cfg.hash_distance), np.floor(ndot / cfg.hash_normal)], axis=1
    ).astype(np.int64)
    _, ids = np.unique(key, axis=0, return_inverse=True)
    return ids.ravel()


class OraclePredictor:
    """Ground-truth predictor for a known scene.

    Points whose canonical coordinate is NaN (injected clutter) receive a
    uniformly random coordinate, as an uninformed network would.
    """

    def __init__(self, canonical: np.ndarray, scale, cfg: OracleConfig = OracleConfig(),
                 seed: int = 0, bins: int = BINS):
        self.canonical = np.asarray(canonical, float)
        self.scale = np.asarray(scale, float)
        self.cfg = cfg
        self.seed = seed
        self.bins = bins

    @classmethod
    def for_sample(cls, sample, cfg: OracleConfig = OracleConfig(), seed: int = 0):
        return cls(sample.canonical, sample.gt_pose.scale, cfg, seed)

    def predict(self, features: np.ndarray, indices: np.ndarray) -> CanonicalPrediction:
        indices = np.asarray(indices)
        k = len(indices)
        rng = np.random.default_rng(self.seed)
        coords = self.canonical[indices[:, :2]].copy()  # (K, 2, 3)
        missing = np.isnan(coords)
        coords[missing] = rng.uniform(-1, 1, missing.sum())
        if self.cfg.coord_noise_sigma > 0:
            coords += rng.normal(0, self.cfg.coord_noise_sigma, coords.shape)
        b = coord_to_bin(coords, self.bins)
        dist = np.zeros((k, 2, 3, self.bins))
        np.put_along_axis(dist, b[..., None], 1.0, axis=-1)
        if self.cfg.collision_rate > 0:
            ids = feature_hash(features, indices.shape[1], self.cfg)
            sums = np.zeros((ids.max() + 1,) + dist.shape[1:])
            np.add.at(sums, ids, dist)
            mix = sums[ids] / np.bincount(ids)[ids][:, None, None, None]
            collide = rng.random(k) < self.cfg.collision_rate
            dist[collide] = mix[collide]
        scale = np.tile(self.scale, (k, 1))
        if self.cfg.scale_noise_sigma > 0:
            scale = np.abs(scale + rng.normal(0, self.cfg.scale_noise_sigma, scale.shape))
            scale = np.maximum(scale, 1e-6)
        return CanonicalPrediction(dist, scale)


# --------------------------------------------------------------------------
# MLP


@dataclass(frozen=True)
class PredictorConfig:
    hidden_width: int = 128
    hidden_layers: int = 4
    bins: int = BINS
    learning_rate: float = 1e-3
    epochs: int = 100
    lr_halving_period: int = 25
    batch_size: int = 256
    loss: str = "mse"  # or "ce"
    seed: int = 0

    def __post_init__(self):
        if min(self.hidden_width, self.hidden_layers, self.bins, self.epochs,
               self.lr_halving_period, self.batch_size) < 1:
            raise ValueError("predictor counts must be positive")
        if self.loss not in ("mse", "ce"):
            raise ValueError("loss must be 'mse' or 'ce'")


class DimensionMismatch(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


class MLPPredictor:
    """Residual MLP: input layer, ``hidden_layers`` residual blocks, then a
    softmax coordinate head and a log-scale head on the shared trunk."""

    def __init__(self, in_dim: int, cfg: PredictorConfig = PredictorConfig(),
                 seed: int | None = None):
        self.in_dim = in_dim
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
        H, B = cfg.hidden_width, cfg.bins
        p = {"W_in": rng.normal(0, np.sqrt(2.0 / in_dim), (in_dim, H)), "b_in": np.zeros(H)}
        for i in range(cfg.hidden_layers):
            p[f"W_{i}"] = rng.normal(0, np.sqrt(2.0 / H) * 0.5, (H, H))
            p[f"b_{i}"] = np.zeros(H)
        p["W_c"] = rng.normal(0, np.sqrt(1.0 / H) * 0.1, (H, 6 * B))
        p["b_c"] = np.zeros(6 * B)
        p["W_s"] = rng.normal(0, np.sqrt(1.0 / H) * 0.1, (H, 3))
        p["b_s"] = np.zeros(3)
        self.params = p
        self.x_mean = np.zeros(in_dim)
        self.x_std = np.ones(in_dim)
        self.scale_ref = np.full(3, 0.05)
        self.adam = AdamState()
        self.epoch = 0
        self.history: list[float] = []

    # -- forward / backward ------------------------------------------------

    def _forward(self, x):
        p, L = self.params, self.cfg.hidden_layers
        xn = (x - self.x_mean) / self.x_std
        z0 = xn @ p["W_in"] + p["b_in"]
        h = np.maximum(z0, 0)
        cache = {"xn": xn, "z0": z0, "h": [h], "z": []}
        for i in range(L):
            z = h @ p[f"W_{i}"] + p[f"b_{i}"]
            h = h + np.maximum(z, 0)
            cache["z"].append(z)
            cache["h"].append(h)
        logits = (h @ p["W_c"] + p["b_c"]).reshape(len(x), 2, 3, self.cfg.bins)
        prob = _softmax(logits)
        log_s = h @ p["W_s"] + p["b_s"]
        scale = self.scale_ref * np.exp(log_s)
        return prob, scale, cache

    def loss_and_grad(self, x, gt_canonical, gt_scale, need_grad: bool = True):
        """``(L_coord, L_scale, grads)`` for a batch; means over tuples."""
        p, L, B = self.params, self.cfg.hidden_layers, self.cfg.bins
        k = len(x)
        prob, scale, cache = self._forward(x)
        centers = bin_centers(B)
        if self.cfg.loss == "mse":
            E = prob @ centers
            diff = E - gt_canonical
            l_coord = np.sum(diff**2) / k
        else:
            onehot = np.zeros_like(prob)
            np.put_along_axis(onehot, coord_to_bin(gt_canonical, B)[..., None], 1.0, -1)
            l_coord = -np.sum(onehot * np.log(np.maximum(prob, 1e-300))) / k
        rel = (scale - gt_scale) / self.scale_ref
        l_scale = np.sum(rel**2) / k
        if not need_grad:
            return l_coord, l_scale, None
        if self.cfg.loss == "mse":
            dE = 2.0 * diff / k
            dz = dE[..., None] * prob * (centers - E[..., None])
        else:
            dz = (prob - onehot) / k
        dz = dz.reshape(k, 6 * B)
        dlog_s = 2.0 * rel / self.scale_ref * scale / k
        h = cache["h"][-1]
        g = {
            "W_c": h.T @ dz, "b_c": dz.sum(0),
            "W_s": h.T @ dlog_s, "b_s": dlog_s.sum(0),
        }
        dh = dz @ p["W_c"].T + dlog_s @ p["W_s"].T
        for i in reversed(range(L)):
            da = dh * (cache["z"][i] > 0)
            g[f"W_{i}"] = cache["h"][i].T @ da
            g[f"b_{i}"] = da.sum(0)
            dh = dh + da @ p[f"W_{i}"].T
        dz0 = dh * (cache["z0"] > 0)
        g["W_in"] = cache["xn"].T @ dz0
        g["b_in"] = dz0.sum(0)
        return l_coord, l_scale, g

    # -- public interface --------------------------------------------------

    def predict(self, features: np.ndarray, indices=None) -> CanonicalPrediction:
        features = np.asarray(features, float)
        if features.ndim != 2 or features.shape[1] != self.in_dim:
            raise DimensionMismatch(
                f"feature dimension {features.shape[-1]} does not match model input {self.in_dim}"
            )
        dists, scales = [], []
        for a in range(0, len(features), 4096):
            prob, scale, _ = self._forward(features[a : a + 4096])
            dists.append(prob)
            scales.append(scale)
        return CanonicalPrediction(np.concatenate(dists), np.concatenate(scales))

    def fit_normalization(self, x, gt_scale) -> None:
        self.x_mean = x.mean(axis=0)
        std = x.std(axis=0)
        self.x_std = np.where(std > 1e-8, std, 1.0)
        self.scale_ref = np.asarray(gt_scale, float).mean(axis=0)

    def adam_step(self, grads, lr, b1=0.9, b2=0.999, eps=1e-8) -> None:
        st = self.adam
        st.step += 1
        for name, g in grads.items():
            m = st.m.setdefault(name, np.zeros_like(g))
            v = st.v.setdefault(name, np.zeros_like(g))
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mh = m / (1 - b1**st.step)
            vh = v / (1 - b2**st.step)
            self.params[name] -= lr * mh / (np.sqrt(vh) + eps)

    # -- checkpoints -------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        c = self.cfg
        arrays = {
            "meta.dims": np.array([self.in_dim, c.hidden_width, c.hidden_layers, c.bins], float),
            "meta.train": np.array([self.epoch, self.adam.step], float),
            "meta.history": np.array(self.history, float),
            "norm.x_mean": self.x_mean,
            "norm.x_std": self.x_std,
            "norm.scale_ref": self.scale_ref,
        }
        arrays.update({f"param.{k}": v for k, v in self.params.items()})
        arrays.update({f"adam.m.{k}": v for k, v in self.adam.m.items()})
        arrays.update({f"adam.v.{k}": v for k, v in self.adam.v.items()})
        return arrays

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], cfg: PredictorConfig | None = None):
        in_dim, width, layers, bins = (int(x) for x in arrays["meta.dims"])
        base = cfg or PredictorConfig()
        cfg = PredictorConfig(**{**base.__dict__, "hidden_width": width,
                                 "hidden_layers": layers, "bins": bins})
        model = cls(in_dim, cfg)
        model.params = {k[6:]: v for k, v in arrays.items() if k.startswith("param.")}
        model.x_mean = arrays["norm.x_mean"]
        model.x_std = arrays["norm.x_std"]
        model.scale_ref = arrays["norm.scale_ref"]
        model.epoch, model.adam.step = (int(x) for x in arrays["meta.train"])
        model.history = arrays["meta.history"].tolist()
        model.adam.m = {k[7:]: v for k, v in arrays.items() if k.startswith("adam.m.")}
        model.adam.v = {k[7:]: v for k, v in arrays.items() if k.startswith("adam.v.")}
        return model


CHECKPOINT_MAGIC = b"TVCKPT\x00\x00"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, model: MLPPredictor) -> None:
    """Binary layout (all little-endian): magic, u32 version, u32 count, then
    per array: u32 name length, utf-8 name, u32 ndim, u32 dims..., f64 data."""
    arrays = model.state_arrays()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(arrays)))
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr, dtype="<f8")
            raw = name.encode()
            fh.write(struct.pack("<I", len(raw)) + raw)
            fh.write(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path, cfg: PredictorConfig | None = None) -> MLPPredictor:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, count = struct.unpack_from("<II", data, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    arrays = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off : off + n].decode()
        off += n
        (ndim,) = struct.unpack_from("<I", data, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(data, "<f8", size, off).reshape(shape).copy()
        off += 8 * size
    return MLPPredictor.from_arrays(arrays, cfg)


def _as_epoch_source(data):
    if callable(data):
        return data
    return lambda epoch: data


def train(
    data: tuple[np.ndarray, np.ndarray, np.ndarray] | Callable[[int], tuple],
    cfg: PredictorConfig = PredictorConfig(),
    model: MLPPredictor | None = None,
    on_epoch: Callable[[int, float], None] | None = None,
    steps: int | None = None,
) -> MLPPredictor:
    """Fit an :class:`MLPPredictor` on ``(features, gt_canonical, gt_scale)``.

    ``data`` is either fixed arrays or a callable mapping the epoch number to
    fresh arrays. Minimizes ``L_coord + L_scale`` with Adam; the learning rate
    halves every ``cfg.lr_halving_period`` epochs. When ``steps`` is given,
    training stops after that many optimizer steps instead of ``cfg.epochs``
    epochs. Resumes from ``model.epoch`` when a model is passed in.
    """
    source = _as_epoch_source(data)
    rng = np.random.default_rng(cfg.seed + (model.epoch if model else 0))
    first = source(model.epoch if model else 0)
    x0 = np.asarray(first[0], float)
    if len(x0) == 0:
        raise ValueError("empty training set")
    if model is None:
        model = MLPPredictor(x0.shape[1], cfg)
        model.fit_normalization(x0, first[2])
    elif x0.shape[1] != model.in_dim:
        raise DimensionMismatch(
            f"training features have dimension {x0.shape[1]}, checkpoint expects {model.in_dim}"
        )
    total = 0
    epoch_end = model.epoch + cfg.epochs
    while (model.epoch < epoch_end) if steps is None else (total < steps):
        x, gc, gs = first if total == 0 else source(model.epoch)
        x, gc, gs = np.asarray(x, float), np.asarray(gc, float), np.asarray(gs, float)
        lr = cfg.learning_rate * 0.5 ** (model.epoch // cfg.lr_halving_period)
        order = rng.permutation(len(x))
        losses = []
        for a in range(0, len(x), cfg.batch_size):
            b = order[a : a + cfg.batch_size]
            lc, ls, g = model.loss_and_grad(x[b], gc[b], gs[b])
            loss = lc + ls
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {model.epoch}, step {model.adam.step}")
            losses.append(loss)
            model.adam_step(g, lr)
            total += 1
            if steps is not None and total >= steps:
                break
        model.history.append(float(np.mean(losses)))
        if on_epoch:
            on_epoch(model.epoch, model.history[-1])
        log.info("epoch %d loss %.6f lr %.2e", model.epoch, model.history[-1], lr)
        model.epoch += 1
        if steps is not None and total >= steps:
            break
    return model


def ensemble_select(final_losses: Iterable[float]) -> int:
    """Index of the model with the lowest refined alignment loss.

    Ties resolve to the lowest index; NaN counts as worst.
    """
    losses = np.array([np.inf if not np.isfinite(x) else x for x in final_losses], float)
    if len(losses) == 0:
        raise ValueError("need at least one model")
    return int(np.argmin(losses))
