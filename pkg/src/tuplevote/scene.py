"""Synthetic partial views of meshes, with optional clutter corruption.

Views are produced by casting one ray per pixel against the posed mesh and
keeping the first hit, which honours self-occlusion without a GL renderer.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .geometry import PointCloud, Pose9D, random_rotation
from .meshes import canonicalize
from .meshio import Mesh, read_ply_columns, read_pose, write_ply, write_pose


class EmptyViewError(ValueError):
    def __init__(self, msg: str = "empty view"):
        super().__init__(msg)


@dataclass(frozen=True)
class Intrinsics:
    fx: float = 320.0
    fy: float = 320.0
    cx: float = 80.0
    cy: float = 80.0
    width: int = 160
    height: int = 160

    def at_resolution(self, width: int, height: int) -> "Intrinsics":
        kx, ky = width / self.width, height / self.height
        return Intrinsics(self.fx * kx, self.fy * ky, self.cx * kx, self.cy * ky, width, height)


@dataclass(frozen=True)
class NoiseConfig:
    clutter_fraction: float = 0.0
    depth_jitter_sigma: float = 0.0
    mask_dilation: float = 4.0  # pixels
    focal_px: float = 320.0  # converts mask_dilation to meters

    def __post_init__(self):
        if not 0.0 <= self.clutter_fraction < 1.0:
            raise ValueError("clutter_fraction must lie in [0, 1)")
        if self.depth_jitter_sigma < 0 or self.mask_dilation < 0:
            raise ValueError("noise parameters must be nonnegative")


@dataclass(frozen=True)
class SceneSample:
    cloud: PointCloud  # camera frame, with normals
    gt_pose: Pose9D
    canonical: np.ndarray  # (n, 3); NaN rows for injected clutter
    noise_mask: np.ndarray  # (n,) bool

    def __len__(self) -> int:
        return len(self.cloud)


def _ray_cast(tri: np.ndarray, dirs: np.ndarray, chunk: int = 2048):
    """First hit of rays from the origin along ``dirs`` against triangles.

    Returns ``(t, face, u, v)``; ``face == -1`` where nothing was hit.
    Moller-Trumbore, vectorized over rays x faces.
    """
    v0 = tri[:, 0]
    e1 = tri[:, 1] - v0
    e2 = tri[:, 2] - v0
    n = len(dirs)
    best_t = np.full(n, np.inf)
    best_f = np.full(n, -1)
    best_u = np.zeros(n)
    best_v = np.zeros(n)
    s = -v0  # ray origin is the camera center
    for a in range(0, n, chunk):
        D = dirs[a : a + chunk, None, :]
        h = np.cross(D, e2[None])
        det = np.einsum("rfk,fk->rf", h, e1)
        ok = np.abs(det) > 1e-14
        inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        u = np.einsum("rfk,fk->rf", h, s) * inv
        q = np.cross(s, e1)
        v = np.einsum("rk,fk->rf", dirs[a : a + chunk], q) * inv
        t = np.einsum("fk,fk->f", e2, q)[None] * inv
        hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 1e-9)
        t = np.where(hit, t, np.inf)
        f = np.argmin(t, axis=1)
        rows = np.arange(len(f))
        tt = t[rows, f]
        found = np.isfinite(tt)
        sl = slice(a, a + len(f))
        best_t[sl] = tt
        best_f[sl] = np.where(found, f, -1)
        best_u[sl] = u[rows, f]
        best_v[sl] = v[rows, f]
    return best_t, best_f, best_u, best_v


def sample_view(
    mesh: Mesh,
    pose: Pose9D,
    intrinsics: Intrinsics | None = None,
    resolution: tuple[int, int] | None = None,
) -> SceneSample:
    """Render the visible surface of ``mesh`` under ``pose`` as a point cloud.

    ``mesh`` is normalized to the canonical cube first, so ``pose.scale``
    carries the metric half-extents. Canonical coordinates are interpolated
    from the canonical vertices of the hit triangle.
    """
    K = intrinsics or Intrinsics()
    if resolution is not None:
        K = K.at_resolution(*resolution)
    canon_mesh, _ = canonicalize(mesh)
    world = pose.apply(canon_mesh.vertices)
    tri = world[canon_mesh.faces]
    front = world[:, 2] > 1e-6
    if not np.any(front):
        raise EmptyViewError()
    proj = world[front]
    u = K.fx * proj[:, 0] / proj[:, 2] + K.cx
    v = K.fy * proj[:, 1] / proj[:, 2] + K.cy
    if np.all(front):
        u0, u1 = max(0, int(np.floor(u.min()))), min(K.width, int(np.ceil(u.max())) + 1)
        v0, v1 = max(0, int(np.floor(v.min()))), min(K.height, int(np.ceil(v.max())) + 1)
    else:
        u0, u1, v0, v1 = 0, K.width, 0, K.height
    if u0 >= u1 or v0 >= v1:
        raise EmptyViewError()
    px, py = np.meshgrid(np.arange(u0, u1) + 0.5, np.arange(v0, v1) + 0.5)
    dirs = np.stack(
        [(px.ravel() - K.cx) / K.fx, (py.ravel() - K.cy) / K.fy, np.ones(px.size)], axis=1
    )
    t, f, bu, bv = _ray_cast(tri, dirs)
    hit = f >= 0
    if not np.any(hit):
        raise EmptyViewError()
    t, f, bu, bv, dirs = t[hit], f[hit], bu[hit], bv[hit], dirs[hit]
    pts = dirs * t[:, None]
    ctri = canon_mesh.vertices[canon_mesh.faces[f]]
    canonical = (1 - bu - bv)[:, None] * ctri[:, 0] + bu[:, None] * ctri[:, 1] + bv[:, None] * ctri[:, 2]
    wt = tri[f]
    nrm = np.cross(wt[:, 1] - wt[:, 0], wt[:, 2] - wt[:, 0])
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    flip = np.einsum("ij,ij->i", nrm, pts) > 0
    nrm[flip] *= -1
    return SceneSample(PointCloud(pts, nrm), pose, canonical, np.zeros(len(pts), bool))


def random_pose(
    rng: np.random.Generator,
    scale,
    depth=(0.45, 0.6),
    lateral: float = 0.03,
    mode: str = "free",
) -> Pose9D:
    """Random object pose in front of the camera.

    ``mode="free"`` draws a uniform rotation. ``mode="tabletop"`` keeps the
    canonical up axis roughly aligned with the camera's -y (image up), spins
    the object freely about it and tilts the view by 20-60 degrees.
    """
    if mode == "free":
        R = random_rotation(rng)
    elif mode == "tabletop":
        yaw = rng.uniform(0, 2 * np.pi)
        tilt = np.radians(rng.uniform(20, 60))
        cy, sy = np.cos(yaw), np.sin(yaw)
        Ryaw = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
        # canonical +y up maps to camera -y (image rows grow downwards)
        flip = np.diag([1.0, -1.0, -1.0])
        ct, st = np.cos(tilt), np.sin(tilt)
        Rtilt = np.array([[1, 0, 0], [0, ct, -st], [0, st, ct]])
        R = Rtilt @ flip @ Ryaw
    else:
        raise ValueError(f"unknown pose mode {mode!r}")
    t = np.array([*rng.uniform(-lateral, lateral, 2), rng.uniform(*depth)])
    return Pose9D(R, t, np.asarray(scale, float))


def corrupt(sample: SceneSample, cfg: NoiseConfig, seed: int | None = 0) -> SceneSample:
    """Append clutter points and jitter depths; deterministic per seed.

    Half of the clutter lies on the supporting plane under the object, the
    rest in a halo just outside the object silhouette and behind it.
    """
    rng = np.random.default_rng(seed)
    n = len(sample)
    n_clutter = int(round(cfg.clutter_fraction * n))
    pts = sample.cloud.points
    normals = sample.cloud.normals
    R, t, s = sample.gt_pose.rotation, sample.gt_pose.translation, sample.gt_pose.scale
    new_pts, new_nrm = [], []
    if n_clutter:
        n_plane = n_clutter // 2
        n_halo = n_clutter - n_plane
        up = R[:, 1]
        base = t - s[1] * up
        a = R[:, 0]
        b = R[:, 2]
        radius = 1.5 * np.max(s)
        r = radius * np.sqrt(rng.random(n_plane))
        phi = rng.uniform(0, 2 * np.pi, n_plane)
        plane = base + (r * np.cos(phi))[:, None] * a + (r * np.sin(phi))[:, None] * b
        pn = np.tile(up, (n_plane, 1))
        pn[np.einsum("ij,ij->i", pn, plane) > 0] *= -1.0
        src = pts[rng.integers(0, n, n_halo)]
        z = src[:, 2:3]
        off = rng.normal(size=(n_halo, 2))
        off /= np.linalg.norm(off, axis=1, keepdims=True)
        pix = cfg.mask_dilation * rng.uniform(0.5, 1.5, (n_halo, 1))
        focal = np.array([[cfg.focal_px, cfg.focal_px]])
        shift = np.c_[off * pix * z / focal, np.zeros(n_halo)]
        back = rng.uniform(0, 2 * np.max(s), (n_halo, 1))
        halo = (src + shift) * (z + back) / z
        hn = -halo / np.linalg.norm(halo, axis=1, keepdims=True)
        new_pts += [plane, halo]
        new_nrm += [pn, hn]
    all_pts = np.vstack([pts, *new_pts]) if new_pts else pts.copy()
    all_nrm = np.vstack([normals, *new_nrm]) if new_nrm else normals.copy()
    if cfg.depth_jitter_sigma > 0:
        dz = rng.normal(0.0, cfg.depth_jitter_sigma, len(all_pts))
        z = all_pts[:, 2]
        all_pts = all_pts * ((z + dz) / z)[:, None]
    canonical = np.vstack([sample.canonical, np.full((n_clutter, 3), np.nan)])
    mask = np.concatenate([sample.noise_mask, np.ones(n_clutter, bool)])
    return replace(sample, cloud=PointCloud(all_pts, all_nrm), canonical=canonical, noise_mask=mask)


def save_sample(directory, name: str, sample: SceneSample) -> tuple[Path, Path]:
    """Write ``<name>.ply`` (points, normals, canonical coords, noise flag) and
    ``<name>.pose.txt``."""
    directory = Path(directory)
    c = sample.cloud
    ply = directory / f"{name}.ply"
    write_ply(
        ply,
        {
            "x": c.points[:, 0], "y": c.points[:, 1], "z": c.points[:, 2],
            "nx": c.normals[:, 0], "ny": c.normals[:, 1], "nz": c.normals[:, 2],
            "cx": sample.canonical[:, 0], "cy": sample.canonical[:, 1], "cz": sample.canonical[:, 2],
            "noise": sample.noise_mask.astype(float),
        },
    )
    pose = directory / f"{name}.pose.txt"
    write_pose(pose, sample.gt_pose)
    return ply, pose


def load_cloud(path) -> tuple[PointCloud, dict[str, np.ndarray]]:
    """Read a scene PLY; returns the cloud and all raw columns."""
    cols = read_ply_columns(path)
    if not cols or len(cols.get("x", ())) == 0:
        raise EmptyViewError()
    pts = np.stack([cols["x"], cols["y"], cols["z"]], axis=1)
    nrm = None
    if "nx" in cols:
        nrm = np.stack([cols["nx"], cols["ny"], cols["nz"]], axis=1)
    return PointCloud(pts, nrm), cols


def load_sample(directory, name: str) -> SceneSample:
    directory = Path(directory)
    cloud, cols = load_cloud(directory / f"{name}.ply")
    canonical = np.stack([cols["cx"], cols["cy"], cols["cz"]], axis=1)
    return SceneSample(cloud, read_pose(directory / f"{name}.pose.txt"), canonical,
                       cols["noise"].astype(bool))
