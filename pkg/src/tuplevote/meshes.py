"""Procedural closed meshes for the synthetic benchmarks."""
from __future__ import annotations

import numpy as np

from .meshio import Mesh

# category -> canonical symmetry axis; mirrors the NOCS convention
SYMMETRIC_CATEGORIES = {"bottle": "y", "can": "y", "bowl": "y", "cylinder": "y", "sphere": "y"}


def canonicalize(mesh: Mesh) -> tuple[Mesh, np.ndarray]:
    """Normalize each axis of ``mesh`` into [-1, 1].

    Returns the canonical mesh and the half-extents it was divided by.
    """
    lo, hi = mesh.vertices.min(0), mesh.vertices.max(0)
    half = (hi - lo) / 2.0
    if np.any(half <= 0):
        raise ValueError("mesh is flat along at least one axis")
    return Mesh((mesh.vertices - (lo + hi) / 2.0) / half, mesh.faces), half


def box(half=(1.0, 1.0, 1.0)) -> Mesh:
    hx, hy, hz = half
    v = np.array([[x, y, z] for x in (-hx, hx) for y in (-hy, hy) for z in (-hz, hz)])
    # vertex id = 4*ix + 2*iy + iz
    quads = [
        (0, 1, 3, 2),  # -x
        (4, 6, 7, 5),  # +x
        (0, 4, 5, 1),  # -y
        (2, 3, 7, 6),  # +y
        (0, 2, 6, 4),  # -z
        (1, 5, 7, 3),  # +z
    ]
    faces = [f for a, b, c, d in quads for f in ((a, b, c), (a, c, d))]
    return Mesh(v, np.array(faces))


def cube() -> Mesh:
    return box()


def cylinder(segments: int = 48, radius: float = 1.0, half_height: float = 1.0) -> Mesh:
    """Closed cylinder with its axis along y."""
    ang = 2 * np.pi * np.arange(segments) / segments
    ring = np.stack([radius * np.cos(ang), np.zeros(segments), radius * np.sin(ang)], 1)
    bottom = ring + [0, -half_height, 0]
    top = ring + [0, half_height, 0]
    v = np.vstack([bottom, top, [[0, -half_height, 0], [0, half_height, 0]]])
    cb, ct = 2 * segments, 2 * segments + 1
    faces = []
    for i in range(segments):
        j = (i + 1) % segments
        faces += [(i, segments + i, segments + j), (i, segments + j, j)]
        faces += [(cb, i, j), (ct, segments + j, segments + i)]
    return Mesh(v, np.array(faces))


def l_shape(thickness: float = 0.4) -> Mesh:
    """L-shaped prism: an L in the x-y plane extruded along z.

    The short leg is thinner than the long one and the prism is shallow in z,
    so no nontrivial rotation maps it onto itself.
    """
    t = thickness
    outline = np.array(
        [[0, 0], [2.0, 0], [2.0, 0.6 * t], [t, 0.6 * t], [t, 1.4], [0, 1.4]]
    )
    # fan triangulation is valid: the outline is star-shaped around (t/2, t/3)
    c2 = np.array([t / 2, 0.3 * t])
    n = len(outline)
    depth = 0.35
    v = np.vstack(
        [
            np.c_[outline, np.full(n, -depth)],
            np.c_[outline, np.full(n, depth)],
            [[*c2, -depth], [*c2, depth]],
        ]
    )
    cb, ct = 2 * n, 2 * n + 1
    faces = []
    for i in range(n):
        j = (i + 1) % n
        faces += [(cb, j, i), (ct, n + i, n + j)]
        faces += [(i, j, n + j), (i, n + j, n + i)]
    return Mesh(v, np.array(faces))


def uv_sphere(n_lat: int = 24, n_lon: int = 48) -> Mesh:
    verts = [[0, 1, 0]]
    for i in range(1, n_lat):
        phi = np.pi * i / n_lat
        for j in range(n_lon):
            lam = 2 * np.pi * j / n_lon
            verts.append([np.sin(phi) * np.cos(lam), np.cos(phi), np.sin(phi) * np.sin(lam)])
    verts.append([0, -1, 0])
    verts = np.array(verts)
    south = len(verts) - 1

    def ring(i, j):
        return 1 + (i - 1) * n_lon + (j % n_lon)

    faces = []
    for j in range(n_lon):
        faces.append((0, ring(1, j + 1), ring(1, j)))
        faces.append((south, ring(n_lat - 1, j), ring(n_lat - 1, j + 1)))
    for i in range(1, n_lat - 1):
        for j in range(n_lon):
            a, b = ring(i, j), ring(i, j + 1)
            c, d = ring(i + 1, j), ring(i + 1, j + 1)
            faces += [(a, b, d), (a, d, c)]
    return Mesh(verts, np.array(faces))


BUILTIN = {"cube": cube, "cylinder": cylinder, "lshape": l_shape, "sphere": uv_sphere}


def builtin_mesh(name: str) -> Mesh:
    if name not in BUILTIN:
        raise KeyError(f"unknown builtin mesh {name!r}; choose from {sorted(BUILTIN)}")
    return canonicalize(BUILTIN[name]())[0]


def sample_surface(mesh: Mesh, n: int, rng: np.random.Generator) -> np.ndarray:
    """Area-weighted uniform samples on the mesh surface."""
    tri = mesh.triangles()
    area = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    f = rng.choice(len(tri), size=n, p=area / area.sum())
    u, v = rng.random(n), rng.random(n)
    flip = u + v > 1
    u[flip], v[flip] = 1 - u[flip], 1 - v[flip]
    t = tri[f]
    return t[:, 0] + u[:, None] * (t[:, 1] - t[:, 0]) + v[:, None] * (t[:, 2] - t[:, 0])
