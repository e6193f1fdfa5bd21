"""Plain-text PLY / OBJ readers and writers, plus the pose sidecar format."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import Pose9D


@dataclass(frozen=True)
class Mesh:
    vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3) int

    def __post_init__(self):
        V = np.asarray(self.vertices, dtype=float)
        F = np.asarray(self.faces, dtype=np.int64)
        if V.ndim != 2 or V.shape[1] != 3 or len(V) < 3:
            raise ValueError("mesh needs at least 3 vertices")
        if F.ndim != 2 or F.shape[1] != 3 or len(F) == 0:
            raise ValueError("mesh needs triangle faces")
        if F.min() < 0 or F.max() >= len(V):
            raise ValueError("face index out of range")
        object.__setattr__(self, "vertices", V)
        object.__setattr__(self, "faces", F)

    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]


class MeshReadError(Exception):
    pass


def _triangulate(poly: list[int]) -> list[list[int]]:
    return [[poly[0], poly[i], poly[i + 1]] for i in range(1, len(poly) - 1)]


def read_obj(path) -> Mesh:
    verts, faces = [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(tok.split("/")[0]) for tok in parts[1:]]
                idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                faces.extend(_triangulate(idx))
    return Mesh(np.array(verts), np.array(faces))


def _read_ply(path):
    """Returns ``(vertex_columns: dict[str, ndarray], faces | None)``."""
    with open(path) as fh:
        if fh.readline().strip() != "ply":
            raise MeshReadError(f"{path}: not a PLY file")
        elements: list[tuple[str, int, list[str]]] = []
        while True:
            line = fh.readline()
            if not line:
                raise MeshReadError(f"{path}: truncated header")
            parts = line.split()
            if not parts or parts[0] in ("comment", "obj_info"):
                continue
            if parts[0] == "format" and parts[1] != "ascii":
                raise MeshReadError(f"{path}: only ASCII PLY is supported")
            if parts[0] == "element":
                elements.append((parts[1], int(parts[2]), []))
            elif parts[0] == "property":
                elements[-1][2].append(parts[-1])
            elif parts[0] == "end_header":
                break
        cols: dict[str, np.ndarray] = {}
        faces = None
        for name, count, props in elements:
            rows = [fh.readline().split() for _ in range(count)]
            if name == "vertex":
                arr = np.array(rows, dtype=float).reshape(count, len(props))
                cols = {p: arr[:, i] for i, p in enumerate(props)}
            elif name == "face":
                tris = []
                for r in rows:
                    n = int(r[0])
                    tris.extend(_triangulate([int(x) for x in r[1 : 1 + n]]))
                faces = np.array(tris, dtype=np.int64).reshape(-1, 3)
    return cols, faces


def read_mesh(path) -> Mesh:
    path = Path(path)
    try:
        if path.suffix.lower() == ".obj":
            return read_obj(path)
        cols, faces = _read_ply(path)
        if faces is None:
            raise MeshReadError(f"{path}: PLY has no faces")
        return Mesh(np.stack([cols["x"], cols["y"], cols["z"]], axis=1), faces)
    except MeshReadError:
        raise
    except (OSError, ValueError, KeyError, IndexError) as exc:
        raise MeshReadError(f"{path}: {exc}") from exc


def write_obj(path, mesh: Mesh) -> None:
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]!r} {v[1]!r} {v[2]!r}\n")
        for f in mesh.faces + 1:
            fh.write(f"f {f[0]} {f[1]} {f[2]}\n")


def write_ply(path, columns: dict[str, np.ndarray]) -> None:
    """ASCII vertex-only PLY; ``columns`` maps property name -> (n,) values."""
    names = list(columns)
    data = np.stack([np.asarray(columns[k], dtype=float) for k in names], axis=1)
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(data)}\n")
        for k in names:
            fh.write(f"property double {k}\n")
        fh.write("end_header\n")
        for row in data:
            fh.write(" ".join(repr(float(x)) for x in row) + "\n")


def read_ply_columns(path) -> dict[str, np.ndarray]:
    try:
        cols, _ = _read_ply(path)
    except MeshReadError:
        raise
    except (OSError, ValueError, IndexError) as exc:
        raise MeshReadError(f"{path}: {exc}") from exc
    return cols


def write_pose(path, pose: Pose9D) -> None:
    """Sidecar: three rows of R, then t, then s; whitespace separated."""
    rows = [*pose.rotation, pose.translation, pose.scale]
    with open(path, "w") as fh:
        for r in rows:
            fh.write(" ".join(repr(float(x)) for x in r) + "\n")


def read_pose(path) -> Pose9D:
    vals = np.loadtxt(path, ndmin=2)
    if vals.shape != (5, 3):
        raise ValueError(f"{path}: expected 5 rows of 3 values")
    return Pose9D(vals[:3], vals[3], vals[4])
