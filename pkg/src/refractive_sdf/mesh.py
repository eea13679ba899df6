"""Iso-surface extraction, OBJ I/O and reconstruction metrics.

Metrics follow the usual MVS convention: distances are measured between
area-uniform point samples of the two meshes; accuracy and completeness are
mean nearest-neighbour distances, precision and recall the fractions within a
threshold ``tau``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree
from skimage import measure

from .errors import EmptyFieldError, FormatError

DEFAULT_TAU = 0.01


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (V, 3) float
    triangles: np.ndarray  # (F, 3) int

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")

    def face_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, k]] for k in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=-1)

    def face_normals(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, k]] for k in range(3))
        n = np.cross(b - a, c - a)
        return n / np.maximum(np.linalg.norm(n, axis=-1, keepdims=True), 1e-300)

    def area(self) -> float:
        return float(self.face_areas().sum())

    def edge_use_counts(self) -> np.ndarray:
        e = np.concatenate([self.triangles[:, [0, 1]], self.triangles[:, [1, 2]], self.triangles[:, [2, 0]]])
        e.sort(axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        return counts

    def is_watertight(self) -> bool:
        return bool(len(self.triangles)) and bool(np.all(self.edge_use_counts() == 2))

    def euler_characteristic(self) -> int:
        n_edges = len(self.edge_use_counts())
        used = np.unique(self.triangles)
        return int(len(used) - n_edges + len(self.triangles))


def _clean(verts, faces):
    """Weld coincident vertices and drop degenerate faces."""
    uniq, inverse = np.unique(verts, axis=0, return_inverse=True)
    faces = inverse.reshape(-1)[faces]
    keep = (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])
    faces = faces[keep]
    mesh = TriangleMesh(uniq, faces)
    mesh = TriangleMesh(uniq, faces[mesh.face_areas() > 1e-12])
    used, remap = np.unique(mesh.triangles, return_inverse=True)
    return TriangleMesh(mesh.vertices[used], remap.reshape(-1, 3))


def marching_cubes_grid(values: np.ndarray, lo, hi) -> TriangleMesh:
    """Zero level set of a sampled grid spanning the box ``[lo, hi]``.

    Faces are oriented so their normals point towards increasing values
    (outward for an SDF that is negative inside).
    """
    values = np.asarray(values, dtype=float)
    if not (values.min() < 0 < values.max()):
        raise EmptyFieldError("field has no sign change inside the bound")
    lo = np.broadcast_to(np.asarray(lo, dtype=float), (3,))
    hi = np.broadcast_to(np.asarray(hi, dtype=float), (3,))
    spacing = (hi - lo) / (np.array(values.shape) - 1)
    verts, faces, _, _ = measure.marching_cubes(values, 0.0, spacing=tuple(spacing), gradient_direction="descent")
    return _clean(verts + lo, faces)


def marching_cubes(sdf_fn, bound=1.0, resolution: int = 128, chunk: int = 262144) -> TriangleMesh:
    """Extract the zero set of ``sdf_fn`` (numpy ``(N, 3) -> (N,)``) on a regular grid.

    ``bound`` is a half extent or a ``(lo, hi)`` pair; ``resolution`` counts
    cells per axis.
    """
    if resolution < 8:
        raise ValueError(f"resolution must be >= 8, got {resolution}")
    if np.ndim(bound) == 0:
        lo, hi = -float(bound) * np.ones(3), float(bound) * np.ones(3)
    else:
        lo, hi = (np.broadcast_to(np.asarray(b, dtype=float), (3,)) for b in bound)
    axes = [np.linspace(lo[k], hi[k], resolution + 1) for k in range(3)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, 3)
    vals = np.concatenate([np.asarray(sdf_fn(grid[i : i + chunk]), dtype=float) for i in range(0, len(grid), chunk)])
    return marching_cubes_grid(vals.reshape((resolution + 1,) * 3), lo, hi)


def write_obj(path, mesh: TriangleMesh) -> None:
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path) -> TriangleMesh:
    verts, faces = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            try:
                if parts[0] == "v":
                    verts.append([float(v) for v in parts[1:4]])
                    if len(parts) < 4:
                        raise ValueError("vertex needs 3 coordinates")
                elif parts[0] == "f":
                    idx = [int(p.split("/")[0]) for p in parts[1:]]
                    if len(idx) < 3:
                        raise ValueError("face needs 3 indices")
                    idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                    faces.extend([idx[0], idx[k], idx[k + 1]] for k in range(1, len(idx) - 1))
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
    if not faces:
        raise FormatError(f"{path}: no faces")
    try:
        return TriangleMesh(np.array(verts), np.array(faces))
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None


def sample_surface(mesh: TriangleMesh, n_points: int, seed: int = 0) -> np.ndarray:
    """Area-weighted uniform samples on the mesh surface."""
    if len(mesh.triangles) == 0:
        raise ValueError("cannot sample an empty mesh")
    rng = np.random.default_rng(seed)
    areas = mesh.face_areas()
    face = rng.choice(len(areas), size=n_points, p=areas / areas.sum())
    r1, r2 = rng.random(n_points), rng.random(n_points)
    s = np.sqrt(r1)
    bary = np.stack([1 - s, s * (1 - r2), s * r2], axis=-1)
    tri = mesh.vertices[mesh.triangles[face]]
    return np.einsum("nk,nkd->nd", bary, tri)


def nearest_distances(query: np.ndarray, ref: np.ndarray, method: str = "kdtree") -> np.ndarray:
    """Distance from each query point to its nearest reference point."""
    if method == "kdtree":
        _, idx = cKDTree(ref).query(query, k=1)
    elif method == "brute":
        idx = np.empty(len(query), dtype=np.int64)
        step = max(1, 2**21 // max(len(ref), 1))
        for i in range(0, len(query), step):
            q = query[i : i + step]
            dist = np.sqrt(np.sum((q[:, None, :] - ref[None, :, :]) ** 2, axis=-1))
            idx[i : i + step] = np.argmin(dist, axis=-1)
    else:
        raise ValueError(method)
    return np.linalg.norm(query - ref[idx], axis=-1)


@dataclass
class MetricsReport:
    accuracy: float
    completeness: float
    precision: float
    recall: float
    f_score: float
    tau: float
    n_recon_samples: int
    n_gt_samples: int
    reduction: str = "mean"
    config: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def f_score(precision: float, recall: float) -> float:
    denom = precision + recall
    return 2 * precision * recall / denom if denom > 0 else 0.0


def evaluate(recon: TriangleMesh, gt: TriangleMesh, tau: float = DEFAULT_TAU, n: int = 100_000,
             seed: int = 0, method: str = "kdtree") -> MetricsReport:
    """Accuracy / completeness / precision / recall / F-score of ``recon`` against ``gt``."""
    pr = sample_surface(recon, n, seed)
    pg = sample_surface(gt, n, seed)
    d_rg = nearest_distances(pr, pg, method)
    d_gr = nearest_distances(pg, pr, method)
    precision = float(np.mean(d_rg < tau))
    recall = float(np.mean(d_gr < tau))
    return MetricsReport(
        accuracy=float(np.mean(d_rg)),
        completeness=float(np.mean(d_gr)),
        precision=precision,
        recall=recall,
        f_score=f_score(precision, recall),
        tau=float(tau),
        n_recon_samples=n,
        n_gt_samples=n,
        config={"seed": seed, "nn": method},
    )
