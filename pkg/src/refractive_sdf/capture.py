"""Synthetic turntable capture: cameras, monitor planes and ray-location pairs.

The simulator replaces a physical monitor/turntable rig. For every pixel it
traces the exact multi-bounce path through an analytic shape and records the
mask bit, a validity tag and, for clean two-refraction paths, the monitor
location ``Q`` the ray lands on.

Dataset layout::

    manifest.json       rig, shape, optical constants, cameras, planes, version
    view_<k>.csv        u,v,mask,tag,qx,qy,qz,quv_u,quv_v   (one row per pixel)
    gt.obj              ground-truth mesh (optional)
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigError, FormatError
from .geometry_optics import Camera, MonitorPlane, OpticalConstants, intersect_plane_batch
from .mesh import marching_cubes, write_obj
from .oracle import trace_multibounce
from .shapes import AnalyticShape

FORMAT_VERSION = 1
CSV_HEADER = ["u", "v", "mask", "tag", "qx", "qy", "qz", "quv_u", "quv_v"]

TAGS = ("Background", "TwoBounce", "MultiBounce", "TIR", "OffMonitor")
BACKGROUND, TWO_BOUNCE, MULTI_BOUNCE, TIR_TAG, OFF_MONITOR = range(5)


@dataclass(frozen=True)
class RigSpec:
    n_views: int = 8
    distance: float = 3.0
    elevation_deg: float = 30.0
    width: int = 64
    height: int = 64
    fov_deg: float = 40.0
    monitor_distance: float = 2.5
    monitor_max_half_extent: float = 6.0
    ior_outside: float = 1.0003
    ior_inside: float = 1.4723
    bound: float = 1.0

    def validate(self):
        if self.n_views < 1 or self.width < 1 or self.height < 1:
            raise ConfigError("n_views and resolution must be positive")
        if not 0 < self.fov_deg < 180:
            raise ConfigError(f"fov_deg must lie in (0, 180), got {self.fov_deg}")
        reach = self.bound * math.sqrt(3.0)
        if self.distance <= reach:
            raise ConfigError(f"camera distance {self.distance} must exceed the scene bound radius {reach:.3f}")
        if self.monitor_distance <= reach:
            raise ConfigError(f"monitor distance {self.monitor_distance} must lie beyond the object bound {reach:.3f}")
        if not self.monitor_max_half_extent > 0:
            raise ConfigError("monitor_max_half_extent must be positive")
        try:
            self.constants
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def constants(self) -> OpticalConstants:
        return OpticalConstants(self.ior_outside, self.ior_inside)

    def azimuths(self) -> np.ndarray:
        return 2.0 * np.pi * np.arange(self.n_views) / self.n_views

    def view_direction(self, k: int) -> np.ndarray:
        """Unit vector from the origin towards camera ``k``."""
        az = self.azimuths()[k]
        el = np.radians(self.elevation_deg)
        return np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])

    def camera(self, k: int) -> Camera:
        return Camera.look_at(self.distance * self.view_direction(k), np.zeros(3), self.width, self.height, self.fov_deg)

    def monitor(self, k: int, half_extent=(np.inf, np.inf)) -> MonitorPlane:
        """Monitor behind the object, facing the camera, centred on the view axis."""
        n = self.view_direction(k)
        return MonitorPlane.facing(-self.monitor_distance * n, n, half_extent=half_extent)


@dataclass(frozen=True)
class CorrespondenceRecord:
    view: int
    pixel: tuple[int, int]
    mask: int
    tag: str
    q: tuple[float, float, float] | None
    q_uv: tuple[float, float] | None


@dataclass
class ViewRecords:
    u: np.ndarray
    v: np.ndarray
    mask: np.ndarray
    tag: np.ndarray  # int codes into TAGS
    q: np.ndarray  # (n, 3), nan where absent
    quv: np.ndarray  # (n, 2), nan where absent

    def __len__(self):
        return len(self.u)

    def equals(self, other: "ViewRecords") -> bool:
        """Bitwise equality (nan-aware)."""
        same = all(np.array_equal(getattr(self, k), getattr(other, k)) for k in ("u", "v", "mask", "tag"))
        return same and all(
            np.array_equal(getattr(self, k).view(np.uint64), getattr(other, k).view(np.uint64)) for k in ("q", "quv")
        )


@dataclass
class Dataset:
    rig: RigSpec
    shape: AnalyticShape
    views: list[ViewRecords]
    planes: list[MonitorPlane]
    seed: int = 0
    corrupt_multibounce_q: bool = False
    path: Path | None = None
    format_version: int = FORMAT_VERSION

    @property
    def cameras(self) -> list[Camera]:
        return [self.rig.camera(k) for k in range(self.rig.n_views)]

    @property
    def constants(self) -> OpticalConstants:
        return self.rig.constants

    def tag_counts(self) -> dict:
        counts = np.bincount(np.concatenate([v.tag for v in self.views]), minlength=len(TAGS))
        return {name: int(c) for name, c in zip(TAGS, counts)}

    def records(self, view: int) -> Iterator[CorrespondenceRecord]:
        r = self.views[view]
        for i in range(len(r)):
            has_q = not np.isnan(r.q[i, 0])
            yield CorrespondenceRecord(
                view,
                (int(r.u[i]), int(r.v[i])),
                int(r.mask[i]),
                TAGS[r.tag[i]],
                tuple(map(float, r.q[i])) if has_q else None,
                tuple(map(float, r.quv[i])) if has_q else None,
            )

    def ray_table(self) -> dict:
        """Flat per-pixel arrays over all views, as consumed by training."""
        cols = {k: [] for k in ("origin", "dir", "mask", "q", "has_q", "plane_point", "plane_normal",
                                "plane_scale", "view", "pixel", "tag")}
        for k, (rec, plane) in enumerate(zip(self.views, self.planes)):
            cam = self.rig.camera(k)
            o, d = cam.rays(np.stack([rec.u + 0.5, rec.v + 0.5], -1))
            n = len(rec)
            cols["origin"].append(o)
            cols["dir"].append(d)
            cols["mask"].append(rec.mask.astype(float))
            cols["has_q"].append(~np.isnan(rec.q[:, 0]))
            cols["q"].append(np.nan_to_num(rec.q))
            cols["plane_point"].append(np.tile(plane.point, (n, 1)))
            cols["plane_normal"].append(np.tile(plane.normal, (n, 1)))
            cols["plane_scale"].append(np.full(n, plane.half_diagonal))
            cols["view"].append(np.full(n, k))
            cols["pixel"].append(np.stack([rec.u, rec.v], -1))
            cols["tag"].append(rec.tag)
        return {k: np.concatenate(v) for k, v in cols.items()}


def simulate_view(shape: AnalyticShape, rig: RigSpec, k: int, corrupt_multibounce_q: bool = False):
    """Trace every pixel of view ``k``; returns ``(records, exit footprint)`` before monitor sizing."""
    cam = rig.camera(k)
    pixels = cam.pixel_centers()
    o, d = cam.rays(pixels + 0.5)
    res = trace_multibounce(shape, o, d, rig.constants)
    plane = rig.monitor(k)
    n = len(pixels)
    tag = np.full(n, BACKGROUND)
    tag[res.count == 2] = TWO_BOUNCE
    tag[res.count > 2] = MULTI_BOUNCE
    tag[res.tir] = TIR_TAG
    # odd counts only arise from the bounce cap; treat them as multi-bounce
    tag[(res.count > 0) & (res.count % 2 == 1)] = MULTI_BOUNCE
    q = np.full((n, 3), np.nan)
    carries_q = (tag == TWO_BOUNCE) | ((tag == MULTI_BOUNCE) & corrupt_multibounce_q)
    idx = np.nonzero(carries_q)[0]
    t, ok = intersect_plane_batch(res.exit_point[idx], res.final_dir[idx], plane.point, plane.normal)
    q[idx[ok]] = res.exit_point[idx[ok]] + t[ok, None] * res.final_dir[idx[ok]]
    uv = plane.to_uv(q)
    within = np.all(np.abs(uv) <= rig.monitor_max_half_extent, axis=-1)
    lost = carries_q & ~(within & ~np.isnan(q[:, 0]))
    tag[lost & (tag == TWO_BOUNCE)] = OFF_MONITOR
    q[lost] = np.nan
    uv[lost] = np.nan
    mask = (tag != BACKGROUND).astype(np.int8)
    rec = ViewRecords(pixels[:, 0].copy(), pixels[:, 1].copy(), mask, tag, q, uv)
    foot = np.nanmax(np.abs(uv), axis=0) if np.any(~np.isnan(uv[:, 0])) else np.zeros(2)
    return rec, foot


def generate_dataset(shape: AnalyticShape, rig: RigSpec = RigSpec(), seed: int = 0, out_dir=None,
                     corrupt_multibounce_q: bool = False, gt_resolution: int = 256) -> Dataset:
    """Simulate all views; writes the dataset when ``out_dir`` is given.

    The monitor is sized to 1.5x the footprint of the recorded exit rays (the
    same extent for every view). Exit rays landing beyond
    ``rig.monitor_max_half_extent`` or never reaching the plane are tagged
    ``OffMonitor`` and carry no ``Q``.
    """
    rig.validate()
    if not shape.fits_in_cube(rig.bound):
        raise ConfigError(f"shape {shape.kind} does not fit inside the scene bound {rig.bound}")
    views, foot = [], np.zeros(2)
    for k in range(rig.n_views):
        rec, f = simulate_view(shape, rig, k, corrupt_multibounce_q)
        views.append(rec)
        foot = np.maximum(foot, f)
    half = np.maximum(1.5 * foot, 1e-3)
    planes = [rig.monitor(k, half_extent=tuple(map(float, half))) for k in range(rig.n_views)]
    ds = Dataset(rig, shape, views, planes, seed, corrupt_multibounce_q)
    if out_dir is not None:
        write_dataset(ds, out_dir, gt_resolution=gt_resolution)
    return ds


def _fmt(x: float) -> str:
    return "" if math.isnan(x) else repr(float(x))


def write_dataset(ds: Dataset, out_dir, gt_resolution: int = 256) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": FORMAT_VERSION,
        "rig": asdict(ds.rig),
        "shape": ds.shape.to_spec(),
        "optical_constants": {"ior_outside": ds.rig.ior_outside, "ior_inside": ds.rig.ior_inside},
        "seed": ds.seed,
        "corrupt_multibounce_q": ds.corrupt_multibounce_q,
        "monitor_half_extent": list(ds.planes[0].half_extent),
        "cameras": [
            {"fx": c.fx, "fy": c.fy, "cx": c.cx, "cy": c.cy, "rotation": c.rotation.tolist(),
             "center": c.center.tolist(), "width": c.width, "height": c.height}
            for c in ds.cameras
        ],
        "monitors": [
            {"point": p.point.tolist(), "normal": p.normal.tolist(), "u_axis": p.u_axis.tolist(),
             "v_axis": p.v_axis.tolist()}
            for p in ds.planes
        ],
        "tag_counts": ds.tag_counts(),
        "views": [f"view_{k}.csv" for k in range(len(ds.views))],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    for k, r in enumerate(ds.views):
        with open(out / f"view_{k}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_HEADER)
            for i in range(len(r)):
                w.writerow([int(r.u[i]), int(r.v[i]), int(r.mask[i]), TAGS[r.tag[i]],
                            *(_fmt(x) for x in r.q[i]), *(_fmt(x) for x in r.quv[i])])
    if gt_resolution:
        mesh = marching_cubes(ds.shape.sdf, ds.rig.bound, gt_resolution)
        write_obj(out / "gt.obj", mesh)
    ds.path = out
    return out


def _parse_float(text: str, where: str) -> float:
    if text == "":
        return math.nan
    try:
        return float(text)
    except ValueError:
        raise FormatError(f"{where}: bad float {text!r}") from None


def load_dataset(path) -> Dataset:
    """Read a dataset directory written by :func:`generate_dataset`."""
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.exists():
        raise FormatError(f"{mpath}: manifest missing")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{mpath}: line {exc.lineno} col {exc.colno}: {exc.msg}") from None
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise FormatError(f"{mpath}: dataset format version {version} is not supported (this reader handles {FORMAT_VERSION})")
    rig = RigSpec(**manifest["rig"])
    shape = AnalyticShape.from_spec(manifest["shape"])
    half = tuple(float(x) for x in manifest["monitor_half_extent"])
    planes = [MonitorPlane(np.array(m["point"]), np.array(m["normal"]), np.array(m["u_axis"]), np.array(m["v_axis"]), half)
              for m in manifest["monitors"]]
    expected = rig.width * rig.height
    views = []
    for k, name in enumerate(manifest["views"]):
        fpath = path / name
        if not fpath.exists():
            raise FormatError(f"{fpath}: view file missing")
        rows = []
        with open(fpath, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != CSV_HEADER:
                raise FormatError(f"{fpath}:1: bad header {header}")
            for row in reader:
                where = f"{fpath}:{reader.line_num}"
                if len(row) != len(CSV_HEADER):
                    raise FormatError(f"{where}: expected {len(CSV_HEADER)} fields, found {len(row)} (truncated file?)")
                if row[3] not in TAGS:
                    raise FormatError(f"{where}: unknown tag {row[3]!r}")
                try:
                    ints = int(row[0]), int(row[1]), int(row[2])
                except ValueError:
                    raise FormatError(f"{where}: bad integer field") from None
                rows.append((*ints, TAGS.index(row[3]), *(_parse_float(x, where) for x in row[4:])))
        if len(rows) != expected:
            raise FormatError(f"{fpath}: expected {expected} rows, found {len(rows)} (truncated file?)")
        a = np.array(rows, dtype=object)
        views.append(ViewRecords(
            a[:, 0].astype(np.int64), a[:, 1].astype(np.int64), a[:, 2].astype(np.int8), a[:, 3].astype(np.int64),
            a[:, 4:7].astype(float), a[:, 7:9].astype(float),
        ))
    return Dataset(rig, shape, views, planes, manifest.get("seed", 0), manifest.get("corrupt_multibounce_q", False),
                   path, version)


def verify_dataset(ds: Dataset) -> float:
    """Re-trace every record carrying ``Q`` and return the largest deviation."""
    worst = 0.0
    for k, rec in enumerate(ds.views):
        fresh, _ = simulate_view(ds.shape, ds.rig, k, ds.corrupt_multibounce_q)
        if not np.array_equal(fresh.tag, rec.tag):
            return math.inf
        has = ~np.isnan(rec.q[:, 0])
        if has.any():
            worst = max(worst, float(np.max(np.abs(fresh.q[has] - rec.q[has]))))
    return worst
