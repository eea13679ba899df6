"""Rays, pinhole cameras, the monitor plane and Snell refraction.

Batched helpers take an ``xp`` namespace (``numpy`` or ``jax.numpy``) so the
same formulas serve the differentiable tracer and the numpy oracle.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, OutOfBounds

AIR_IOR = 1.0003
GLASS_IOR = 1.4723


def _unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float))
        d = np.asarray(self.direction, dtype=float)
        n = np.linalg.norm(d)
        if not np.isfinite(n) or n == 0.0:
            raise DomainError("ray direction must be a finite non-zero vector")
        object.__setattr__(self, "direction", d / n)

    def at(self, t):
        return self.origin + np.multiply.outer(t, self.direction)


@dataclass(frozen=True)
class MonitorPlane:
    """Planar background screen; ``uv`` coordinates run along ``u_axis``/``v_axis``."""

    point: np.ndarray
    normal: np.ndarray
    u_axis: np.ndarray
    v_axis: np.ndarray
    half_extent: tuple[float, float] = (np.inf, np.inf)

    def __post_init__(self):
        for name in ("point", "normal", "u_axis", "v_axis"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        axes = np.stack([self.u_axis, self.v_axis, self.normal])
        if not np.allclose(axes @ axes.T, np.eye(3), atol=1e-9):
            raise DomainError("monitor axes must be orthonormal")

    @classmethod
    def facing(cls, point, normal, up=(0.0, 0.0, 1.0), half_extent=(np.inf, np.inf)):
        """Build a plane whose ``v_axis`` is the projection of ``up``."""
        n = _unit(normal)
        up = np.asarray(up, dtype=float)
        v = up - np.dot(up, n) * n
        if np.linalg.norm(v) < 1e-9:
            v = np.array([0.0, 1.0, 0.0]) - n[1] * n
        v = _unit(v)
        u = np.cross(v, n)
        return cls(np.asarray(point, dtype=float), n, u, v, tuple(half_extent))

    @property
    def half_diagonal(self) -> float:
        return float(np.hypot(*self.half_extent))

    def to_uv(self, points):
        rel = np.asarray(points, dtype=float) - self.point
        return np.stack([rel @ self.u_axis, rel @ self.v_axis], axis=-1)


@dataclass(frozen=True)
class OpticalConstants:
    ior_outside: float = AIR_IOR
    ior_inside: float = GLASS_IOR

    def __post_init__(self):
        if self.ior_outside <= 1 - 1e-6 or self.ior_inside <= 1 - 1e-6:
            raise DomainError("indices of refraction must be >= 1")
        if self.ior_inside <= self.ior_outside:
            raise DomainError("ior_inside must exceed ior_outside for solid glass")

    @property
    def eta_enter(self) -> float:
        return self.ior_outside / self.ior_inside

    @property
    def eta_exit(self) -> float:
        return self.ior_inside / self.ior_outside


@dataclass(frozen=True)
class Camera:
    """Pinhole camera with OpenCV axes (x right, y down, z forward).

    ``rotation`` maps camera-frame vectors to world frame and ``center`` is the
    optical center in world coordinates. Pixel ``(i, j)`` covers
    ``[i, i+1) x [j, j+1)``; its center is at ``(i + 0.5, j + 0.5)``.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    center: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9) or abs(np.linalg.det(R) - 1) > 1e-9:
            raise DomainError("camera rotation must be a proper rotation")

    @classmethod
    def look_at(cls, center, target, width, height, fov_deg, up=(0.0, 0.0, 1.0)):
        center = np.asarray(center, dtype=float)
        forward = _unit(np.asarray(target, dtype=float) - center)
        right = np.cross(forward, np.asarray(up, dtype=float))
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(forward, [0.0, 1.0, 0.0])
        right = _unit(right)
        down = np.cross(forward, right)
        rotation = np.stack([right, down, forward], axis=1)
        f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
        return cls(f, f, width / 2, height / 2, rotation, center, int(width), int(height))

    @property
    def optical_axis(self) -> np.ndarray:
        return self.rotation[:, 2].copy()

    def pixel_centers(self):
        """All pixel indices ``(i, j)`` in row-major order (``j`` slow)."""
        j, i = np.meshgrid(np.arange(self.height), np.arange(self.width), indexing="ij")
        return np.stack([i.ravel(), j.ravel()], axis=-1)

    def rays(self, pixels):
        """Batched back-projection of continuous pixel coordinates."""
        px = np.atleast_2d(np.asarray(pixels, dtype=float))
        d_cam = np.stack(
            [(px[:, 0] - self.cx) / self.fx, (px[:, 1] - self.cy) / self.fy, np.ones(len(px))], axis=-1
        )
        d = d_cam @ self.rotation.T
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        return np.broadcast_to(self.center, d.shape).copy(), d


def pixel_ray(camera: Camera, pixel) -> Ray:
    """Ray through a continuous pixel coordinate ``(u, v)``."""
    u, v = map(float, pixel)
    if not (0.0 <= u <= camera.width and 0.0 <= v <= camera.height):
        raise OutOfBounds(f"pixel ({u}, {v}) outside {camera.width}x{camera.height} image")
    o, d = camera.rays([[u, v]])
    return Ray(o[0], d[0])


def refract(incident, normal, eta):
    """Snell refraction of a single direction.

    ``normal`` must face the incoming ray (``incident . normal < 0``) and
    ``eta`` is ``n_incident / n_transmitted``. Returns the unit transmitted
    direction, or ``None`` on total internal reflection.
    """
    i = np.asarray(incident, dtype=float)
    n = np.asarray(normal, dtype=float)
    cos_i = -float(np.dot(i, n))
    if cos_i <= 0.0:
        raise DomainError("normal must be oriented against the incident direction")
    k = 1.0 - eta * eta * (1.0 - cos_i * cos_i)
    if k < 0.0:
        return None
    return eta * i + (eta * cos_i - np.sqrt(k)) * n


def refract_batch(incident, normal, eta, xp=np):
    """Vectorised :func:`refract`; returns ``(direction, tir_mask)``.

    ``eta`` is a scalar or one ratio per ray. Rows with total internal
    reflection get an arbitrary finite direction.
    """
    cos_i = -xp.sum(incident * normal, axis=-1)
    k = 1.0 - eta * eta * (1.0 - cos_i * cos_i)
    tir = k < 0.0
    root = xp.sqrt(xp.where(tir, 1.0, k))
    eta_v = eta[..., None] if getattr(eta, "ndim", 0) else eta
    out = eta_v * incident + (eta * cos_i - root)[..., None] * normal
    return out, tir


def intersect_plane(ray: Ray, plane: MonitorPlane):
    """Forward hit of ``ray`` with ``plane`` as ``(point, uv)``, or ``None``."""
    denom = float(np.dot(ray.direction, plane.normal))
    if abs(denom) < 1e-15:
        return None
    t = float(np.dot(plane.point - ray.origin, plane.normal)) / denom
    if not t > 0.0:
        return None
    point = ray.origin + t * ray.direction
    return point, plane.to_uv(point)


def intersect_plane_batch(origins, dirs, plane_point, plane_normal, xp=np):
    """Ray parameters of plane hits and a mask of valid forward hits."""
    denom = xp.sum(dirs * plane_normal, axis=-1)
    ok = xp.abs(denom) > 1e-12
    safe = xp.where(ok, denom, 1.0)
    t = xp.sum((plane_point - origins) * plane_normal, axis=-1) / safe
    ok = ok & (t > 0.0)
    return t, ok


def ray_box(origins, dirs, half, xp=np):
    """Slab intersection with the cube ``[-half, half]^3``; returns ``(near, far, hit)``."""
    safe = xp.where(xp.abs(dirs) < 1e-12, 1e-12, dirs)
    inv = 1.0 / safe
    t0 = (-half - origins) * inv
    t1 = (half - origins) * inv
    near = xp.max(xp.minimum(t0, t1), axis=-1)
    far = xp.min(xp.maximum(t0, t1), axis=-1)
    near = xp.maximum(near, 0.0)
    return near, far, far > near
