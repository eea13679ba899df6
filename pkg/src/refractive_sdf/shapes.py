"""Analytic signed-distance shapes used as ground truth and test oracles.

Every primitive returns ``(value, gradient)`` in closed form. Unions take the
pointwise minimum; they are exact outside and, for disjoint components, also
exact inside.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_TINY = 1e-30


def _norm(v, xp):
    return xp.sqrt(xp.sum(v * v, axis=-1) + _TINY)


def _sphere(x, center, radius, xp):
    rel = x - xp.asarray(center)
    r = _norm(rel, xp)
    return r - radius, rel / r[..., None]


def _torus(x, center, major, minor, xp):
    rel = x - xp.asarray(center)
    rho = xp.sqrt(rel[..., 0] ** 2 + rel[..., 1] ** 2 + _TINY)
    qa = rho - major
    qz = rel[..., 2]
    length = xp.sqrt(qa * qa + qz * qz + _TINY)
    g = xp.stack([qa / length * rel[..., 0] / rho, qa / length * rel[..., 1] / rho, qz / length], axis=-1)
    return length - minor, g


def _rounded_box(x, center, half_extents, rounding, xp):
    rel = x - xp.asarray(center)
    sign = xp.where(rel < 0, -1.0, 1.0)
    q = xp.abs(rel) - (xp.asarray(half_extents) - rounding)
    qpos = xp.maximum(q, 0.0)
    outer = _norm(qpos, xp)
    qmax = xp.max(q, axis=-1)
    value = xp.where(qmax > 0, outer, qmax) - rounding
    g_out = sign * qpos / outer[..., None]
    k = xp.argmax(q, axis=-1)
    g_in = sign * (xp.arange(3) == k[..., None])
    return value, xp.where((qmax > 0)[..., None], g_out, g_in)


def _cylinder(x, center, radius, half_height, xp):
    """Capped cylinder with its axis along ``z``."""
    rel = x - xp.asarray(center)
    rho = xp.sqrt(rel[..., 0] ** 2 + rel[..., 1] ** 2 + _TINY)
    da = rho - radius
    dz = xp.abs(rel[..., 2]) - half_height
    sz = xp.where(rel[..., 2] < 0, -1.0, 1.0)
    radial = xp.stack([rel[..., 0] / rho, rel[..., 1] / rho, xp.zeros_like(rho)], axis=-1)
    axial = xp.stack([xp.zeros_like(rho), xp.zeros_like(rho), sz], axis=-1)
    pa, pz = xp.maximum(da, 0.0), xp.maximum(dz, 0.0)
    outer = xp.sqrt(pa * pa + pz * pz + _TINY)
    inside = (da <= 0) & (dz <= 0)
    value = xp.where(inside, xp.maximum(da, dz), outer)
    g_out = (pa / outer)[..., None] * radial + (pz / outer)[..., None] * axial
    g_in = xp.where((da > dz)[..., None], radial, axial)
    return value, xp.where(inside[..., None], g_in, g_out)


def _union(parts, xp):
    value, grad = parts[0]
    for v, g in parts[1:]:
        take = v < value
        grad = xp.where(take[..., None], g, grad)
        value = xp.where(take, v, value)
    return value, grad


@dataclass(frozen=True)
class AnalyticShape:
    """Ground-truth shape: a variant tag plus its parameters (scene units).

    Use the named constructors; ``params`` is a tuple of tuples so instances
    are hashable and can be passed as static arguments to ``jax.jit``.
    """

    kind: str
    params: tuple

    VARIANTS = ("sphere", "torus", "rounded_box", "barbell", "two_cylinders")

    @classmethod
    def sphere(cls, radius=0.5, center=(0.0, 0.0, 0.0)):
        return cls("sphere", (tuple(map(float, center)), float(radius)))

    @classmethod
    def torus(cls, major=0.6, minor=0.2, center=(0.0, 0.0, 0.0)):
        return cls("torus", (tuple(map(float, center)), float(major), float(minor)))

    @classmethod
    def rounded_box(cls, half_extents=(0.5, 0.4, 0.3), rounding=0.08, center=(0.0, 0.0, 0.0)):
        return cls("rounded_box", (tuple(map(float, center)), tuple(map(float, half_extents)), float(rounding)))

    @classmethod
    def barbell(cls, radius=0.35, separation=0.8):
        """Two disjoint spheres centred at ``(+-separation/2, 0, 0)``."""
        if separation <= 2 * radius:
            raise ValueError("barbell spheres must not overlap")
        h = separation / 2
        return cls("barbell", (((-h, 0.0, 0.0), float(radius)), ((h, 0.0, 0.0), float(radius))))

    @classmethod
    def two_cylinders(cls, radius=0.15, half_height=0.5, separation=0.6):
        """Two vertical capped cylinders side by side along ``x`` ("legs")."""
        if separation <= 2 * radius:
            raise ValueError("cylinders must not overlap")
        h = separation / 2
        return cls(
            "two_cylinders",
            (((-h, 0.0, 0.0), float(radius), float(half_height)), ((h, 0.0, 0.0), float(radius), float(half_height))),
        )

    @classmethod
    def from_spec(cls, spec: dict) -> "AnalyticShape":
        spec = dict(spec)
        kind = spec.pop("kind")
        if kind not in cls.VARIANTS:
            raise ValueError(f"unknown shape {kind!r}; expected one of {cls.VARIANTS}")
        return getattr(cls, kind)(**spec)

    def to_spec(self) -> dict:
        p = self.params
        if self.kind == "sphere":
            return {"kind": "sphere", "radius": p[1], "center": list(p[0])}
        if self.kind == "torus":
            return {"kind": "torus", "major": p[1], "minor": p[2], "center": list(p[0])}
        if self.kind == "rounded_box":
            return {"kind": "rounded_box", "half_extents": list(p[1]), "rounding": p[2], "center": list(p[0])}
        if self.kind == "barbell":
            return {"kind": "barbell", "radius": p[0][1], "separation": p[1][0][0] - p[0][0][0]}
        return {
            "kind": "two_cylinders",
            "radius": p[0][1],
            "half_height": p[0][2],
            "separation": p[1][0][0] - p[0][0][0],
        }

    def _parts(self, x, xp):
        p = self.params
        if self.kind == "sphere":
            return [_sphere(x, p[0], p[1], xp)]
        if self.kind == "torus":
            return [_torus(x, p[0], p[1], p[2], xp)]
        if self.kind == "rounded_box":
            return [_rounded_box(x, p[0], p[1], p[2], xp)]
        if self.kind == "barbell":
            return [_sphere(x, c, r, xp) for c, r in p]
        if self.kind == "two_cylinders":
            return [_cylinder(x, c, r, hh, xp) for c, r, hh in p]
        raise ValueError(self.kind)

    def evaluate(self, x, xp=np):
        """Signed distance and gradient at points ``x`` of shape ``(..., 3)``."""
        return _union(self._parts(xp.asarray(x), xp), xp)

    def sdf(self, x, xp=np):
        return self.evaluate(x, xp)[0]

    def safe_step(self, x, xp=np):
        """A step length that never crosses any component surface."""
        parts = self._parts(xp.asarray(x), xp)
        step = xp.abs(parts[0][0])
        for v, _ in parts[1:]:
            step = xp.minimum(step, xp.abs(v))
        return step

    def bounding_radius(self) -> float:
        p = self.params
        if self.kind == "sphere":
            return float(np.linalg.norm(p[0]) + p[1])
        if self.kind == "torus":
            return float(np.linalg.norm(p[0]) + p[1] + p[2])
        if self.kind == "rounded_box":
            return float(np.linalg.norm(p[0]) + np.linalg.norm(p[1]))
        if self.kind == "barbell":
            return float(max(np.linalg.norm(c) + r for c, r in p))
        return float(max(np.hypot(np.hypot(c[0], c[1]) + r, abs(c[2]) + hh) for c, r, hh in p))

    def fits_in_cube(self, half=1.0) -> bool:
        grid = np.linspace(-half, half, 33)
        g = np.stack(np.meshgrid(grid, grid, grid, indexing="ij"), -1).reshape(-1, 3)
        on_face = np.any(np.abs(np.abs(g) - half) < 1e-12, axis=-1)
        return bool(np.all(self.sdf(g[on_face]) > 0))
