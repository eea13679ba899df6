"""Exact multi-bounce refraction through analytic shapes by sphere tracing.

This is the ground-truth tracer behind the capture simulator and the test
oracle for the self-occlusion checker: it follows a ray through every surface
crossing, applying Snell's law each time, until the ray escapes or totally
reflects.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .geometry_optics import OpticalConstants, Ray, refract_batch
from .shapes import AnalyticShape

TIR = -1


class MultiBounceResult(NamedTuple):
    count: np.ndarray  # (m,) number of refractions; TIR rows hold -1
    tir: np.ndarray  # (m,) bool
    first_hit: np.ndarray  # (m, 3) first surface point (nan on miss)
    first_normal: np.ndarray  # (m, 3)
    exit_point: np.ndarray  # (m, 3) last surface point (nan on miss)
    final_dir: np.ndarray  # (m, 3) direction after the last refraction
    interior_dir: np.ndarray  # (m, 3) direction after the first refraction
    converged: np.ndarray  # (m,) bool, False if a march hit the iteration cap


def _march(shape, pos, dirs, active, escape_radius, tol, max_iter):
    """Sphere-trace active rays to the next crossing; returns (pos, hit)."""
    pos = pos.copy()
    hit = np.zeros(len(pos), bool)
    alive = active.copy()
    for _ in range(max_iter):
        if not alive.any():
            break
        idx = np.nonzero(alive)[0]
        step = shape.safe_step(pos[idx])
        done = step < tol
        if done.any():
            d_idx = idx[done]
            on_surface = np.abs(shape.sdf(pos[d_idx])) < 10 * tol
            hit[d_idx[on_surface]] = True
            alive[d_idx] = False
            # seam between components inside the union: push through
            seam = d_idx[~on_surface]
            pos[seam] += 1e-5 * dirs[seam]
            alive[seam] = True
        go = idx[~done]
        pos[go] += step[~done, None] * dirs[go]
        r = np.linalg.norm(pos[go], axis=-1)
        away = (r > escape_radius) & (np.sum(pos[go] * dirs[go], axis=-1) > 0)
        alive[go[away]] = False
    unconverged = alive
    return pos, hit, unconverged


def trace_multibounce(shape: AnalyticShape, origins, dirs, constants: OpticalConstants = OpticalConstants(),
                      max_bounces: int = 8, tol: float = 1e-7, max_iter: int = 4000) -> MultiBounceResult:
    """Follow every refraction along each ray (vectorised over rays)."""
    pos = np.atleast_2d(np.asarray(origins, dtype=float)).copy()
    d = np.atleast_2d(np.asarray(dirs, dtype=float)).copy()
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    m = len(pos)
    count = np.zeros(m, int)
    tir = np.zeros(m, bool)
    inside = np.zeros(m, bool)
    active = np.ones(m, bool)
    converged = np.ones(m, bool)
    nan3 = np.full((m, 3), np.nan)
    first_hit, first_normal, exit_point, interior_dir = nan3.copy(), nan3.copy(), nan3.copy(), nan3.copy()
    escape = shape.bounding_radius() + 1e-3
    # move origins that start far away up to the bounding sphere (faster marching)
    b = np.sum(pos * d, axis=-1)
    c = np.sum(pos * pos, axis=-1) - (escape + 0.05) ** 2
    disc = b * b - c
    t0 = np.where((c > 0) & (disc > 0), -b - np.sqrt(np.maximum(disc, 0)), 0.0)
    active &= ~((c > 0) & ((disc <= 0) | (t0 < 0)))
    pos += np.maximum(t0, 0)[:, None] * d

    for _ in range(max_bounces + 1):
        if not active.any():
            break
        pos, hit, unconv = _march(shape, pos, d, active, escape + 0.1, tol, max_iter)
        converged &= ~unconv
        active &= hit
        if not active.any():
            break
        idx = np.nonzero(active)[0]
        _, grad = shape.evaluate(pos[idx])
        n = grad / np.linalg.norm(grad, axis=-1, keepdims=True)
        ins = inside[idx]
        facing = np.where(ins[:, None], -n, n)
        eta = np.where(ins, constants.eta_exit, constants.eta_enter)
        new_d, is_tir = refract_batch(d[idx], facing, eta)
        is_tir &= ins
        tir[idx[is_tir]] = True
        active[idx[is_tir]] = False
        ok = idx[~is_tir]
        new_d = new_d[~is_tir]
        new_d /= np.linalg.norm(new_d, axis=-1, keepdims=True)
        first = count[ok] == 0
        first_hit[ok[first]] = pos[ok[first]]
        first_normal[ok[first]] = n[~is_tir][first]
        interior_dir[ok[first]] = new_d[first]
        exit_point[ok] = pos[ok]
        count[ok] += 1
        d[ok] = new_d
        inside[ok] = ~inside[ok]
        pos[ok] += 1e-5 * d[ok]
        too_many = ok[count[ok] >= max_bounces]
        active[too_many] = False
    count = np.where(tir, TIR, count)
    return MultiBounceResult(count, tir, first_hit, first_normal, exit_point, d, interior_dir, converged)


def brute_force_bounce_count(shape: AnalyticShape, ray: Ray, constants: OpticalConstants = OpticalConstants(),
                             max_bounces: int = 8):
    """Number of refractions along ``ray``, or :data:`TIR` (``-1``)."""
    res = trace_multibounce(shape, ray.origin, ray.direction, constants, max_bounces)
    return int(res.count[0])
