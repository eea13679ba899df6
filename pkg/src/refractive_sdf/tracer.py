"""Volume-rendered surface intersection and two-bounce refraction tracing.

All tracing functions are batched over rays: ``origins`` and ``dirs`` have
shape ``(m, 3)``. Sample positions along the rays are chosen without gradient
(a :class:`TracePlan`); the rendered quantities are then differentiable with
respect to the field parameters *given* that plan. Keeping the plan explicit
lets a finite-difference check hold the samples fixed.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from enum import IntEnum
from functools import partial
from typing import NamedTuple

import numpy as np

from ._jax import jax, jnp
from .field import ScalarField, sharpness, value_and_input_grad
from .geometry_optics import OpticalConstants, intersect_plane_batch, ray_box, refract_batch


class Status(IntEnum):
    VALID = 0
    MISS = 1
    TIR_EXIT = 2
    SELF_OCCLUDED = 3
    LOW_OPACITY = 4

    @property
    def tag(self) -> str:
        return _STATUS_TAGS[self]


_STATUS_TAGS = {
    Status.VALID: "ValidTwoBounce",
    Status.MISS: "Miss",
    Status.TIR_EXIT: "TIRExit",
    Status.SELF_OCCLUDED: "SelfOccluded",
    Status.LOW_OPACITY: "LowOpacity",
}


@dataclass(frozen=True)
class SamplingConfig:
    """How points are placed along a ray.

    Importance round ``k`` resamples from weights computed with sharpness
    ``base_sharpness * 2**k``. ``bound`` is the half extent of the scene cube
    used for near/far. ``mode`` selects the intersection estimator:
    ``"volume"`` (expected depth) or ``"surface"`` (sign-change bisection with
    implicit differentiation).
    """

    n_coarse: int = 64
    n_importance_rounds: int = 4
    n_importance_per_round: int = 16
    bound: float = 1.0
    interior_step_offset: float = 5e-3
    opacity_threshold: float = 0.5
    base_sharpness: float = 64.0
    mode: str = "volume"
    n_bisection: int = 12
    jitter: bool = False

    def __post_init__(self):
        if min(self.n_coarse, self.n_importance_rounds, self.n_importance_per_round) < 1:
            raise ValueError("sample counts must be >= 1")
        if self.n_coarse < 2:
            raise ValueError("need at least two coarse samples")
        if self.mode not in ("volume", "surface"):
            raise ValueError(f"unknown intersection mode {self.mode!r}")
        if not self.bound > 0:
            raise ValueError("bound must be positive")

    @property
    def n_samples(self) -> int:
        return self.n_coarse + self.n_importance_rounds * self.n_importance_per_round


# cheaper sampling used for training on a laptop-class CPU; four rounds keep placement sharper than the learned s
DESK_SAMPLING = SamplingConfig(n_coarse=32, n_importance_rounds=4, n_importance_per_round=8, jitter=True)


class SurfaceHit(NamedTuple):
    t_hat: jnp.ndarray  # (m,)
    point: jnp.ndarray  # (m, 3)
    normal: jnp.ndarray  # (m, 3), outward (normalised field gradient)
    opacity: jnp.ndarray  # (m,)
    found: jnp.ndarray  # (m,) bool
    t: jnp.ndarray  # (m, n) sample parameters
    weights: jnp.ndarray  # (m, n - 1) interval weights
    sample_grads: jnp.ndarray  # (m, n, 3) field gradients at the samples


class RefractionPath(NamedTuple):
    entry: SurfaceHit
    exit: SurfaceHit
    dir_interior: jnp.ndarray
    dir_out: jnp.ndarray
    q_virtual: jnp.ndarray
    status: jnp.ndarray  # (m,) int, see Status


class TracePlan(NamedTuple):
    t_entry: jnp.ndarray
    t_interior: jnp.ndarray


# ----------------------------------------------------------------------------- weights


def interval_weights(g, s):
    """Per-interval weights from SDF values at sorted samples.

    ``alpha_i = max((Phi(g_i) - Phi(g_{i+1})) / Phi(g_i), 0)`` with ``Phi`` the
    logistic sigmoid of sharpness ``s``; ``w_i = alpha_i prod_{j<i} (1 - alpha_j)``.
    """
    phi = jax.nn.sigmoid(s * g)
    alpha = jnp.clip((phi[..., :-1] - phi[..., 1:]) / (phi[..., :-1] + 1e-6), 0.0, 1.0)
    trans = jnp.cumprod(1.0 - alpha, axis=-1)
    trans = jnp.concatenate([jnp.ones_like(trans[..., :1]), trans[..., :-1]], axis=-1)
    return alpha * trans


def _inverse_cdf(t, w, n_new, u):
    """Draw ``n_new`` parameters per ray from the piecewise-constant pdf ``w`` on ``t``."""
    pdf = w + 1e-5
    pdf = pdf / jnp.sum(pdf, axis=-1, keepdims=True)
    cdf = jnp.concatenate([jnp.zeros_like(pdf[..., :1]), jnp.cumsum(pdf, axis=-1)], axis=-1)
    idx = jnp.sum(u[..., None, :] >= cdf[..., :, None], axis=-2)  # (m, n_new)
    n = t.shape[-1]
    below = jnp.clip(idx - 1, 0, n - 1)
    above = jnp.clip(idx, 0, n - 1)
    c0 = jnp.take_along_axis(cdf, below, -1)
    c1 = jnp.take_along_axis(cdf, above, -1)
    t0 = jnp.take_along_axis(t, below, -1)
    t1 = jnp.take_along_axis(t, above, -1)
    denom = jnp.where(c1 - c0 < 1e-8, 1.0, c1 - c0)
    return t0 + (u - c0) / denom * (t1 - t0)


def _profile(field, params, origins, dirs, t, flip):
    g = field.sdf(params, origins[:, None, :] + t[..., None] * dirs[:, None, :])
    return -g if flip else g


def sample_ray(field: ScalarField, params, origins, dirs, near, far, cfg: SamplingConfig, flip: bool, key=None):
    """Coarse-to-fine sample parameters ``t`` of shape ``(m, cfg.n_samples)`` (no gradient)."""
    params = jax.lax.stop_gradient(params)
    m = origins.shape[0]
    dtype = origins.dtype
    n = cfg.n_coarse
    if key is not None and cfg.jitter:
        key, sub = jax.random.split(key)
        offs = jax.random.uniform(sub, (m, n), dtype)
    else:
        offs = jnp.full((m, n), 0.5, dtype)
    u = (jnp.arange(n, dtype=dtype) + offs) / n
    t = near[:, None] + (far - near)[:, None] * u
    g = _profile(field, params, origins, dirs, t, flip)
    k = cfg.n_importance_per_round
    for r in range(cfg.n_importance_rounds):
        w = interval_weights(g, cfg.base_sharpness * 2.0**r)
        if key is not None and cfg.jitter:
            key, sub = jax.random.split(key)
            uu = (jnp.arange(k, dtype=dtype) + jax.random.uniform(sub, (m, k), dtype)) / k
        else:
            uu = jnp.broadcast_to((jnp.arange(k, dtype=dtype) + 0.5) / k, (m, k))
        t_new = _inverse_cdf(t, w, k, uu)
        t_all = jnp.concatenate([t, t_new], axis=-1)
        order = jnp.argsort(t_all, axis=-1)
        t = jnp.take_along_axis(t_all, order, -1)
        if r + 1 < cfg.n_importance_rounds:
            g_new = _profile(field, params, origins, dirs, t_new, flip)
            g = jnp.take_along_axis(jnp.concatenate([g, g_new], axis=-1), order, -1)
    return jax.lax.stop_gradient(t)


def _normalise(v):
    return v / jnp.sqrt(jnp.sum(v * v, axis=-1, keepdims=True) + 1e-20)


def _surface_root(field, params, origins, dirs, t, g):
    """First sign change of the (flipped) profile ``g`` refined by bisection; no gradient."""
    params = jax.lax.stop_gradient(params)
    change = (g[:, :-1] > 0) & (g[:, 1:] <= 0)
    found = jnp.any(change, axis=-1)
    i = jnp.argmax(change, axis=-1)
    lo = jnp.take_along_axis(t, i[:, None], -1)[:, 0]
    hi = jnp.take_along_axis(t, i[:, None] + 1, -1)[:, 0]
    sign = jnp.sign(jnp.take_along_axis(g, i[:, None], -1)[:, 0] + 0.0)
    return lo, hi, found, sign


def render_hit(field: ScalarField, params, origins, dirs, t, cfg: SamplingConfig, flip: bool) -> SurfaceHit:
    """Differentiable intersection estimate from fixed samples ``t``."""
    m, n = t.shape
    pts = origins[:, None, :] + t[..., None] * dirs[:, None, :]
    g, grad = value_and_input_grad(field, params, pts.reshape(-1, 3))
    g = g.reshape(m, n)
    grad = grad.reshape(m, n, 3)
    prof = -g if flip else g
    w = interval_weights(prof, sharpness(params).astype(g.dtype))
    opacity = jnp.sum(w, axis=-1)
    if cfg.mode == "volume":
        tmid = 0.5 * (t[:, :-1] + t[:, 1:])
        t_hat = jnp.sum(w * tmid, axis=-1) / jnp.maximum(opacity, 1e-6)
        found = opacity >= cfg.opacity_threshold
    else:
        t_hat, found = _surface_t(field, params, origins, dirs, t, prof, cfg, flip)
    point = origins + t_hat[:, None] * dirs
    _, gp = value_and_input_grad(field, params, point)
    return SurfaceHit(t_hat, point, _normalise(gp), opacity, found, t, w, grad)


def _surface_t(field, params, origins, dirs, t, prof, cfg, flip):
    sg = jax.lax.stop_gradient
    lo, hi, found, _ = _surface_root(field, params, sg(origins), sg(dirs), t, sg(prof))
    p_const = sg(params)
    o_c, d_c = sg(origins), sg(dirs)
    sgn = -1.0 if flip else 1.0

    def body(_, bounds):
        lo, hi = bounds
        mid = 0.5 * (lo + hi)
        v = sgn * field.sdf(p_const, o_c + mid[:, None] * d_c)
        lo = jnp.where(v > 0, mid, lo)
        hi = jnp.where(v > 0, hi, mid)
        return lo, hi

    lo, hi = jax.lax.fori_loop(0, cfg.n_bisection, body, (lo, hi))
    t_star = sg(0.5 * (lo + hi))
    x = origins + t_star[:, None] * dirs
    gv, gx = value_and_input_grad(field, params, x)
    dgdt = sg(jnp.sum(gx * dirs, axis=-1))
    dgdt = jnp.where(jnp.abs(dgdt) < 1e-6, jnp.where(dgdt < 0, -1e-6, 1e-6), dgdt)
    # implicit differentiation: value t*, derivative -(dg/dtheta)/(dg/dt)
    t_hat = t_star - (gv - sg(gv)) / dgdt
    t_hat = jnp.where(found, t_hat, t_star)
    return t_hat, found


# ----------------------------------------------------------------------------- volume_intersect


def _near_far(origins, dirs, cfg):
    near, far, hit = ray_box(origins, dirs, cfg.bound, xp=jnp)
    far = jnp.where(hit, far, near + 1e-3)
    return near, far, hit


@partial(jax.jit, static_argnums=(0, 4, 5))
def _volume_intersect(field, params, origins, dirs, cfg, flip, key=None):
    near, far, hit = _near_far(origins, dirs, cfg)
    t = sample_ray(field, params, origins, dirs, near, far, cfg, flip, key)
    h = render_hit(field, params, origins, dirs, t, cfg, flip)
    return h._replace(found=h.found & hit)


def volume_intersect(field: ScalarField, params, origins, dirs, cfg: SamplingConfig = SamplingConfig(),
                     flip_sign: bool = False, key=None) -> SurfaceHit:
    """Intersect rays with the zero set; ``found`` is False where opacity < threshold."""
    dtype = params["variance"].dtype
    o = jnp.atleast_2d(jnp.asarray(origins, dtype))
    d = jnp.atleast_2d(jnp.asarray(dirs, dtype))
    return _volume_intersect(field, params, o, d, cfg, bool(flip_sign), key)


# ----------------------------------------------------------------------------- two-bounce tracing


def _interior_ray(entry_point, dir_interior, cfg):
    return entry_point + cfg.interior_step_offset * dir_interior


def plan_two_bounce(field: ScalarField, params, origins, dirs, constants: OpticalConstants,
                    cfg: SamplingConfig, key=None) -> TracePlan:
    """Choose sample positions for the entry and interior traces (no gradient)."""
    p = jax.lax.stop_gradient(params)
    k1 = k2 = None
    if key is not None:
        k1, k2 = jax.random.split(key)
    near, far, _ = _near_far(origins, dirs, cfg)
    t1 = sample_ray(field, p, origins, dirs, near, far, cfg, False, k1)
    entry = render_hit(field, p, origins, dirs, t1, cfg, False)
    d1, _ = refract_batch(dirs, entry.normal, constants.eta_enter, xp=jnp)
    d1 = _normalise(d1)
    o2 = _interior_ray(entry.point, d1, cfg)
    near2, far2, _ = _near_far(o2, d1, cfg)
    t2 = sample_ray(field, p, o2, d1, near2, far2, cfg, True, k2)
    return TracePlan(t1, t2)


def render_two_bounce(field: ScalarField, params, origins, dirs, plane_point, plane_normal,
                      constants: OpticalConstants, cfg: SamplingConfig, plan: TracePlan) -> RefractionPath:
    """Differentiable two-refraction path for fixed samples; sets every status except SelfOccluded."""
    _, _, in_box = _near_far(origins, dirs, cfg)
    entry = render_hit(field, params, origins, dirs, plan.t_entry, cfg, False)
    cos1 = -jnp.sum(dirs * entry.normal, axis=-1)
    entry_ok = entry.found & in_box & (cos1 > 0)
    d1, _ = refract_batch(dirs, entry.normal, constants.eta_enter, xp=jnp)
    d1 = _normalise(d1)
    o2 = _interior_ray(entry.point, d1, cfg)
    exit_ = render_hit(field, params, o2, d1, plan.t_interior, cfg, True)
    cos2 = jnp.sum(d1 * exit_.normal, axis=-1)
    exit_ok = exit_.found & (cos2 > 0)
    d_out, tir = refract_batch(d1, -exit_.normal, constants.eta_exit, xp=jnp)
    d_out = _normalise(d_out)
    tq, plane_ok = intersect_plane_batch(exit_.point, d_out, plane_point, plane_normal, xp=jnp)
    q = exit_.point + tq[:, None] * d_out
    status = jnp.where(
        ~entry_ok,
        Status.MISS,
        jnp.where(~exit_ok, Status.LOW_OPACITY,
                  jnp.where(tir, Status.TIR_EXIT, jnp.where(plane_ok, Status.VALID, Status.LOW_OPACITY))),
    ).astype(jnp.int32)
    return RefractionPath(entry, exit_, d1, d_out, q, status)


@partial(jax.jit, static_argnums=(0, 6, 7))
def _trace_two_bounce(field, params, origins, dirs, plane_point, plane_normal, constants, cfg, key):
    plan = plan_two_bounce(field, params, origins, dirs, constants, cfg, key)
    return render_two_bounce(field, params, origins, dirs, plane_point, plane_normal, constants, cfg, plan)


def trace_two_bounce(field: ScalarField, params, origins, dirs, plane_point, plane_normal,
                     constants: OpticalConstants = OpticalConstants(),
                     cfg: SamplingConfig = SamplingConfig(), key=None) -> RefractionPath:
    """Trace camera rays through entry and exit refractions onto the monitor plane.

    ``plane_point``/``plane_normal`` may be single vectors or per-ray ``(m, 3)``.
    """
    dtype = params["variance"].dtype
    o = jnp.atleast_2d(jnp.asarray(origins, dtype))
    d = jnp.atleast_2d(jnp.asarray(dirs, dtype))
    pp = jnp.broadcast_to(jnp.asarray(plane_point, dtype), o.shape)
    pn = jnp.broadcast_to(jnp.asarray(plane_normal, dtype), o.shape)
    return _trace_two_bounce(field, params, o, d, pp, pn, constants, cfg, key)


# ----------------------------------------------------------------------------- self-occlusion


class OcclusionCheck(NamedTuple):
    occluded: jnp.ndarray  # (m,) bool
    back_point: jnp.ndarray  # (m, 3) backward intersection p_b
    back_found: jnp.ndarray  # (m,) bool
    max_sdf: jnp.ndarray  # (m,) largest SDF sampled on the p_f -> p_b segment


def _check_self_occlusion(field, params, entry_point, dir_interior, cfg, n_segment_samples, sdf_threshold):
    p = jax.lax.stop_gradient(params)
    pf = jax.lax.stop_gradient(entry_point)
    d = jax.lax.stop_gradient(dir_interior)
    far_dist = 2.0 * (2.0 * np.sqrt(3.0) * cfg.bound)
    vp = pf + far_dist * d
    back_dir = -d
    near, far, in_box = _near_far(vp, back_dir, cfg)
    far = jnp.minimum(far, far_dist)
    t = sample_ray(field, p, vp, back_dir, near, far, cfg, False)
    back = render_hit(field, p, vp, back_dir, t, cfg, False)
    back_found = back.found & in_box
    u = (jnp.arange(n_segment_samples, dtype=pf.dtype) + 1.0) / (n_segment_samples + 1.0)
    seg = pf[:, None, :] + u[None, :, None] * (back.point - pf)[:, None, :]
    vals = field.sdf(p, seg)
    max_sdf = jnp.max(vals, axis=-1)
    occluded = (~back_found) | (max_sdf > sdf_threshold)
    return OcclusionCheck(occluded, back.point, back_found, max_sdf)


_check_jit = jax.jit(_check_self_occlusion, static_argnums=(0, 4, 5, 6))


def check_self_occlusion(field: ScalarField, params, entry_point, dir_interior,
                         cfg: SamplingConfig = SamplingConfig(), n_segment_samples: int = 32,
                         sdf_threshold: float = 1e-3) -> OcclusionCheck:
    """Reversibility test for rays that may refract more than twice.

    From the entry point ``p_f`` a far point is placed along the refracted
    direction, the reversed line is intersected with the field to get ``p_b``
    and the segment ``p_f -> p_b`` is scanned for positive SDF values. A ray is
    flagged when such a value exists or when the reversed ray finds no surface.
    """
    dtype = params["variance"].dtype
    pf = jnp.atleast_2d(jnp.asarray(entry_point, dtype))
    d = jnp.atleast_2d(jnp.asarray(dir_interior, dtype))
    return _check_jit(field, params, pf, d, cfg, int(n_segment_samples), float(sdf_threshold))


# ----------------------------------------------------------------------------- debug dump


def format_trace(path: RefractionPath, i: int = 0, status=None) -> str:
    """Text dump of ray ``i``: ``ENTRY``/``EXIT``/``Q``/``STATUS`` lines."""
    st = Status(int(status if status is not None else path.status[i]))
    lines = []
    if st != Status.MISS:
        e = np.asarray(path.entry.point[i]), np.asarray(path.entry.normal[i])
        lines.append("ENTRY " + " ".join(f"{v:.9g}" for v in np.concatenate(e)))
    if st in (Status.VALID, Status.TIR_EXIT, Status.SELF_OCCLUDED) and bool(path.exit.found[i]):
        x = np.asarray(path.exit.point[i]), np.asarray(path.exit.normal[i])
        lines.append("EXIT " + " ".join(f"{v:.9g}" for v in np.concatenate(x)))
    if st == Status.VALID:
        lines.append("Q " + " ".join(f"{v:.9g}" for v in np.asarray(path.q_virtual[i])))
    lines.append(f"STATUS {st.tag}")
    return "\n".join(lines) + "\n"


def parse_trace(text: str) -> dict:
    """Inverse of :func:`format_trace` (values as numpy arrays)."""
    out = {}
    for line in text.strip().splitlines():
        key, *vals = line.split()
        out[key] = vals[0] if key == "STATUS" else np.array([float(v) for v in vals])
    return out


def with_sampling(cfg: SamplingConfig, **changes) -> SamplingConfig:
    return replace(cfg, **changes)
