"""Trainable signed-distance field: sinusoidal encoding + softplus MLP.

Parameters live in a plain pytree::

    {"layers": [(w0, b0), ..., (w_out, b_out)], "variance": scalar}

The volume-rendering sharpness is ``s = exp(10 * variance)``. Derivatives with
respect to the input and the parameters (including the derivative of the input
gradient, needed by the eikonal and refraction terms) come from JAX.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import partial
from pathlib import Path
from typing import Protocol

import numpy as np

from ._jax import jax, jnp
from .errors import FormatError, NonFiniteError
from .optim import AdamConfig, adam_init, adam_update
from .shapes import AnalyticShape

CHECKPOINT_MAGIC = b"NETO"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sIIII")

DEFAULT_VARIANCE = 0.3


class ScalarField(Protocol):
    """Anything with a JAX-traceable ``sdf(params, x) -> (...)`` method."""

    def sdf(self, params, x): ...


def sharpness(params):
    return jnp.exp(10.0 * params["variance"])


def with_sharpness(params, s: float):
    """Copy of ``params`` whose density sharpness starts at ``s``."""
    if not s > 0:
        raise ValueError(f"sharpness must be positive, got {s}")
    v = params["variance"]
    return dict(params, variance=jnp.asarray(np.log(s) / 10.0, v.dtype))


def positional_encode(x, n_freqs: int, xp=jnp):
    """``[x, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^(L-1) pi x), cos(2^(L-1) pi x)]``."""
    feats = [x]
    for k in range(n_freqs):
        arg = (2.0**k * np.pi) * x
        feats += [xp.sin(arg), xp.cos(arg)]
    return xp.concatenate(feats, axis=-1)


def _softplus(z, beta):
    bz = beta * z
    return (jnp.maximum(bz, 0.0) + jnp.log1p(jnp.exp(-jnp.abs(bz)))) / beta


@dataclass(frozen=True)
class NeuralField:
    depth: int = 4
    width: int = 128
    n_freqs: int = 5
    beta: float = 100.0

    @property
    def in_dim(self) -> int:
        return 3 + 6 * self.n_freqs

    def layer_shapes(self):
        dims = [self.in_dim] + [self.width] * self.depth + [1]
        return list(zip(dims[:-1], dims[1:]))

    def init_params(self, seed: int = 0, dtype=jnp.float32):
        key = jax.random.PRNGKey(seed)
        layers = []
        for i, (fan_in, fan_out) in enumerate(self.layer_shapes()):
            key, sub = jax.random.split(key)
            last = i == self.depth
            std = float((1e-2 if last else np.sqrt(2.0)) / np.sqrt(fan_in))
            w = std * jax.random.normal(sub, (fan_in, fan_out), dtype)
            if i == 0:
                # start smooth: the sinusoidal channels are switched off until training needs them
                w = w.at[3:].set(0.0)
            layers.append((w, jnp.zeros((fan_out,), dtype)))
        return {"layers": layers, "variance": jnp.asarray(DEFAULT_VARIANCE, dtype)}

    def sdf(self, params, x):
        layers = params["layers"]
        h = positional_encode(x.astype(layers[0][0].dtype), self.n_freqs)
        for w, b in layers[:-1]:
            h = _softplus(h @ w + b, self.beta)
        w, b = layers[-1]
        return (h @ w + b)[..., 0]


@dataclass(frozen=True)
class AnalyticField:
    """Wraps an :class:`AnalyticShape` so the tracer can use it like a network."""

    shape: AnalyticShape

    def init_params(self, sharpness_value: float = 1000.0, dtype=jnp.float64):
        return {"variance": jnp.asarray(np.log(sharpness_value) / 10.0, dtype)}

    def sdf(self, params, x):
        return self.shape.sdf(x.astype(params["variance"].dtype), xp=jnp)


def value_and_input_grad(field: ScalarField, params, x):
    """Per-point SDF values and spatial gradients (differentiable in ``params``)."""
    g, pullback = jax.vjp(lambda pts: field.sdf(params, pts), x)
    (grad,) = pullback(jnp.ones_like(g))
    return g, grad


@partial(jax.jit, static_argnums=0)
def _eval_jit(field, params, x):
    return value_and_input_grad(field, params, x)


def field_eval(field: ScalarField, params, x, chunk: int = 65536):
    """Numpy ``(sdf, grad)`` at points ``x`` of shape ``(N, 3)`` or ``(3,)``."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    pts = np.atleast_2d(x)
    vals, grads = [], []
    for i in range(0, len(pts), chunk):
        g, dg = _eval_jit(field, params, jnp.asarray(pts[i : i + chunk]))
        vals.append(np.asarray(g, dtype=float))
        grads.append(np.asarray(dg, dtype=float))
    v, gr = np.concatenate(vals), np.concatenate(grads)
    return (v[0], gr[0]) if single else (v, gr)


@partial(jax.jit, static_argnums=0)
def _sdf_jit(field, params, x):
    return field.sdf(params, x)


def field_values(field: ScalarField, params, x, chunk: int = 65536) -> np.ndarray:
    """Numpy SDF values only (cheaper than :func:`field_eval`)."""
    pts = np.asarray(x, dtype=float).reshape(-1, 3)
    out = [np.asarray(_sdf_jit(field, params, jnp.asarray(pts[i : i + chunk])), dtype=float) for i in range(0, len(pts), chunk)]
    return np.concatenate(out) if out else np.zeros(0)


@partial(jax.jit, static_argnums=0)
def _backward_jit(field, params, x, sdf_bar, grad_bar):
    _, vjp = jax.vjp(lambda p: value_and_input_grad(field, p, x), params)
    return vjp((sdf_bar, grad_bar))[0]


def field_backward(field: ScalarField, params, x, sdf_bar, grad_bar):
    """Vector-Jacobian product of ``x -> (sdf, grad)`` with respect to the parameters.

    ``sdf_bar`` has shape ``(N,)`` and ``grad_bar`` shape ``(N, 3)``; the result
    is a parameter pytree holding ``sum_k sdf_bar_k d sdf_k/d theta +
    grad_bar_k . d grad_k/d theta``.
    """
    dtype = jax.tree_util.tree_leaves(params)[0].dtype
    x = jnp.asarray(x, dtype)
    out = _backward_jit(field, params, x, jnp.asarray(sdf_bar, dtype), jnp.asarray(grad_bar, dtype))
    for leaf in jax.tree_util.tree_leaves(out):
        if not np.all(np.isfinite(np.asarray(leaf))):
            raise NonFiniteError("field_backward produced a non-finite gradient")
    return out


def fit_sdf(field: ScalarField, params, target, *, steps=2000, batch=1024, bound=1.0, lr=1e-3,
            near_surface_frac=0.5, seed=0, fit_variance=False):
    """Supervised regression of ``field`` onto an analytic SDF ``target``.

    ``target`` is a jnp-traceable function ``x -> sdf``. Half of each batch is
    drawn uniformly in the bound, the rest is pulled towards the zero set by a
    Newton projection so the surface itself is fitted tightly.
    """
    dtype = params["variance"].dtype
    cfg = AdamConfig(lr=lr)

    def loss_fn(p, x):
        return jnp.mean((field.sdf(p, x) - target(x)) ** 2)

    @jax.jit
    def step(p, state, i):
        key = jax.random.fold_in(jax.random.PRNGKey(seed), i)
        k1, k2 = jax.random.split(key)
        x = jax.random.uniform(k1, (batch, 3), dtype, -bound, bound)
        n_near = int(batch * near_surface_frac)
        xs = x[:n_near]
        d, pull = jax.vjp(target, xs)
        (gd,) = pull(jnp.ones_like(d))
        xs = xs - d[:, None] * gd + 0.02 * jax.random.normal(k2, xs.shape, dtype)
        x = jnp.concatenate([xs, x[n_near:]], axis=0)
        loss, grads = jax.value_and_grad(loss_fn)(p, x)
        if not fit_variance:
            grads = dict(grads, variance=jnp.zeros_like(grads["variance"]))
        p, state = adam_update(p, grads, state, cfg)
        return p, state, loss

    state = adam_init(params)
    for i in range(steps):
        params, state, _ = step(params, state, i)
    return params


_SPHERE_CACHE: dict = {}


def init_sphere(field: NeuralField, seed: int = 0, radius: float = 0.5, *, steps: int = 2000,
                bound: float = 1.0, dtype=jnp.float32):
    """Fresh network pre-fitted to ``|x| - radius`` over the cube ``[-bound, bound]^3``."""
    key = (field, seed, float(radius), steps, float(bound), jnp.dtype(dtype).name)
    if key not in _SPHERE_CACHE:
        params = field.init_params(seed, dtype)
        params = fit_sdf(field, params, lambda x: jnp.sqrt(jnp.sum(x * x, -1) + 1e-30) - radius,
                         steps=steps, bound=bound, seed=seed)
        _SPHERE_CACHE[key] = params
    return jax.tree_util.tree_map(lambda a: a, _SPHERE_CACHE[key])


def save_checkpoint(path, field: NeuralField, params) -> None:
    """Write the ``NETO`` binary container (float64, little-endian, layer order)."""
    chunks = [_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, field.depth, field.width, field.n_freqs)]
    for w, b in params["layers"]:
        chunks.append(np.asarray(w, dtype="<f8").tobytes())
        chunks.append(np.asarray(b, dtype="<f8").tobytes())
    s = np.exp(10.0 * np.asarray(params["variance"], dtype=np.float64))
    chunks.append(np.asarray([s], dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path, dtype=jnp.float32):
    """Read a checkpoint; returns ``(NeuralField, params)``."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, depth, width, n_freqs = _HEADER.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})")
    field = NeuralField(depth, width, n_freqs)
    n = sum(a * b + b for a, b in field.layer_shapes()) + 1
    body = raw[_HEADER.size :]
    if len(body) != 8 * n:
        raise FormatError(f"{path}: expected {8 * n} parameter bytes after header, found {len(body)}")
    flat = np.frombuffer(body, dtype="<f8")
    layers, off = [], 0
    for a, b in field.layer_shapes():
        w = flat[off : off + a * b].reshape(a, b)
        off += a * b
        layers.append((jnp.asarray(w, dtype), jnp.asarray(flat[off : off + b], dtype)))
        off += b
    s = float(flat[off])
    if not s > 0:
        raise FormatError(f"{path}: non-positive sharpness {s}")
    return field, {"layers": layers, "variance": jnp.asarray(np.log(s) / 10.0, dtype)}
