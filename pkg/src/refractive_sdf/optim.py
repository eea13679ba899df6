"""Adam over arbitrary parameter pytrees."""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

from ._jax import jax, jnp
from .errors import NonFiniteError


class AdamState(NamedTuple):
    step: jnp.ndarray
    m: object
    v: object


class AdamConfig(NamedTuple):
    lr: float = 5e-4
    b1: float = 0.9
    b2: float = 0.999
    eps: float = 1e-8


def adam_init(params) -> AdamState:
    zeros = jax.tree_util.tree_map(jnp.zeros_like, params)
    return AdamState(jnp.zeros((), jnp.int32), zeros, jax.tree_util.tree_map(jnp.zeros_like, params))


def adam_update(params, grads, state: AdamState, cfg: AdamConfig = AdamConfig()):
    """Pure bias-corrected Adam update; safe to call under ``jit``."""
    step = state.step + 1
    m = jax.tree_util.tree_map(lambda m, g: cfg.b1 * m + (1 - cfg.b1) * g, state.m, grads)
    v = jax.tree_util.tree_map(lambda v, g: cfg.b2 * v + (1 - cfg.b2) * g * g, state.v, grads)
    t = step.astype(jnp.float64)
    c1 = 1 - cfg.b1**t
    c2 = 1 - cfg.b2**t

    def upd(p, m, v):
        mhat = m / c1.astype(p.dtype)
        vhat = v / c2.astype(p.dtype)
        return p - cfg.lr * mhat / (jnp.sqrt(vhat) + cfg.eps)

    return jax.tree_util.tree_map(upd, params, m, v), AdamState(step, m, v)


def all_finite(tree) -> bool:
    return all(bool(np.all(np.isfinite(np.asarray(x)))) for x in jax.tree_util.tree_leaves(tree))


def adam_step(params, grads, state: AdamState, cfg: AdamConfig = AdamConfig()):
    """Checked Adam step: raises :class:`NonFiniteError` instead of corrupting state."""
    if jax.tree_util.tree_structure(params) != jax.tree_util.tree_structure(grads):
        raise ValueError("gradient tree does not match parameter tree")
    for p, g in zip(jax.tree_util.tree_leaves(params), jax.tree_util.tree_leaves(grads)):
        if np.shape(p) != np.shape(g):
            raise ValueError(f"gradient shape {np.shape(g)} != parameter shape {np.shape(p)}")
    if not (all_finite(params) and all_finite(grads)):
        raise NonFiniteError("non-finite parameters or gradients passed to adam_step")
    return adam_update(params, grads, state, cfg)
