"""Loss terms: refraction consistency, silhouette mask and eikonal regularizer."""
from __future__ import annotations

from dataclasses import dataclass

from ._jax import jnp

MASK_EPS = 1e-4


@dataclass(frozen=True)
class LossWeights:
    refraction: float = 1e-4
    eikonal: float = 0.1
    mask: float = 0.1

    def __post_init__(self):
        if min(self.refraction, self.eikonal, self.mask) < 0:
            raise ValueError("loss weights must be non-negative")


def refraction_loss(q_virtual, q_observed, valid, scale=1.0):
    """Sum over valid rays of ``||(Q - Q') / scale||^2``; 0 when no ray is valid.

    ``scale`` (scalar or per ray) expresses monitor locations in normalised
    units, typically the monitor half-diagonal.
    """
    q_virtual = jnp.asarray(q_virtual)
    diff = (jnp.asarray(q_observed) - q_virtual) / jnp.asarray(scale)[..., None]
    diff = jnp.where(jnp.asarray(valid)[..., None], diff, 0.0)
    return jnp.sum(diff * diff)


def mask_loss(opacity, mask, eps: float = MASK_EPS, weight=None):
    """Mean binary cross entropy between clamped opacities and mask bits.

    ``weight`` (per ray, mean about 1) reweights rays drawn with unequal
    probabilities; ``None`` is the plain mean.
    """
    o = jnp.clip(jnp.asarray(opacity), eps, 1.0 - eps)
    m = jnp.asarray(mask, o.dtype)
    bce = -(m * jnp.log(o) + (1.0 - m) * jnp.log(1.0 - o))
    if weight is not None:
        bce = bce * jnp.asarray(weight, o.dtype)
    return jnp.mean(bce)


def eikonal_loss(grads):
    """Mean of ``(||grad|| - 1)^2`` over all sample gradients ``(..., 3)``."""
    g = jnp.asarray(grads)
    sq = jnp.sum(g * g, axis=-1)
    pos = sq > 0
    norm = jnp.where(pos, jnp.sqrt(jnp.where(pos, sq, 1.0)), 0.0)
    return jnp.mean((norm - 1.0) ** 2)


def total_loss(weights: LossWeights, refraction, eikonal, mask):
    return weights.refraction * refraction + weights.eikonal * eikonal + weights.mask * mask
