"""Invertible affine coupling stack mapping cell state to hidden state.

Each layer splits the state into halves ``(c1, c2)`` and, conditioned on the
output gate ``o``, computes::

    h1 = c1 * exp(clamp(s1([c2, o]))) + g1([c2, o])
    h2 = c2 * exp(clamp(s2([h1, o]))) + g2([h1, o])

``s*``/``g*`` are one-hidden-layer tanh networks. The log-scale is passed
through a soft clamp ``bound * tanh(s / bound)``, applied identically in both
directions so the inverse stays exact.
"""
from __future__ import annotations

import numpy as np

from . import numcore as nc
from .numcore import jnp

BLOCKS = ("s1", "g1", "s2", "g2")


def soft_clamp(s, bound: float):
    return bound * jnp.tanh(s / bound)


def mlp(params, prefix: str, x):
    hid = nc.tanh(nc.linear(x, params[prefix + ".W1"], params[prefix + ".b1"]))
    return nc.linear(hid, params[prefix + ".W2"], params[prefix + ".b2"])


def init_coupling(rng: np.random.Generator, hidden: int, n_layers: int, width: int | None = None) -> dict:
    if hidden % 2:
        raise nc.DimensionError(f"coupling layers need an even state size, got {hidden}")
    half = hidden // 2
    width = width or hidden
    fan = half + hidden
    out = {}
    for layer in range(n_layers):
        for blk in BLOCKS:
            p = f"coupling.{layer}.{blk}"
            out[p + ".W1"] = nc.uniform_init(rng, (width, fan), fan)
            out[p + ".b1"] = jnp.zeros(width)
            out[p + ".W2"] = nc.uniform_init(rng, (half, width), width)
            out[p + ".b2"] = jnp.zeros(half)
    return out


def n_coupling_layers(params) -> int:
    return len({k.split(".")[1] for k in params if k.startswith("coupling.")})


def _layer_forward(params, layer: int, c, o, bound: float):
    p = f"coupling.{layer}."
    c1, c2 = nc.split_half(c)
    cond = nc.concat(c2, o)
    h1 = c1 * nc.exp(soft_clamp(mlp(params, p + "s1", cond), bound)) + mlp(params, p + "g1", cond)
    cond = nc.concat(h1, o)
    h2 = c2 * nc.exp(soft_clamp(mlp(params, p + "s2", cond), bound)) + mlp(params, p + "g2", cond)
    return nc.concat(h1, h2)


def _layer_inverse(params, layer: int, h, o, bound: float):
    p = f"coupling.{layer}."
    h1, h2 = nc.split_half(h)
    cond = nc.concat(h1, o)
    c2 = (h2 - mlp(params, p + "g2", cond)) / nc.exp(soft_clamp(mlp(params, p + "s2", cond), bound))
    cond = nc.concat(c2, o)
    c1 = (h1 - mlp(params, p + "g1", cond)) / nc.exp(soft_clamp(mlp(params, p + "s1", cond), bound))
    return nc.concat(c1, c2)


def coupling_forward(c, o, params, n_layers: int | None = None, bound: float = 5.0):
    """Map cell state ``c`` to hidden state given output gate ``o`` (rows batched)."""
    if n_layers is None:
        n_layers = n_coupling_layers(params)
    if jnp.shape(c)[-1] % 2:
        raise nc.DimensionError(f"coupling_forward: state size {jnp.shape(c)[-1]} is odd")
    h = c
    for layer in range(n_layers):
        h = _layer_forward(params, layer, h, o, bound)
    return h


def coupling_inverse(h, o, params, n_layers: int | None = None, bound: float = 5.0):
    """Exact inverse of :func:`coupling_forward` for the same ``o`` and parameters."""
    if n_layers is None:
        n_layers = n_coupling_layers(params)
    if jnp.shape(h)[-1] % 2:
        raise nc.DimensionError(f"coupling_inverse: state size {jnp.shape(h)[-1]} is odd")
    c = h
    for layer in reversed(range(n_layers)):
        c = _layer_inverse(params, layer, c, o, bound)
    return c
