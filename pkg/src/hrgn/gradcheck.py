"""Finite-difference verification of the training-loss gradient.

The analytic gradient comes from reverse-mode differentiation of the window
loss; the reference is a central difference of the same loss, evaluated in
batches of perturbed parameter vectors.
"""
from __future__ import annotations

from dataclasses import dataclass

import jax
import numpy as np
from jax.flatten_util import ravel_pytree

from . import numcore as nc
from .dataio import bundle_from_synth
from .numcore import jnp
from .synth import SynthConfig, generate
from .training import TrainConfig, _window_arrays, _window_loss, new_model


@dataclass
class GradcheckResult:
    seed: int
    method: str
    loss: float
    max_rel_error: float
    worst_param: str
    per_param: dict[str, float]

    @property
    def passed(self) -> bool:
        return self.max_rel_error < 1e-4


def central_differences(fn, vec: np.ndarray, step: float = 1e-3, batch: int = 512) -> np.ndarray:
    """Fourth-order central differences of scalar ``fn`` at ``vec``, one coordinate at a time.

    Uses the five-point stencil ``(-f(+2h) + 8 f(+h) - 8 f(-h) + f(-2h)) / 12h``.
    """
    base = jnp.asarray(vec)

    @jax.jit
    def shifted(idx, k):
        return jax.vmap(lambda i: fn(base.at[i].add(k * step)))(idx)

    n = vec.size
    out = np.empty(n)
    for lo in range(0, n, batch):
        idx = jnp.arange(lo, lo + batch) % n
        vals = [np.asarray(shifted(idx, k)) for k in (2.0, 1.0, -1.0, -2.0)]
        d = (-vals[0] + 8 * vals[1] - 8 * vals[2] + vals[3]) / (12 * step)
        m = min(batch, n - lo)
        out[lo : lo + m] = d[:m]
    return out


def gradient_check(seed: int = 0, steps: int = 10, method: str = "invertible", head: str = "coupling",
                   lam: float = 0.5, step: float = 1e-3, start: int = 180) -> GradcheckResult:
    """Compare analytic and finite-difference gradients of the total loss.

    Uses a ``steps``-day window of the synthetic fixture starting at ``start``
    (early summer, so releases are active) and a freshly initialised model.
    """
    ds = generate(SynthConfig(seed=seed))
    bundle = bundle_from_synth(ds)
    model = new_model(bundle, TrainConfig(seed=seed, head=head, lam=lam))
    w = _window_arrays(bundle, start, start + steps, steps, method, 1, labels=None)
    static = dict(mode="full", head=head, method=method, n_layers=model.config.coupling_layers,
                  clamp=model.config.clamp)
    lam_eff = lam if head == "coupling" else 0.0

    def loss(params):
        return _window_loss(params, bundle.garrays, *w, model.y_mean, model.y_std, lam_eff, **static)[0]

    value, grads = nc.backward(loss, model.params)
    flat, unravel = ravel_pytree(dict(model.params))
    numeric = unravel(jnp.asarray(central_differences(lambda v: loss(unravel(v)), np.asarray(flat), step)))
    # entries where both gradients are below the difference quotient's
    # roundoff (about eps * loss / step) carry no information
    floor = max(1e-9, 1e3 * np.finfo(float).eps * abs(float(value)) / step)
    per = {k: nc.max_relative_error(grads[k], numeric[k], floor=floor) for k in model.params}
    worst = max(per, key=per.get)
    return GradcheckResult(seed, method, float(value), per[worst], worst, per)
