"""State adjustment from observations.

Two mechanisms share one rollout loop:

* ``invertible`` - embed an observation into hidden space with the affine
  map ``u`` and pull it back through the coupling stack to a cell state.
* ``enkf`` - stochastic ensemble Kalman update of each observed segment's
  cell state, with the readout as the scalar observation operator.

Observations are consumed causally: an adjustment made after predicting
day t only ever influences day t+1 onwards.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import partial

import jax
import numpy as np

from . import numcore as nc
from .cell import (
    GraphArrays,
    Model,
    NetworkState,
    StepInputs,
    meta_filters,
    step_network,
)
from .coupling import coupling_forward, coupling_inverse
from .numcore import jnp

METHODS = ("none", "invertible", "enkf")


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class UpdatePolicy:
    """Adjust every ``period`` days, at the last day of each period.

    ``period=1`` is immediate update. Day indices are 0-based, so the policy
    fires on days ``period-1, 2*period-1, ...``.
    """

    period: int = 1

    def __post_init__(self):
        if int(self.period) < 1:
            raise ConfigurationError(f"update period must be >= 1, got {self.period}")

    def fires(self, t: int) -> bool:
        return (t + 1) % self.period == 0


@dataclass(frozen=True)
class EnkfConfig:
    size: int = 30
    obs_noise: float = 0.5
    proc_noise: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.size < 2:
            raise ConfigurationError(f"ensemble size must be >= 2, got {self.size}")
        if not (self.obs_noise > 0 and self.proc_noise > 0):
            raise ConfigurationError("EnKF noise levels must be positive")


def adjustment_targets(obs: np.ndarray, mask: np.ndarray, policy: UpdatePolicy) -> tuple[np.ndarray, np.ndarray]:
    """Per-day observation used for adjustment, shape (T, N).

    On firing days the most recent observation inside the current period is
    used for each segment; all other days carry no adjustment.
    """
    obs = np.asarray(obs, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    T = obs.shape[0]
    k = policy.period
    out_y = np.zeros_like(obs)
    out_m = np.zeros_like(mask)
    for t in range(k - 1, T, k):
        lo = t - k + 1
        for s in range(t, lo - 1, -1):
            fresh = mask[s] & ~out_m[t]
            out_y[t, fresh] = obs[s, fresh]
            out_m[t] |= fresh
    return out_y, out_m


def observation_to_hidden(y_scaled, params):
    """Affine embedding of (readout-unit) observations into hidden space, rows batched."""
    y = jnp.asarray(y_scaled)
    return nc.linear(y[..., None], params["obs_W"], params["obs_b"])


def _invertible_adjust(state: NetworkState, o, y_scaled, mask, params, n_layers: int, clamp: float) -> NetworkState:
    h_new = observation_to_hidden(y_scaled, params)
    c_new = coupling_inverse(h_new, o, params, n_layers, clamp)
    sel = mask[:, None]
    return NetworkState(jnp.where(sel, c_new, state.c), jnp.where(sel, h_new, state.h), state.cr)


def assimilate_step(model: Model, state: NetworkState, o, obs: dict[int, float], t: int, policy: UpdatePolicy = UpdatePolicy()) -> NetworkState:
    """Replace the cell state of each observed segment at day ``t``.

    ``obs`` maps segment row -> observed temperature (deg C). Reservoir states
    and unobserved segments are left bit-identical.
    """
    if model.head != "coupling":
        raise ConfigurationError("invertible assimilation needs the coupling head")
    if not policy.fires(t):
        raise nc.ContractError(f"update policy with period {policy.period} does not fire at day {t}")
    if not obs:
        return state
    n = state.c.shape[0]
    y = np.zeros(n)
    m = np.zeros(n, dtype=bool)
    for i, v in obs.items():
        y[i] = (v - model.y_mean) / model.y_std
        m[i] = True
    return _invertible_adjust(state, o, jnp.asarray(y), jnp.asarray(m), model.params,
                              model.config.coupling_layers, model.config.clamp)


def enkf_adjust(states, predicted, y, mask, obs_noise: float, eps):
    """Stochastic EnKF update with perturbed observations, per segment.

    ``states`` (E, N, d) ensemble of per-segment states; ``predicted`` (E, N)
    ensemble predictions of the observed quantity; ``y``/``mask`` (N,) the
    observations; ``eps`` (E, N) standard normal draws for the perturbations.
    Segments with ``mask`` false are returned unchanged.
    """
    E = states.shape[0]
    if E < 2:
        raise ConfigurationError(f"ensemble size must be >= 2, got {E}")
    x_anom = states - states.mean(axis=0)
    y_anom = predicted - predicted.mean(axis=0)
    cov = jnp.einsum("end,en->nd", x_anom, y_anom) / (E - 1)
    var = jnp.einsum("en,en->n", y_anom, y_anom) / (E - 1)
    gain = cov / (var + obs_noise**2)[:, None]
    innov = y[None, :] + obs_noise * eps - predicted
    updated = states + innov[:, :, None] * gain[None, :, :]
    return jnp.where(mask[None, :, None], updated, states)


def _head_map(c, o, params, head, n_layers, clamp):
    return o * c if head == "gated" else coupling_forward(c, o, params, n_layers, clamp)


@partial(jax.jit, static_argnames=("mode", "head", "method", "n_layers", "clamp", "ens", "obs_noise", "proc_noise"))
def _rollout(params, graph, x, r_prev, meta, adj_y, adj_mask, y_mean, y_std, key, *,
             mode, head, method, n_layers, clamp, ens=30, obs_noise=0.5, proc_noise=0.05):
    n, m = graph.ss.shape[0], graph.rs.shape[0]
    hidden = params["res_W"].shape[0]
    filters = meta_filters(params, meta) if m else (None, None)

    def step(s, xt, rt):
        return step_network(graph, s, StepInputs(xt, rt, meta), params, filters, mode, head, n_layers, clamp)

    if method != "enkf":
        def body(s, inp):
            xt, rt, ay, am = inp
            out = step(s, xt, rt)
            s_new = out.state
            if method == "invertible":
                s_new = _invertible_adjust(s_new, out.o, (ay - y_mean) / y_std, am, params, n_layers, clamp)
            return s_new, y_mean + y_std * out.y

        _, ys = jax.lax.scan(body, NetworkState.zeros(n, m, hidden), (x, r_prev, adj_y, adj_mask))
        return ys

    vstep = jax.vmap(step, in_axes=(0, None, None))
    s0 = NetworkState(jnp.zeros((ens, n, hidden)), jnp.zeros((ens, n, hidden)), jnp.zeros((ens, m, hidden)))

    def ebody(carry, inp):
        s, t = carry
        xt, rt, ay, am = inp
        k1, k2 = jax.random.split(jax.random.fold_in(key, t))
        s = s._replace(c=s.c + proc_noise * jax.random.normal(k1, s.c.shape))
        out = vstep(s, xt, rt)
        yc = y_mean + y_std * out.y
        c_adj = enkf_adjust(out.state.c, yc, ay, am, obs_noise, jax.random.normal(k2, yc.shape))
        h_adj = _head_map(c_adj, out.o, params, head, n_layers, clamp)
        sel = am[None, :, None]
        s_new = NetworkState(c_adj, jnp.where(sel, h_adj, out.state.h), out.state.cr)
        return (s_new, t + 1), yc.mean(axis=0)

    _, ys = jax.lax.scan(ebody, (s0, 0), (x, r_prev, adj_y, adj_mask))
    return ys


def rollout(model: Model, graph: GraphArrays, x, r_prev, meta, adj_y=None, adj_mask=None,
            method: str = "none", mode: str = "full", enkf: EnkfConfig | None = None, params=None):
    """Predictions (T, N) in deg C with optional per-day adjustment targets.

    ``adj_y``/``adj_mask`` (T, N) give the observation used to adjust each
    segment after predicting that day (see :func:`adjustment_targets`).
    ``params`` overrides ``model.params`` (used when differentiating).
    """
    if method not in METHODS:
        raise ConfigurationError(f"unknown assimilation method {method!r}")
    if method == "invertible" and model.head != "coupling":
        raise ConfigurationError("invertible assimilation needs the coupling head")
    x = jnp.asarray(x)
    T, n = x.shape[0], x.shape[1]
    if adj_y is None:
        adj_y = np.zeros((T, n))
        adj_mask = np.zeros((T, n), dtype=bool)
    enkf = enkf or EnkfConfig()
    return _rollout(
        model.params if params is None else params, graph, x, jnp.asarray(r_prev), jnp.asarray(meta),
        jnp.asarray(adj_y, dtype=jnp.float64), jnp.asarray(adj_mask, dtype=bool),
        model.y_mean, model.y_std, jax.random.PRNGKey(enkf.seed),
        mode=mode, head=model.head, method=method, n_layers=model.config.coupling_layers,
        clamp=model.config.clamp, ens=enkf.size, obs_noise=enkf.obs_noise, proc_noise=enkf.proc_noise,
    )


def rollout_with_assimilation(model: Model, graph: GraphArrays, x, r_prev, meta, obs, obs_mask,
                              policy: UpdatePolicy = UpdatePolicy(), method: str = "invertible",
                              mode: str = "full", enkf: EnkfConfig | None = None):
    """Predict day by day, adjusting per ``policy`` from ``obs``/``obs_mask`` (T, N).

    Returns predictions shaped (N, T) in deg C.
    """
    if method == "none":
        ys = rollout(model, graph, x, r_prev, meta, method="none", mode=mode)
    else:
        ay, am = adjustment_targets(obs, obs_mask, policy)
        ys = rollout(model, graph, x, r_prev, meta, ay, am, method=method, mode=mode, enkf=enkf)
    return np.asarray(ys).T
