"""Heterogeneous recurrent graph cell and sequence unrolling.

All functions are batched over nodes: segment quantities are ``(N, H)``
arrays and reservoir quantities ``(M, H)``. Cross-node reads only touch
values from the previous step, so one call updates every node at once.

Parameter names (``W`` stored as (out, in)):

==========================  ==========================================
``res_W``, ``res_b``        reservoir state recurrence
``res_filter.*``            meta-feature filter on upstream inflow
``rel_filter.*``            meta-feature filter on release transfer
``rel_out_W``, ``rel_b``    outer map of the release transfer
``rel_in_W``                release volumes into the transfer
``rel_state_W``             reservoir state into the transfer
``up_W``, ``up_b``          upstream-segment transfer
``cand_*``                  candidate cell state
``forget_*``, ``input_*``   forget and input gates
``resgate_*``               gate on the reservoir transfer
``upgate_*``                gate on the upstream transfer
``out_*``                   output gate
``read_W``, ``read_b``      linear temperature readout
``obs_W``, ``obs_b``        observation-to-hidden embedding
``coupling.*``              invertible head (see :mod:`hrgn.coupling`)
==========================  ==========================================
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import jax
import numpy as np

from . import numcore as nc
from .coupling import coupling_forward, init_coupling, mlp
from .graph import HeteroGraph
from .numcore import jnp

MODES = ("full", "pretrain")
HEADS = ("gated", "coupling")

# Parameters touched only by the reservoir pathway; frozen under pretraining.
RESERVOIR_ONLY = (
    "res_W", "res_b",
    "res_filter.W1", "res_filter.b1", "res_filter.W2", "res_filter.b2",
    "rel_filter.W1", "rel_filter.b1", "rel_filter.W2", "rel_filter.b2",
    "rel_out_W", "rel_in_W", "rel_state_W", "rel_b",
    "resgate_Wp", "resgate_Wx", "resgate_b",
)


@dataclass(frozen=True)
class ModelConfig:
    hidden: int = 20
    n_drivers: int = 10
    release_dim: int = 3
    meta_dim: int = 5
    filter_width: int = 20
    coupling_layers: int = 2
    coupling_width: int = 20
    clamp: float = 5.0


class GraphArrays(NamedTuple):
    ss: jax.Array
    sr: jax.Array
    rs: jax.Array
    has_up: jax.Array
    has_res: jax.Array

    @classmethod
    def from_graph(cls, graph: HeteroGraph) -> "GraphArrays":
        d = graph.dense()
        return cls.from_dense(d.ss, d.sr, d.rs)

    @classmethod
    def from_dense(cls, ss, sr, rs) -> "GraphArrays":
        ss, sr, rs = (jnp.asarray(a, dtype=jnp.float64) for a in (ss, sr, rs))
        has_up = (ss > 0).any(axis=0).astype(jnp.float64)
        has_res = (rs > 0).any(axis=0).astype(jnp.float64) if rs.shape[0] else jnp.zeros(ss.shape[0])
        return cls(ss, sr, rs, has_up, has_res)


class NetworkState(NamedTuple):
    c: jax.Array
    h: jax.Array
    cr: jax.Array

    @classmethod
    def zeros(cls, n_segments: int, n_reservoirs: int, hidden: int) -> "NetworkState":
        return cls(jnp.zeros((n_segments, hidden)), jnp.zeros((n_segments, hidden)), jnp.zeros((n_reservoirs, hidden)))


class StepInputs(NamedTuple):
    """Drivers at t, releases at t-1, static reservoir meta-features."""

    x: jax.Array
    r_prev: jax.Array
    meta: jax.Array


def init_params(config: ModelConfig, seed: int = 0) -> nc.Params:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, seeded."""
    rng = np.random.default_rng(seed)
    H, D, R, Lm, F = config.hidden, config.n_drivers, config.release_dim, config.meta_dim, config.filter_width
    p: dict = {}

    def w(name, out, inp):
        p[name] = nc.uniform_init(rng, (out, inp), inp)

    def b(name, out):
        p[name] = jnp.zeros(out)

    w("res_W", H, H); b("res_b", H)
    for f in ("res_filter", "rel_filter"):
        w(f + ".W1", F, Lm); b(f + ".b1", F)
        w(f + ".W2", H, F); b(f + ".b2", H)
    w("rel_out_W", H, H); w("rel_in_W", H, R); w("rel_state_W", H, H); b("rel_b", H)
    w("up_W", H, H); b("up_b", H)
    for g in ("cand", "forget", "input", "out"):
        w(g + "_Wh", H, H); w(g + "_Wx", H, D); b(g + "_b", H)
    w("resgate_Wp", H, H); w("resgate_Wx", H, D); b("resgate_b", H)
    w("upgate_Wq", H, H); w("upgate_Wx", H, D); b("upgate_b", H)
    w("read_W", 1, H); b("read_b", 1)
    w("obs_W", H, 1); b("obs_b", H)
    p.update(init_coupling(rng, H, config.coupling_layers, config.coupling_width))
    return p


def meta_filters(params, meta):
    """Reservoir meta-feature filters, shape (M, H) each."""
    return mlp(params, "res_filter", meta), mlp(params, "rel_filter", meta)


def reservoir_state_update(cr_prev, h_prev, inflow_filter, a_sr, params):
    """New reservoir states from their own history and upstream segment hidden states."""
    inflow = nc.matmul(a_sr.T, h_prev)
    pre = nc.linear(cr_prev, params["res_W"], params["res_b"]) + nc.elemwise_mul(inflow_filter, inflow)
    return nc.tanh(pre)


def reservoir_transfer(cr_prev, r_prev, release_filter, a_rs, has_res, params):
    """Transferred variables from upstream reservoirs; zero where a segment has none."""
    if jnp.shape(r_prev)[-1] != params["rel_in_W"].shape[1]:
        raise nc.DimensionError(
            f"reservoir_transfer: release vector of length {jnp.shape(r_prev)[-1]}, "
            f"expected {params['rel_in_W'].shape[1]}"
        )
    per_res = release_filter * (nc.linear(r_prev, params["rel_in_W"]) + nc.linear(cr_prev, params["rel_state_W"]))
    pooled = nc.matmul(a_rs.T, per_res)
    return has_res[:, None] * nc.tanh(nc.linear(pooled, params["rel_out_W"], params["rel_b"]))


def upstream_transfer(h_prev, a_ss, has_up, params):
    """Transferred variables from upstream segments; zero where a segment has none."""
    pooled = nc.matmul(a_ss.T, h_prev)
    return has_up[:, None] * nc.tanh(nc.linear(pooled, params["up_W"], params["up_b"]))


def _two_input(params, name, a, a_key, x):
    return nc.linear(a, params[f"{name}_{a_key}"]) + nc.linear(x, params[f"{name}_Wx"], params[f"{name}_b"])


def gates_and_candidate(h_prev, x, p_prev, q_prev, params, with_reservoir: bool = True):
    """Candidate state and the forget/input/reservoir/upstream gates.

    With ``with_reservoir=False`` the reservoir gate is not evaluated and
    returned as ``None``.
    """
    cbar = nc.tanh(_two_input(params, "cand", h_prev, "Wh", x))
    gf = nc.sigmoid(_two_input(params, "forget", h_prev, "Wh", x))
    gi = nc.sigmoid(_two_input(params, "input", h_prev, "Wh", x))
    gr = nc.sigmoid(_two_input(params, "resgate", p_prev, "Wp", x)) if with_reservoir else None
    gs = nc.sigmoid(_two_input(params, "upgate", q_prev, "Wq", x))
    return cbar, gf, gi, gr, gs


def cell_update(c_prev, cbar, p_prev, q_prev, gates, mode: str = "full"):
    gf, gi, gr, gs = gates
    acc = gf * c_prev + gi * cbar + gs * q_prev
    if mode == "full":
        acc = acc + gr * p_prev
    elif mode != "pretrain":
        raise ValueError(f"unknown mode {mode!r}")
    return nc.tanh(acc)


def output_gate(h_prev, x, params):
    return nc.sigmoid(_two_input(params, "out", h_prev, "Wh", x))


def readout(h, params):
    return nc.linear(h, params["read_W"], params["read_b"])[..., 0]


def hidden_and_predict(c, h_prev, x, params, head: str = "gated", n_layers: int | None = None, clamp: float = 5.0):
    """Hidden state, prediction (readout units) and output gate."""
    o = output_gate(h_prev, x, params)
    if head == "gated":
        h = o * c
    elif head == "coupling":
        h = coupling_forward(c, o, params, n_layers, clamp)
    else:
        raise ValueError(f"unknown head {head!r}")
    return h, readout(h, params), o


class StepOutput(NamedTuple):
    state: NetworkState
    y: jax.Array
    o: jax.Array


def step_network(graph: GraphArrays, state: NetworkState, inputs: StepInputs, params, filters=None,
                 mode: str = "full", head: str = "gated", n_layers: int | None = None, clamp: float = 5.0) -> StepOutput:
    """Advance every reservoir and segment by one day.

    ``filters`` are the precomputed :func:`meta_filters` (recomputed if omitted).
    Predictions are in readout units.
    """
    n, m = graph.ss.shape[0], graph.rs.shape[0]
    if state.c.shape[0] != n or state.cr.shape[0] != m or inputs.x.shape[0] != n:
        raise nc.DimensionError(
            f"step_network: graph has {n} segments/{m} reservoirs but state has "
            f"{state.c.shape[0]}/{state.cr.shape[0]} and drivers {inputs.x.shape[0]}"
        )
    if filters is None:
        filters = meta_filters(params, inputs.meta) if m else (None, None)
    q = upstream_transfer(state.h, graph.ss, graph.has_up, params)
    if mode == "full" and m:
        cr = reservoir_state_update(state.cr, state.h, filters[0], graph.sr, params)
        p = reservoir_transfer(state.cr, inputs.r_prev, filters[1], graph.rs, graph.has_res, params)
    else:
        cr = state.cr
        p = jnp.zeros_like(q)
    cbar, gf, gi, gr, gs = gates_and_candidate(state.h, inputs.x, p, q, params, with_reservoir=mode == "full")
    c = cell_update(state.c, cbar, p, q, (gf, gi, gr, gs), mode)
    h, y, o = hidden_and_predict(c, state.h, inputs.x, params, head, n_layers, clamp)
    return StepOutput(NetworkState(c, h, cr), y, o)


def forward_sequence(graph: GraphArrays, x, r_prev, meta, params, init_state: NetworkState | None = None,
                     mode: str = "full", head: str = "gated", n_layers: int | None = None, clamp: float = 5.0):
    """Unroll :func:`step_network` over ``x`` of shape (T, N, D).

    ``r_prev[t]`` holds the releases of day t-1 (see :func:`lag_releases`).
    Returns predictions ``(N, T)`` in readout units and the stacked states.
    """
    x = jnp.asarray(x)
    if x.ndim != 3 or x.shape[0] == 0:
        raise ValueError("forward_sequence: need at least one time step of drivers shaped (T, N, D)")
    if n_layers is None and head == "coupling":
        from .coupling import n_coupling_layers
        n_layers = n_coupling_layers(params)
    n, m = graph.ss.shape[0], graph.rs.shape[0]
    hidden = params["res_W"].shape[0]
    state = init_state if init_state is not None else NetworkState.zeros(n, m, hidden)
    meta = jnp.asarray(meta)
    filters = meta_filters(params, meta) if m else (None, None)

    def body(s, inp):
        xt, rt = inp
        out = step_network(graph, s, StepInputs(xt, rt, meta), params, filters, mode, head, n_layers, clamp)
        return out.state, (out.y, out.state)

    _, (ys, states) = jax.lax.scan(body, state, (x, jnp.asarray(r_prev)))
    return ys.T, states


def lag_releases(r, first=None):
    """Shift releases one day forward so index t holds day t-1 (zeros, or ``first``, at t=0)."""
    r = np.asarray(r, dtype=np.float64)
    out = np.empty_like(r)
    out[1:] = r[:-1]
    out[0] = 0.0 if first is None else first
    return out


@dataclass
class Model:
    """Parameters plus the fixed affine map from readout units to degrees C."""

    config: ModelConfig
    params: nc.Params
    head: str = "gated"
    y_mean: float = 0.0
    y_std: float = 1.0

    def __post_init__(self):
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}")
        if self.head == "coupling" and self.config.hidden % 2:
            raise nc.DimensionError(f"coupling head needs an even hidden size, got {self.config.hidden}")
        if not self.y_std > 0:
            raise ValueError("y_std must be positive")

    @classmethod
    def create(cls, config: ModelConfig, head: str = "gated", seed: int = 0, y_mean: float = 0.0, y_std: float = 1.0):
        return cls(config, init_params(config, seed), head, float(y_mean), float(y_std))

    def replace_params(self, params) -> "Model":
        return Model(self.config, dict(params), self.head, self.y_mean, self.y_std)
