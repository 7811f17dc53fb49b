"""Dense float64 array ops, gradients and the Adam optimizer.

Everything numerical in the package runs on JAX arrays with 64-bit floats
enabled at import time. The elementwise/linear helpers below add shape
checking on top of ``jax.numpy``; since the checks run at trace time they are
free inside ``jax.jit``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import jax

jax.config.update("jax_enable_x64", True)

import jax.numpy as jnp  # noqa: E402
import numpy as np  # noqa: E402

Params = dict[str, jax.Array]


class DimensionError(ValueError):
    """Operands have incompatible shapes."""


class ContractError(RuntimeError):
    """A documented precondition of an operation was violated."""


def _check_same(op: str, a, b) -> None:
    if jnp.shape(a) != jnp.shape(b):
        raise DimensionError(f"{op}: shape {jnp.shape(a)} does not match shape {jnp.shape(b)}")


def matmul(a, b):
    """Matrix product ``a @ b`` for 1-D or 2-D operands."""
    sa, sb = jnp.shape(a), jnp.shape(b)
    if len(sa) == 0 or len(sb) == 0 or sa[-1] != sb[0]:
        raise DimensionError(f"matmul: shape {sa} is not compatible with shape {sb}")
    return jnp.matmul(a, b)


def linear(x, w, b=None):
    """Row-batched affine map ``x @ w.T + b`` with ``w`` stored as (out, in)."""
    sx, sw = jnp.shape(x), jnp.shape(w)
    if sx[-1] != sw[-1]:
        raise DimensionError(f"linear: input shape {sx} does not match weight shape {sw}")
    y = x @ w.T
    if b is not None:
        if jnp.shape(b) != (sw[0],):
            raise DimensionError(f"linear: bias shape {jnp.shape(b)} does not match weight shape {sw}")
        y = y + b
    return y


def add(a, b):
    _check_same("add", a, b)
    return a + b


def elemwise_mul(a, b):
    _check_same("elemwise_mul", a, b)
    return a * b


def elemwise_div(a, b):
    _check_same("elemwise_div", a, b)
    return a / b


def tanh(a):
    return jnp.tanh(a)


def sigmoid(a):
    return jax.nn.sigmoid(a)


def exp(a):
    return jnp.exp(a)


def split_half(v):
    """Split the last axis into two equal halves, preserving order."""
    n = jnp.shape(v)[-1]
    if n % 2:
        raise DimensionError(f"split_half: last axis of shape {jnp.shape(v)} has odd length")
    return v[..., : n // 2], v[..., n // 2 :]


def concat(*parts):
    """Concatenate along the last axis; inverse of :func:`split_half`."""
    lead = {jnp.shape(p)[:-1] for p in parts}
    if len(lead) != 1:
        raise DimensionError(f"concat: leading shapes differ: {[jnp.shape(p) for p in parts]}")
    return jnp.concatenate(parts, axis=-1)


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> jax.Array:
    bound = 1.0 / np.sqrt(fan_in)
    return jnp.asarray(rng.uniform(-bound, bound, size=shape))


def backward(loss_fn: Callable[..., jax.Array], params: Mapping[str, jax.Array], *args, **kwargs):
    """Evaluate ``loss_fn(params, *args)`` and its gradient w.r.t. every parameter.

    Returns ``(loss, grads)`` where ``grads`` has the same keys as ``params``.
    Parameters that do not influence the loss receive an exact zero gradient.
    """
    out = jax.eval_shape(loss_fn, dict(params), *args, **kwargs)
    if getattr(out, "shape", None) != ():
        raise ContractError(f"backward: loss must be a scalar, got shape {getattr(out, 'shape', None)}")
    return jax.value_and_grad(loss_fn)(dict(params), *args, **kwargs)


@dataclass
class ParameterStore:
    """Named parameters with Adam moment accumulators.

    ``params``, ``m`` and ``v`` share keys and shapes; ``step`` counts applied
    Adam updates.
    """

    params: Params
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)
    step: int = 0

    def __post_init__(self):
        self.params = {k: jnp.asarray(p, dtype=jnp.float64) for k, p in self.params.items()}
        if not self.m:
            self.m = {k: jnp.zeros_like(p) for k, p in self.params.items()}
        if not self.v:
            self.v = {k: jnp.zeros_like(p) for k, p in self.params.items()}
        if set(self.m) != set(self.params) or set(self.v) != set(self.params):
            raise ContractError("ParameterStore: moment keys differ from parameter keys")
        for k, p in self.params.items():
            if self.m[k].shape != p.shape or self.v[k].shape != p.shape:
                raise DimensionError(f"ParameterStore: moment shape mismatch for {k!r}")
        if self.step < 0:
            raise ContractError("ParameterStore: step must be >= 0")


def adam_update(params, m, v, grads, step, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Pure Adam update on parameter pytrees; ``step`` counts previous updates."""
    t = step + 1
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_m = jax.tree_util.tree_map(lambda m_, g: b1 * m_ + (1.0 - b1) * g, m, grads)
    new_v = jax.tree_util.tree_map(lambda v_, g: b2 * v_ + (1.0 - b2) * g * g, v, grads)
    new_p = jax.tree_util.tree_map(
        lambda p, m_, v_: p - lr * (m_ / c1) / (jnp.sqrt(v_ / c2) + eps), params, new_m, new_v
    )
    return new_p, new_m, new_v


_adam_update = jax.jit(adam_update)


def adam_step(
    store: ParameterStore,
    grads: Mapping[str, jax.Array],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> ParameterStore:
    """Return a new store after one bias-corrected Adam update."""
    missing = set(store.params) - set(grads)
    if missing:
        raise ContractError(f"adam_step: no gradient for {sorted(missing)}")
    if not lr > 0:
        raise ContractError(f"adam_step: learning rate must be positive, got {lr}")
    g = {k: grads[k] for k in store.params}
    p, m, v = _adam_update(store.params, store.m, store.v, g, store.step, lr, beta1, beta2, eps)
    return ParameterStore(params=p, m=m, v=v, step=store.step + 1)


def numerical_gradient(fn: Callable[[Params], float], params: Mapping[str, np.ndarray], step: float = 1e-5) -> dict[str, np.ndarray]:
    """Central finite-difference gradient of a scalar function, entry by entry."""
    base = {k: np.array(p, dtype=np.float64) for k, p in params.items()}
    out = {}
    for name, arr in base.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gf = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            fp = float(fn(base))
            flat[j] = orig - step
            fm = float(fn(base))
            flat[j] = orig
            gf[j] = (fp - fm) / (2.0 * step)
        out[name] = g
    return out


def max_relative_error(analytic, numeric, floor: float = 1e-8) -> float:
    """Largest ``|a - n| / max(|a|, |n|)`` over entries, ignoring pairs where both are below ``floor``."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = np.maximum(np.abs(a), np.abs(n))
    keep = scale > floor
    if not keep.any():
        return 0.0
    return float(np.max(np.abs(a - n)[keep] / scale[keep]))
