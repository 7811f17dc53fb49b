import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hrgn import numcore as nc
from hrgn.numcore import jnp

finite = st.floats(-50, 50, allow_nan=False)


def test_float64_is_default():
    assert jnp.zeros(3).dtype == jnp.float64


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(nc.DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        nc.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_linear_matches_manual():
    x = np.arange(6.0).reshape(2, 3)
    w = np.arange(12.0).reshape(4, 3) / 10
    b = np.array([1.0, -1.0, 0.5, 0.0])
    np.testing.assert_allclose(nc.linear(x, w, b), x @ w.T + b)
    with pytest.raises(nc.DimensionError):
        nc.linear(x, w, np.zeros(3))


@pytest.mark.parametrize("op", [nc.add, nc.elemwise_mul, nc.elemwise_div])
def test_elementwise_rejects_broadcasting(op):
    with pytest.raises(nc.DimensionError):
        op(np.ones(3), np.ones((3, 1)))


@given(arrays(np.float64, st.integers(1, 6).map(lambda k: (3, 2 * k)), elements=finite))
def test_split_concat_roundtrip(v):
    a, b = nc.split_half(v)
    assert a.shape == b.shape
    np.testing.assert_array_equal(nc.concat(a, b), v)


def test_split_half_odd_raises():
    with pytest.raises(nc.DimensionError, match="odd"):
        nc.split_half(np.ones(5))


@given(arrays(np.float64, 8, elements=finite))
def test_sigmoid_tanh_identity(v):
    # tanh(x) = 2 sigmoid(2x) - 1
    np.testing.assert_allclose(nc.tanh(v), 2 * nc.sigmoid(2 * v) - 1, atol=1e-12)


def test_backward_requires_scalar():
    with pytest.raises(nc.ContractError, match="scalar"):
        nc.backward(lambda p: p["w"] * 2, {"w": jnp.ones(3)})


def test_backward_unused_parameter_gets_exact_zero():
    loss, g = nc.backward(lambda p: jnp.sum(p["a"] ** 2), {"a": jnp.array([1.0, 2.0]), "b": jnp.ones(2)})
    assert float(loss) == 5.0
    np.testing.assert_array_equal(g["a"], [2.0, 4.0])
    np.testing.assert_array_equal(g["b"], [0.0, 0.0])


def test_backward_against_finite_differences():
    rng = np.random.default_rng(0)
    params = {"W": jnp.asarray(rng.normal(size=(3, 4))), "b": jnp.asarray(rng.normal(size=3))}
    x = rng.normal(size=(5, 4))

    def f(p):
        return jnp.sum(nc.tanh(nc.linear(x, p["W"], p["b"])) ** 2)

    _, g = nc.backward(f, params)
    num = nc.numerical_gradient(lambda p: f({k: jnp.asarray(v) for k, v in p.items()}), params)
    for k in params:
        assert nc.max_relative_error(g[k], num[k]) < 1e-7


def _adam_reference(p, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
    return p


def test_adam_matches_textbook_loop():
    rng = np.random.default_rng(3)
    p0 = rng.normal(size=4)
    grads = [rng.normal(size=4) for _ in range(6)]
    store = nc.ParameterStore({"w": p0})
    for g in grads:
        store = nc.adam_step(store, {"w": jnp.asarray(g)}, lr=0.002)
    np.testing.assert_allclose(store.params["w"], _adam_reference(p0, grads, 0.002), rtol=0, atol=1e-15)
    assert store.step == 6


def test_adam_first_step_moves_each_entry_by_lr():
    # bias-corrected first step is lr * g/|g| (up to eps)
    store = nc.adam_step(nc.ParameterStore({"w": jnp.zeros(3)}), {"w": jnp.array([3.0, -0.5, 1e3])}, lr=0.002)
    np.testing.assert_allclose(store.params["w"], [-0.002, 0.002, -0.002], rtol=1e-6)


def test_adam_step_contract():
    store = nc.ParameterStore({"w": jnp.zeros(2), "b": jnp.zeros(1)})
    with pytest.raises(nc.ContractError, match="no gradient"):
        nc.adam_step(store, {"w": jnp.zeros(2)}, lr=0.1)
    with pytest.raises(nc.ContractError, match="positive"):
        nc.adam_step(store, {"w": jnp.zeros(2), "b": jnp.zeros(1)}, lr=0.0)


def test_parameter_store_validates_moments():
    with pytest.raises(nc.DimensionError):
        nc.ParameterStore({"w": jnp.zeros(2)}, m={"w": jnp.zeros(3)}, v={"w": jnp.zeros(2)})


def test_max_relative_error_floor():
    assert nc.max_relative_error([1e-12, 1.0], [3e-12, 1.0]) == 0.0
    assert nc.max_relative_error([1.0], [1.1]) == pytest.approx(0.1 / 1.1)
