import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hrgn import numcore as nc
from hrgn.cell import RESERVOIR_ONLY
from hrgn.dataio import bundle_from_synth
from hrgn.numcore import jnp
from hrgn.synth import SynthConfig, generate
from hrgn.training import (DivergenceError, EmptyObservationError, TrainConfig, finetune, loss_and_grad, masked_mse,
                           new_model, predict, pretrain, reconstruction_loss, rmse, total_loss, train, train_stage1,
                           train_stage2, window_loss_value)


@pytest.fixture(scope="module")
def bundle():
    return bundle_from_synth(generate(SynthConfig(n_segments=4, n_reservoirs=1, n_days=730, seed=0)), train_end=600)


def small(**kw):
    base = dict(hidden=8, epochs=3, window=120, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def _same_params(a, b):
    return all(np.array_equal(np.asarray(a[k]), np.asarray(b[k])) for k in a)


# --- losses --------------------------------------------------------------------

@given(st.integers(0, 2**31 - 1))
def test_masked_mse_ignores_unobserved_exactly(seed):
    rng = np.random.default_rng(seed)
    pred = rng.normal(size=(5, 7))
    obs = rng.normal(size=(5, 7))
    mask = rng.uniform(size=obs.shape) < 0.4
    mask[0, 0] = True
    base = float(masked_mse(pred, obs, mask))
    pert = pred + np.where(mask, 0.0, rng.normal(scale=1e3, size=pred.shape))
    assert float(masked_mse(pert, obs, mask)) == base
    assert base == pytest.approx(np.mean((pred[mask] - obs[mask]) ** 2), rel=1e-12)


def test_masked_mse_nan_means_unobserved():
    assert float(masked_mse(np.array([1.0, 5.0]), np.array([2.0, np.nan]))) == 1.0
    with pytest.raises(EmptyObservationError):
        masked_mse(np.ones(3), np.full(3, np.nan))


def test_rmse_examples():
    assert rmse([2.0, 4.0], [1.0, 3.0]) == 1.0
    assert rmse([1.0, 2.0], [1.0, 2.0]) == 0.0


def test_reconstruction_loss_identity_and_constant(small_params):
    P = dict(small_params)
    H = P["obs_W"].shape[0]
    # u(y) = e1 * y and v(h) = h[0] make v(u(y)) = y exactly
    P["obs_W"] = jnp.zeros((H, 1)).at[0, 0].set(1.0)
    P["obs_b"] = jnp.zeros(H)
    P["read_W"] = jnp.zeros((1, H)).at[0, 0].set(1.0)
    P["read_b"] = jnp.zeros(1)
    y = np.random.default_rng(0).normal(size=(4, 6))
    assert float(reconstruction_loss(y, P)) == pytest.approx(0.0, abs=1e-28)
    # zero u with bias b gives the constant W_y b + b_y
    P["obs_W"] = jnp.zeros((H, 1))
    P["obs_b"] = jnp.linspace(-1, 1, H)
    const = float(P["read_W"][0] @ P["obs_b"] + P["read_b"][0])
    assert float(reconstruction_loss(y, P)) == pytest.approx(np.mean((y - const) ** 2), rel=1e-12)


def test_reconstruction_loss_matches_brute_force(small_params):
    y = np.random.default_rng(3).normal(size=(3, 5)) * 4 + 12
    P = {k: np.asarray(v) for k, v in small_params.items()}
    total = 0.0
    for v in y.ravel():
        h = P["obs_W"][:, 0] * ((v - 12) / 4) + P["obs_b"]
        back = 12 + 4 * (P["read_W"][0] @ h + P["read_b"][0])
        total += (v - back) ** 2
    assert float(reconstruction_loss(y, small_params, 12.0, 4.0)) == pytest.approx(total / y.size, rel=1e-12)


def test_total_loss_affine_in_lambda(small_params):
    rng = np.random.default_rng(1)
    pred, obs = rng.normal(size=(2, 4, 5))
    mask = rng.uniform(size=obs.shape) < 0.5
    mse = float(masked_mse(pred, obs, mask))
    rec = float(reconstruction_loss(pred, small_params))
    assert float(total_loss(pred, obs, mask, small_params, 0.0)) == mse
    for lam in (0.25, 0.5, 2.0):
        assert float(total_loss(pred, obs, mask, small_params, lam)) == pytest.approx(mse + lam * rec, rel=1e-14)
    assert float(total_loss(pred, obs, mask, small_params, 0.5, head="gated")) == mse


def test_total_loss_arithmetic():
    # 1.0 + 0.5 * 0.4
    assert 1.0 + 0.5 * 0.4 == pytest.approx(1.2)


# --- gradients -----------------------------------------------------------------

@pytest.mark.parametrize("head, method", [("gated", "none"), ("coupling", "none"), ("coupling", "invertible")])
def test_window_gradient_against_finite_differences(bundle, head, method):
    model = new_model(bundle, small(head=head, hidden=4))
    _, grads = loss_and_grad(model, bundle, 170, 172, 0.5, method)
    keys = ["cand_Wx", "resgate_Wp", "rel_in_W", "obs_W", "read_b", "coupling.1.s2.W1", "res_filter.b2"]
    sub = {k: np.asarray(model.params[k]) for k in keys}

    def f(p):
        params = dict(model.params)
        params.update({k: jnp.asarray(v) for k, v in p.items()})
        return window_loss_value(model, bundle, 170, 172, 0.5, params, method)

    num = nc.numerical_gradient(f, sub, step=1e-5)
    for k in keys:
        assert nc.max_relative_error(grads[k], num[k], floor=1e-7) < 1e-5, k


def test_invertible_adjustment_gradient_flows_through_inverse(bundle):
    model = new_model(bundle, small(head="coupling", hidden=4))
    _, g_plain = loss_and_grad(model, bundle, 170, 172, 0.0, "none")
    _, g_adj = loss_and_grad(model, bundle, 170, 172, 0.0, "invertible")
    # without adjustment obs_W only enters through the reconstruction term (lam = 0)
    assert float(jnp.abs(g_plain["obs_W"]).max()) == 0.0
    assert float(jnp.abs(g_adj["obs_W"]).max()) > 0.0


# --- training drivers ------------------------------------------------------------

def test_zero_epochs_returns_initialization(bundle):
    cfg = small(epochs=0)
    init = new_model(bundle, cfg)
    model, log = train(bundle, cfg)
    assert _same_params(model.params, init.params) and log.rows == []
    pre, _ = pretrain(bundle, cfg)
    tuned, _ = finetune(pre, bundle, cfg)
    assert _same_params(tuned.params, pre.params)


def test_training_reduces_loss(bundle):
    model, log = train_stage1(bundle, small(epochs=40, early_stopping=False))
    losses = log.losses()
    assert losses[-1] < 0.5 * losses[0]
    assert rmse(predict(model, bundle)[600:], bundle.obs[600:]) < rmse(
        predict(new_model(bundle, small()), bundle)[600:], bundle.obs[600:])


def test_training_is_deterministic(bundle):
    a, la = train(bundle, small(head="coupling", epochs=2))
    b, lb = train(bundle, small(head="coupling", epochs=2))
    assert _same_params(a.params, b.params)
    assert la.rows == lb.rows


def test_two_stage_log_has_both_stages(bundle):
    _, log = train(bundle, small(head="coupling", epochs=2, early_stopping=False))
    assert [r[1] for r in log.rows] == [1, 1, 2, 2]
    assert all(r[3] > 0 for r in log.rows)


def test_gated_training_records_zero_reconstruction(bundle):
    _, log = train(bundle, small(epochs=2))
    assert {r[1] for r in log.rows} == {1} and all(r[3] == 0.0 for r in log.rows)


def test_stage2_with_never_firing_policy_is_continued_stage1(bundle):
    cfg = small(head="coupling", epochs=2, early_stopping=False, update_period=10_000)
    start, _ = train_stage1(bundle, cfg)
    a, _ = train_stage2(start, bundle, cfg)
    # same windows, no adjustment: run the plain-loss stage on the same span
    from hrgn.training import _run_stage, _train_labels, TrainLog, split_points
    mid, vs, _ = split_points(bundle, cfg)
    b = _run_stage(start, bundle, cfg, 2, (mid, vs), (vs, vs), 2, "none", _train_labels(bundle), TrainLog())
    assert _same_params(a.params, b.params)


def test_early_stopping_keeps_best_validation(bundle):
    model, log = train(bundle, small(epochs=6, patience=2))
    vals = [r[4] for r in log.rows]
    assert np.isfinite(vals).all()
    from hrgn.training import split_points
    _, vs, end = split_points(bundle, small())
    got = rmse(predict(model, bundle, end)[vs:end], bundle.obs[vs:end])
    assert got == pytest.approx(min(vals), rel=1e-12)


def test_divergence_raises_with_last_good(bundle):
    obs = bundle.obs.copy()
    obs[100:110] = 1e200
    bad = bundle.with_obs(obs)
    with pytest.raises(DivergenceError) as exc:
        train(bad, small(epochs=2, early_stopping=False))
    assert exc.value.last_good is not None


def test_pretraining_freezes_reservoir_path(bundle):
    cfg = small(epochs=5)
    init = new_model(bundle, cfg, labels=bundle.simulation)
    model, log = pretrain(bundle, cfg)
    for k in RESERVOIR_ONLY:
        assert np.array_equal(np.asarray(model.params[k]), np.asarray(init.params[k])), k
    assert not np.array_equal(np.asarray(model.params["cand_Wx"]), np.asarray(init.params["cand_Wx"]))
    assert log.losses()[-1] < log.losses()[0]
    assert {r[1] for r in log.rows} == {0}


def test_pretrain_needs_dense_simulation(bundle):
    sim = bundle.simulation.copy()
    sim[3, 1] = np.nan
    with pytest.raises(ValueError, match="simulated labels"):
        pretrain(bundle, small(), simulated=sim)


def test_finetune_head_mismatch(bundle):
    pre, _ = pretrain(bundle, small(epochs=0))
    with pytest.raises(ValueError, match="head"):
        finetune(pre, bundle, small(head="coupling"))


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lam=-1)
    with pytest.raises(ValueError):
        TrainConfig(val_fraction=1.0)
