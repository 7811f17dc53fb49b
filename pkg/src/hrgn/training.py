"""Losses and the training protocols.

* plain training: one stage over the whole training span, no adjustment;
* two-stage training for the assimilating model: stage 1 on the first half
  without adjustment, stage 2 on the second half with invertible
  adjustment active inside every unrolled window;
* pretraining on dense simulated labels with the reservoir pathway switched
  off, followed by fine-tuning on observations.

Sequences are unrolled in fixed windows (default 365 days) that start from a
zero state; shorter tail windows are zero-padded and masked so every window
shares one compiled program. The last ``val_fraction`` of the training span
is held out for early stopping when it contains observations.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from functools import partial

import jax
import numpy as np

from . import numcore as nc
from .assimilation import UpdatePolicy, _rollout, adjustment_targets, observation_to_hidden
from .cell import RESERVOIR_ONLY, Model, ModelConfig, readout
from .dataio import DatasetBundle
from .numcore import jnp

log = logging.getLogger(__name__)


class EmptyObservationError(ValueError):
    pass


class DivergenceError(RuntimeError):
    def __init__(self, message, last_good: Model | None = None):
        super().__init__(message)
        self.last_good = last_good


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.002
    lam: float = 0.5
    hidden: int = 20
    epochs: int = 60
    stage2_epochs: int | None = None
    window: int = 365
    seed: int = 0
    mode: str = "full"
    head: str = "gated"
    update_period: int = 1
    early_stopping: bool = True
    val_fraction: float = 0.1
    patience: int = 15

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.window < 2:
            raise ValueError("window must be >= 2")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must lie in [0, 1)")

    def model_config(self, bundle: DatasetBundle) -> ModelConfig:
        return ModelConfig(hidden=self.hidden, n_drivers=bundle.x.shape[2], release_dim=bundle.r.shape[2],
                           meta_dim=bundle.meta.shape[1], filter_width=self.hidden, coupling_width=self.hidden)


@dataclass
class TrainLog:
    rows: list[tuple] = field(default_factory=list)

    def add(self, epoch, stage, loss, recon, val):
        self.rows.append((epoch, stage, loss, recon, val))

    def losses(self, stage=None) -> list[float]:
        return [r[2] for r in self.rows if stage is None or r[1] == stage]


# --- losses ------------------------------------------------------------------

def masked_mse(pred, obs, mask=None):
    """Mean squared error over observed entries only.

    ``obs`` may carry NaN for unobserved entries when ``mask`` is omitted.
    """
    obs = jnp.asarray(obs)
    if mask is None:
        mask = ~jnp.isnan(obs)
    if not isinstance(mask, jax.core.Tracer) and int(np.sum(np.asarray(mask))) == 0:
        raise EmptyObservationError("masked_mse: no observations")
    return _masked_mse(pred, jnp.nan_to_num(obs), mask)


def _masked_mse(pred, obs, mask):
    sq = jnp.where(mask, (pred - obs) ** 2, 0.0)
    return sq.sum() / jnp.maximum(mask.sum(), 1)


def reconstruction_loss(pred, params, y_mean=0.0, y_std=1.0, valid=None):
    """Mean of ``(y - v(u(y)))**2`` over all predictions ``y`` (deg C)."""
    ys = (pred - y_mean) / y_std
    back = y_mean + y_std * readout(observation_to_hidden(ys, params), params)
    sq = (pred - back) ** 2
    if valid is None:
        return sq.mean()
    w = jnp.broadcast_to(valid, sq.shape)
    return jnp.where(w, sq, 0.0).sum() / jnp.maximum(w.sum(), 1)


def total_loss(pred, obs, mask, params, lam, y_mean=0.0, y_std=1.0, head="coupling"):
    mse = masked_mse(pred, obs, mask)
    if head != "coupling" or lam == 0:
        return mse
    return mse + lam * reconstruction_loss(pred, params, y_mean, y_std)


# --- compiled window loss / step --------------------------------------------

_STATIC = ("mode", "head", "method", "n_layers", "clamp")


@partial(jax.jit, static_argnames=_STATIC)
def _window_loss(params, graph, x, r_prev, meta, obs, mask, adj_y, adj_mask, valid, y_mean, y_std, lam,
                 *, mode, head, method, n_layers, clamp):
    pred = _rollout(params, graph, x, r_prev, meta, adj_y, adj_mask, y_mean, y_std, jax.random.PRNGKey(0),
                    mode=mode, head=head, method=method, n_layers=n_layers, clamp=clamp)
    mse = _masked_mse(pred, obs, mask)
    if head == "coupling":
        recon = reconstruction_loss(pred, params, y_mean, y_std, valid[:, None])
    else:
        recon = jnp.zeros(())
    return mse + lam * recon, (mse, recon)


@partial(jax.jit, static_argnames=_STATIC)
def _train_step(params, m, v, step, lr, graph, x, r_prev, meta, obs, mask, adj_y, adj_mask, valid, y_mean, y_std, lam,
                *, mode, head, method, n_layers, clamp):
    (loss, aux), grads = jax.value_and_grad(_window_loss, has_aux=True)(
        params, graph, x, r_prev, meta, obs, mask, adj_y, adj_mask, valid, y_mean, y_std, lam,
        mode=mode, head=head, method=method, n_layers=n_layers, clamp=clamp)
    p, m, v = nc.adam_update(params, m, v, grads, step, lr)
    return p, m, v, loss, aux


def loss_and_grad(model: Model, bundle: DatasetBundle, start: int, stop: int, lam: float, method: str = "none",
                  mode: str = "full", period: int = 1, params=None):
    """Total loss over days ``[start, stop)`` (zero initial state) and its gradient."""
    w = _window_arrays(bundle, start, stop, stop - start, method, period, labels=None)
    p = model.params if params is None else params
    (loss, _), grads = jax.value_and_grad(_window_loss, has_aux=True)(
        p, bundle.garrays, *w, model.y_mean, model.y_std, lam,
        mode=mode, head=model.head, method=method, n_layers=model.config.coupling_layers, clamp=model.config.clamp)
    return loss, grads


def window_loss_value(model: Model, bundle: DatasetBundle, start: int, stop: int, lam: float, params,
                      method: str = "none", mode: str = "full", period: int = 1) -> float:
    w = _window_arrays(bundle, start, stop, stop - start, method, period, labels=None)
    loss, _ = _window_loss(params, bundle.garrays, *w, model.y_mean, model.y_std, lam, mode=mode, head=model.head,
                           method=method, n_layers=model.config.coupling_layers, clamp=model.config.clamp)
    return float(loss)


# --- data windows ------------------------------------------------------------

def _window_arrays(bundle: DatasetBundle, start: int, stop: int, length: int, method: str, period: int,
                   labels: np.ndarray | None, label_mask: np.ndarray | None = None):
    y = bundle.obs if labels is None else labels
    ymask = ~np.isnan(y) if label_mask is None else label_mask
    sl = slice(start, stop)
    n_real = stop - start
    pad = length - n_real

    def padded(a, fill=0.0):
        a = np.asarray(a)
        if pad:
            a = np.concatenate([a, np.full((pad,) + a.shape[1:], fill, dtype=a.dtype)], axis=0)
        return a

    obs = np.nan_to_num(y[sl])
    mask = ymask[sl]
    if method == "invertible":
        ay, am = adjustment_targets(obs, mask, UpdatePolicy(period))
    else:
        ay, am = np.zeros_like(obs), np.zeros_like(mask)
    valid = np.zeros(length, dtype=bool)
    valid[:n_real] = True
    return (
        jnp.asarray(padded(bundle.x[sl])), jnp.asarray(padded(bundle.r_prev[sl])), jnp.asarray(bundle.meta),
        jnp.asarray(padded(obs)), jnp.asarray(padded(mask, False)),
        jnp.asarray(padded(ay)), jnp.asarray(padded(am, False)), jnp.asarray(valid),
    )


def _windows(start: int, stop: int, size: int) -> list[tuple[int, int]]:
    return [(s, min(s + size, stop)) for s in range(start, stop, size)]


# --- training driver -----------------------------------------------------------

def _label_scale(labels: np.ndarray) -> tuple[float, float]:
    vals = labels[~np.isnan(labels)]
    if vals.size == 0:
        return 0.0, 1.0
    sd = float(vals.std())
    return float(vals.mean()), sd if sd > 1e-6 else 1.0


def rmse(pred, obs, mask=None) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    obs = np.asarray(obs, dtype=np.float64)
    if mask is None:
        mask = ~np.isnan(obs)
    if not mask.any():
        raise EmptyObservationError("rmse: no observations")
    return float(np.sqrt(np.mean((pred[mask] - obs[mask]) ** 2)))


def _run_stage(model: Model, bundle: DatasetBundle, cfg: TrainConfig, stage: int, train: tuple[int, int],
               val: tuple[int, int], epochs: int, method: str, labels: np.ndarray, log_: TrainLog) -> Model:
    """Adam over windows of the ``train`` day range; early stopping on ``val``.

    Validation unrolls from day 0 to the end of ``val`` (adjusting from
    ``labels`` when ``method`` is ``invertible``) and scores labels in ``val``.
    """
    a, b = train
    wins = [_window_arrays(bundle, s, e, cfg.window, method, cfg.update_period, labels) for s, e in _windows(a, b, cfg.window)]
    wins = [w for w in wins if bool(np.asarray(w[4]).any())]
    static = dict(mode=cfg.mode, head=model.head, method=method, n_layers=model.config.coupling_layers,
                  clamp=model.config.clamp)
    vs, ve = val
    val_obs = np.full_like(labels, np.nan)
    val_obs[vs:ve] = labels[vs:ve]
    use_val = cfg.early_stopping and ve > vs and bool((~np.isnan(val_obs)).any())

    params = dict(model.params)
    m = {k: jnp.zeros_like(p) for k, p in params.items()}
    v = {k: jnp.zeros_like(p) for k, p in params.items()}
    step = 0
    best_val, best = math.inf, params
    bad = 0
    lam = cfg.lam if model.head == "coupling" else 0.0
    for epoch in range(1, epochs + 1):
        if not wins:
            break
        tot = rec = 0.0
        for w in wins:
            new = _train_step(params, m, v, step, cfg.lr, bundle.garrays, *w, model.y_mean, model.y_std, lam, **static)
            loss, (_, recon) = new[3], new[4]
            if not np.isfinite(float(loss)):
                raise DivergenceError(f"stage {stage} epoch {epoch}: loss is {float(loss)}", model.replace_params(best))
            params, m, v = new[:3]
            step += 1
            tot += float(loss)
            rec += float(recon)
        tot /= len(wins)
        rec /= len(wins)
        val_rmse = float("nan")
        if use_val:
            pred = predict(model.replace_params(params), bundle, ve, method, cfg.mode, cfg.update_period, labels)
            val_rmse = rmse(pred[vs:ve], val_obs[vs:ve])
            if val_rmse < best_val - 1e-9:
                best_val, best, bad = val_rmse, params, 0
            else:
                bad += 1
        else:
            best = params
        log_.add(epoch, stage, tot, rec, val_rmse)
        log.debug("stage %d epoch %d loss %.4f recon %.4f val %.4f", stage, epoch, tot, rec, val_rmse)
        if use_val and bad >= cfg.patience:
            break
    return model.replace_params(best if wins else params)


def predict(model: Model, bundle: DatasetBundle, stop: int | None = None, method: str = "none", mode: str = "full",
            period: int = 1, adjust_labels: np.ndarray | None = None, enkf=None) -> np.ndarray:
    """Unroll from day 0 to ``stop``; returns (T, N) deg C predictions, NaN beyond ``stop``.

    With an assimilation method, ``adjust_labels`` (default: the bundle's
    observations) supplies the adjustment data.
    """
    from .assimilation import rollout

    stop = bundle.n_days if stop is None else stop
    labels = bundle.obs if adjust_labels is None else adjust_labels
    sl = slice(0, stop)
    if method == "none":
        ys = rollout(model, bundle.garrays, bundle.x[sl], bundle.r_prev[sl], bundle.meta, method="none", mode=mode)
    else:
        obs = labels[sl]
        ay, am = adjustment_targets(np.nan_to_num(obs), ~np.isnan(obs), UpdatePolicy(period))
        ys = rollout(model, bundle.garrays, bundle.x[sl], bundle.r_prev[sl], bundle.meta, ay, am, method=method,
                     mode=mode, enkf=enkf)
    out = np.full((bundle.n_days, bundle.x.shape[1]), np.nan)
    out[sl] = np.asarray(ys)
    return out


def split_points(bundle: DatasetBundle, cfg: TrainConfig) -> tuple[int, int, int]:
    """``(stage_split, val_start, train_end)`` day indices of the training span."""
    end = bundle.train_end
    val_start = end - int(round(cfg.val_fraction * end)) if cfg.early_stopping else end
    return val_start // 2, val_start, end


def new_model(bundle: DatasetBundle, cfg: TrainConfig, labels: np.ndarray | None = None) -> Model:
    labels = bundle.obs[: bundle.train_end] if labels is None else labels
    mean, sd = _label_scale(labels)
    return Model.create(cfg.model_config(bundle), cfg.head, cfg.seed, mean, sd)


def _train_labels(bundle: DatasetBundle) -> np.ndarray:
    lab = bundle.obs.copy()
    lab[bundle.train_end:] = np.nan
    return lab


def train_stage1(bundle: DatasetBundle, cfg: TrainConfig, model: Model | None = None, stop: int | None = None,
                 log_: TrainLog | None = None) -> tuple[Model, TrainLog]:
    """Train without state adjustment on days ``[0, stop)`` (default: up to the held-out tail)."""
    log_ = log_ if log_ is not None else TrainLog()
    model = model or new_model(bundle, cfg)
    _, val_start, end = split_points(bundle, cfg)
    stop = val_start if stop is None else stop
    if cfg.epochs == 0:
        return model, log_
    model = _run_stage(model, bundle, cfg, 1, (0, stop), (val_start, end), cfg.epochs, "none", _train_labels(bundle), log_)
    return model, log_


def train_stage2(model: Model, bundle: DatasetBundle, cfg: TrainConfig, start: int | None = None,
                 log_: TrainLog | None = None) -> tuple[Model, TrainLog]:
    """Continue training on ``[start, val_start)`` with invertible adjustment active in every window."""
    log_ = log_ if log_ is not None else TrainLog()
    mid, val_start, end = split_points(bundle, cfg)
    start = mid if start is None else start
    epochs = cfg.stage2_epochs if cfg.stage2_epochs is not None else cfg.epochs
    if epochs == 0:
        return model, log_
    model = _run_stage(model, bundle, cfg, 2, (start, val_start), (val_start, end), epochs, "invertible",
                       _train_labels(bundle), log_)
    return model, log_


def train(bundle: DatasetBundle, cfg: TrainConfig, model: Model | None = None) -> tuple[Model, TrainLog]:
    """Gated head: one stage over the training span. Coupling head: stage 1
    on the first half, stage 2 (with adjustment) on the second half."""
    log_ = TrainLog()
    model = model or new_model(bundle, cfg)
    if model.head == "gated":
        return train_stage1(bundle, cfg, model, log_=log_)
    mid, _, _ = split_points(bundle, cfg)
    model, _ = train_stage1(bundle, cfg, model, stop=mid, log_=log_)
    return train_stage2(model, bundle, cfg, mid, log_=log_)


def pretrain(bundle: DatasetBundle, cfg: TrainConfig, simulated: np.ndarray | None = None) -> tuple[Model, TrainLog]:
    """Fit dense simulated labels with the reservoir pathway disabled."""
    sim = bundle.simulation if simulated is None else simulated
    if sim is None or np.isnan(sim).any():
        raise ValueError("pretrain needs simulated labels for every (segment, day)")
    pcfg = replace(cfg, mode="pretrain", lam=0.0)
    log_ = TrainLog()
    model = new_model(bundle, pcfg, labels=sim)
    if pcfg.epochs == 0:
        return model, log_
    stop = bundle.n_days
    val_start = stop - int(round(pcfg.val_fraction * stop)) if pcfg.early_stopping else stop
    model = _run_stage(model, bundle, pcfg, 0, (0, val_start), (val_start, stop), pcfg.epochs, "none", sim, log_)
    return model, log_


def finetune(pretrained: Model, bundle: DatasetBundle, cfg: TrainConfig) -> tuple[Model, TrainLog]:
    """Full-mode training starting from pretrained weights."""
    if cfg.head != pretrained.head:
        raise ValueError(f"pretrained head {pretrained.head!r} differs from config head {cfg.head!r}")
    return train(bundle, replace(cfg, mode="full"), model=pretrained)


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)


def frozen_in_pretraining() -> tuple[str, ...]:
    return RESERVOIR_ONLY
