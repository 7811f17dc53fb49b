"""Experiment runners shared by the command line and the acceptance suite.

Variants:

* ``hrgn``      gated head, one training stage, no adjustment
* ``hrgn-kf``   the ``hrgn`` model with ensemble Kalman adjustment at test time
* ``hrgn-adj``  coupling head, two-stage training, invertible adjustment

``hrgn-adj`` with update period k shares the first training stage with the
k = 1 model; the second stage runs with adjustment every k days, the same
schedule used at test time.

Test RMSE is always scored on every test-period observation of the full
(unsparsified) observation set; sparsity only limits what the model sees
for training and adjustment.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from .assimilation import EnkfConfig
from .cell import Model
from .dataio import DatasetBundle, bundle_from_synth
from .synth import SynthConfig, SynthDataset, generate, sparsify
from .training import (TrainConfig, TrainLog, finetune, predict, pretrain, rmse, split_points, train, train_stage1,
                       train_stage2)

VARIANTS = ("hrgn", "hrgn-kf", "hrgn-adj")


@dataclass(frozen=True)
class ExperimentConfig:
    epochs: int = 300
    stage2_epochs: int | None = None
    pretrain_epochs: int = 100
    patience: int = 30
    hidden: int = 20
    enkf: EnkfConfig = field(default_factory=EnkfConfig)

    def train_config(self, seed: int, head: str = "gated", **kw) -> TrainConfig:
        return TrainConfig(hidden=self.hidden, epochs=self.epochs, stage2_epochs=self.stage2_epochs, seed=seed,
                           head=head, patience=self.patience, **kw)


@dataclass
class Metrics:
    overall: float
    per_segment: dict[str, float]
    segment_x: str | None = None

    @property
    def x(self) -> float:
        return self.per_segment[self.segment_x]

    def as_dict(self) -> dict:
        return {"overall_rmse": self.overall, "per_segment_rmse": self.per_segment, "segment_x": self.segment_x,
                "segment_x_rmse": self.per_segment.get(self.segment_x) if self.segment_x else None}


@lru_cache(maxsize=16)
def dataset(seed: int) -> SynthDataset:
    return generate(SynthConfig(seed=seed))


def hidden_scenario(ds: SynthDataset) -> tuple[str, str]:
    """The reservoir whose releases are hidden and its directly downstream segment."""
    return ds.reservoirs[0], ds.below_reservoir[0]


def sparse_labels(bundle: DatasetBundle, fraction: float, seed: int, span: str = "all") -> np.ndarray:
    """Observations thinned to ``fraction`` of the records in ``span`` (``all``, ``train`` or ``test``).

    Records outside ``span`` are kept as they are.
    """
    obs = bundle.obs.copy()
    if fraction >= 1.0:
        return obs
    sel = np.zeros(bundle.n_days, dtype=bool)
    if span in ("all", "train"):
        sel[: bundle.train_end] = True
    if span in ("all", "test"):
        sel[bundle.train_end:] = True
    part = np.where(sel[:, None], obs, np.nan)
    thinned = sparsify(part, fraction, seed + 104729)
    return np.where(sel[:, None], thinned, obs)


def evaluate(model: Model, bundle: DatasetBundle, method: str = "none", period: int = 1,
             adjust_labels: np.ndarray | None = None, enkf: EnkfConfig | None = None,
             segment_x: str | None = None, truth_obs: np.ndarray | None = None) -> tuple[Metrics, np.ndarray]:
    """Test-period RMSE of a causal unroll from day 0.

    ``adjust_labels`` (default: the bundle's observations) feed the
    adjustment; ``truth_obs`` (default: the bundle's observations) are scored.
    """
    pred = predict(model, bundle, None, method, "full", period, adjust_labels, enkf)
    score = bundle.obs if truth_obs is None else truth_obs
    te = bundle.train_end
    per = {}
    for i, s in enumerate(bundle.segments):
        col = score[te:, i]
        if (~np.isnan(col)).any():
            per[s] = rmse(pred[te:, i], col)
    return Metrics(rmse(pred[te:], score[te:]), per, segment_x), pred


# --- variants --------------------------------------------------------------------

def fit(variant: str, bundle: DatasetBundle, cfg: ExperimentConfig, seed: int,
        pretrained: Model | None = None) -> tuple[Model, TrainLog]:
    head = "coupling" if variant == "hrgn-adj" else "gated"
    tc = cfg.train_config(seed, head)
    if pretrained is not None:
        return finetune(pretrained, bundle, tc)
    return train(bundle, tc)


def method_of(variant: str) -> str:
    return {"hrgn": "none", "hrgn-kf": "enkf", "hrgn-adj": "invertible"}[variant]


def pretrained_model(bundle: DatasetBundle, cfg: ExperimentConfig, seed: int, head: str) -> Model:
    tc = replace(cfg.train_config(seed, head), epochs=cfg.pretrain_epochs)
    model, _ = pretrain(bundle, tc)
    return model


# --- studies ---------------------------------------------------------------------

def release_hiding(seed: int, cfg: ExperimentConfig = ExperimentConfig()) -> dict:
    """HRGN with all releases vs one reservoir's releases hidden (train and test)."""
    ds = dataset(seed)
    res, seg_x = hidden_scenario(ds)
    out = {"seed": seed, "hidden_reservoir": res, "segment_x": seg_x}
    for tag, hidden in (("all", ()), ("hidden", (res,))):
        b = bundle_from_synth(ds, hidden=hidden)
        model, _ = fit("hrgn", b, cfg, seed)
        m, _ = evaluate(model, b, segment_x=seg_x)
        out[tag] = m
        out[tag + "_model"] = model
    return out


def assimilation_ordering(seed: int, cfg: ExperimentConfig = ExperimentConfig(),
                          hrgn_hidden: Model | None = None) -> dict:
    """HRGN, HRGN-KF and HRGN-adj (k = 1) with one reservoir's releases hidden."""
    ds = dataset(seed)
    res, seg_x = hidden_scenario(ds)
    b = bundle_from_synth(ds, hidden=(res,))
    g = hrgn_hidden if hrgn_hidden is not None else fit("hrgn", b, cfg, seed)[0]
    tc = cfg.train_config(seed, "coupling")
    mid, _, _ = split_points(b, tc)
    stage1, _ = train_stage1(b, tc, stop=mid)
    adj, _ = train_stage2(stage1, b, tc, mid)
    out = {"seed": seed, "hrgn_model": g, "adj_model": adj, "adj_stage1": stage1}
    out["hrgn"], _ = evaluate(g, b, segment_x=seg_x)
    out["hrgn-kf"], _ = evaluate(g, b, "enkf", enkf=replace(cfg.enkf, seed=seed), segment_x=seg_x)
    out["hrgn-adj"], _ = evaluate(adj, b, "invertible", segment_x=seg_x)
    return out


def update_period_sweep(seed: int, cfg: ExperimentConfig = ExperimentConfig(), periods=(1, 3, 5, 7, 9, 13),
                        stage1: Model | None = None, trained: dict[int, Model] | None = None) -> dict[int, float]:
    """Test RMSE of HRGN-adj-k for each update period k.

    ``stage1`` is a coupling model after the first training stage and
    ``trained`` maps k to already finished models; both are optional.
    """
    ds = dataset(seed)
    res, _ = hidden_scenario(ds)
    b = bundle_from_synth(ds, hidden=(res,))
    tc = cfg.train_config(seed, "coupling")
    mid, _, _ = split_points(b, tc)
    trained = dict(trained or {})
    out = {}
    for k in periods:
        if k not in trained:
            if stage1 is None:
                stage1, _ = train_stage1(b, tc, stop=mid)
            trained[k], _ = train_stage2(stage1, b, replace(tc, update_period=k), mid)
        out[k] = evaluate(trained[k], b, "invertible", k)[0].overall
    return out


def fraction_sweep(model: Model, seed: int, fractions=(0.1, 0.2, 0.5, 1.0)) -> dict[float, float]:
    """Adjust with a thinned copy of the test-period observations; score on all of them."""
    ds = dataset(seed)
    res, _ = hidden_scenario(ds)
    b = bundle_from_synth(ds, hidden=(res,))
    return {f: evaluate(model, b, "invertible", adjust_labels=sparse_labels(b, f, seed, "test"))[0].overall
            for f in fractions}


def pretraining_study(seed: int, fraction: float, cfg: ExperimentConfig = ExperimentConfig(),
                      variants=("hrgn", "hrgn-ptr"), pretrained: dict | None = None) -> dict[str, float]:
    """Cold-start vs pretrained-then-finetuned models under sparse observations.

    Releases are hidden for one reservoir, as in the assimilation study.
    ``variants`` draws from ``hrgn``, ``hrgn-ptr``, ``hrgn-adj``, ``hrgn-adj-ptr``.
    ``pretrained`` caches pretrained models by head across fractions.
    """
    ds = dataset(seed)
    res, seg_x = hidden_scenario(ds)
    full = bundle_from_synth(ds, hidden=(res,))
    b = full.with_obs(sparse_labels(full, fraction, seed, "all"))
    cache = pretrained if pretrained is not None else {}
    out = {}
    for v in variants:
        base = v.replace("-ptr", "")
        head = "coupling" if base == "hrgn-adj" else "gated"
        ptr = None
        if v.endswith("-ptr"):
            if head not in cache:
                cache[head] = pretrained_model(b, cfg, seed, head)
            ptr = cache[head]
        if not b.obs_mask[: b.train_end].any():
            model = ptr if ptr is not None else fit(base, b, replace(cfg, epochs=0), seed)[0]
        else:
            model, _ = fit(base, b, cfg, seed, pretrained=ptr)
        m, _ = evaluate(model, b, method_of(base), truth_obs=full.obs, segment_x=seg_x)
        out[v] = m.overall
    return out


def monotone_within(values: list[float], increasing: bool, tol: float = 0.02) -> bool:
    """Monotone allowing at most one adjacent inversion smaller than ``tol``."""
    diffs = np.diff(values) if increasing else -np.diff(values)
    bad = diffs[diffs < 0]
    return bool(bad.size == 0 or (bad.size == 1 and abs(bad[0]) < tol))
