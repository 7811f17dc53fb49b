"""Command-line runner.

    hrgn simulate        --out DIR [--seed N]
    hrgn pretrain        --data DIR --out DIR
    hrgn train           --data DIR --out DIR [--hide-releases res0] [--obs-fraction F]
    hrgn finetune        --data DIR --checkpoint CKPT --out DIR
    hrgn evaluate        --data DIR --checkpoint CKPT --out DIR [--method M] [--update-period K]
    hrgn assimilate-eval --data DIR --checkpoint CKPT --out DIR
    hrgn gradcheck       --out DIR

``--config`` takes a JSON file with optional sections ``synth``, ``train``,
``enkf`` and ``grid`` plus top-level run settings; command-line flags win.
Every command writes ``resolved_config.json`` to its output directory, and
``--config resolved_config.json`` repeats the run exactly.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

from . import checkpoint
from .assimilation import METHODS, EnkfConfig
from .dataio import LoadError, load_bundle, write_synth
from .synth import SynthConfig, generate
from .training import DivergenceError, EmptyObservationError, TrainConfig, TrainLog, finetune, pretrain, train

log = logging.getLogger("hrgn")

RUN_DEFAULTS = {
    "seed": 0,
    "data": None,
    "checkpoint": None,
    "hide_releases": [],
    "obs_fraction": 1.0,
    "method": "none",
    "update_period": 1,
    "train_end": None,
}
GRID_DEFAULTS = {"methods": ["none", "invertible", "enkf"], "periods": [1], "fractions": [1.0], "seeds": [0]}


class UsageError(Exception):
    pass


# --- config ---------------------------------------------------------------------

def _section(cls, raw: dict, name: str):
    known = {f.name for f in fields(cls)}
    extra = set(raw) - known
    if extra:
        raise UsageError(f"config section {name!r}: unknown keys {sorted(extra)}")
    vals = dict(raw)
    for f in fields(cls):
        if f.name in vals and isinstance(getattr(cls(), f.name), tuple):
            vals[f.name] = tuple(vals[f.name])
    try:
        return cls(**vals)
    except (TypeError, ValueError) as e:
        raise UsageError(f"config section {name!r}: {e}") from None


def resolve(args: argparse.Namespace) -> dict:
    raw = {}
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read config {args.config}: {e}") from None
    run = {**RUN_DEFAULTS, **raw.get("run", {})}
    unknown = set(run) - set(RUN_DEFAULTS)
    if unknown:
        raise UsageError(f"config section 'run': unknown keys {sorted(unknown)}")
    for key in RUN_DEFAULTS:
        val = getattr(args, key, None)
        if val is not None:
            run[key] = val
    if isinstance(run["hide_releases"], str):
        run["hide_releases"] = [s for s in run["hide_releases"].split(",") if s]
    run["hide_releases"] = sorted(run["hide_releases"])
    if run["method"] not in METHODS:
        raise UsageError(f"unknown method {run['method']!r}")
    if not 0 < float(run["obs_fraction"]) <= 1:
        raise UsageError("--obs-fraction must lie in (0, 1]")
    if int(run["update_period"]) < 1:
        raise UsageError("--update-period must be >= 1")

    synth = _section(SynthConfig, {"seed": run["seed"], **raw.get("synth", {})}, "synth")
    if args.seed is not None:
        synth = replace(synth, seed=args.seed)
    train_cfg = _section(TrainConfig, {"seed": run["seed"], **raw.get("train", {})}, "train")
    if args.seed is not None:
        train_cfg = replace(train_cfg, seed=args.seed)
    if args.epochs is not None:
        train_cfg = replace(train_cfg, epochs=args.epochs)
    train_cfg = replace(train_cfg, update_period=int(run["update_period"]))
    enkf = _section(EnkfConfig, {"seed": run["seed"], **raw.get("enkf", {})}, "enkf")
    grid = {**GRID_DEFAULTS, **raw.get("grid", {})}
    return {"command": args.command, "run": run, "synth": asdict(synth), "train": asdict(train_cfg),
            "enkf": asdict(enkf), "grid": grid}


def _configs(res: dict):
    synth = SynthConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in res["synth"].items()})
    return synth, TrainConfig(**res["train"]), EnkfConfig(**res["enkf"])


# --- output helpers -------------------------------------------------------------

def _json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n", encoding="utf-8")


def _num(v: float) -> str:
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))


def _write_log(path: Path, tlog: TrainLog) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "stage", "loss", "recon_loss", "val_rmse"])
        for epoch, stage, loss, recon, val in tlog.rows:
            w.writerow([epoch, stage, _num(loss), _num(recon), _num(val)])


def _out_dir(res: dict, args) -> Path:
    if not args.out:
        raise UsageError("--out is required")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as e:
        raise UsageError(f"output directory {out} is not writable: {e}") from None
    _json(out / "resolved_config.json", {k: v for k, v in res.items() if k != "command"})
    return out


def _bundle(res: dict):
    run = res["run"]
    if not run["data"]:
        raise UsageError("--data is required")
    b = load_bundle(run["data"], run["train_end"], run["hide_releases"])
    frac = float(run["obs_fraction"])
    if frac < 1:
        from .experiments import sparse_labels
        b = b.with_obs(sparse_labels(b, frac, int(run["seed"]), "all"))
    return b


def _load_ckpt(res: dict):
    if not res["run"]["checkpoint"]:
        raise UsageError("--checkpoint is required")
    model, _ = checkpoint.load(res["run"]["checkpoint"])
    return model


def _below(bundle) -> dict[str, str]:
    """Each reservoir's nearest downstream segment."""
    out = {}
    for e in sorted((e for e in bundle.graph.edges if e.kind == "rs"), key=lambda e: (e.distance, e.dst)):
        out.setdefault(e.src, e.dst)
    return dict(sorted(out.items()))


def _segment_x(bundle, hidden) -> str | None:
    below = _below(bundle)
    for r in hidden:
        if r in below:
            return below[r]
    return next(iter(below.values()), None)


# --- commands ---------------------------------------------------------------------

def cmd_simulate(res, args) -> int:
    out = _out_dir(res, args)
    synth, _, _ = _configs(res)
    ds = generate(synth)
    write_synth(ds, out)
    summary = {
        "segments": len(ds.segments), "reservoirs": len(ds.reservoirs), "days": len(ds.dates),
        "truth_min": float(ds.truth.min()), "truth_max": float(ds.truth.max()),
        "truth_mean": float(ds.truth.mean()), "observations": int(ds.obs_mask.sum()),
        "simulation_bias": float((ds.simulation - ds.truth).mean()),
        "below_reservoir": dict(zip(ds.reservoirs, ds.below_reservoir)),
    }
    _json(out / "summary.json", summary)
    for k, v in summary.items():
        print(f"{k}: {v}")
    return 0


def _fit_and_save(res, args, fn) -> int:
    out = _out_dir(res, args)
    bundle = _bundle(res)
    try:
        model, tlog = fn(bundle)
    except DivergenceError as e:
        if e.last_good is not None:
            checkpoint.save(e.last_good, out / "last_good.ckpt")
        print(f"error: {e}", file=sys.stderr)
        return 3
    checkpoint.save(model, out / "model.ckpt", {"command": res["command"], "train": res["train"]})
    _write_log(out / "training_log.csv", tlog)
    if tlog.rows:
        last = tlog.rows[-1]
        print(f"epochs: {len(tlog.rows)}  final loss: {last[2]:.6g}  val rmse: {_num(last[4]) or 'n/a'}")
    print(f"checkpoint: {out / 'model.ckpt'}")
    return 0


def cmd_train(res, args) -> int:
    _, tc, _ = _configs(res)
    return _fit_and_save(res, args, lambda b: train(b, tc))


def cmd_pretrain(res, args) -> int:
    _, tc, _ = _configs(res)
    return _fit_and_save(res, args, lambda b: pretrain(b, tc))


def cmd_finetune(res, args) -> int:
    _, tc, _ = _configs(res)
    pre = _load_ckpt(res)
    tc = replace(tc, head=pre.head)
    return _fit_and_save(res, args, lambda b: finetune(pre, b, tc))


def _evaluate(res, model, method, period, fraction, seed, enkf):
    from .experiments import evaluate, sparse_labels
    full = load_bundle(res["run"]["data"], res["run"]["train_end"], res["run"]["hide_releases"])
    labels = sparse_labels(full, fraction, seed, "all") if fraction < 1 else full.obs
    seg_x = _segment_x(full, res["run"]["hide_releases"])
    metrics, pred = evaluate(model, full, method, period, labels, replace(enkf, seed=seed), seg_x, full.obs)
    return metrics, pred, full


def cmd_evaluate(res, args) -> int:
    out = _out_dir(res, args)
    run = res["run"]
    _, _, enkf = _configs(res)
    model = _load_ckpt(res)
    metrics, pred, full = _evaluate(res, model, run["method"], int(run["update_period"]),
                                    float(run["obs_fraction"]), int(run["seed"]), enkf)
    te = full.train_end
    report = {**metrics.as_dict(), "method": run["method"], "update_period": int(run["update_period"]),
              "test_start": full.dates[te], "test_end": full.dates[-1],
              "n_test_observations": int(full.obs_mask[te:].sum())}
    _json(out / "metrics.json", report)
    with open(out / "predictions.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["segment_id", "date", "y_hat", "y_obs"])
        for i, s in enumerate(full.segments):
            for t in range(te, full.n_days):
                w.writerow([s, full.dates[t], repr(float(pred[t, i])), _num(full.obs[t, i])])
    print(f"overall rmse: {metrics.overall:.4f}")
    if metrics.segment_x:
        print(f"segment {metrics.segment_x} rmse: {metrics.x:.4f}")
    return 0


def cmd_assimilate_eval(res, args) -> int:
    out = _out_dir(res, args)
    _, _, enkf = _configs(res)
    model = _load_ckpt(res)
    grid = res["grid"]
    rows = []
    for method in grid["methods"]:
        if method not in METHODS:
            raise UsageError(f"unknown method {method!r} in grid")
        if method == "invertible" and model.head != "coupling":
            log.warning("skipping invertible adjustment: checkpoint has the %s head", model.head)
            continue
        for k in grid["periods"]:
            for frac in grid["fractions"]:
                for seed in grid["seeds"]:
                    m, _, _ = _evaluate(res, model, method, int(k), float(frac), int(seed), enkf)
                    rows.append({"method": method, "update_period": int(k), "fraction": float(frac),
                                 "seed": int(seed), "overall_rmse": m.overall, "segment_x": m.segment_x,
                                 "segment_x_rmse": m.x if m.segment_x else None})
                    print(f"{method:10s} k={k:<3} fraction={frac:<6} seed={seed}  rmse {m.overall:.4f}")
    with open(out / "grid.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "update_period", "fraction", "seed", "overall_rmse", "segment_x", "segment_x_rmse"])
        for r in rows:
            w.writerow([r["method"], r["update_period"], repr(r["fraction"]), r["seed"], repr(r["overall_rmse"]),
                        r["segment_x"] or "", _num(r["segment_x_rmse"])])
    _json(out / "grid.json", rows)
    return 0


def cmd_gradcheck(res, args) -> int:
    from .gradcheck import gradient_check
    out = _out_dir(res, args)
    seeds = [args.seed] if args.seed is not None else res["grid"]["seeds"]
    head = res["train"]["head"]
    method = "invertible" if head == "coupling" else "none"
    results = []
    for s in seeds:
        r = gradient_check(int(s), method=method, head=head, lam=res["train"]["lam"])
        print(f"seed {s}: loss {r.loss:.6g}  max relative error {r.max_rel_error:.3e} ({r.worst_param})"
              f"  {'PASS' if r.passed else 'FAIL'}")
        results.append({"seed": r.seed, "method": r.method, "loss": r.loss, "max_rel_error": r.max_rel_error,
                        "worst_param": r.worst_param, "passed": r.passed, "per_param": r.per_param})
    _json(out / "gradcheck.json", results)
    return 0 if all(r["passed"] for r in results) else 1


COMMANDS = {
    "simulate": cmd_simulate, "pretrain": cmd_pretrain, "train": cmd_train, "finetune": cmd_finetune,
    "evaluate": cmd_evaluate, "assimilate-eval": cmd_assimilate_eval, "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hrgn", description="Stream temperature modeling on river-reservoir graphs.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="JSON config file")
        s.add_argument("--seed", type=int)
        s.add_argument("--out", help="output directory")
        s.add_argument("--data", help="dataset directory")
        s.add_argument("--checkpoint", help="model checkpoint file")
        s.add_argument("--hide-releases", dest="hide_releases", help="comma-separated reservoir ids")
        s.add_argument("--obs-fraction", dest="obs_fraction", type=float)
        s.add_argument("--method", choices=METHODS)
        s.add_argument("--update-period", dest="update_period", type=int)
        s.add_argument("--train-end", dest="train_end", help="first test day (index or ISO date)")
        s.add_argument("--epochs", type=int)
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.train_end is not None and args.train_end.isdigit():
        args.train_end = int(args.train_end)
    try:
        res = resolve(args)
        print(json.dumps(res, sort_keys=True))
        return COMMANDS[args.command](res, args)
    except (UsageError, LoadError, EmptyObservationError, checkpoint.CheckpointError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
