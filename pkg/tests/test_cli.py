import csv
import hashlib
import json
import math

import numpy as np
import pytest

from hrgn import checkpoint
from hrgn.cli import main
from hrgn.dataio import load_bundle
from hrgn.training import predict

SMALL = {"synth": {"n_segments": 4, "n_reservoirs": 1, "n_days": 730},
         "train": {"hidden": 6, "epochs": 2, "window": 120},
         "enkf": {"size": 4},
         "grid": {"methods": ["none", "invertible", "enkf"], "periods": [1, 3], "fractions": [0.5, 1.0],
                  "seeds": [0, 1]}}


def _digests(d):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(d.iterdir()) if p.is_file()}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "small.json"
    cfg.write_text(json.dumps(SMALL))
    coupled = root / "coupled.json"
    coupled.write_text(json.dumps({**SMALL, "train": {**SMALL["train"], "head": "coupling"}}))
    assert main(["simulate", "--config", str(cfg), "--out", str(root / "data"), "--seed", "3"]) == 0
    return root, cfg, coupled


def _run(root, name, argv):
    out = root / name
    assert main(argv + ["--out", str(out)]) == 0
    return out


def test_simulate_writes_all_files(workspace):
    root, _, _ = workspace
    names = set(_digests(root / "data"))
    assert {"edges.csv", "drivers.csv", "releases.csv", "reservoirs.csv", "observations.csv", "truth.csv",
            "simulation.csv", "resolved_config.json", "summary.json"} <= names


def test_every_subcommand_is_deterministic(workspace):
    root, cfg, coupled = workspace
    data = str(root / "data")
    c = ["--config", str(cfg)]
    cc = ["--config", str(coupled)]
    for tag in ("a", "b"):
        outs = [
            _run(root, f"sim_{tag}", ["simulate", *c, "--seed", "3"]),
            _run(root, f"pre_{tag}", ["pretrain", *c, "--data", data]),
            _run(root, f"tr_{tag}", ["train", *cc, "--data", data, "--hide-releases", "res0"]),
        ]
        outs.append(_run(root, f"ft_{tag}", ["finetune", *c, "--data", data,
                                            "--checkpoint", str(root / f"pre_{tag}" / "model.ckpt"),
                                            "--obs-fraction", "0.05"]))
        ck = str(root / f"tr_{tag}" / "model.ckpt")
        outs.append(_run(root, f"ev_{tag}", ["evaluate", *cc, "--data", data, "--checkpoint", ck, "--method", "enkf",
                                            "--hide-releases", "res0"]))
        outs.append(_run(root, f"ae_{tag}", ["assimilate-eval", *cc, "--data", data, "--checkpoint", ck]))
    for name in ("sim", "pre", "tr", "ft", "ev", "ae"):
        a, b = _digests(root / f"{name}_a"), _digests(root / f"{name}_b")
        # resolved configs differ only through the checkpoint path they name
        a.pop("resolved_config.json"), b.pop("resolved_config.json")
        assert a == b, name


def test_simulate_seed_changes_output(workspace):
    root, cfg, _ = workspace
    other = _run(root, "sim_other", ["simulate", "--config", str(cfg), "--seed", "4"])
    assert _digests(other)["truth.csv"] != _digests(root / "data")["truth.csv"]


def test_resolved_config_reruns_identically(workspace):
    root, cfg, _ = workspace
    first = _run(root, "r1", ["train", "--config", str(cfg), "--data", str(root / "data"), "--seed", "7"])
    again = _run(root, "r2", ["train", "--config", str(first / "resolved_config.json")])
    assert _digests(first) == _digests(again)
    resolved = json.loads((first / "resolved_config.json").read_text())
    assert resolved["train"]["seed"] == 7 and resolved["run"]["data"] == str(root / "data")


def test_zero_epoch_checkpoint_equals_initialization(workspace):
    root, cfg, _ = workspace
    out = _run(root, "zero", ["train", "--config", str(cfg), "--data", str(root / "data"), "--epochs", "0"])
    model, _ = checkpoint.load(out / "model.ckpt")
    from hrgn.training import TrainConfig, new_model
    b = load_bundle(root / "data")
    init = new_model(b, TrainConfig(**{**SMALL["train"], "epochs": 0}))
    assert all(np.array_equal(np.asarray(model.params[k]), np.asarray(init.params[k])) for k in init.params)
    assert (out / "training_log.csv").read_text() == "epoch,stage,loss,recon_loss,val_rmse\n"


def test_checkpoint_roundtrip_same_predictions(workspace):
    root, cfg, _ = workspace
    b = load_bundle(root / "data")
    model, _ = checkpoint.load(root / "tr_a" / "model.ckpt")
    blob = checkpoint.dumps(model)
    again, _ = checkpoint.loads(blob)
    np.testing.assert_array_equal(predict(model, b), predict(again, b))
    assert checkpoint.dumps(again) == blob


def test_metrics_match_predictions_csv(workspace):
    root, _, _ = workspace
    metrics = json.loads((root / "ev_a" / "metrics.json").read_text())
    with open(root / "ev_a" / "predictions.csv") as fh:
        rows = list(csv.DictReader(fh))
    sq, per = [], {}
    for r in rows:
        if r["y_obs"]:
            e = (float(r["y_hat"]) - float(r["y_obs"])) ** 2
            sq.append(e)
            per.setdefault(r["segment_id"], []).append(e)
    assert metrics["overall_rmse"] == pytest.approx(math.sqrt(sum(sq) / len(sq)), rel=1e-12)
    for s, v in per.items():
        assert metrics["per_segment_rmse"][s] == pytest.approx(math.sqrt(sum(v) / len(v)), rel=1e-12)
    assert metrics["segment_x"] == json.loads((root / "data" / "summary.json").read_text())["below_reservoir"]["res0"]


def test_grid_row_count_and_none_matches_evaluate(workspace):
    root, cfg, coupled = workspace
    grid = json.loads((root / "ae_a" / "grid.json").read_text())
    g = SMALL["grid"]
    assert len(grid) == len(g["methods"]) * len(g["periods"]) * len(g["fractions"]) * len(g["seeds"])
    ev = _run(root, "ev_none", ["evaluate", "--config", str(coupled), "--data", str(root / "data"),
                                "--checkpoint", str(root / "tr_a" / "model.ckpt"), "--hide-releases", "res0"])
    m = json.loads((ev / "metrics.json").read_text())
    row = next(r for r in grid if r["method"] == "none" and r["update_period"] == 1 and r["fraction"] == 1.0)
    assert row["overall_rmse"] == m["overall_rmse"]


def test_gradcheck_command(tmp_path, monkeypatch):
    import hrgn.gradcheck as gc

    class Fake:
        seed, method, loss, max_rel_error, worst_param, per_param, passed = 0, "none", 1.0, 1e-9, "read_b", {}, True

    monkeypatch.setattr(gc, "gradient_check", lambda *a, **k: Fake())
    assert main(["gradcheck", "--out", str(tmp_path / "g"), "--seed", "2"]) == 0
    assert json.loads((tmp_path / "g" / "gradcheck.json").read_text())[0]["passed"] is True


@pytest.mark.parametrize("argv, msg", [
    (["train", "--out", "{tmp}/x"], "--data is required"),
    (["evaluate", "--out", "{tmp}/x", "--data", "{tmp}"], "checkpoint"),
    (["train", "--out", "{tmp}/x", "--data", "{tmp}", "--obs-fraction", "0"], "obs-fraction"),
    (["train", "--out", "{tmp}/x", "--data", "{tmp}", "--update-period", "0"], "update-period"),
])
def test_usage_errors(tmp_path, capsys, argv, msg):
    assert main([a.format(tmp=tmp_path) for a in argv]) == 2
    assert msg in capsys.readouterr().err


def test_unknown_config_key(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"learning_rate": 1}}))
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "unknown keys" in capsys.readouterr().err


def test_unwritable_output(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["simulate", "--out", str(blocker / "sub")]) == 2
    assert "not writable" in capsys.readouterr().err
