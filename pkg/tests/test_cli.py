import csv
import json

import numpy as np
import pytest

from kirchnet import cli, nn

TINY = {
    "seed": 0,
    "out": "runs/tiny",
    "dataset": {"kind": "poisson", "root": "data/tiny", "K": 3, "K_ood": 4, "N": 8,
                "counts": {"train": 8, "val": 4, "test_id": 4, "test_ood": 4}},
    "model": {"width": 4, "layers": 1, "patch": 2, "block": {"E": 1, "S": 2, "N": 2, "directions": 2}},
    "training": {"epochs": 2, "batch": 4, "lr": 0.003, "halve_every": 0, "precision": "f64"},
}

CASCADE = {
    "seed": 0,
    "out": "runs/seq",
    "dataset": {"kind": "cascade", "root": "data/seq", "dt": 0.5, "steps": 60, "train_count": 4,
                "test_count": 3, "burn_in": 5,
                "cells": [{"C": 1.0, "g_leak": 1.0, "b_p": 1.0}, {"C": 1.0, "g_leak": 0.5, "b_p": 0.5}]},
    "model": {"width": 4, "layers": 1, "block": {"E": 1, "S": 2, "N": 1}},
    "training": {"epochs": 1, "batch": 64, "lr": 0.003, "halve_every": 0, "precision": "f64"},
    "rollout": {"context": 5, "horizon": 40},
}


def write_config(path, cfg):
    path.write_text(json.dumps(cfg))
    return str(path)


@pytest.fixture
def work(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


def read_rows(path):
    lines = [ln for ln in path.read_text().splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def test_verify_passes(capsys):
    assert cli.main(["verify"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and "passed" in out


def test_verify_filter_and_json(work, capsys):
    assert cli.main(["verify", "--filter", "erlang", "--json", "report.json"]) == 0
    report = json.loads((work / "report.json").read_text())
    assert report["checks"] and all(c["group"] == "erlang" for c in report["checks"])
    assert cli.main(["verify", "--filter", "no-such-check"]) == 1


def test_verify_catches_injected_gradient_bug(monkeypatch, capsys):
    real = nn.linear_backward

    def broken(cache, gy):
        gx, gW, gb = real(cache, gy)
        return gx, gW * 1.01, gb

    monkeypatch.setattr(nn, "linear_backward", broken)
    assert cli.main(["verify", "--filter", "grad_linear"]) == 1
    out = capsys.readouterr().out
    assert "failed: grad_linear" in out


def test_global_flags_after_subcommand(capsys):
    assert cli.main(["verify", "--filter", "convex", "--threads", "1", "-v"]) == 0


def test_config_errors(work, capsys):
    bad = dict(TINY, dataset={**TINY["dataset"], "bogus": 1})
    assert cli.main(["gen-data", "--config", write_config(work / "bad.json", bad)]) == 2
    assert "dataset.bogus" in capsys.readouterr().err
    (work / "broken.json").write_text("{not json")
    assert cli.main(["--config", "broken.json", "gen-data"]) == 2
    assert cli.main(["gen-data"]) == 2
    assert cli.main(["gen-data", "--config", "missing.json"]) == 3
    assert cli.main(["gen-data", "--config", write_config(work / "t.json", TINY), "--seed", "-1"]) == 2


def test_train_evaluate_roundtrip(work, capsys):
    cfg = write_config(work / "tiny.json", TINY)
    assert cli.main(["gen-data", "--config", cfg]) == 0
    assert cli.main(["gen-data", "--config", cfg]) == 0
    assert "up-to-date, hashes match" in capsys.readouterr().out
    assert cli.main(["--config", cfg, "train"]) == 0
    out = work / "runs" / "tiny"
    run = json.loads((out / "run.json").read_text())
    assert run["seed"] == 0 and len(run["config_sha256"]) == 64
    first = (out / "metrics.csv").read_text().splitlines()[0]
    assert first == f"# config_sha256={run['config_sha256']} seed=0"
    assert cli.main(["evaluate", "--config", cfg, "--split", "val"]) == 0
    (val,) = read_rows(out / "eval.csv")
    assert abs(float(val["nrmse"]) - run["best_val_nrmse"]) < 1e-12


def test_training_outputs_are_byte_identical(work):
    cfg = write_config(work / "tiny.json", TINY)
    assert cli.main(["gen-data", "--config", cfg]) == 0
    for name in ("a", "b"):
        assert cli.main(["train", "--config", cfg, "--out", name]) == 0
    for f in ("metrics.csv", "checkpoint.kinn", "final.kinn"):
        assert (work / "a" / f).read_bytes() == (work / "b" / f).read_bytes()


def test_dataset_mismatch_exit_code(work):
    cfg = write_config(work / "tiny.json", TINY)
    assert cli.main(["gen-data", "--config", cfg]) == 0
    assert cli.main(["train", "--config", cfg, "--seed", "5"]) == 4
    p = work / "data" / "tiny" / "val" / "f.bin"
    raw = bytearray(p.read_bytes())
    raw[10] ^= 0xFF
    p.write_bytes(bytes(raw))
    assert cli.main(["train", "--config", cfg]) == 4


def test_missing_dataset_is_io_error(work):
    assert cli.main(["train", "--config", write_config(work / "tiny.json", TINY)]) == 3


def test_divergence_exit_code(work):
    cfg = dict(TINY, training={**TINY["training"], "diverge_loss": 1e-9})
    path = write_config(work / "div.json", cfg)
    assert cli.main(["gen-data", "--config", path]) == 0
    assert cli.main(["train", "--config", path]) == 5


def test_ablate_depth(work):
    cfg = write_config(work / "tiny.json", TINY)
    assert cli.main(["gen-data", "--config", cfg]) == 0
    assert cli.main(["ablate", "--config", cfg, "--axis", "depth", "--values", "1,2,3,4"]) == 0
    rows = read_rows(work / "runs" / "tiny" / "ablation_depth.csv")
    assert [r["variant"] for r in rows] == ["1-pass", "2-pass", "3-pass", "4-pass"]
    params = [int(r["params"]) for r in rows]
    assert all(b > a for a, b in zip(params, params[1:]))
    assert cli.main(["ablate", "--config", cfg, "--axis", "depth", "--values", "x"]) == 2


def test_rollout_command(work):
    cfg = write_config(work / "seq.json", CASCADE)
    assert cli.main(["gen-data", "--config", cfg]) == 0
    assert cli.main(["rollout", "--config", cfg]) == 0
    rows = read_rows(work / "runs" / "seq" / "rollout.csv")
    assert [int(r["step"]) for r in rows] == list(range(1, 41))
    assert all(np.isfinite(float(r["rel_l2"])) for r in rows)
    run = json.loads((work / "runs" / "seq" / "run.json").read_text())
    assert run["steps"] == 40 and not run["truncated"]
    assert cli.main(["rollout", "--config", cfg, "--seed", "3"]) == 4
    assert cli.main(["train", "--config", cfg]) == 2
