"""One test per acceptance criterion, each reporting a single PASS/FAIL line."""
import json
import shutil
from dataclasses import replace
import time
from pathlib import Path

import numpy as np
import pytest

from kirchnet import cli, poisson
from kirchnet.block import CKBConfig, ckb_forward, init_ckb
from kirchnet.config import ExperimentConfig
from kirchnet.nn import ParamTree
from kirchnet.rollout import SequenceData, SequenceModel, one_step_error, rollout_eval
from kirchnet.verify import (erlang_error, gradient_errors, impulse_ratios, order_lifting_errors,
                             random_readout_spec, readout_gain_error, zoh_sweep)

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def test_01_zoh_exactness(acceptance):
    t0 = time.perf_counter()
    err, _ = zoh_sweep(1000, steps=20, substeps=32)
    wall = time.perf_counter() - t0
    acceptance(1, "zoh_exactness", err < 1e-8 and wall < 5,
               f"max |zoh - rk4(dt/32)| = {err:.3e} < 1e-08, {wall:.2f} s < 5 s")


def test_02_convex_decomposition(acceptance):
    _, err = zoh_sweep(1000, steps=20, substeps=1)
    acceptance(2, "convex_decomposition", err < 1e-14, f"max relative mismatch {err:.3e} < 1e-14")


def test_03_order_lifting(acceptance):
    mismatches, worst = order_lifting_errors(500)
    acceptance(3, "order_lifting", mismatches == 0 and worst < 1e-12,
               f"exact mismatches {mismatches} == 0, float rel err {worst:.3e} < 1e-12")


def test_04_erlang_kernel(acceptance):
    errs = {n: erlang_error(n) for n in (2, 3, 4)}
    ratios = {n: impulse_ratios(n) for n in (1, 2, 3, 4)}
    in_window = all(1.7 <= r <= 2.3 for n in (1, 3, 4) for r in ratios[n])
    # two identical stages cancel the leading dt term, so that case converges faster than first order
    n2_ok = min(ratios[2]) >= 1.7
    text = "; ".join(f"n={n}: " + ",".join(f"{r:.3f}" for r in ratios[n]) for n in ratios)
    acceptance(4, "erlang_kernel", max(errs.values()) < 1e-4 and in_window and n2_ok,
               f"max kernel rel err {max(errs.values()):.3e} < 1e-4; dt-halving ratios in [1.7, 2.3] "
               f"for n=1,3,4 and >= 1.7 for n=2 ({text})")


def test_05_readout_frequency(acceptance):
    rng = np.random.default_rng(5)
    worst = max(readout_gain_error(random_readout_spec(rng), w) for _ in range(5) for w in (0.5, 1.0, 2.0))
    acceptance(5, "readout_frequency", worst < 1e-3, f"max complex gain rel err {worst:.3e} < 1e-3")


def test_06_gradient_suite(acceptance):
    t0 = time.perf_counter()
    errs = gradient_errors(seed=0, B=2, L=16, d=8, E=2, S=4, N=2)
    wall = time.perf_counter() - t0
    worst = max(errs, key=errs.get)
    acceptance(6, "gradient_suite", errs[worst] < 1e-5 and wall < 120 and len(errs) == 7,
               f"worst {worst} {errs[worst]:.3e} < 1e-5 over {len(errs)} ops, {wall:.1f} s < 120 s")


def test_07_gate_zero_identity(acceptance):
    rng = np.random.default_rng(7)
    exact = []
    for use_mlp in (False, True):
        for shape in ((2, 16, 8), (2, 4, 4, 8)):
            cfg = CKBConfig(d=8, E=2, S=4, N=2, use_mlp=use_mlp, directions=4 if len(shape) == 4 else 1)
            p = init_ckb(cfg, rng)
            p["W_g.W"][:] = 0
            p["W_g.b"][:] = 0
            X = rng.normal(size=shape)
            exact.append(np.array_equal(ckb_forward(p, cfg, X)[0], X))
    acceptance(7, "gate_zero_identity", all(exact), f"{sum(exact)}/{len(exact)} cases bit-exact")


def test_08_poisson_oracle(acceptance):
    rng = np.random.default_rng(8)
    ratios = []
    for i in range(10):
        a = poisson.sample_coeffs(8, rng)
        res = [poisson.fd_laplacian_residual(poisson.eval_source(a, N), poisson.solve_poisson_spectral(a, N))
               for N in (32, 64)]
        ratios.append(res[0] / res[1])
    a1, a2 = rng.uniform(-1, 1, (2, 8, 8))
    s = 1.7
    lin = np.max(np.abs(poisson.solve_poisson_spectral(s * a1 + a2, 32) - s * poisson.solve_poisson_spectral(a1, 32)
                        - poisson.solve_poisson_spectral(a2, 32)))
    acceptance(8, "poisson_oracle", all(3.2 <= r <= 4.8 for r in ratios) and lin < 1e-12,
               f"residual ratios in [{min(ratios):.3f}, {max(ratios):.3f}] within [3.2, 4.8], "
               f"linearity {lin:.2e} < 1e-12")


def run_cli(*argv):
    code = cli.main([str(a) for a in argv])
    assert code == 0, f"kirchnet {' '.join(map(str, argv))} exited {code}"


@pytest.mark.slow
def test_09_desk_training(acceptance, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    cfg = ExperimentConfig.load(CONFIGS / "desk.json")
    assert cfg.dataset["N"] == 32 and cfg.dataset["K"] == 8
    assert cfg.dataset["counts"]["train"] == 128 and cfg.dataset["counts"]["val"] == 32
    assert cfg.model["width"] == 32 and cfg.model["layers"] == 2 and cfg.training["epochs"] == 150
    assert {k: cfg.model["block"][k] for k in ("S", "N", "directions")} == {"S": 8, "N": 2, "directions": 4}
    run_cli("gen-data", "--config", CONFIGS / "desk.json")
    t0 = time.perf_counter()
    run_cli("train", "--config", CONFIGS / "desk.json", "--threads", 1, "--out", "desk")
    wall = time.perf_counter() - t0
    run = json.loads((tmp_path / "desk" / "run.json").read_text())
    first, final = run["first_val_nrmse"], run["final_val_nrmse"]
    ok = final < 0.1 and final < 0.5 * first and wall < 900
    acceptance(9, "desk_training", ok, f"final val nrmse {final:.4f} < 0.1, < 0.5 x epoch-1 {first:.4f}, "
                                      f"{wall:.0f} s < 900 s on one thread")


def test_10_ablation_tables(acceptance, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    cfg = CONFIGS / "ablation-tiny.json"
    run_cli("gen-data", "--config", cfg)
    run_cli("ablate", "--config", cfg, "--axis", "depth", "--values", "1,2,3,4", "--out", "abl")
    run_cli("ablate", "--config", cfg, "--axis", "directions", "--values", "1,2,4", "--out", "abl")
    ok = True
    details = []
    for axis, values in (("depth", [1, 2, 3, 4]), ("directions", [1, 2, 4])):
        lines = [ln for ln in (tmp_path / "abl" / f"ablation_{axis}.csv").read_text().splitlines()
                 if not ln.startswith("#")]
        header = lines[0].split(",")
        rows = [dict(zip(header, ln.split(","))) for ln in lines[1:]]
        params = [int(r["params"]) for r in rows]
        complete = all(r[k] != "" for r in rows for k in header) and \
            all(np.isfinite(float(r[k])) for r in rows for k in ("rel_l1_pct", "nrmse", "max_err", "rmse"))
        ok &= [int(r["value"]) for r in rows] == values and complete and \
            all(b > a for a, b in zip(params, params[1:]))
        details.append(f"{axis} params {params}")
    acceptance(10, "ablation_tables", ok, "; ".join(details) + ", strictly increasing, all metrics finite")


def test_11_rollout(acceptance, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    cfg_path = CONFIGS / "rollout.json"
    run_cli("gen-data", "--config", cfg_path)
    run_cli("rollout", "--config", cfg_path, "--horizon", 40, "--out", "roll")
    run = json.loads((tmp_path / "roll" / "run.json").read_text())
    cfg = ExperimentConfig.load(cfg_path)
    params, _ = ParamTree.load(tmp_path / "roll" / "sequence_model.kinn")
    model = SequenceModel(cfg.model_config(), params)
    test = SequenceData.load(cfg.dataset_root() / "test")
    one = replace(cfg.rollout_config(), horizon=1)
    gap = abs(rollout_eval(model, test.v, test.u, one).mean - one_step_error(model, test.v, test.u, one))
    ok = run["steps"] == 40 and not run["truncated"] and run["mean_rel_l2"] < 0.1 and gap <= 1e-12
    acceptance(11, "rollout", ok, f"mean 40-step rel L2 {run['mean_rel_l2']:.4e} < 0.1, "
                                  f"|T=1 - one-step| {gap:.1e} <= 1e-12")


def test_12_determinism(acceptance, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    cfg = CONFIGS / "ablation-tiny.json"
    seq = CONFIGS / "rollout.json"
    files = {}
    for run in ("a", "b"):
        # each run regenerates data from scratch into the configured root
        shutil.rmtree(tmp_path / "data", ignore_errors=True)
        run_cli("gen-data", "--config", cfg)
        run_cli("gen-data", "--config", seq)
        run_cli("train", "--config", cfg, "--out", run)
        run_cli("rollout", "--config", seq, "--out", f"{run}-roll")
        files[run] = {str(p.relative_to(tmp_path / "data")): p.read_bytes()
                      for p in sorted((tmp_path / "data").rglob("*")) if p.is_file()}
        for name in ("metrics.csv", "checkpoint.kinn", "final.kinn"):
            files[run][name] = (tmp_path / run / name).read_bytes()
        for name in ("metrics.csv", "sequence_model.kinn", "rollout.csv"):
            files[run]["roll/" + name] = (tmp_path / f"{run}-roll" / name).read_bytes()
    same = [k for k in files["a"] if files["a"][k] == files["b"].get(k)]
    ok = len(same) == len(files["a"]) == len(files["b"])
    acceptance(12, "determinism", ok, f"{len(same)}/{len(files['a'])} dataset, log and checkpoint files "
                                      "byte-identical")
