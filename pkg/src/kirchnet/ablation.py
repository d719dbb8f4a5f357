"""Cascade-depth and scan-direction ablations on the Poisson operator task."""
from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .poisson import Split
from .train import ModelConfig, OperatorModel, TrainConfig, evaluate_split, train_operator

log = logging.getLogger(__name__)

AXES = {"depth": "N", "directions": "directions"}
ABLATION_HEADER = ["variant", "axis", "value", "params", "rel_l1_pct", "nrmse", "max_err", "rmse",
                   "best_epoch", "val_nrmse"]


def variant_name(axis: str, value: int) -> str:
    return f"{value}-pass" if axis == "depth" else f"{value}-dir"


def with_axis(cfg: ModelConfig, axis: str, value: int) -> ModelConfig:
    if axis not in AXES:
        raise ValueError(f"axis must be one of {sorted(AXES)}, got {axis!r}")
    return replace(cfg, block={**cfg.block, AXES[axis]: int(value)})


def run_ablation(axis: str, values, model_cfg: ModelConfig, tcfg: TrainConfig, train: Split, val: Split,
                 test: Split, seed: int) -> tuple[list[dict], list[float]]:
    """Train one model per value with the same seed; only the ablated field changes.

    Rows report test metrics of the best-validation parameters. Wall times are
    returned separately so the table stays deterministic.
    """
    rows, walls = [], []
    for v in values:
        cfg = with_axis(model_cfg, axis, v)
        model = OperatorModel(cfg, seed=seed, dtype=tcfg.dtype)
        t0 = time.perf_counter()
        res = train_operator(model, train, val, tcfg, seed)
        walls.append(time.perf_counter() - t0)
        model.params = res.best_params
        m, _ = evaluate_split(model, test)
        rows.append({"variant": variant_name(axis, v), "axis": axis, "value": int(v),
                     "params": model.params.count(), "rel_l1_pct": m.rel_l1, "nrmse": m.nrmse,
                     "max_err": m.max_err, "rmse": m.rmse, "best_epoch": res.best_epoch,
                     "val_nrmse": res.best_val})
        log.info("%s: params %d test nrmse %.4e (%.1f s)", rows[-1]["variant"], rows[-1]["params"],
                 m.nrmse, walls[-1])
    return rows, walls


def run_depth_ablation(model_cfg, tcfg, train, val, test, seed, depths=(1, 2, 3, 4)):
    return run_ablation("depth", depths, model_cfg, tcfg, train, val, test, seed)


def run_direction_ablation(model_cfg, tcfg, train, val, test, seed, directions=(1, 2, 4)):
    return run_ablation("directions", directions, model_cfg, tcfg, train, val, test, seed)


def ablation_csv(rows: list[dict], comment: str | None = None) -> str:
    buf = io.StringIO()
    if comment:
        buf.write(f"# {comment}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ABLATION_HEADER)
    for r in rows:
        w.writerow([r[k] if isinstance(r[k], (str, int, np.integer)) else repr(float(r[k]))
                    for k in ABLATION_HEADER])
    return buf.getvalue()


def write_ablation(path, rows: list[dict], comment: str | None = None) -> None:
    Path(path).write_text(ablation_csv(rows, comment))
