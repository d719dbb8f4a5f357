"""Command-line entry point.

Exit codes: 0 success, 1 failed verification, 2 config error, 3 I/O error,
4 dataset hash mismatch, 5 training divergence.
"""
from __future__ import annotations

import argparse
import contextlib
import json
import logging
import subprocess
import sys
import time
from dataclasses import replace
from pathlib import Path


from . import __version__, poisson
from .ablation import AXES, run_ablation, write_ablation
from .config import ConfigError, ExperimentConfig
from .nn import ParamTree
from .poisson import SPLITS, DatasetError
from .rollout import (SequenceData, SequenceModel, make_sequence_dataset, one_step_error, rollout_eval,
                      train_sequence_model)
from .train import OperatorModel, TrainingDiverged, evaluate_split, train_operator
from .verify import run_checks

log = logging.getLogger("kirchnet")

GLOBAL_DEFAULTS = {"config": None, "seed": None, "out": None, "threads": None, "precision": None,
                   "timing": False, "verbose": False}

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_IO, EXIT_HASH, EXIT_DIVERGED = 0, 1, 2, 3, 4, 5


# -- helpers ------------------------------------------------------------------

def git_describe() -> str:
    try:
        r = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=Path(__file__).parent,
                           capture_output=True, text=True, timeout=10)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return r.stdout.strip() if r.returncode == 0 and r.stdout.strip() else "unknown"


def load_config(args) -> ExperimentConfig:
    if args.config is None:
        raise ConfigError("--config is required for this command")
    raw = json.loads(Path(args.config).read_text()) if Path(args.config).exists() else None
    if raw is None:
        raise FileNotFoundError(f"config file not found: {args.config}")
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.precision is not None:
        raw.setdefault("training", {})["precision"] = args.precision
    return ExperimentConfig.from_dict(raw)


def provenance(cfg: ExperimentConfig) -> str:
    return f"config_sha256={cfg.sha256()} seed={cfg.seed}"


def write_run_json(out: Path, command: str, cfg: ExperimentConfig | None, wall: float, extra: dict) -> None:
    info = {"command": command, "version": __version__, "git": git_describe(), "wall_s": wall}
    if cfg is not None:
        info.update(config_sha256=cfg.sha256(), seed=cfg.seed, config=cfg.to_dict())
    info.update(extra)
    (out / "run.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")


def _out(args, cfg: ExperimentConfig) -> Path:
    out = cfg.out_dir(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def load_poisson(cfg: ExperimentConfig, splits=SPLITS) -> dict:
    """Load splits after checking they were generated from this config."""
    root = cfg.dataset_root()
    expected = cfg.poisson_config().sha256()
    out = {}
    for s in splits:
        meta_path = root / s / "meta.json"
        if not meta_path.exists():
            raise FileNotFoundError(f"{meta_path} missing; run gen-data first")
        if json.loads(meta_path.read_text()).get("config_sha256") != expected:
            raise DatasetError(f"dataset at {root / s} was generated from a different config")
        out[s] = poisson.load_split(root, s)
    return out


def load_sequences(cfg: ExperimentConfig) -> dict:
    root = cfg.dataset_root()
    out = {}
    for s in ("train", "test"):
        if not (root / s / "meta.json").exists():
            raise FileNotFoundError(f"{root / s / 'meta.json'} missing; run gen-data first")
        data = SequenceData.load(root / s)
        if data.meta.get("config_sha256") != cfg.dataset_sha256():
            raise DatasetError(f"dataset at {root / s} was generated from a different config")
        out[s] = data
    return out


def _sequence_current(cfg: ExperimentConfig) -> bool:
    try:
        load_sequences(cfg)
    except (OSError, ValueError, KeyError):
        return False
    return True


def _fmt_table(rows: list[list[str]]) -> str:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows)


# -- commands -----------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = load_config(args)
    root = cfg.dataset_root()
    if cfg.kind == "poisson":
        summary = poisson.generate_dataset(cfg.poisson_config(), root, force=args.force)
        if summary["written"]:
            print(f"wrote Poisson dataset to {root}")
        else:
            print(f"{root}: up-to-date, hashes match")
        print("counts: " + ", ".join(f"{s}={n}" for s, n in summary["counts"].items()))
        print("norm: " + ", ".join(f"{k}={v:.6g}" for k, v in sorted(summary["norm"].items())))
        print(f"hash: {summary['hash']}")
        return EXIT_OK
    if not args.force and _sequence_current(cfg):
        print(f"{root}: up-to-date, hashes match")
        return EXIT_OK
    spec = cfg.cascade_spec()
    st = cfg.cascade_settings()
    counts = {"train": st["train_count"], "test": st["test_count"]}
    for split, count in counts.items():
        data = make_sequence_dataset(spec, cfg.dataset["dt"], st["steps"], count, cfg.seed, split,
                                     st["inputs"], st["init"], st["burn_in"])
        data.meta["config_sha256"] = cfg.dataset_sha256()
        data.save(root / split)
    print(f"wrote cascade sequences to {root}")
    print("counts: " + ", ".join(f"{s}={n}" for s, n in counts.items()))
    return EXIT_OK


def cmd_verify(args) -> int:
    t0 = time.perf_counter()
    results = run_checks(args.level, args.filter)
    rows = [["check", "group", "value", "threshold", "status"]]
    for r in results:
        rows.append([r.name, r.group, f"{r.value:.3e}", f"{r.relation} {r.threshold:g}", "PASS" if r.passed else "FAIL"])
    print(_fmt_table(rows))
    failed = [r.name for r in results if not r.passed]
    wall = time.perf_counter() - t0
    print(f"{len(results) - len(failed)}/{len(results)} passed in {wall:.1f} s")
    if failed:
        print("failed: " + ", ".join(failed))
    report = {"level": args.level, "filter": args.filter, "passed": not failed, "wall_s": wall,
              "checks": [r.as_dict() for r in results]}
    if args.json:
        Path(args.json).write_text(json.dumps(report, indent=2) + "\n")
    if not results:
        print(f"no checks match filter {args.filter!r}")
        return EXIT_VERIFY
    return EXIT_VERIFY if failed else EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args)
    if cfg.kind != "poisson":
        raise ConfigError("train needs a poisson dataset; use rollout for cascade sequences")
    data = load_poisson(cfg, ("train", "val"))
    out = _out(args, cfg)
    tcfg = cfg.train_config()
    model = OperatorModel(cfg.model_config(), seed=cfg.seed, dtype=tcfg.dtype)
    meta = {"config_sha256": cfg.sha256(), "seed": cfg.seed}
    t0 = time.perf_counter()
    res = train_operator(model, data["train"], data["val"], tcfg, cfg.seed, log_path=out / "metrics.csv",
                         ckpt_path=out / "checkpoint.kinn", ckpt_meta=meta, comment=provenance(cfg),
                         timing=args.timing)
    model.params.save(out / "final.kinn", {**meta, "epoch": tcfg.epochs})
    wall = time.perf_counter() - t0
    val = res.log.series("val", "nrmse")
    write_run_json(out, "train", cfg, wall, {"best_epoch": res.best_epoch, "best_val_nrmse": res.best_val,
                                             "final_val_nrmse": val[-1], "first_val_nrmse": val[0],
                                             "params": model.params.count()})
    print(f"trained {tcfg.epochs} epochs in {wall:.1f} s; val nrmse first {val[0]:.4e} final {val[-1]:.4e} "
          f"best {res.best_val:.4e} (epoch {res.best_epoch})")
    print(f"wrote {out / 'metrics.csv'}, {out / 'checkpoint.kinn'}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = load_config(args)
    if cfg.kind != "poisson":
        raise ConfigError("evaluate needs a poisson dataset")
    out = _out(args, cfg)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "checkpoint.kinn"
    params, meta = ParamTree.load(ckpt)
    if meta.get("config_sha256") not in (None, cfg.sha256()):
        log.warning("checkpoint was trained with config %s, evaluating under %s",
                    meta["config_sha256"][:12], cfg.sha256()[:12])
    splits = SPLITS[1:] if args.split == "all" else (args.split,)
    data = load_poisson(cfg, splits)
    model = OperatorModel(cfg.model_config(), params=params)
    rows = [["split", "rmse", "nrmse", "max_err", "rel_l1_pct"]]
    for s in splits:
        m, _ = evaluate_split(model, data[s])
        rows.append([s] + [repr(float(x)) for x in (m.rmse, m.nrmse, m.max_err, m.rel_l1)])
    text = f"# {provenance(cfg)} checkpoint_epoch={meta.get('epoch')}\n" + "\n".join(",".join(r) for r in rows) + "\n"
    (out / "eval.csv").write_text(text)
    print(_fmt_table(rows))
    return EXIT_OK


def cmd_rollout(args) -> int:
    cfg = load_config(args)
    if cfg.kind != "cascade":
        raise ConfigError("rollout needs a cascade dataset")
    data = load_sequences(cfg)
    rcfg = cfg.rollout_config()
    if args.horizon is not None or args.context is not None:
        rcfg = replace(rcfg, **{k: v for k, v in (("horizon", args.horizon), ("context", args.context))
                                if v is not None})
    out = _out(args, cfg)
    tcfg = cfg.train_config()
    model = SequenceModel(cfg.model_config(), seed=cfg.seed, dtype=tcfg.dtype)
    t0 = time.perf_counter()
    tlog = train_sequence_model(model, data["train"], rcfg.context, tcfg.epochs, tcfg.batch, tcfg.lr, cfg.seed,
                                tcfg.halve_every, comment=provenance(cfg))
    tlog.write(out / "metrics.csv")
    meta = {"config_sha256": cfg.sha256(), "seed": cfg.seed}
    model.params.save(out / "sequence_model.kinn", meta)
    test = data["test"]
    res = rollout_eval(model, test.v, test.u, rcfg)
    one = one_step_error(model, test.v, test.u, rcfg)
    lines = [f"# {provenance(cfg)} context={rcfg.context} horizon={rcfg.horizon} start={rcfg.start}",
             "step,rel_l2"] + [f"{j + 1},{float(e)!r}" for j, e in enumerate(res.per_step)]
    (out / "rollout.csv").write_text("\n".join(lines) + "\n")
    wall = time.perf_counter() - t0
    write_run_json(out, "rollout", cfg, wall, {"mean_rel_l2": res.mean, "one_step_rel_l2": one,
                                               "truncated": res.truncated, "steps": len(res.per_step)})
    print(f"{len(res.per_step)}-step rollout mean relative L2 {res.mean:.4e} (one-step {one:.4e})"
          + (" [truncated: non-finite prediction]" if res.truncated else ""))
    print(f"wrote {out / 'rollout.csv'}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = load_config(args)
    if cfg.kind != "poisson":
        raise ConfigError("ablate needs a poisson dataset")
    try:
        values = [int(v) for v in args.values.split(",") if v.strip()]
    except ValueError as e:
        raise ConfigError(f"--values must be comma-separated integers: {args.values!r}") from e
    if not values:
        raise ConfigError("--values is empty")
    data = load_poisson(cfg, ("train", "val", "test_id"))
    out = _out(args, cfg)
    t0 = time.perf_counter()
    rows, walls = run_ablation(args.axis, values, cfg.model_config(), cfg.train_config(), data["train"],
                               data["val"], data["test_id"], cfg.seed)
    path = out / f"ablation_{args.axis}.csv"
    write_ablation(path, rows, f"{provenance(cfg)} split=test_id")
    write_run_json(out, f"ablate {args.axis}", cfg, time.perf_counter() - t0,
                   {"axis": args.axis, "values": values, "wall_s_per_variant": walls})
    print(_fmt_table([["variant", "params", "rel_l1_pct", "nrmse", "max_err"]] +
                     [[r["variant"], str(r["params"]), f"{r['rel_l1_pct']:.3f}", f"{r['nrmse']:.4e}",
                       f"{r['max_err']:.4e}"] for r in rows]))
    print(f"wrote {path}")
    return EXIT_OK


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    # global flags are accepted before or after the subcommand; SUPPRESS keeps
    # the subparser from resetting a value given before it
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="experiment JSON file")
    common.add_argument("--seed", type=int, help="override the config seed (unsigned 64-bit)")
    common.add_argument("--out", help="output directory (default: config 'out' or ./runs)")
    common.add_argument("--threads", type=int, help="limit BLAS/OpenMP threads")
    common.add_argument("--precision", choices=["f64", "f32"], help="override training precision")
    common.add_argument("--timing", action="store_true", help="record wall_s in metric CSVs")
    common.add_argument("-v", "--verbose", action="store_true", help="log every epoch")

    p = argparse.ArgumentParser(prog="kirchnet", description=__doc__.splitlines()[0], parents=[common],
                                epilog="exit codes: 0 ok, 1 verify failed, 2 config error, 3 I/O error, "
                                       "4 dataset hash mismatch, 5 training diverged")
    p.add_argument("--version", action="version", version=f"kirchnet {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="generate the dataset named in the config")
    g.add_argument("--force", action="store_true", help="regenerate even if up to date")
    g.set_defaults(fn=cmd_gen_data)

    v = sub.add_parser("verify", parents=[common], help="run the analytic and gradient oracle checks")
    v.add_argument("--level", choices=["quick", "full"], default="quick")
    v.add_argument("--filter", help="only checks whose name or group contains this string")
    v.add_argument("--json", help="write a machine-readable report here")
    v.set_defaults(fn=cmd_verify)

    t = sub.add_parser("train", parents=[common], help="train the Poisson operator model")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("evaluate", parents=[common], help="evaluate a checkpoint")
    e.add_argument("--checkpoint", help="default: <out>/checkpoint.kinn")
    e.add_argument("--split", choices=list(SPLITS) + ["all"], default="all")
    e.set_defaults(fn=cmd_evaluate)

    r = sub.add_parser("rollout", parents=[common], help="train a one-step model and score its rollout")
    r.add_argument("--horizon", type=int, help="rollout length T")
    r.add_argument("--context", type=int, help="context window k")
    r.set_defaults(fn=cmd_rollout)

    a = sub.add_parser("ablate", parents=[common], help="cascade-depth or scan-direction ablation")
    a.add_argument("--axis", choices=sorted(AXES), required=True)
    a.add_argument("--values", required=True, help="comma-separated, e.g. 1,2,3,4")
    a.set_defaults(fn=cmd_ablate)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    for name, default in GLOBAL_DEFAULTS.items():
        if not hasattr(args, name):
            setattr(args, name, default)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.seed is not None and not 0 <= args.seed < 2 ** 64:
        print(f"error: --seed must be an unsigned 64-bit integer, got {args.seed}", file=sys.stderr)
        return EXIT_CONFIG
    limits = contextlib.nullcontext()
    if args.threads is not None:
        from threadpoolctl import threadpool_limits
        limits = threadpool_limits(limits=args.threads)
    try:
        with limits:
            return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DatasetError as e:
        print(f"dataset hash mismatch: {e}", file=sys.stderr)
        return EXIT_HASH
    except TrainingDiverged as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except json.JSONDecodeError as e:
        print(f"config error: invalid JSON ({e})", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
