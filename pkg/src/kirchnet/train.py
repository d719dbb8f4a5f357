"""Operator model, metrics, loss, Adam and the Poisson training loop."""
from __future__ import annotations

import csv
import io
import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .block import CKBConfig, ckb_backward, ckb_forward, init_ckb
from .poisson import Split

log = logging.getLogger(__name__)

# stream ids for np.random.SeedSequence(seed, spawn_key=(stream, ...))
STREAM_INIT = 10
STREAM_SHUFFLE = 11
STREAM_SEQUENCES = 12

CSV_HEADER = ["epoch", "split", "rmse", "nrmse", "max_err", "loss", "lr", "wall_s"]


def stream_rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


class TrainingDiverged(RuntimeError):
    pass


# -- metrics and loss ---------------------------------------------------------

@dataclass(frozen=True)
class Metrics:
    rmse: float
    nrmse: float
    max_err: float
    rel_l1: float = 0.0   # percent

    def as_dict(self) -> dict:
        return asdict(self)


def _per_sample(x: np.ndarray) -> np.ndarray:
    return x.reshape(x.shape[0], -1)


def compute_metrics(pred: np.ndarray, true: np.ndarray) -> Metrics:
    """Errors on physical (denormalized) fields; the leading axis indexes samples."""
    if pred.shape != true.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {true.shape}")
    p = _per_sample(np.asarray(pred, dtype=np.float64))
    t = _per_sample(np.asarray(true, dtype=np.float64))
    err = p - t
    tn2 = np.linalg.norm(t, axis=1)
    tn1 = np.abs(t).sum(axis=1)
    ok = tn2 > 0
    if not ok.all():
        warnings.warn(f"{int((~ok).sum())} zero-norm target sample(s) excluded from relative metrics")
    en2 = np.linalg.norm(err, axis=1)
    en1 = np.abs(err).sum(axis=1)
    nrmse = float(np.mean(en2[ok] / tn2[ok])) if ok.any() else 0.0
    rel_l1 = float(100.0 * np.mean(en1[ok] / tn1[ok])) if ok.any() else 0.0
    return Metrics(rmse=float(np.sqrt(np.mean(err * err))), nrmse=nrmse,
                   max_err=float(np.max(np.abs(err), initial=0.0)), rel_l1=rel_l1)


def relative_l2_loss(pred: np.ndarray, true: np.ndarray):
    """Mean over samples of ||pred - true|| / ||true||; returns ``(loss, grad_pred)``.

    Samples with a zero-norm target are skipped.
    """
    if pred.shape != true.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {true.shape}")
    p = _per_sample(pred)
    t = _per_sample(true)
    err = p - t
    tn = np.linalg.norm(t, axis=1)
    en = np.linalg.norm(err, axis=1)
    ok = tn > 0
    n = int(ok.sum())
    if n == 0:
        return 0.0, np.zeros_like(pred)
    loss = float(np.sum(en[ok] / tn[ok]) / n)
    scale = np.zeros_like(tn)
    nz = ok & (en > 0)
    scale[nz] = 1.0 / (en[nz] * tn[nz] * n)
    grad = (err * scale[:, None]).reshape(pred.shape)
    return loss, grad


# -- optimizer ----------------------------------------------------------------

@dataclass
class OptimState:
    m: nn.ParamTree
    v: nn.ParamTree
    step: int = 0
    rejected: int = 0

    @classmethod
    def zeros(cls, params: nn.ParamTree) -> "OptimState":
        return cls(params.zeros_like(), params.zeros_like())


def lr_at(epoch: int, lr0: float, halve_every: int) -> float:
    """Step schedule; ``epoch`` counts from 1."""
    return lr0 * 0.5 ** ((epoch - 1) // halve_every) if halve_every > 0 else lr0


def adam_step(params, grads, state: OptimState, lr: float, betas=(0.9, 0.999), eps: float = 1e-8) -> bool:
    """In-place Adam update with bias correction.

    A non-finite gradient rejects the whole step: nothing changes, the
    counter does not advance and a warning is emitted. Returns whether the
    step was applied.
    """
    for k in params:
        if not np.all(np.isfinite(grads[k])):
            state.rejected += 1
            warnings.warn(f"non-finite gradient in {k}; step rejected")
            return False
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for k, p in params.items():
        g = grads[k]
        m = state.m[k]
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)
    return True


# -- operator model -----------------------------------------------------------

@dataclass(frozen=True)
class ModelConfig:
    """Lift -> stack of CKB layers -> projection, acting on ``[B, H, W, in_ch]`` fields."""

    width: int = 32
    layers: int = 2
    in_ch: int = 1
    out_ch: int = 1
    coords: bool = True
    # Fourier positional channels sin/cos(pi k x), sin/cos(pi k y), k = 1..fourier
    fourier: int = 0
    patch: int = 1
    block: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.width < 1 or self.layers < 1 or self.patch < 1:
            raise ValueError("width, layers and patch must be positive")
        if self.fourier < 0:
            raise ValueError("fourier must be >= 0")
        self.block_config()

    def block_config(self) -> CKBConfig:
        return CKBConfig(d=self.width, **self.block)

    @property
    def position_channels(self) -> int:
        return (2 if self.coords else 0) + 4 * self.fourier

    @property
    def lift_in(self) -> int:
        return (self.in_ch + self.position_channels) * self.patch ** 2

    def to_dict(self) -> dict:
        return asdict(self)


def _patchify(x: np.ndarray, p: int) -> np.ndarray:
    if p == 1:
        return x
    B, H, W, C = x.shape
    if H % p or W % p:
        raise ValueError(f"field {H}x{W} is not divisible by patch {p}")
    return x.reshape(B, H // p, p, W // p, p, C).transpose(0, 1, 3, 2, 4, 5).reshape(B, H // p, W // p, p * p * C)


def _unpatchify(x: np.ndarray, p: int, C: int) -> np.ndarray:
    if p == 1:
        return x
    B, h, w, _ = x.shape
    return x.reshape(B, h, w, p, p, C).transpose(0, 1, 3, 2, 4, 5).reshape(B, h * p, w * p, C)


def position_channels(B: int, H: int, W: int, coords: bool, fourier: int, dtype) -> np.ndarray:
    """Grid coordinates in [0, 1] and optional Fourier features, ``[B, H, W, C]``."""
    gx, gy = np.meshgrid(np.linspace(0.0, 1.0, H), np.linspace(0.0, 1.0, W), indexing="ij")
    chans = [gx, gy] if coords else []
    for k in range(1, fourier + 1):
        for g in (gx, gy):
            chans += [np.sin(np.pi * k * g), np.cos(np.pi * k * g)]
    c = np.stack(chans, axis=-1).astype(dtype)
    return np.broadcast_to(c, (B, H, W, c.shape[-1]))


class OperatorModel:
    def __init__(self, cfg: ModelConfig, params: nn.ParamTree | None = None, seed: int = 0,
                 dtype=np.float64):
        self.cfg = cfg
        self.bcfg = cfg.block_config()
        self.params = params if params is not None else self.init(cfg, seed, dtype)

    @staticmethod
    def init(cfg: ModelConfig, seed: int, dtype=np.float64) -> nn.ParamTree:
        rng = stream_rng(seed, STREAM_INIT)
        bcfg = cfg.block_config()
        d, out = cfg.width, cfg.out_ch * cfg.patch ** 2
        p = nn.ParamTree()
        p["lift.W"] = nn.init_uniform(rng, cfg.lift_in, (cfg.lift_in, d), dtype)
        p["lift.b"] = np.zeros(d, dtype)
        for i in range(cfg.layers):
            p.add(f"block{i}", init_ckb(bcfg, rng, dtype))
        p["proj.W"] = nn.init_uniform(rng, d, (d, out), dtype)
        p["proj.b"] = np.zeros(out, dtype)
        return p

    @property
    def dtype(self):
        return self.params["lift.W"].dtype

    def _block_params(self, i):
        return nn.ParamTree(self.params.subtree(f"block{i}"))

    def forward(self, x: np.ndarray):
        """``x [B, H, W, in_ch]`` -> ``([B, H, W, out_ch], cache)``."""
        if x.ndim != 4 or x.shape[-1] != self.cfg.in_ch:
            raise ValueError(f"expected [B, H, W, {self.cfg.in_ch}] input, got {x.shape}")
        x = x.astype(self.dtype, copy=False)
        B, H, W, _ = x.shape
        if self.cfg.position_channels:
            pos = position_channels(B, H, W, self.cfg.coords, self.cfg.fourier, self.dtype)
            x = np.concatenate([x, pos], axis=-1)
        z, c_lift = nn.linear(_patchify(x, self.cfg.patch), self.params["lift.W"], self.params["lift.b"])
        blocks = []
        for i in range(self.cfg.layers):
            z, c = ckb_forward(self._block_params(i), self.bcfg, z)
            blocks.append(c)
        y, c_proj = nn.linear(z, self.params["proj.W"], self.params["proj.b"])
        y = _unpatchify(y, self.cfg.patch, self.cfg.out_ch)
        return y, (c_lift, blocks, c_proj)

    def backward(self, cache, gy: np.ndarray) -> nn.ParamTree:
        c_lift, blocks, c_proj = cache
        grads = {}
        gz, grads["proj.W"], grads["proj.b"] = nn.linear_backward(c_proj, _patchify(gy, self.cfg.patch))
        for i in range(self.cfg.layers - 1, -1, -1):
            bg, gz = ckb_backward(self._block_params(i), self.bcfg, blocks[i], gz)
            for k, v in bg.items():
                grads[f"block{i}.{k}"] = v
        _, grads["lift.W"], grads["lift.b"] = nn.linear_backward(c_lift, gz)
        return nn.ParamTree((k, grads[k]) for k in self.params)

    def predict(self, x: np.ndarray, batch: int = 32) -> np.ndarray:
        return np.concatenate([self.forward(x[i:i + batch])[0] for i in range(0, len(x), batch)])


# -- Poisson training ---------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 150
    batch: int = 16
    lr: float = 1e-3
    halve_every: int = 25
    precision: str = "f64"
    diverge_loss: float = 1e3

    def __post_init__(self):
        if self.epochs < 1 or self.batch < 1:
            raise ValueError("epochs and batch must be positive")
        if self.precision not in ("f64", "f32"):
            raise ValueError(f"precision must be f64 or f32, got {self.precision!r}")

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64

    def to_dict(self) -> dict:
        return asdict(self)


def _fmt(x: float) -> str:
    return repr(float(x))


class MetricLog:
    """Per-epoch CSV in memory; ``wall_s`` is 0 unless timing is requested."""

    def __init__(self, header_comment: str | None = None, timing: bool = False):
        self.rows: list[dict] = []
        self.comment = header_comment
        self.timing = timing

    def add(self, epoch: int, split: str, m: Metrics, loss: float, lr: float, wall: float) -> None:
        self.rows.append({"epoch": epoch, "split": split, "rmse": m.rmse, "nrmse": m.nrmse,
                          "max_err": m.max_err, "loss": loss, "lr": lr,
                          "wall_s": wall if self.timing else 0.0})

    def to_csv(self) -> str:
        buf = io.StringIO()
        if self.comment:
            buf.write(f"# {self.comment}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self.rows:
            w.writerow([r["epoch"], r["split"]] + [_fmt(r[k]) for k in CSV_HEADER[2:]])
        return buf.getvalue()

    def write(self, path) -> None:
        Path(path).write_text(self.to_csv())

    def series(self, split: str, key: str) -> list[float]:
        return [r[key] for r in self.rows if r["split"] == split]


def poisson_arrays(split: Split, dtype=np.float64):
    """Normalized input ``[n, N, N, 1]`` and normalized target ``[n, N, N, 1]``."""
    return (split.f_norm[..., None].astype(dtype), split.u_norm[..., None].astype(dtype))


def evaluate_split(model: OperatorModel, split: Split, batch: int = 32) -> tuple[Metrics, float]:
    """Metrics and mean relative L2 loss on denormalized predictions."""
    x, _ = poisson_arrays(split, model.dtype)
    pred = split.stats.denormalize_u(model.predict(x, batch)[..., 0].astype(np.float64))
    m = compute_metrics(pred, split.u)
    return m, m.nrmse


@dataclass
class TrainResult:
    model: OperatorModel
    log: MetricLog
    best_epoch: int
    best_val: float
    wall_s: float
    best_params: nn.ParamTree | None = None


def train_operator(model: OperatorModel, train: Split, val: Split, tcfg: TrainConfig, seed: int,
                   log_path=None, ckpt_path=None, ckpt_meta: dict | None = None,
                   comment: str | None = None, timing: bool = False) -> TrainResult:
    """Minibatch Adam on the relative L2 loss of denormalized solutions.

    Train metrics per epoch come from the minibatch predictions made during
    that epoch. The best-validation parameters are checkpointed.
    """
    params = model.params
    state = OptimState.zeros(params)
    x_tr, _ = poisson_arrays(train, model.dtype)
    scale = train.stats.max_u - train.stats.min_u
    n = len(train)
    metric_log = MetricLog(comment, timing)
    best_val, best_epoch, best_params = math.inf, 0, params.copy()
    t0 = time.perf_counter()
    for epoch in range(1, tcfg.epochs + 1):
        lr = lr_at(epoch, tcfg.lr, tcfg.halve_every)
        order = stream_rng(seed, STREAM_SHUFFLE, epoch).permutation(n)
        preds = np.empty((n,) + train.u.shape[1:])
        losses = []
        for start in range(0, n, tcfg.batch):
            idx = order[start:start + tcfg.batch]
            out, cache = model.forward(x_tr[idx])
            pred = train.stats.denormalize_u(out[..., 0].astype(np.float64))
            loss, g = relative_l2_loss(pred, train.u[idx])
            if not math.isfinite(loss) or loss > tcfg.diverge_loss:
                raise TrainingDiverged(f"loss {loss:.3e} at epoch {epoch}, batch starting {start}")
            preds[idx] = pred
            losses.append(loss * len(idx))
            gy = (g * scale)[..., None].astype(model.dtype)
            adam_step(params, model.backward(cache, gy), state, lr)
        wall = time.perf_counter() - t0
        metric_log.add(epoch, "train", compute_metrics(preds, train.u), sum(losses) / n, lr, wall)
        vm, vloss = evaluate_split(model, val)
        metric_log.add(epoch, "val", vm, vloss, lr, time.perf_counter() - t0)
        log.info("epoch %d lr %.2e train %.4e val nrmse %.4e", epoch, lr, sum(losses) / n, vm.nrmse)
        if vm.nrmse < best_val:
            best_val, best_epoch = vm.nrmse, epoch
            best_params = params.copy()
            if ckpt_path is not None:
                best_params.save(ckpt_path, {**(ckpt_meta or {}), "epoch": epoch, "val_nrmse": vm.nrmse})
        if log_path is not None:
            metric_log.write(log_path)
    return TrainResult(model, metric_log, best_epoch, best_val, time.perf_counter() - t0, best_params)
